"""A desk-scale DiT-style block, its calibration, and simulated low-bit inference.

Block layout (row-vector convention, ``y = x @ W + b``)::

    x1 = LN(z) * (1 + gamma1) + beta1          -> attn.qkv   (HTG)
    q, k, v = split(x1 @ Wqkv + bqkv)          -> attn.q / attn.k / attn.v
    A = softmax(q k^T / sqrt(d))               -> attn.softmax
    o = A v                                    -> attn.o_proj (HTG, folded into the AV dequant)
    z1 = z + o @ Wo + bo
    x2 = LN(z1) * (1 + gamma2) + beta2         -> mlp.fc1    (HTG)
    h = gelu(x2 @ W1 + b1)                     -> mlp.fc2
    out = z1 + h @ W2 + b2

An optional modulation linear maps a sinusoidal timestep embedding to
additive per-timestep deltas of ``gamma1, beta1, gamma2, beta2``.

Forward functions accept ``z`` of shape ``(*batch, tokens, hidden)`` and a
timestep ``t`` that is an int or an integer array broadcastable to
``batch``; e.g. ``z`` of shape ``(T, S, tokens, hidden)`` with ``t`` of
shape ``(T, 1)`` evaluates every timestep at once.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from .numerics import as_channel_vector
from .quantizer import (
    ErrorReport,
    QuantParams,
    dequantize_per_channel,
    error_metrics,
    fit_params,
    fit_weight_per_channel,
    params_from_range,
    quantize,
    quantize_per_channel,
)
from .reparam import (
    AdaLNParams,
    DequantAffine,
    ReparamAdaLN,
    SmoothedLinear,
    fold_into_dequant,
    reparam_adaln,
    reparam_linear,
)
from .smoothing import (
    DEFAULT_ALPHA,
    EmaState,
    GroupShift,
    derive_scale,
    ema_step,
    group_mean_shift,
    shift_from_range,
    step_channel_max,
    ShiftVector,
)
from .temporal_clustering import (
    TemporalPlan,
    auto_groups,
    cluster_timesteps,
    single_group_plan,
)
from .trace_io import CalibrationTrace, summarize

LN_EPS = 1e-6

TAP_MOD = "adaln.modulation"
TAP_QKV = "attn.qkv"
TAP_Q = "attn.q"
TAP_K = "attn.k"
TAP_V = "attn.v"
TAP_SOFTMAX = "attn.softmax"
TAP_OPROJ = "attn.o_proj"
TAP_FC1 = "mlp.fc1"
TAP_FC2 = "mlp.fc2"
BLOCK_INPUT = "block.input"
BLOCK_OUTPUT = "block.output"

HTG_LAYERS = (TAP_QKV, TAP_OPROJ, TAP_FC1)
ATTN_TAPS = (TAP_Q, TAP_K, TAP_V, TAP_SOFTMAX)
# layer outputs compared between the float and the quantized path
COMPARE_TAPS = (TAP_QKV, TAP_OPROJ, TAP_FC1, TAP_FC2, BLOCK_OUTPUT)


@dataclass(frozen=True)
class Linear:
    weight: np.ndarray  # (C_in, C_out)
    bias: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weight, dtype=np.float64)
        if w.ndim != 2:
            raise ValueError(f"weight must be 2-D, got shape {w.shape}")
        as_channel_vector(self.bias, w.shape[1], "bias")


@dataclass(frozen=True)
class DiTBlock:
    hidden: int
    heads: int
    adaln1: AdaLNParams
    adaln2: AdaLNParams
    qkv: Linear
    o_proj: Linear
    fc1: Linear
    fc2: Linear
    modulation: Linear | None = None

    def __post_init__(self):
        H = self.hidden
        if H % self.heads:
            raise ValueError(f"hidden={H} not divisible by heads={self.heads}")
        expect = {
            "qkv": (H, 3 * H),
            "o_proj": (H, H),
            "fc1": (H, self.fc1.weight.shape[1]),
            "fc2": (self.fc1.weight.shape[1], H),
        }
        for name, shape in expect.items():
            got = getattr(self, name).weight.shape
            if got != shape:
                raise ValueError(f"{name} weight has shape {got}, expected {shape}")
        for a in (self.adaln1, self.adaln2):
            if a.gamma.shape != (H,):
                raise ValueError("AdaLN parameters must match the hidden size")
        if self.modulation is not None and self.modulation.weight.shape[1] != 4 * H:
            raise ValueError("modulation must produce 4 * hidden outputs")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    @property
    def mlp_hidden(self) -> int:
        return self.fc1.weight.shape[1]

    @property
    def cond_dim(self) -> int:
        return 0 if self.modulation is None else self.modulation.weight.shape[0]

    def required_taps(self) -> tuple[str, ...]:
        taps = HTG_LAYERS + ATTN_TAPS + (TAP_FC2,)
        return taps + ((TAP_MOD,) if self.modulation is not None else ())


def _f32(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float32).astype(np.float64)


def init_block(
    hidden: int = 64,
    heads: int = 4,
    mlp_ratio: int = 4,
    cond_dim: int = 32,
    seed: int = 0,
    affine_std: float = 0.1,
) -> DiTBlock:
    """Random block whose parameters are exactly representable in float32."""
    rng = np.random.default_rng(seed)

    def linear(c_in, c_out, gain=1.0):
        w = rng.normal(0.0, gain / math.sqrt(c_in), size=(c_in, c_out))
        b = rng.normal(0.0, 0.02, size=c_out)
        return Linear(_f32(w), _f32(b))

    def adaln():
        return AdaLNParams(_f32(rng.normal(0.0, affine_std, hidden)), _f32(rng.normal(0.0, affine_std, hidden)))

    return DiTBlock(
        hidden=hidden,
        heads=heads,
        adaln1=adaln(),
        adaln2=adaln(),
        qkv=linear(hidden, 3 * hidden),
        o_proj=linear(hidden, hidden),
        fc1=linear(hidden, mlp_ratio * hidden),
        fc2=linear(mlp_ratio * hidden, hidden),
        modulation=linear(cond_dim, 4 * hidden, gain=affine_std) if cond_dim else None,
    )


# --------------------------------------------------------------------------
# shared pieces


def layer_norm(z: np.ndarray) -> np.ndarray:
    mu = z.mean(axis=-1, keepdims=True)
    d = z - mu
    var = (d * d).mean(axis=-1, keepdims=True)
    return d / np.sqrt(var + LN_EPS)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * x * (1.0 + 0.044715 * x * x)))


def softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def timestep_condition(t, dim: int) -> np.ndarray:
    """SiLU of the sinusoidal embedding of ``t``; shape ``t.shape + (dim,)``."""
    t = np.asarray(t, dtype=np.float64)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = t[..., None] * freqs
    emb = np.concatenate([np.cos(args), np.sin(args)], axis=-1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros(t.shape + (1,))], axis=-1)
    return emb / (1.0 + np.exp(-emb))


def _check_input(z, hidden: int) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim < 2 or z.shape[-1] != hidden:
        raise ValueError(f"expected input of shape (..., tokens, {hidden}), got {z.shape}")
    if not np.all(np.isfinite(z)):
        raise ValueError("input contains non-finite values")
    return z


def _timesteps(t, num_timesteps: int | None = None) -> np.ndarray:
    t = np.asarray(t)
    if not np.issubdtype(t.dtype, np.integer):
        raise TypeError("timesteps must be integers")
    if t.size and t.min() < 1:
        raise ValueError("timesteps start at 1")
    if num_timesteps is not None and t.size and t.max() > num_timesteps:
        raise ValueError(f"timestep {int(t.max())} beyond the calibrated T={num_timesteps}")
    return t


def _per_t(v: np.ndarray) -> np.ndarray:
    """Insert the token axis so a ``t.shape + (C,)`` vector broadcasts over tokens."""
    return v[..., None, :]


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    *lead, n, c = x.shape
    return x.reshape(*lead, n, heads, c // heads).swapaxes(-2, -3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    x = x.swapaxes(-2, -3)
    *lead, n, h, d = x.shape
    return x.reshape(*lead, n, h * d)


def _modulation_float(block: DiTBlock, t: np.ndarray):
    H = block.hidden
    zeros = np.zeros(t.shape + (H,))
    if block.modulation is None:
        return None, (zeros, zeros, zeros, zeros)
    c = timestep_condition(t, block.cond_dim)
    m = c @ block.modulation.weight + block.modulation.bias
    return c, tuple(m[..., i * H : (i + 1) * H] for i in range(4))


def forward_float(block: DiTBlock, z, t, inputs: dict | None = None, outputs: dict | None = None) -> np.ndarray:
    """Reference float forward; optionally records layer inputs and outputs."""
    z = _check_input(z, block.hidden)
    t = _timesteps(t)
    c, (dg1, db1, dg2, db2) = _modulation_float(block, t)
    rec_in = inputs if inputs is not None else {}
    rec_out = outputs if outputs is not None else {}
    if c is not None:
        rec_in[TAP_MOD] = c

    x1 = layer_norm(z) * _per_t(1.0 + block.adaln1.gamma + dg1) + _per_t(block.adaln1.beta + db1)
    rec_in[TAP_QKV] = x1
    qkv = x1 @ block.qkv.weight + block.qkv.bias
    rec_out[TAP_QKV] = qkv
    H = block.hidden
    q, k, v = qkv[..., :H], qkv[..., H : 2 * H], qkv[..., 2 * H :]
    rec_in[TAP_Q], rec_in[TAP_K], rec_in[TAP_V] = q, k, v
    qh, kh, vh = (_split_heads(a, block.heads) for a in (q, k, v))
    attn = softmax((qh @ kh.swapaxes(-1, -2)) / math.sqrt(block.head_dim))
    rec_in[TAP_SOFTMAX] = attn
    o = _merge_heads(attn @ vh)
    rec_in[TAP_OPROJ] = o
    o_out = o @ block.o_proj.weight + block.o_proj.bias
    rec_out[TAP_OPROJ] = o_out
    z1 = z + o_out

    x2 = layer_norm(z1) * _per_t(1.0 + block.adaln2.gamma + dg2) + _per_t(block.adaln2.beta + db2)
    rec_in[TAP_FC1] = x2
    pre = x2 @ block.fc1.weight + block.fc1.bias
    rec_out[TAP_FC1] = pre
    h = gelu(pre)
    rec_in[TAP_FC2] = h
    mlp = h @ block.fc2.weight + block.fc2.bias
    rec_out[TAP_FC2] = mlp
    out = z1 + mlp
    rec_out[BLOCK_OUTPUT] = out
    return out


# --------------------------------------------------------------------------
# calibration traces from the float block


def capture_trace(
    block: DiTBlock,
    block_input: CalibrationTrace,
    tokens: int,
    summary_only: bool = False,
    chunk: int = 10,
) -> dict[str, CalibrationTrace]:
    """Run the float block on every timestep of ``block_input`` and record its taps.

    Timesteps are pushed through in batches of ``chunk``.
    """
    if block_input.kind != "full":
        raise ValueError("capturing taps needs full block-input records")
    rows = block_input.data.shape[1]
    if rows % tokens:
        raise ValueError(f"{rows} rows are not a whole number of {tokens}-token samples")
    records: dict[str, list[np.ndarray]] = {name: [] for name in block.required_taps()}
    T = block_input.num_timesteps
    for lo in range(0, T, chunk):
        hi = min(T, lo + chunk)
        z = block_input.data[lo:hi].astype(np.float64).reshape(hi - lo, rows // tokens, tokens, block.hidden)
        taps: dict = {}
        forward_float(block, z, np.arange(lo + 1, hi + 1).reshape(-1, 1), inputs=taps)
        for name in records:
            x = taps[name]
            records[name].append(x.reshape(hi - lo, -1, x.shape[-1]).astype(np.float32))
    out = {BLOCK_INPUT: block_input}
    for name, recs in records.items():
        tr = CalibrationTrace(name, "full", np.concatenate(recs))
        out[name] = summarize(tr) if summary_only else tr
    if summary_only:
        out[BLOCK_INPUT] = summarize(block_input)
    return out


# --------------------------------------------------------------------------
# quantized block


@dataclass(frozen=True)
class BlockConfig:
    """Calibration settings. ``None`` bit widths leave that side in float."""

    weight_bits: int | None = 8
    act_bits: int | None = 8
    groups: int | str = "auto"
    alpha: float = DEFAULT_ALPHA
    linkage: str = "ward"
    clip_quantile: float = 1.0
    shift: bool = True
    scale: bool = True

    def __post_init__(self):
        for name in ("weight_bits", "act_bits"):
            bits = getattr(self, name)
            if bits is not None and not 2 <= bits <= 16:
                raise ValueError(f"{name} must be in [2, 16] or None")
        if self.groups != "auto" and (not isinstance(self.groups, int) or self.groups < 1):
            raise ValueError("groups must be a positive int or 'auto'")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must be in (0, 1)")
        if not 0.5 < self.clip_quantile <= 1.0:
            raise ValueError("clip_quantile must be in (0.5, 1]")

    def resolve_groups(self, num_timesteps: int) -> int:
        if not self.shift:
            return 1
        g = auto_groups(num_timesteps) if self.groups == "auto" else self.groups
        if g > num_timesteps:
            raise ValueError(f"G={g} exceeds T={num_timesteps}")
        return g

    def to_dict(self) -> dict:
        return {
            "weight_bits": self.weight_bits,
            "act_bits": self.act_bits,
            "groups": self.groups,
            "alpha": self.alpha,
            "linkage": self.linkage,
            "clip_quantile": self.clip_quantile,
            "shift": self.shift,
            "scale": self.scale,
        }


@dataclass(frozen=True)
class LayerTransform:
    """Shift/scale state of one HTG layer."""

    scale: np.ndarray
    group_shifts: tuple[GroupShift, ...]


@dataclass(frozen=True)
class QuantizedDiTBlock:
    hidden: int
    heads: int
    plan: TemporalPlan
    adaln1: ReparamAdaLN
    adaln2: ReparamAdaLN
    qkv: SmoothedLinear
    o_dequant: DequantAffine
    o_proj: SmoothedLinear
    fc1: SmoothedLinear
    fc2: SmoothedLinear
    modulation: SmoothedLinear | None = None
    attn_qparams: Mapping[str, QuantParams] = field(default_factory=dict)
    transforms: Mapping[str, LayerTransform] = field(default_factory=dict)
    config: BlockConfig | None = None

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    def htg_layers(self) -> dict[str, SmoothedLinear]:
        return {TAP_QKV: self.qkv, TAP_OPROJ: self.o_proj, TAP_FC1: self.fc1}

    def linears(self) -> dict[str, SmoothedLinear]:
        out = {TAP_QKV: self.qkv, TAP_OPROJ: self.o_proj, TAP_FC1: self.fc1, TAP_FC2: self.fc2}
        if self.modulation is not None:
            out[TAP_MOD] = self.modulation
        return out


def _group_shift_tuple(z: np.ndarray) -> tuple[GroupShift, ...]:
    return tuple(GroupShift(g + 1, row) for g, row in enumerate(z))


def identity_transforms(block: DiTBlock) -> dict[str, LayerTransform]:
    zero = _group_shift_tuple(np.zeros((1, block.hidden)))
    return {name: LayerTransform(np.ones(block.hidden), zero) for name in HTG_LAYERS}


def _plain_layer(lin: Linear, num_timesteps: int) -> SmoothedLinear:
    return SmoothedLinear(
        weight=np.asarray(lin.weight, dtype=np.float64),
        biases=np.asarray(lin.bias, dtype=np.float64)[None, :],
        plan=single_group_plan(num_timesteps),
    )


def _with_weight_quant(layer: SmoothedLinear, bits: int | None, act: QuantParams | None) -> SmoothedLinear:
    wq = fit_weight_per_channel(layer.weight, bits) if bits is not None else None
    return replace(layer, weight_qparams=wq, act_qparams=act)


def assemble_block(
    block: DiTBlock,
    plan: TemporalPlan,
    transforms: Mapping[str, LayerTransform],
    weight_bits: int | None = None,
    act_params: Mapping[str, QuantParams] | None = None,
    config: BlockConfig | None = None,
) -> QuantizedDiTBlock:
    """Re-parameterise ``block`` with per-layer shift/scale and attach quantizers.

    ``act_params`` maps tap names to static per-tensor activation parameters;
    taps absent from it stay in float. With no quantizers at all the result
    is the float HTG-transformed block.
    """
    act_params = dict(act_params or {})
    T = plan.num_timesteps
    tq, to, tf = (transforms[name] for name in HTG_LAYERS)
    for name, tr in transforms.items():
        if len(tr.group_shifts) != plan.num_groups:
            raise ValueError(f"{name}: {len(tr.group_shifts)} group shifts for a {plan.num_groups}-group plan")

    attn = {name: act_params[name] for name in ATTN_TAPS if name in act_params}
    if attn and len(attn) != len(ATTN_TAPS):
        raise ValueError(f"attention quantizers must be given for all of {ATTN_TAPS}")
    if attn:
        # integer accumulator of (A - lambda_A)(V - lambda_V) dequantizes with delta_A * delta_V
        av_delta = attn[TAP_SOFTMAX].delta * attn[TAP_V].delta
    else:
        av_delta = 1.0

    modulation = None
    if block.modulation is not None:
        # the AdaLN deltas feed the same multiplier/offset that absorbs 1/s
        col_scale = np.concatenate([tq.scale, tq.scale, tf.scale, tf.scale])
        mod = Linear(block.modulation.weight / col_scale, block.modulation.bias / col_scale)
        modulation = _with_weight_quant(_plain_layer(mod, T), weight_bits, act_params.get(TAP_MOD))

    return QuantizedDiTBlock(
        hidden=block.hidden,
        heads=block.heads,
        plan=plan,
        adaln1=reparam_adaln(block.adaln1, tq.scale, tq.group_shifts, plan),
        adaln2=reparam_adaln(block.adaln2, tf.scale, tf.group_shifts, plan),
        qkv=_with_weight_quant(
            reparam_linear(block.qkv.weight, block.qkv.bias, tq.scale, tq.group_shifts, plan),
            weight_bits,
            act_params.get(TAP_QKV),
        ),
        o_dequant=fold_into_dequant(to.scale, to.group_shifts, plan, delta=av_delta),
        o_proj=_with_weight_quant(
            reparam_linear(block.o_proj.weight, block.o_proj.bias, to.scale, to.group_shifts, plan),
            weight_bits,
            act_params.get(TAP_OPROJ),
        ),
        fc1=_with_weight_quant(
            reparam_linear(block.fc1.weight, block.fc1.bias, tf.scale, tf.group_shifts, plan),
            weight_bits,
            act_params.get(TAP_FC1),
        ),
        fc2=_with_weight_quant(_plain_layer(block.fc2, T), weight_bits, act_params.get(TAP_FC2)),
        modulation=modulation,
        attn_qparams=attn,
        transforms=dict(transforms),
        config=config,
    )


class IncompleteTraceError(ValueError):
    def __init__(self, missing: list[tuple[str, int | str]]):
        self.missing = missing
        shown = ", ".join(f"({layer}, {t})" for layer, t in missing[:20])
        more = f" and {len(missing) - 20} more" if len(missing) > 20 else ""
        super().__init__(f"trace is missing (layer, t): {shown}{more}")


def _check_trace(block: DiTBlock, trace: Mapping[str, CalibrationTrace], num_timesteps: int | None) -> int:
    needed = block.required_taps()
    present = [trace[n].num_timesteps for n in needed if n in trace]
    T = num_timesteps or (max(present) if present else 0)
    if T < 1:
        raise IncompleteTraceError([(n, "all") for n in needed])
    missing: list[tuple[str, int | str]] = []
    for name in needed:
        if name not in trace:
            missing.append((name, "all"))
            continue
        have = trace[name].num_timesteps
        missing.extend((name, t) for t in range(have + 1, T + 1))
    if missing:
        raise IncompleteTraceError(missing)
    return T


def _pooled_range_params(summaries, bits: int, transform=None) -> QuantParams:
    lo, hi = math.inf, -math.inf
    for t, s in enumerate(summaries, start=1):
        a, b = s.col_min, s.col_max
        if transform is not None:
            a, b = transform(a, t), transform(b, t)
        lo, hi = min(lo, float(a.min())), max(hi, float(b.max()))
    return params_from_range(lo, hi, bits)


def _pooled_quantile_params(trace: CalibrationTrace, bits: int, q: float, transform=None) -> QuantParams:
    if trace.kind != "full":
        raise ValueError(f"{trace.layer_id}: clip_quantile < 1 needs full activation records")
    pooled = []
    for t in range(1, trace.num_timesteps + 1):
        x = trace.record(t)
        pooled.append((transform(x, t) if transform is not None else x).reshape(-1))
    return fit_params(np.concatenate(pooled)[:, None], bits, q)


def calibrate_block(
    block: DiTBlock,
    trace: Mapping[str, CalibrationTrace],
    cfg: BlockConfig = BlockConfig(),
) -> QuantizedDiTBlock:
    """Shift, group, scale, re-parameterise and quantize ``block`` from ``trace``.

    Only the per-channel extrema of each tap enter the shift, grouping,
    scaling and activation-range steps, so full and summary traces of the
    same activations give identical results.
    """
    T = _check_trace(block, trace, None)
    summaries = {name: [trace[name].summary(t) for t in range(1, T + 1)] for name in block.required_taps()}
    weights = {TAP_QKV: block.qkv.weight, TAP_OPROJ: block.o_proj.weight, TAP_FC1: block.fc1.weight}

    # step shifts z_t per HTG layer (index t - 1)
    step_shifts = {}
    for name in HTG_LAYERS:
        if cfg.shift:
            step_shifts[name] = [shift_from_range(s.col_min, s.col_max) for s in summaries[name]]
        else:
            step_shifts[name] = [np.zeros(block.hidden) for _ in range(T)]

    G = cfg.resolve_groups(T)
    if G == 1:
        plan = single_group_plan(T, cfg.linkage)
    else:
        # one plan for the whole block, clustered on the concatenated layer shifts
        joint = [
            ShiftVector(t, np.concatenate([step_shifts[n][t - 1] for n in HTG_LAYERS])) for t in range(1, T + 1)
        ]
        plan = cluster_timesteps(joint, G, cfg.linkage)

    transforms = {}
    for name in HTG_LAYERS:
        shifts = [ShiftVector(t, step_shifts[name][t - 1]) for t in range(1, T + 1)]
        group_shifts = tuple(group_mean_shift(shifts, plan))
        if cfg.scale:
            state = EmaState(cfg.alpha)
            for t in range(T, 0, -1):
                s = summaries[name][t - 1]
                state = ema_step(state, step_channel_max(s.col_min, s.col_max, step_shifts[name][t - 1] if cfg.shift else None))
            scale = derive_scale(state.values, weights[name])
        else:
            scale = np.ones(block.hidden)
        transforms[name] = LayerTransform(scale, group_shifts)

    act_params: dict[str, QuantParams] = {}
    if cfg.act_bits is not None:
        labels = plan.labels()
        for name in block.required_taps():
            transform = None
            if name in HTG_LAYERS:
                tr = transforms[name]
                z = np.stack([gs.values for gs in tr.group_shifts])
                transform = _group_transform(z, tr.scale, labels)

            if cfg.clip_quantile < 1.0:
                act_params[name] = _pooled_quantile_params(trace[name], cfg.act_bits, cfg.clip_quantile, transform)
            else:
                act_params[name] = _pooled_range_params(summaries[name], cfg.act_bits, transform)

    return assemble_block(block, plan, transforms, cfg.weight_bits, act_params, cfg)


def _group_transform(z: np.ndarray, scale: np.ndarray, labels: np.ndarray):
    def transform(x, t):
        return (x - z[labels[t - 1] - 1]) / scale

    return transform


# --------------------------------------------------------------------------
# simulated integer inference


def _centered_codes(x: np.ndarray, p: QuantParams) -> np.ndarray:
    return (quantize(x, p) - p.zero_offset).astype(np.float64)


def _int_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # operands hold integers and every partial sum stays far below 2**53,
    # so the float64 product is the exact integer accumulation
    return a @ b


def _linear_q(x: np.ndarray, layer: SmoothedLinear, bias: np.ndarray) -> np.ndarray:
    ap, wp = layer.act_qparams, layer.weight_qparams
    if ap is not None and wp is not None:
        wq = (quantize_per_channel(layer.weight, wp) - wp.zero_offsets).astype(np.float64)
        acc = _int_matmul(_centered_codes(x, ap), wq)
        return acc * (ap.delta * wp.deltas) + bias
    if ap is not None:
        x = _centered_codes(x, ap) * ap.delta
    w = layer.weight
    if wp is not None:
        w = dequantize_per_channel(quantize_per_channel(w, wp), wp)
    return x @ w + bias


def forward_quant_sim(
    qblock: QuantizedDiTBlock, z, t, inputs: dict | None = None, outputs: dict | None = None
) -> np.ndarray:
    """Forward pass of the re-parameterised block with simulated quantization.

    Every tap with activation parameters is quantized per tensor, weights
    per output channel, and products run on integer codes. The group bias of
    timestep ``t`` is picked by lookup.
    """
    z = _check_input(z, qblock.hidden)
    t = _timesteps(t, qblock.plan.num_timesteps)
    g = qblock.plan.labels()[t - 1] - 1
    H = qblock.hidden
    rec_in = inputs if inputs is not None else {}
    rec_out = outputs if outputs is not None else {}

    if qblock.modulation is not None:
        cond_dim = qblock.modulation.weight.shape[0]
        c = timestep_condition(t, cond_dim)
        rec_in[TAP_MOD] = c
        m = _linear_q(c, qblock.modulation, qblock.modulation.biases[0])
        dg1, db1, dg2, db2 = (m[..., i * H : (i + 1) * H] for i in range(4))
    else:
        dg1 = db1 = dg2 = db2 = np.zeros(t.shape + (H,))

    x1 = layer_norm(z) * _per_t(qblock.adaln1.gain + dg1) + _per_t(qblock.adaln1.betas[g] + db1)
    rec_in[TAP_QKV] = x1
    qkv = _linear_q(x1, qblock.qkv, _per_t(qblock.qkv.biases[g]))
    rec_out[TAP_QKV] = qkv
    q, k, v = qkv[..., :H], qkv[..., H : 2 * H], qkv[..., 2 * H :]
    ap = qblock.attn_qparams
    sqrt_d = math.sqrt(qblock.head_dim)
    if ap:
        qh = _split_heads(_centered_codes(q, ap[TAP_Q]), qblock.heads)
        kh = _split_heads(_centered_codes(k, ap[TAP_K]), qblock.heads)
        scores = _int_matmul(qh, kh.swapaxes(-1, -2)) * (ap[TAP_Q].delta * ap[TAP_K].delta)
        attn = softmax(scores / sqrt_d)
        vh = _split_heads(_centered_codes(v, ap[TAP_V]), qblock.heads)
        acc = _merge_heads(_int_matmul(_centered_codes(attn, ap[TAP_SOFTMAX]), vh))
    else:
        qh, kh, vh = (_split_heads(a, qblock.heads) for a in (q, k, v))
        attn = softmax((qh @ kh.swapaxes(-1, -2)) / sqrt_d)
        acc = _merge_heads(attn @ vh)
    x_o = acc * qblock.o_dequant.scale - _per_t(qblock.o_dequant.offsets[g])
    rec_in[TAP_OPROJ] = x_o
    o_out = _linear_q(x_o, qblock.o_proj, _per_t(qblock.o_proj.biases[g]))
    rec_out[TAP_OPROJ] = o_out
    z1 = z + o_out

    x2 = layer_norm(z1) * _per_t(qblock.adaln2.gain + dg2) + _per_t(qblock.adaln2.betas[g] + db2)
    rec_in[TAP_FC1] = x2
    pre = _linear_q(x2, qblock.fc1, _per_t(qblock.fc1.biases[g]))
    rec_out[TAP_FC1] = pre
    h = gelu(pre)
    rec_in[TAP_FC2] = h
    mlp = _linear_q(h, qblock.fc2, qblock.fc2.biases[0])
    rec_out[TAP_FC2] = mlp
    out = z1 + mlp
    rec_out[BLOCK_OUTPUT] = out
    return out


# --------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True)
class PathComparison:
    rows: tuple[tuple[str, int, ErrorReport], ...]
    per_layer: Mapping[str, ErrorReport]
    end_to_end: ErrorReport


def _pooled_report(ref: np.ndarray, approx: np.ndarray) -> ErrorReport:
    return error_metrics(ref, approx)


def _chunks(inputs: np.ndarray, chunk: int):
    T = inputs.shape[0]
    for lo in range(0, T, chunk):
        hi = min(T, lo + chunk)
        z = inputs[lo:hi]
        yield z, np.arange(lo + 1, hi + 1).reshape((hi - lo,) + (1,) * (z.ndim - 3))


def reference_outputs(block: DiTBlock, inputs, chunk: int = 25) -> dict[str, np.ndarray]:
    """Float outputs of the compared taps, shaped ``(T, *batch, tokens, C)``."""
    inputs = np.asarray(inputs, dtype=np.float64)
    ref = {name: [] for name in COMPARE_TAPS}
    for z, t in _chunks(inputs, chunk):
        fo: dict = {}
        forward_float(block, z, t, outputs=fo)
        for name in COMPARE_TAPS:
            ref[name].append(fo[name])
    return {name: np.concatenate(v) for name, v in ref.items()}


def compare_paths(
    block: DiTBlock,
    qblock: QuantizedDiTBlock,
    inputs,
    chunk: int = 25,
    reference: Mapping[str, np.ndarray] | None = None,
) -> PathComparison:
    """Float vs quantized layer outputs at every timestep.

    ``inputs`` has shape ``(T, *batch, tokens, hidden)``; slice ``t - 1``
    is evaluated at timestep ``t``. Per-layer and end-to-end reports pool
    all timesteps. ``reference`` (from :func:`reference_outputs`) skips the
    float forward when several quantized blocks share one input set.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    T = inputs.shape[0]
    if T != qblock.plan.num_timesteps:
        raise ValueError(f"inputs cover {T} timesteps, block was calibrated for {qblock.plan.num_timesteps}")
    if reference is None:
        reference = reference_outputs(block, inputs, chunk)
    q_out = {name: [] for name in COMPARE_TAPS}
    for z, t in _chunks(inputs, chunk):
        qo: dict = {}
        forward_quant_sim(qblock, z, t, outputs=qo)
        for name in COMPARE_TAPS:
            q_out[name].append(qo[name])
    rows = []
    per_layer = {}
    for name in COMPARE_TAPS:
        ref = reference[name]
        approx = np.concatenate(q_out[name])
        if ref.shape != approx.shape:
            raise ValueError(f"reference for {name} has shape {ref.shape}, expected {approx.shape}")
        per_layer[name] = _pooled_report(ref, approx)
        for t in range(1, T + 1):
            rows.append((name, t, error_metrics(ref[t - 1], approx[t - 1])))
    return PathComparison(tuple(rows), per_layer, per_layer[BLOCK_OUTPUT])


def storage_overhead(qblock: QuantizedDiTBlock) -> int:
    """Extra bytes (float32) of the per-group tables compared with a single group."""
    tables = [qblock.qkv.biases, qblock.o_proj.biases, qblock.fc1.biases]
    tables += [qblock.adaln1.betas, qblock.adaln2.betas, qblock.o_dequant.offsets]
    return sum((tab.shape[0] - 1) * tab.shape[1] * 4 for tab in tables)
