"""Absorbing shift and scale vectors into neighbouring modules.

After re-parameterisation the only per-timestep work left is picking the
bias row of the current temporal group; every multiplier is static.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .numerics import as_channel_vector, as_tensor2d
from .quantizer import PerChannelParams, QuantParams
from .smoothing import GroupShift, compensated_bias, rescale_weight
from .temporal_clustering import TemporalPlan, group_of


@dataclass(frozen=True)
class AdaLNParams:
    gamma: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        g = as_channel_vector(self.gamma, name="gamma")
        as_channel_vector(self.beta, g.shape[0], "beta")


@dataclass(frozen=True)
class ReparamAdaLN:
    """``LayerNorm(Z) * gain + betas[g]``; ``gain`` is ``(1 + gamma) / s``."""

    gain: np.ndarray
    betas: np.ndarray  # (G, C)
    plan: TemporalPlan


@dataclass(frozen=True)
class SmoothedLinear:
    weight: np.ndarray  # (C_in, C_out), rows already multiplied by the scale
    biases: np.ndarray  # (G, C_out)
    plan: TemporalPlan
    weight_qparams: PerChannelParams | None = None
    act_qparams: QuantParams | None = None


@dataclass(frozen=True)
class DequantAffine:
    """``x_hat = acc * scale - offsets[g]`` applied to an integer accumulator."""

    scale: np.ndarray
    offsets: np.ndarray  # (G, C)
    plan: TemporalPlan


def _group_matrix(group_shifts: Sequence[GroupShift], plan: TemporalPlan, channels: int) -> np.ndarray:
    if len(group_shifts) != plan.num_groups:
        raise ValueError(f"plan has {plan.num_groups} groups, got {len(group_shifts)} group shifts")
    ordered = sorted(group_shifts, key=lambda gs: gs.group_index)
    if [gs.group_index for gs in ordered] != list(range(1, plan.num_groups + 1)):
        raise ValueError("group shifts must be indexed 1..G")
    return np.stack([as_channel_vector(gs.values, channels, "group shift") for gs in ordered])


def reparam_adaln(a: AdaLNParams, s_bar, group_shifts: Sequence[GroupShift], plan: TemporalPlan) -> ReparamAdaLN:
    gamma = as_channel_vector(a.gamma, name="gamma")
    beta = as_channel_vector(a.beta, gamma.shape[0], "beta")
    s = as_channel_vector(s_bar, gamma.shape[0], "scale")
    z = _group_matrix(group_shifts, plan, gamma.shape[0])
    return ReparamAdaLN(gain=(1.0 + gamma) / s, betas=(beta - z) / s, plan=plan)


def reparam_linear(w, b, s_bar, group_shifts: Sequence[GroupShift], plan: TemporalPlan) -> SmoothedLinear:
    w = as_tensor2d(w, "w")
    z = _group_matrix(group_shifts, plan, w.shape[0])
    biases = np.stack([compensated_bias(w, b, zg) for zg in z])
    return SmoothedLinear(weight=rescale_weight(w, s_bar), biases=biases, plan=plan)


def fold_into_dequant(
    s_bar,
    group_shifts: Sequence[GroupShift],
    plan: TemporalPlan,
    delta: float = 1.0,
    zero_offset: int = 0,
) -> DequantAffine:
    """Fuse ``((q - zero_offset) * delta - z_g) / s`` into one scale and per-group offsets.

    ``delta=1, zero_offset=0`` folds into a float (non-quantized) input.
    """
    s = as_channel_vector(s_bar, name="scale")
    z = _group_matrix(group_shifts, plan, s.shape[0])
    return DequantAffine(scale=delta / s, offsets=(zero_offset * delta + z) / s, plan=plan)


def select_bias(layer, t: int, plan: TemporalPlan | None = None) -> np.ndarray:
    """The bias row of the temporal group that timestep ``t`` falls in."""
    plan = plan or layer.plan
    g = group_of(t, plan)
    if isinstance(layer, SmoothedLinear):
        table = layer.biases
    elif isinstance(layer, ReparamAdaLN):
        table = layer.betas
    elif isinstance(layer, DequantAffine):
        table = layer.offsets
    else:
        raise TypeError(f"{type(layer).__name__} carries no per-group bias")
    return table[g - 1]
