"""On-disk formats for float blocks and quantized bundles.

Both are directories with a ``manifest.json``. A model stores every
parameter as little-endian float32 in ``weights.bin``. A quantized bundle
stores weight codes bit-packed at the declared width (little-endian bit
order, row-major) in ``weights.bin`` and every per-group table, gain and
bias as little-endian float32 in ``params.bin``; quantizer parameters live
in the manifest as exact JSON numbers.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .quantizer import PerChannelParams, QuantParams, dequantize_per_channel, quantize_per_channel
from .reparam import AdaLNParams, DequantAffine, ReparamAdaLN, SmoothedLinear
from .temporal_clustering import TemporalPlan, single_group_plan
from .toymodel import BlockConfig, DiTBlock, Linear, QuantizedDiTBlock, storage_overhead
from .trace_io import TraceFormatError, UnsupportedVersionError, dump_json

MODEL_SCHEMA = "htg-model/1"
BUNDLE_SCHEMA = "htg-bundle/1"
F32 = np.dtype("<f4")


class BundleError(TraceFormatError):
    pass


def pack_codes(codes, bits: int) -> bytes:
    """Pack unsigned codes into a little-endian bit stream, ``bits`` per code."""
    codes = np.asarray(codes, dtype=np.int64).reshape(-1)
    if codes.size and (codes.min() < 0 or codes.max() >= 1 << bits):
        raise ValueError(f"codes do not fit in {bits} bits")
    planes = (codes[:, None] >> np.arange(bits)) & 1
    return np.packbits(planes.astype(np.uint8).reshape(-1), bitorder="little").tobytes()


def unpack_codes(raw: bytes, bits: int, count: int) -> np.ndarray:
    flat = np.unpackbits(np.frombuffer(raw, dtype=np.uint8), bitorder="little")
    if flat.size < count * bits:
        raise BundleError(f"packed blob holds {flat.size // bits} codes, expected {count}")
    planes = flat[: count * bits].reshape(count, bits).astype(np.int64)
    return (planes << np.arange(bits)).sum(axis=1)


def file_digest(path) -> str:
    h = hashlib.sha256()
    for p in sorted(Path(path).iterdir()):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


class _BlobWriter:
    def __init__(self):
        self.chunks: list[bytes] = []
        self.offset = 0

    def add(self, raw: bytes) -> dict:
        entry = {"offset": self.offset, "nbytes": len(raw)}
        self.chunks.append(raw)
        self.offset += len(raw)
        return entry

    def add_f32(self, arr) -> dict:
        arr = np.asarray(arr, dtype=np.float64)
        entry = self.add(arr.astype(F32).tobytes())
        entry["shape"] = list(arr.shape)
        return entry

    def write(self, path: Path) -> None:
        path.write_bytes(b"".join(self.chunks))


def _read_f32(raw: bytes, entry: dict, where: str) -> np.ndarray:
    lo, n = entry["offset"], entry["nbytes"]
    if lo + n > len(raw):
        raise BundleError(f"{where}: blob truncated")
    return np.frombuffer(raw[lo : lo + n], dtype=F32).astype(np.float64).reshape(entry["shape"])


def _load_manifest(path: Path, schema: str) -> dict:
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError as exc:
        raise BundleError(f"no manifest.json in {path}") from exc
    except json.JSONDecodeError as exc:
        raise BundleError(f"{path}/manifest.json is not valid JSON") from exc
    if manifest.get("schema") != schema:
        raise UnsupportedVersionError(f"{path}: expected schema {schema}, got {manifest.get('schema')!r}")
    return manifest


# --------------------------------------------------------------------------
# float model

_MODEL_LINEARS = ("qkv", "o_proj", "fc1", "fc2", "modulation")


def save_block(block: DiTBlock, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    blob = _BlobWriter()
    tensors = {}
    for name in ("adaln1", "adaln2"):
        a = getattr(block, name)
        tensors[f"{name}.gamma"] = blob.add_f32(a.gamma)
        tensors[f"{name}.beta"] = blob.add_f32(a.beta)
    for name in _MODEL_LINEARS:
        lin = getattr(block, name)
        if lin is None:
            continue
        tensors[f"{name}.weight"] = blob.add_f32(lin.weight)
        tensors[f"{name}.bias"] = blob.add_f32(lin.bias)
    blob.write(path / "weights.bin")
    raw = (path / "weights.bin").read_bytes()
    dump_json(
        {
            "schema": MODEL_SCHEMA,
            "hidden": block.hidden,
            "heads": block.heads,
            "tensors": tensors,
            "sha256": hashlib.sha256(raw).hexdigest(),
        },
        path / "manifest.json",
    )
    return path


def load_block(path) -> DiTBlock:
    path = Path(path)
    m = _load_manifest(path, MODEL_SCHEMA)
    try:
        raw = (path / "weights.bin").read_bytes()
    except FileNotFoundError as exc:
        raise BundleError(f"{path}: weights.bin missing") from exc
    if hashlib.sha256(raw).hexdigest() != m["sha256"]:
        raise BundleError(f"{path}: weights.bin checksum mismatch")
    t = {name: _read_f32(raw, e, f"model tensor {name}") for name, e in m["tensors"].items()}
    linears = {
        name: Linear(t[f"{name}.weight"], t[f"{name}.bias"]) if f"{name}.weight" in t else None
        for name in _MODEL_LINEARS
    }
    return DiTBlock(
        hidden=m["hidden"],
        heads=m["heads"],
        adaln1=AdaLNParams(t["adaln1.gamma"], t["adaln1.beta"]),
        adaln2=AdaLNParams(t["adaln2.gamma"], t["adaln2.beta"]),
        **linears,
    )


def model_digest(path) -> str:
    return _load_manifest(Path(path), MODEL_SCHEMA)["sha256"]


# --------------------------------------------------------------------------
# quantized bundle


def _qparams_dict(p: QuantParams | None):
    if p is None:
        return None
    return {"delta": p.delta, "zero_offset": p.zero_offset, "bits": p.bits}


def _qparams_from(d) -> QuantParams | None:
    return None if d is None else QuantParams(float(d["delta"]), int(d["zero_offset"]), int(d["bits"]))


def save_bundle(
    qblock: QuantizedDiTBlock | None,
    path,
    model_sha256: str,
    config: BlockConfig,
    plan: TemporalPlan | None = None,
    calibration: dict | None = None,
) -> Path:
    """Write a bundle; ``qblock=None`` writes a float pass-through bundle.

    ``calibration`` is free-form metadata of the calibration trace (for
    synthetic traces, the generator spec) kept for later evaluation.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {
        "schema": BUNDLE_SCHEMA,
        "model_sha256": model_sha256,
        "config": config.to_dict(),
        "calibration": dict(calibration or {}),
    }
    if qblock is None:
        if plan is None:
            raise ValueError("a float bundle still needs the timestep count of its plan")
        manifest.update(kind="float", plan=plan.to_dict(), storage_overhead=0)
        dump_json(manifest, path / "manifest.json")
        return path

    weights, params = _BlobWriter(), _BlobWriter()
    layers = {}
    for name, layer in qblock.linears().items():
        wp = layer.weight_qparams
        entry = {
            "biases": params.add_f32(layer.biases),
            "act_qparams": _qparams_dict(layer.act_qparams),
            "plan": "block" if layer.biases.shape[0] == qblock.plan.num_groups and layer.plan == qblock.plan else "single",
        }
        if wp is None:
            entry["weight"] = params.add_f32(layer.weight) | {"encoding": "float32"}
        else:
            codes = quantize_per_channel(layer.weight, wp)
            entry["weight"] = weights.add(pack_codes(codes, wp.bits)) | {
                "encoding": f"uint{wp.bits}-packed",
                "shape": list(layer.weight.shape),
            }
            entry["weight_qparams"] = {
                "bits": wp.bits,
                "delta": [float(d) for d in wp.deltas],
                "zero_offset": [int(z) for z in wp.zero_offsets],
            }
        layers[name] = entry
    manifest.update(
        kind="quantized",
        hidden=qblock.hidden,
        heads=qblock.heads,
        plan=qblock.plan.to_dict(),
        layers=layers,
        adaln1={"gain": params.add_f32(qblock.adaln1.gain), "betas": params.add_f32(qblock.adaln1.betas)},
        adaln2={"gain": params.add_f32(qblock.adaln2.gain), "betas": params.add_f32(qblock.adaln2.betas)},
        o_dequant={"scale": params.add_f32(qblock.o_dequant.scale), "offsets": params.add_f32(qblock.o_dequant.offsets)},
        attn_qparams={k: _qparams_dict(v) for k, v in sorted(qblock.attn_qparams.items())},
        storage_overhead=storage_overhead(qblock),
    )
    weights.write(path / "weights.bin")
    params.write(path / "params.bin")
    manifest["sha256"] = {
        "weights.bin": hashlib.sha256((path / "weights.bin").read_bytes()).hexdigest(),
        "params.bin": hashlib.sha256((path / "params.bin").read_bytes()).hexdigest(),
    }
    dump_json(manifest, path / "manifest.json")
    return path


def read_bundle_manifest(path) -> dict:
    return _load_manifest(Path(path), BUNDLE_SCHEMA)


def load_bundle(path) -> QuantizedDiTBlock | None:
    """Rebuild the quantized block; float bundles return ``None``."""
    path = Path(path)
    m = read_bundle_manifest(path)
    if m["kind"] == "float":
        return None
    blobs = {}
    for name in ("weights.bin", "params.bin"):
        try:
            blobs[name] = (path / name).read_bytes()
        except FileNotFoundError as exc:
            raise BundleError(f"{path}: {name} missing") from exc
        if hashlib.sha256(blobs[name]).hexdigest() != m["sha256"][name]:
            raise BundleError(f"{path}: {name} checksum mismatch")
    weights, params = blobs["weights.bin"], blobs["params.bin"]
    plan = TemporalPlan.from_dict(m["plan"])
    single = single_group_plan(plan.num_timesteps)

    def linear(name):
        e = m["layers"][name]
        w_entry = e["weight"]
        if w_entry["encoding"] == "float32":
            w, wp = _read_f32(params, w_entry, f"{name}.weight"), None
        else:
            qd = e["weight_qparams"]
            wp = PerChannelParams(
                tuple(QuantParams(float(d), int(z), int(qd["bits"])) for d, z in zip(qd["delta"], qd["zero_offset"]))
            )
            shape = tuple(w_entry["shape"])
            raw = weights[w_entry["offset"] : w_entry["offset"] + w_entry["nbytes"]]
            codes = unpack_codes(raw, wp.bits, shape[0] * shape[1]).reshape(shape)
            w = dequantize_per_channel(codes, wp)
        return SmoothedLinear(
            weight=w,
            biases=_read_f32(params, e["biases"], f"{name}.biases"),
            plan=plan if e["plan"] == "block" else single,
            weight_qparams=wp,
            act_qparams=_qparams_from(e["act_qparams"]),
        )

    def adaln(key):
        return ReparamAdaLN(
            gain=_read_f32(params, m[key]["gain"], f"{key}.gain"),
            betas=_read_f32(params, m[key]["betas"], f"{key}.betas"),
            plan=plan,
        )

    cfg = m["config"]
    return QuantizedDiTBlock(
        hidden=m["hidden"],
        heads=m["heads"],
        plan=plan,
        adaln1=adaln("adaln1"),
        adaln2=adaln("adaln2"),
        qkv=linear("attn.qkv"),
        o_dequant=DequantAffine(
            scale=_read_f32(params, m["o_dequant"]["scale"], "o_dequant.scale"),
            offsets=_read_f32(params, m["o_dequant"]["offsets"], "o_dequant.offsets"),
            plan=plan,
        ),
        o_proj=linear("attn.o_proj"),
        fc1=linear("mlp.fc1"),
        fc2=linear("mlp.fc2"),
        modulation=linear("adaln.modulation") if "adaln.modulation" in m["layers"] else None,
        attn_qparams={k: _qparams_from(v) for k, v in m["attn_qparams"].items()},
        config=BlockConfig(**cfg),
    )
