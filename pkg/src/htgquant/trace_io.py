"""Calibration traces: in-memory form, on-disk format and a synthetic generator.

A trace holds, for one layer input, either the full activation matrix at
every timestep or just its per-channel extrema. On disk a trace directory
contains ``manifest.json`` plus one ``<layer>.bin`` blob per layer of
little-endian float32 values, timestep-major (``t = 1`` first) then
row-major. Summary blobs store ``[min, max, abs_max]`` rows per timestep.
"""

from __future__ import annotations

import hashlib
import json
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

TRACE_SCHEMA = "htg-trace/1"
DTYPE = np.dtype("<f4")
KINDS = ("full", "summary")
DRIFT_PROFILES = ("linear_decay", "sign_flip_at_end", "constant")
DEFAULT_CALIBRATION_SAMPLES = 32


class TraceFormatError(ValueError):
    """Base class for malformed trace directories."""


class UnsupportedVersionError(TraceFormatError):
    pass


class ManifestMismatchError(TraceFormatError):
    pass


class TruncatedBlobError(TraceFormatError):
    pass


class CorruptBlobError(TraceFormatError):
    pass


@dataclass(frozen=True)
class ChannelSummary:
    col_min: np.ndarray
    col_max: np.ndarray
    abs_max: np.ndarray


@dataclass
class CalibrationTrace:
    """Per-timestep records of one layer input.

    ``data`` is float32 with shape ``(T, rows, C)`` for ``kind="full"`` and
    ``(T, 3, C)`` for ``kind="summary"``; index ``t - 1`` holds timestep ``t``.
    """

    layer_id: str
    kind: str
    data: np.ndarray

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown record kind {self.kind!r}")
        self.data = np.ascontiguousarray(self.data, dtype=DTYPE)
        if self.data.ndim != 3 or 0 in self.data.shape:
            raise ValueError(f"{self.layer_id}: records must be a non-empty (T, rows, C) array")
        if self.kind == "summary" and self.data.shape[1] != 3:
            raise ValueError(f"{self.layer_id}: summary records need 3 rows (min, max, abs_max)")
        if not np.all(np.isfinite(self.data)):
            raise ValueError(f"{self.layer_id}: trace contains non-finite values")

    @property
    def num_timesteps(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def record(self, t: int) -> np.ndarray:
        if self.kind != "full":
            raise ValueError(f"{self.layer_id}: summary-only trace has no full records")
        return self.data[self._index(t)].astype(np.float64)

    def summary(self, t: int) -> ChannelSummary:
        i = self._index(t)
        if self.kind == "summary":
            lo, hi, am = self.data[i]
        else:
            lo, hi = self.data[i].min(axis=0), self.data[i].max(axis=0)
            am = np.maximum(np.abs(lo), np.abs(hi))
        return ChannelSummary(lo.astype(np.float64), hi.astype(np.float64), am.astype(np.float64))

    def _index(self, t: int) -> int:
        if not 1 <= t <= self.num_timesteps:
            raise ValueError(f"{self.layer_id}: timestep {t} outside [1, {self.num_timesteps}]")
        return t - 1


def summarize(trace: CalibrationTrace) -> CalibrationTrace:
    if trace.kind == "summary":
        return trace
    lo = trace.data.min(axis=1)
    hi = trace.data.max(axis=1)
    am = np.maximum(np.abs(lo), np.abs(hi))
    return CalibrationTrace(trace.layer_id, "summary", np.stack([lo, hi, am], axis=1))


# --------------------------------------------------------------------------
# synthetic generator


@dataclass(frozen=True)
class SyntheticSpec:
    """Shape and outlier phenomenology of a synthetic activation trace.

    ``outlier_magnitude`` is in units of ``base_std``. ``noise_seed`` draws
    fresh samples while keeping the outlier channels fixed by ``seed``.
    """

    channels: int = 64
    tokens: int = 16
    samples: int = DEFAULT_CALIBRATION_SAMPLES
    timesteps: int = 100
    outlier_channel_fraction: float = 0.05
    outlier_magnitude: float = 20.0
    outlier_spread: float = 1.0
    drift_profile: str = "sign_flip_at_end"
    base_std: float = 1.0
    seed: int = 0
    noise_seed: int | None = None
    layer_id: str = "block.input"

    def validate(self) -> None:
        if min(self.channels, self.tokens, self.samples, self.timesteps) < 1:
            raise ValueError("channels, tokens, samples and timesteps must be positive")
        if not 0.0 <= self.outlier_channel_fraction <= 1.0:
            raise ValueError("outlier_channel_fraction must be in [0, 1]")
        if not self.outlier_magnitude > 0:
            raise ValueError("outlier_magnitude must be positive")
        if not self.outlier_spread > 0:
            raise ValueError("outlier_spread must be positive")
        if not self.base_std > 0:
            raise ValueError("base_std must be positive")
        if self.drift_profile not in DRIFT_PROFILES:
            raise ValueError(f"drift_profile must be one of {DRIFT_PROFILES}")

    @property
    def rows(self) -> int:
        return self.samples * self.tokens


def _stream(seed: int, layer_id: str, purpose: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(layer_id.encode()), purpose]))


def drift_factor(profile: str, t: int, timesteps: int) -> float:
    """Relative outlier offset at timestep ``t`` (1 at ``t = T``)."""
    if profile == "constant":
        return 1.0
    frac = 1.0 if timesteps == 1 else (t - 1) / (timesteps - 1)
    value = 0.3 + 0.7 * frac
    if profile == "sign_flip_at_end" and t == 1:
        value = -value
    return value


def outlier_layout(spec: SyntheticSpec) -> tuple[np.ndarray, np.ndarray]:
    """Outlier channel indices and their offset signs."""
    rng = _stream(spec.seed, spec.layer_id, 0)
    n_out = int(round(spec.outlier_channel_fraction * spec.channels))
    idx = np.sort(rng.choice(spec.channels, size=n_out, replace=False))
    signs = rng.choice(np.array([-1.0, 1.0]), size=n_out)
    return idx, signs


def channel_offsets(spec: SyntheticSpec, t: int) -> np.ndarray:
    idx, signs = outlier_layout(spec)
    off = np.zeros(spec.channels)
    off[idx] = signs * spec.outlier_magnitude * spec.base_std * drift_factor(spec.drift_profile, t, spec.timesteps)
    return off


def generate_trace(spec: SyntheticSpec) -> CalibrationTrace:
    spec.validate()
    idx, signs = outlier_layout(spec)
    noise_seed = spec.seed if spec.noise_seed is None else spec.noise_seed
    rng = _stream(noise_seed, spec.layer_id, 1)
    T = spec.timesteps
    data = rng.normal(0.0, spec.base_std, size=(T, spec.rows, spec.channels))
    data[:, :, idx] *= spec.outlier_spread
    factors = np.array([drift_factor(spec.drift_profile, t, T) for t in range(1, T + 1)])
    data[:, :, idx] += (factors[:, None] * (signs * spec.outlier_magnitude * spec.base_std))[:, None, :]
    return CalibrationTrace(spec.layer_id, "full", data)


# --------------------------------------------------------------------------
# persistence


def _blob_name(layer_id: str) -> str:
    safe = "".join(c if c.isalnum() or c in "._-" else "_" for c in layer_id)
    return f"{safe}.bin"


def dump_json(obj, path: Path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def save_trace(traces, path, metadata: Mapping | None = None) -> Path:
    """Write one or more layer traces into directory ``path``."""
    if isinstance(traces, CalibrationTrace):
        traces = [traces]
    traces = list(traces.values()) if isinstance(traces, Mapping) else list(traces)
    if not traces:
        raise ValueError("nothing to save")
    T = traces[0].num_timesteps
    if any(tr.num_timesteps != T for tr in traces):
        raise ValueError("all layers of a trace must cover the same timesteps")
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    layers = []
    for tr in sorted(traces, key=lambda tr: tr.layer_id):
        raw = tr.data.astype(DTYPE, copy=False).tobytes()
        record_bytes = tr.data.shape[1] * tr.data.shape[2] * DTYPE.itemsize
        blob = _blob_name(tr.layer_id)
        (path / blob).write_bytes(raw)
        layers.append(
            {
                "id": tr.layer_id,
                "kind": tr.kind,
                "rows": tr.data.shape[1],
                "cols": tr.data.shape[2],
                "blob": blob,
                "offsets": [i * record_bytes for i in range(T)],
                "nbytes": len(raw),
                "sha256": hashlib.sha256(raw).hexdigest(),
            }
        )
    manifest = {
        "schema": TRACE_SCHEMA,
        "dtype": "float32-le",
        "num_timesteps": T,
        "layers": layers,
        "metadata": dict(metadata or {}),
    }
    dump_json(manifest, path / "manifest.json")
    return path


def read_manifest(path) -> dict:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError as exc:
        raise TraceFormatError(f"no manifest.json in {path}") from exc
    except json.JSONDecodeError as exc:
        raise TraceFormatError(f"manifest.json is not valid JSON: {exc}") from exc
    if manifest.get("schema") != TRACE_SCHEMA:
        raise UnsupportedVersionError(f"unsupported trace schema {manifest.get('schema')!r}")
    return manifest


def load_trace(path) -> dict[str, CalibrationTrace]:
    path = Path(path)
    manifest = read_manifest(path)
    T = int(manifest["num_timesteps"])
    out = {}
    for entry in manifest["layers"]:
        lid = entry["id"]
        rows, cols = int(entry["rows"]), int(entry["cols"])
        expected = T * rows * cols * DTYPE.itemsize
        record_bytes = rows * cols * DTYPE.itemsize
        if entry["nbytes"] != expected or entry["offsets"] != [i * record_bytes for i in range(T)]:
            raise ManifestMismatchError(f"layer {lid}: manifest dimensions disagree with its offsets/size")
        blob = path / entry["blob"]
        if not blob.exists():
            raise ManifestMismatchError(f"layer {lid}: blob {entry['blob']} missing")
        raw = blob.read_bytes()
        if len(raw) < expected:
            raise TruncatedBlobError(f"layer {lid}: blob has {len(raw)} bytes, expected {expected}")
        if len(raw) > expected:
            raise ManifestMismatchError(f"layer {lid}: blob has {len(raw)} bytes, expected {expected}")
        if hashlib.sha256(raw).hexdigest() != entry["sha256"]:
            raise CorruptBlobError(f"layer {lid}: blob checksum mismatch")
        data = np.frombuffer(raw, dtype=DTYPE).reshape(T, rows, cols)
        out[lid] = CalibrationTrace(lid, entry["kind"], data)
    return out


def spec_metadata(spec: SyntheticSpec) -> dict:
    return {"synthetic": asdict(spec)}
