"""Channel-wise shifting and scaling of linear-layer inputs.

Shifting subtracts the per-channel midpoint so every channel is centred on
zero; timesteps in one temporal group share the mean of their shifts and the
linear layer compensates through a per-group bias. Scaling moves channel
magnitude from the activation into the weight with one vector shared by all
timesteps, aggregated by an exponential moving average of per-step channel
maxima taken in denoising order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .numerics import as_channel_vector, as_tensor2d, col_abs_max, col_min_max, matmul

SCALE_FLOOR = 1e-5
DEAD_CHANNEL_EPS = 1e-12
DEFAULT_ALPHA = 0.99


@dataclass(frozen=True)
class ShiftVector:
    timestep: int
    values: np.ndarray


@dataclass(frozen=True)
class GroupShift:
    group_index: int
    values: np.ndarray


@dataclass(frozen=True)
class EmaState:
    alpha: float = DEFAULT_ALPHA
    values: np.ndarray | None = None

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must be in (0, 1), got {self.alpha}")

    @property
    def initialized(self) -> bool:
        return self.values is not None


def shift_from_range(col_min, col_max) -> np.ndarray:
    return (np.asarray(col_max, dtype=np.float64) + np.asarray(col_min, dtype=np.float64)) / 2.0


def compute_shift(x_t, timestep: int = 0) -> ShiftVector:
    lo, hi = col_min_max(x_t)
    return ShiftVector(timestep, shift_from_range(lo, hi))


def shift_activation(x_t, z) -> np.ndarray:
    x_t = as_tensor2d(x_t, "x_t")
    z = as_channel_vector(getattr(z, "values", z), x_t.shape[1], "shift")
    return x_t - z


def group_mean_shift(shifts: Sequence[ShiftVector], plan) -> list[GroupShift]:
    """Average the member shifts of every temporal group of ``plan``."""
    by_t = {s.timestep: np.asarray(s.values, dtype=np.float64) for s in shifts}
    missing = [t for t in range(1, plan.num_timesteps + 1) if t not in by_t]
    if missing:
        raise ValueError(f"no shift vector for timesteps {missing}")
    groups = []
    for g, (lo, hi) in enumerate(plan.group_ranges(), start=1):
        members = np.stack([by_t[t] for t in range(lo, hi + 1)])
        groups.append(GroupShift(g, members.mean(axis=0)))
    return groups


def compensated_bias(w, b, z_bar) -> np.ndarray:
    """Bias that keeps ``(X - z) W + b_hat == X W + b``."""
    w = as_tensor2d(w, "w")
    b = as_channel_vector(b, w.shape[1], "bias")
    z = as_channel_vector(getattr(z_bar, "values", z_bar), w.shape[0], "group shift")
    return b + matmul(z[None, :], w)[0]


def step_channel_max(col_min, col_max, shift=None) -> np.ndarray:
    """Per-channel magnitude of a (possibly shifted) activation from its extrema."""
    lo = np.asarray(col_min, dtype=np.float64)
    hi = np.asarray(col_max, dtype=np.float64)
    if shift is not None:
        lo = lo - shift
        hi = hi - shift
    return np.maximum(np.abs(lo), np.abs(hi))


def ema_step(state: EmaState, channel_max) -> EmaState:
    channel_max = as_channel_vector(channel_max, name="channel max")
    if not state.initialized:
        return EmaState(state.alpha, channel_max.copy())
    if channel_max.shape != state.values.shape:
        raise ValueError(
            f"channel count changed: state has {state.values.shape[0]}, step has {channel_max.shape[0]}"
        )
    return EmaState(state.alpha, state.alpha * state.values + (1.0 - state.alpha) * channel_max)


def ema_update(state: EmaState, x_shifted) -> EmaState:
    """Fold one timestep's shifted activation into the running outlier record.

    Timesteps must be fed from ``T`` down to ``1``; the first call adopts the
    per-channel magnitude directly.
    """
    return ema_step(state, col_abs_max(x_shifted))


def derive_scale(m_final, w) -> np.ndarray:
    """Per-input-channel scale ``sqrt(m / max|W row|)``, floored at ``SCALE_FLOOR``.

    Channels whose activation record or weight row is numerically zero get
    the neutral scale 1.
    """
    w = as_tensor2d(w, "w")
    m = as_channel_vector(m_final, w.shape[0], "m_final")
    if np.any(m < 0):
        raise ValueError("activation magnitudes must be non-negative")
    w_max = col_abs_max(w.T)
    dead = w_max <= DEAD_CHANNEL_EPS
    s = np.sqrt(m / np.where(dead, 1.0, w_max))
    s = np.maximum(s, SCALE_FLOOR)
    s[dead] = 1.0
    return s


def apply_htg(x_t, z_bar, s_bar) -> np.ndarray:
    x_t = as_tensor2d(x_t, "x_t")
    s = as_channel_vector(s_bar, x_t.shape[1], "scale")
    return shift_activation(x_t, z_bar) / s


def rescale_weight(w, s_bar) -> np.ndarray:
    w = as_tensor2d(w, "w")
    s = as_channel_vector(s_bar, w.shape[0], "scale")
    return w * s[:, None]
