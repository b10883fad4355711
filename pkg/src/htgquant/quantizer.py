"""Uniform affine quantization.

``q = clamp(round(x / delta) + zero_offset, 0, 2**bits - 1)`` with
round-half-to-even, and ``x' = (q - zero_offset) * delta`` on the way back.
Parameters are fitted from the plain min/max of the calibration samples,
optionally clipped to a symmetric quantile band.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .numerics import as_tensor2d

DELTA_FLOOR = 1e-8
MIN_BITS, MAX_BITS = 2, 16


@dataclass(frozen=True)
class QuantParams:
    delta: float
    zero_offset: int
    bits: int

    def __post_init__(self):
        if not MIN_BITS <= self.bits <= MAX_BITS:
            raise ValueError(f"bits must be in [{MIN_BITS}, {MAX_BITS}], got {self.bits}")
        if not (self.delta > 0 and math.isfinite(self.delta)):
            raise ValueError(f"delta must be positive and finite, got {self.delta}")
        if not 0 <= self.zero_offset <= self.qmax:
            raise ValueError(f"zero_offset {self.zero_offset} outside [0, {self.qmax}]")

    @property
    def qmax(self) -> int:
        return (1 << self.bits) - 1

    def grid(self) -> np.ndarray:
        """Every representable value, in code order."""
        return (np.arange(self.qmax + 1, dtype=np.float64) - self.zero_offset) * self.delta


@dataclass(frozen=True)
class PerChannelParams:
    """One :class:`QuantParams` per output column of a ``C_in x C_out`` weight."""

    params: tuple[QuantParams, ...]

    def __len__(self) -> int:
        return len(self.params)

    @property
    def bits(self) -> int:
        return self.params[0].bits

    @property
    def deltas(self) -> np.ndarray:
        return np.array([p.delta for p in self.params], dtype=np.float64)

    @property
    def zero_offsets(self) -> np.ndarray:
        return np.array([p.zero_offset for p in self.params], dtype=np.int64)


@dataclass(frozen=True)
class ErrorReport:
    mse: float
    max_abs_err: float
    sqnr_db: float


def params_from_range(lo: float, hi: float, bits: int) -> QuantParams:
    lo, hi = float(lo), float(hi)
    if not (math.isfinite(lo) and math.isfinite(hi)):
        raise ValueError("range bounds must be finite")
    if hi < lo:
        raise ValueError(f"empty range [{lo}, {hi}]")
    qmax = (1 << bits) - 1
    if hi == lo:
        return QuantParams(DELTA_FLOOR, 0, bits)
    delta = (hi - lo) / qmax
    zero_offset = int(np.clip(np.rint(-lo / delta), 0, qmax))
    return QuantParams(delta, zero_offset, bits)


def fit_params(samples, bits: int, clip_quantile: float = 1.0) -> QuantParams:
    """Fit per-tensor parameters from the global range of ``samples``.

    With ``clip_quantile < 1`` the range is the ``[1 - q, q]`` quantile band
    of all entries instead of the extrema.
    """
    x = as_tensor2d(samples, "samples")
    if not 0.5 < clip_quantile <= 1.0:
        raise ValueError(f"clip_quantile must be in (0.5, 1], got {clip_quantile}")
    if clip_quantile == 1.0:
        lo, hi = x.min(), x.max()
    else:
        lo, hi = np.quantile(x, [1.0 - clip_quantile, clip_quantile])
    return params_from_range(lo, hi, bits)


def quantize(x, p: QuantParams) -> np.ndarray:
    """Integer codes in ``[0, 2**bits - 1]`` as int64; accepts any array shape."""
    x = np.asarray(x, dtype=np.float64)
    q = np.rint(x / p.delta) + p.zero_offset
    return np.clip(q, 0, p.qmax).astype(np.int64)


def dequantize(q, p: QuantParams) -> np.ndarray:
    q = np.asarray(q)
    if q.size and (q.min() < 0 or q.max() > p.qmax):
        raise ValueError(f"codes outside [0, {p.qmax}]")
    return (q.astype(np.float64) - p.zero_offset) * p.delta


def fake_quant(x, p: QuantParams) -> np.ndarray:
    return dequantize(quantize(x, p), p)


def fit_weight_per_channel(w, bits: int) -> PerChannelParams:
    w = as_tensor2d(w, "w")
    return PerChannelParams(
        tuple(params_from_range(col.min(), col.max(), bits) for col in w.T)
    )


def quantize_per_channel(w, pc: PerChannelParams) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.shape[-1] != len(pc):
        raise ValueError(f"weight has {w.shape[-1]} columns, params cover {len(pc)}")
    q = np.rint(w / pc.deltas) + pc.zero_offsets
    return np.clip(q, 0, (1 << pc.bits) - 1).astype(np.int64)


def dequantize_per_channel(q, pc: PerChannelParams) -> np.ndarray:
    return (np.asarray(q).astype(np.float64) - pc.zero_offsets) * pc.deltas


def error_metrics(reference, approx) -> ErrorReport:
    """MSE, worst absolute error and SQNR (dB) of ``approx`` against ``reference``.

    SQNR is ``+inf`` when the error power is exactly zero.
    """
    ref = np.asarray(reference, dtype=np.float64)
    err = np.asarray(approx, dtype=np.float64) - ref
    return _report(float(np.sum(ref * ref)), float(np.sum(err * err)), float(np.abs(err).max()), ref.size)


def _report(signal_power: float, error_power: float, max_abs: float, count: int) -> ErrorReport:
    if error_power == 0.0:
        sqnr = math.inf
    elif signal_power == 0.0:
        sqnr = -math.inf
    else:
        sqnr = 10.0 * math.log10(signal_power / error_power)
    return ErrorReport(mse=error_power / count, max_abs_err=max_abs, sqnr_db=sqnr)


def error_report(x, p: QuantParams) -> ErrorReport:
    x = as_tensor2d(x)
    return error_metrics(x, fake_quant(x, p))


class UniformQuantizer(TransformerMixin, BaseEstimator):
    """Estimator wrapper around the functional quantizer.

    ``granularity="tensor"`` fits one parameter set for the whole matrix,
    ``"channel"`` fits one per column. ``transform`` returns integer codes and
    ``inverse_transform`` maps them back, so ``fit_transform`` followed by
    ``inverse_transform`` is fake quantization.
    """

    def __init__(self, bits: int = 8, granularity: str = "tensor", clip_quantile: float = 1.0):
        self.bits = bits
        self.granularity = granularity
        self.clip_quantile = clip_quantile

    def fit(self, X, y=None):
        X = as_tensor2d(X, "X")
        if self.granularity == "tensor":
            self.params_ = fit_params(X, self.bits, self.clip_quantile)
        elif self.granularity == "channel":
            if self.clip_quantile != 1.0:
                raise ValueError("clip_quantile is only supported for per-tensor granularity")
            self.params_ = fit_weight_per_channel(X, self.bits)
        else:
            raise ValueError(f"unknown granularity {self.granularity!r}")
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self)
        X = as_tensor2d(X, "X")
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        if isinstance(self.params_, PerChannelParams):
            return quantize_per_channel(X, self.params_)
        return quantize(X, self.params_)

    def inverse_transform(self, X):
        check_is_fitted(self)
        if isinstance(self.params_, PerChannelParams):
            return dequantize_per_channel(X, self.params_)
        return dequantize(X, self.params_)
