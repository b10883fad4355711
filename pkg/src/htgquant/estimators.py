"""scikit-learn style wrappers around the functional calibration pipeline.

The functional API (``smoothing``, ``temporal_clustering``, ``toymodel``)
is the reference; these classes only hold fitted state so that the usual
``fit`` / ``transform`` / ``predict`` / ``get_params`` idioms work.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .numerics import as_tensor2d
from .smoothing import (
    DEFAULT_ALPHA,
    EmaState,
    ShiftVector,
    derive_scale,
    ema_step,
    group_mean_shift,
    shift_from_range,
    step_channel_max,
)
from .temporal_clustering import LINKAGES, auto_groups, cluster_timesteps, single_group_plan
from .toymodel import BLOCK_OUTPUT, BlockConfig, DiTBlock, calibrate_block, compare_paths, forward_quant_sim


def _resolve_groups(n_groups, T: int) -> int:
    g = auto_groups(T) if n_groups == "auto" else n_groups
    if not isinstance(g, (int, np.integer)) or not 1 <= g <= T:
        raise ValueError(f"n_groups must be 'auto' or an int in [1, {T}], got {n_groups!r}")
    return int(g)


def _check_records(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 3 or 0 in X.shape:
        raise ValueError(f"expected activations of shape (T, rows, channels), got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("activations contain non-finite values")
    return X


class TimestepGrouper(BaseEstimator):
    """Contiguous grouping of timesteps from their shift vectors.

    ``X`` has one row per timestep, row ``t - 1`` for timestep ``t``.
    """

    def __init__(self, n_groups="auto", linkage="ward"):
        self.n_groups = n_groups
        self.linkage = linkage

    def fit(self, X, y=None):
        X = as_tensor2d(X, "X")
        if self.linkage not in LINKAGES:
            raise ValueError(f"linkage must be one of {LINKAGES}")
        T = X.shape[0]
        G = _resolve_groups(self.n_groups, T)
        # clustering walks the rows in denoising order, t = T first
        self.plan_ = cluster_timesteps(X[::-1], G, self.linkage)
        self.labels_ = self.plan_.labels()
        self.boundaries_ = np.array(self.plan_.boundaries, dtype=np.int64)
        self.n_timesteps_ = T
        return self

    def predict(self, t):
        check_is_fitted(self, "plan_")
        t = np.asarray(t)
        if t.size and (t.min() < 1 or t.max() > self.n_timesteps_):
            raise ValueError(f"timesteps must lie in [1, {self.n_timesteps_}]")
        return self.labels_[t - 1]

    def fit_predict(self, X, y=None):
        return self.fit(X).labels_.copy()


class HTGSmoother(TransformerMixin, BaseEstimator):
    """Group-wise channel shift plus EMA-aggregated channel scaling for one layer.

    ``fit`` takes the layer input at every timestep, shape ``(T, rows, C)``,
    and the layer weight ``(C, C_out)``. ``transform`` applies
    ``(X_t - z_g) / s`` slice by slice.
    """

    def __init__(self, n_groups="auto", linkage="ward", alpha=DEFAULT_ALPHA, shift=True, scale=True):
        self.n_groups = n_groups
        self.linkage = linkage
        self.alpha = alpha
        self.shift = shift
        self.scale = scale

    def fit(self, X, y=None, weight=None):
        X = _check_records(X)
        if weight is None:
            raise ValueError("HTGSmoother.fit needs the layer weight")
        w = as_tensor2d(weight, "weight")
        T, _, C = X.shape
        if w.shape[0] != C:
            raise ValueError(f"weight has {w.shape[0]} input rows, activations have {C} channels")
        lo, hi = X.min(axis=1), X.max(axis=1)
        if self.shift:
            steps = [shift_from_range(lo[t], hi[t]) for t in range(T)]
            plan = cluster_timesteps(np.stack(steps)[::-1], _resolve_groups(self.n_groups, T), self.linkage)
        else:
            steps = [np.zeros(C) for _ in range(T)]
            plan = single_group_plan(T, self.linkage)
        shifts = [ShiftVector(t + 1, steps[t]) for t in range(T)]
        self.plan_ = plan
        self.group_shifts_ = np.stack([gs.values for gs in group_mean_shift(shifts, plan)])
        if self.scale:
            state = EmaState(self.alpha)
            for t in range(T - 1, -1, -1):
                state = ema_step(state, step_channel_max(lo[t], hi[t], steps[t] if self.shift else None))
            self.outlier_history_ = state.values
            self.scale_ = derive_scale(state.values, w)
        else:
            self.outlier_history_ = None
            self.scale_ = np.ones(C)
        return self

    def transform(self, X):
        check_is_fitted(self, "scale_")
        X = _check_records(X)
        if X.shape[0] != self.plan_.num_timesteps or X.shape[2] != self.scale_.shape[0]:
            raise ValueError("activations do not match the fitted timesteps/channels")
        z = self.group_shifts_[self.plan_.labels() - 1]
        return (X - z[:, None, :]) / self.scale_


class HTGQuantizer(BaseEstimator):
    """Calibrates a float block into a quantized one.

    ``fit`` consumes a tap trace (as produced by ``capture_trace``);
    ``predict(z, t)`` runs the simulated integer forward and ``score``
    returns the end-to-end SQNR in dB over inputs of shape
    ``(T, *batch, tokens, hidden)``.
    """

    def __init__(
        self,
        block: DiTBlock | None = None,
        weight_bits=8,
        act_bits=8,
        groups="auto",
        alpha=DEFAULT_ALPHA,
        linkage="ward",
        clip_quantile=1.0,
        shift=True,
        scale=True,
    ):
        self.block = block
        self.weight_bits = weight_bits
        self.act_bits = act_bits
        self.groups = groups
        self.alpha = alpha
        self.linkage = linkage
        self.clip_quantile = clip_quantile
        self.shift = shift
        self.scale = scale

    def _config(self) -> BlockConfig:
        params = self.get_params(deep=False)
        params.pop("block")
        return BlockConfig(**params)

    def fit(self, trace, y=None):
        if self.block is None:
            raise ValueError("HTGQuantizer needs a float block")
        self.config_ = self._config()
        self.qblock_ = calibrate_block(self.block, trace, self.config_)
        self.plan_ = self.qblock_.plan
        return self

    def predict(self, z, t):
        check_is_fitted(self, "qblock_")
        return forward_quant_sim(self.qblock_, z, t)

    def score(self, inputs, y=None) -> float:
        check_is_fitted(self, "qblock_")
        return compare_paths(self.block, self.qblock_, inputs).per_layer[BLOCK_OUTPUT].sqnr_db
