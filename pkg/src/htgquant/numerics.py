"""Small dense linear-algebra and statistics helpers shared across the package.

Matrices are plain 2-D ``float64`` numpy arrays and channel vectors are 1-D
``float64`` arrays. The ``as_*`` helpers are the single place where inputs
are validated and coerced.
"""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array


def as_tensor2d(x, name: str = "x") -> np.ndarray:
    """Validate ``x`` as a finite, non-empty 2-D float64 matrix."""
    try:
        arr = check_array(
            x,
            dtype=np.float64,
            ensure_2d=True,
            ensure_all_finite=True,
            ensure_min_samples=1,
            ensure_min_features=1,
            copy=False,
        )
    except ValueError as exc:
        raise ValueError(f"{name}: {exc}") from exc
    return arr


def as_channel_vector(v, length: int | None = None, name: str = "vector") -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {arr.shape}")
    if length is not None and arr.shape[0] != length:
        raise ValueError(f"{name} has {arr.shape[0]} channels, expected {length}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def matmul(a, b) -> np.ndarray:
    """Matrix product with a fixed, sequential reduction order.

    Each output element is accumulated as ``((a0*b0 + a1*b1) + a2*b2) + ...``,
    which makes the result independent of BLAS blocking and threading. The
    loop runs over the shared dimension, so it is meant for the small
    matrices used during calibration; batched model forwards use ``@``.
    """
    a = as_tensor2d(a, "a")
    b = as_tensor2d(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]), dtype=np.float64)
    for k in range(a.shape[1]):
        out += a[:, k : k + 1] * b[k : k + 1, :]
    return out


def col_min_max(x) -> tuple[np.ndarray, np.ndarray]:
    """Per-column minimum and maximum."""
    x = as_tensor2d(x)
    return x.min(axis=0), x.max(axis=0)


def col_abs_max(x) -> np.ndarray:
    x = as_tensor2d(x)
    return np.abs(x).max(axis=0)
