"""Contiguity-constrained agglomerative clustering of denoising timesteps.

Timesteps are indexed ``1..T`` with ``t = T`` the first denoising step. A
plan is described by its boundaries ``0 < tau_1 < ... < tau_{G-1} < T``;
group ``g`` holds the timesteps ``tau_{g-1} < t <= tau_g`` (``tau_0 = 0``,
``tau_G = T``), so group 1 is the tail of the denoising process.
"""

from __future__ import annotations

import bisect
import itertools
from dataclasses import dataclass

import numpy as np

LINKAGES = ("average", "centroid", "ward")


@dataclass(frozen=True)
class TemporalPlan:
    num_timesteps: int
    num_groups: int
    boundaries: tuple[int, ...]
    linkage: str = "ward"

    def __post_init__(self):
        object.__setattr__(self, "boundaries", tuple(int(x) for x in self.boundaries))
        T, G, b = self.num_timesteps, self.num_groups, self.boundaries
        if not 1 <= G <= T:
            raise ValueError(f"need 1 <= G <= T, got G={G}, T={T}")
        if len(b) != G - 1:
            raise ValueError(f"{G} groups need {G - 1} boundaries, got {len(b)}")
        edges = (0,) + b + (T,)
        if any(lo >= hi for lo, hi in zip(edges[:-1], edges[1:])):
            raise ValueError(f"boundaries must satisfy 0 < tau_1 < ... < T, got {b}")
        if self.linkage not in LINKAGES:
            raise ValueError(f"unknown linkage {self.linkage!r}")

    def group_ranges(self) -> list[tuple[int, int]]:
        """Inclusive ``(first_t, last_t)`` per group, group 1 first."""
        edges = (0,) + self.boundaries + (self.num_timesteps,)
        return [(lo + 1, hi) for lo, hi in zip(edges[:-1], edges[1:])]

    def labels(self) -> np.ndarray:
        """Group index of every timestep; entry ``t - 1`` belongs to ``t``."""
        out = np.empty(self.num_timesteps, dtype=np.int64)
        for g, (lo, hi) in enumerate(self.group_ranges(), start=1):
            out[lo - 1 : hi] = g
        return out

    def to_dict(self) -> dict:
        return {
            "num_timesteps": self.num_timesteps,
            "num_groups": self.num_groups,
            "boundaries": list(self.boundaries),
            "linkage": self.linkage,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TemporalPlan":
        return cls(int(d["num_timesteps"]), int(d["num_groups"]), tuple(int(b) for b in d["boundaries"]), d["linkage"])


def identity_plan(num_timesteps: int, linkage: str = "ward") -> TemporalPlan:
    return TemporalPlan(num_timesteps, num_timesteps, tuple(range(1, num_timesteps)), linkage)


def single_group_plan(num_timesteps: int, linkage: str = "ward") -> TemporalPlan:
    return TemporalPlan(num_timesteps, 1, (), linkage)


def auto_groups(num_timesteps: int) -> int:
    return max(1, num_timesteps // 10)


def group_of(t: int, plan: TemporalPlan) -> int:
    if not 1 <= t <= plan.num_timesteps:
        raise ValueError(f"timestep {t} outside [1, {plan.num_timesteps}]")
    return bisect.bisect_left(plan.boundaries, t) + 1


def adjacent_distance(a, b, linkage: str = "ward") -> float:
    """Linkage distance between two groups of vectors (rows)."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[0] == 0 or b.shape[0] == 0 or a.size == 0 or b.size == 0:
        raise ValueError("linkage distance of an empty group")
    if linkage == "average":
        diff = a[:, None, :] - b[None, :, :]
        return float(np.sqrt((diff * diff).sum(axis=-1)).mean())
    gap = a.mean(axis=0) - b.mean(axis=0)
    if linkage == "centroid":
        return float(np.sqrt(gap @ gap))
    if linkage == "ward":
        na, nb = a.shape[0], b.shape[0]
        return float(na * nb / (na + nb) * (gap @ gap))
    raise ValueError(f"unknown linkage {linkage!r}")


def _stack_in_denoising_order(shifts) -> np.ndarray:
    """Rows ordered ``t = T, T-1, ..., 1``.

    Accepts :class:`ShiftVector`-like objects (``timestep``/``values``) or a
    plain ``T x C`` array already in denoising order.
    """
    if isinstance(shifts, np.ndarray):
        z = np.asarray(shifts, dtype=np.float64)
        return z[:, None] if z.ndim == 1 else z
    items = sorted(shifts, key=lambda s: -s.timestep)
    ts = [s.timestep for s in items]
    T = len(items)
    if ts != list(range(T, 0, -1)):
        raise ValueError(f"shift vectors must cover timesteps 1..{T} exactly once")
    return np.stack([np.asarray(s.values, dtype=np.float64) for s in items])


def cluster_timesteps(shifts, num_groups: int, linkage: str = "ward") -> TemporalPlan:
    """Greedy bottom-up merge of the closest adjacent pair until ``num_groups`` remain.

    Ties go to the pair that comes first in denoising order.
    """
    z = _stack_in_denoising_order(shifts)
    T = z.shape[0]
    if not 1 <= num_groups <= T:
        raise ValueError(f"need 1 <= G <= T, got G={num_groups}, T={T}")
    if linkage not in LINKAGES:
        raise ValueError(f"unknown linkage {linkage!r}")
    # groups as half-open position ranges over the denoising-ordered rows
    starts = list(range(T))
    ends = list(range(1, T + 1))
    dists = [adjacent_distance(z[i : i + 1], z[i + 1 : i + 2], linkage) for i in range(T - 1)]
    while len(starts) > num_groups:
        i = int(np.argmin(dists))  # argmin returns the first minimum
        ends[i] = ends.pop(i + 1)
        starts.pop(i + 1)
        dists.pop(i)
        if i > 0:
            dists[i - 1] = adjacent_distance(z[starts[i - 1] : ends[i - 1]], z[starts[i] : ends[i]], linkage)
        if i < len(dists):
            dists[i] = adjacent_distance(z[starts[i] : ends[i]], z[starts[i + 1] : ends[i + 1]], linkage)
    # a group starting at position p (p > 0) begins at t = T - p, so tau = T - p
    boundaries = tuple(sorted(T - p for p in starts[1:]))
    return TemporalPlan(T, num_groups, boundaries, linkage)


def _segment_cost(seg: np.ndarray, squared: bool) -> float:
    dev = seg - seg.mean(axis=0)
    sq = (dev * dev).sum(axis=1)
    return float(sq.sum() if squared else np.sqrt(sq).sum())


def objective(shifts, plan: TemporalPlan, squared: bool = False) -> float:
    """Sum over timesteps of the distance to the group centroid.

    The default uses the plain Euclidean norm; ``squared=True`` gives the
    within-group sum of squares that Ward linkage greedily minimises.
    """
    z = _stack_in_denoising_order(shifts)
    if z.shape[0] != plan.num_timesteps:
        raise ValueError(f"plan covers {plan.num_timesteps} timesteps, got {z.shape[0]} vectors")
    T = plan.num_timesteps
    total = 0.0
    for lo, hi in plan.group_ranges():
        total += _segment_cost(z[T - hi : T - lo + 1], squared)
    return total


def optimal_plan(shifts, num_groups: int, squared: bool = False, linkage: str = "ward") -> TemporalPlan:
    """Exact minimiser of :func:`objective` by dynamic programming over boundaries."""
    z = _stack_in_denoising_order(shifts)
    T = z.shape[0]
    if not 1 <= num_groups <= T:
        raise ValueError(f"need 1 <= G <= T, got G={num_groups}, T={T}")
    cost = np.full((T + 1, T + 1), np.inf)
    for i in range(T):
        for j in range(i + 1, T + 1):
            cost[i, j] = _segment_cost(z[i:j], squared)
    # best[g, j]: optimal cost of splitting positions [0, j) into g segments
    best = np.full((num_groups + 1, T + 1), np.inf)
    arg = np.zeros((num_groups + 1, T + 1), dtype=np.int64)
    best[0, 0] = 0.0
    for g in range(1, num_groups + 1):
        for j in range(g, T + 1):
            cands = best[g - 1, g - 1 : j] + cost[g - 1 : j, j]
            k = int(np.argmin(cands))
            best[g, j] = cands[k]
            arg[g, j] = k + g - 1
    cuts = []
    j = T
    for g in range(num_groups, 0, -1):
        j = arg[g, j]
        cuts.append(j)
    starts = sorted(cuts)[1:]
    return TemporalPlan(T, num_groups, tuple(sorted(T - p for p in starts)), linkage)


def brute_force_plan(shifts, num_groups: int, squared: bool = False, linkage: str = "ward") -> TemporalPlan:
    """Exhaustive search over every boundary placement; only for small ``T``."""
    z = _stack_in_denoising_order(shifts)
    T = z.shape[0]
    best_plan, best_cost = None, np.inf
    for combo in itertools.combinations(range(1, T), num_groups - 1):
        plan = TemporalPlan(T, num_groups, combo, linkage)
        c = objective(z, plan, squared)
        if c < best_cost:
            best_plan, best_cost = plan, c
    return best_plan
