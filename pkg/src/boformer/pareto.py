"""Pareto dominance, hypervolume, and the incremental archive used for rewards.

All objectives are maximized. The reference point ``u`` is the lower corner of
the measured region; points are clipped componentwise to ``u`` so that a point
failing to dominate ``u`` simply contributes zero volume.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

REWARD_EPS = 1e-6
REWARD_CAP = 100.0


def dominates(a, b) -> bool:
    """True iff ``a`` is >= ``b`` everywhere and > ``b`` somewhere."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    return bool(np.all(a >= b) and np.any(a > b))


def pareto_front(points) -> np.ndarray:
    """Return the non-dominated subset of ``points`` (duplicates collapsed).

    Rows keep their first-occurrence order.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.shape[0] == 0:
        raise ValueError("pareto_front needs at least one point")
    _, first = np.unique(pts, axis=0, return_index=True)
    pts = pts[np.sort(first)]
    # ge[i, j]: row j >= row i everywhere; gt[i, j]: row j > row i somewhere
    ge = np.all(pts[None, :, :] >= pts[:, None, :], axis=2)
    gt = np.any(pts[None, :, :] > pts[:, None, :], axis=2)
    dominated = np.any(ge & gt, axis=1)
    return pts[~dominated]


def _clip(points, ref) -> np.ndarray:
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.size == 0:
        return pts.reshape(0, len(ref))
    return np.maximum(pts, ref)


def _hv2(pts: np.ndarray, ref: np.ndarray) -> float:
    order = np.argsort(-pts[:, 0], kind="stable")
    volume = 0.0
    height = ref[1]
    for x, y in pts[order]:
        if y > height:
            volume += (x - ref[0]) * (y - height)
            height = y
    return float(volume)


def hypervolume_exact(points, ref, K: int | None = None) -> float:
    """Exact hypervolume dominated by ``points`` above ``ref`` for K in {2, 3}.

    K = 2 sweeps rectangles in descending first coordinate. K = 3 sweeps slabs
    in descending third coordinate and measures the 2-D front of everything
    above each slab.
    """
    ref = np.asarray(ref, dtype=float)
    K = len(ref) if K is None else K
    if K != len(ref):
        raise ValueError("reference point length does not match K")
    if K not in (2, 3):
        raise ValueError(f"exact hypervolume supports K in {{2, 3}}, got K={K}; use hypervolume_mc")
    pts = _clip(points, ref)
    if pts.shape[0] == 0:
        return 0.0
    pts = pts[np.all(pts > ref, axis=1)]
    if pts.shape[0] == 0:
        return 0.0
    if K == 2:
        return _hv2(pts, ref)
    order = np.argsort(-pts[:, 2], kind="stable")
    pts = pts[order]
    volume = 0.0
    for i in range(pts.shape[0]):
        z_next = pts[i + 1, 2] if i + 1 < pts.shape[0] else ref[2]
        depth = pts[i, 2] - z_next
        if depth > 0:
            volume += _hv2(pts[: i + 1, :2], ref[:2]) * depth
    return float(volume)


def hypervolume(points, ref) -> float:
    """Exact hypervolume (alias taking K from the reference point)."""
    return hypervolume_exact(points, ref)


@dataclass(frozen=True)
class HVEstimate:
    value: float
    stderr: float
    n_samples: int


def hypervolume_mc(points, ref, ideal, n_samples: int, rng: np.random.Generator,
                   chunk: int = 200_000) -> HVEstimate:
    """Monte-Carlo hypervolume over the box ``[ref, ideal]``."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    ref = np.asarray(ref, dtype=float)
    ideal = np.asarray(ideal, dtype=float)
    pts = _clip(points, ref)
    if pts.shape[0] == 0:
        return HVEstimate(0.0, 0.0, n_samples)
    box = float(np.prod(ideal - ref))
    hits = 0
    done = 0
    while done < n_samples:
        m = min(chunk, n_samples - done)
        s = ref + (ideal - ref) * rng.random((m, len(ref)))
        covered = np.zeros(m, dtype=bool)
        for p in pts:
            covered |= np.all(s <= p, axis=1)
        hits += int(covered.sum())
        done += m
    frac = hits / n_samples
    stderr = box * np.sqrt(frac * (1.0 - frac) / n_samples)
    return HVEstimate(box * frac, float(stderr), n_samples)


def _columns(front: np.ndarray, ref: np.ndarray):
    """Decompose the non-dominated region above ``ref`` into vertical columns.

    The first K-1 axes are cut at every front coordinate; inside each cell the
    non-dominated region starts at a floor height on the last axis. Returns
    per-column lower/upper corners on the first K-1 axes and the floor.
    """
    K = len(ref)
    cuts = []
    for d in range(K - 1):
        c = np.unique(front[:, d]) if front.shape[0] else np.empty(0)
        cuts.append(np.concatenate([[ref[d]], c[c > ref[d]], [np.inf]]))
    lo_axes = [c[:-1] for c in cuts]
    hi_axes = [c[1:] for c in cuts]
    lo = np.stack(np.meshgrid(*lo_axes, indexing="ij"), axis=-1).reshape(-1, K - 1)
    hi = np.stack(np.meshgrid(*hi_axes, indexing="ij"), axis=-1).reshape(-1, K - 1)
    if front.shape[0]:
        # a front point covers the whole column iff it reaches the column's upper corner
        covers = np.all(front[None, :, : K - 1] >= hi[:, None, :], axis=2)
        heights = np.where(covers, front[None, :, K - 1], ref[K - 1])
        floor = np.maximum(heights.max(axis=1), ref[K - 1])
    else:
        floor = np.full(lo.shape[0], ref[K - 1])
    return lo, hi, floor


def improvement_batch(front, ref, ys) -> np.ndarray:
    """Exact hypervolume gain of adding each row of ``ys`` to ``front``.

    Uses the column decomposition of the non-dominated region, so it is
    vectorized over candidates and valid for any K (cost grows as F^(K-1)).
    """
    ref = np.asarray(ref, dtype=float)
    front = _clip(front, ref) if len(front) else np.empty((0, len(ref)))
    ys = np.maximum(np.atleast_2d(np.asarray(ys, dtype=float)), ref)
    lo, hi, floor = _columns(front, ref)
    K = len(ref)
    # (n_ys, n_columns)
    width = np.clip(np.minimum(ys[:, None, : K - 1], hi[None]) - lo[None], 0.0, None)
    area = np.prod(width, axis=2)
    depth = np.clip(ys[:, None, K - 1] - floor[None], 0.0, None)
    return np.sum(area * depth, axis=1)


@dataclass
class ParetoArchive:
    """Non-dominated set with its running hypervolume."""

    ref: np.ndarray
    points: np.ndarray = field(default=None)
    hv: float = 0.0

    def __post_init__(self):
        self.ref = np.asarray(self.ref, dtype=float)
        if self.points is None:
            self.points = np.empty((0, len(self.ref)))
        else:
            self.points = np.atleast_2d(np.asarray(self.points, dtype=float))

    @property
    def K(self) -> int:
        return len(self.ref)

    def __len__(self) -> int:
        return self.points.shape[0]

    def clone(self) -> ParetoArchive:
        return copy.deepcopy(self)

    def push(self, y) -> float:
        return push(self, y)


def push(archive: ParetoArchive, y) -> float:
    """Insert ``y`` if non-dominated and return the hypervolume increase."""
    y = np.maximum(np.asarray(y, dtype=float), archive.ref)
    pts = archive.points
    if pts.shape[0] and np.any(np.all(pts >= y, axis=1)):
        return 0.0
    gain = float(improvement_batch(pts, archive.ref, y[None])[0])
    keep = ~(np.all(y >= pts, axis=1) & np.any(y > pts, axis=1)) if pts.shape[0] else np.empty(0, bool)
    archive.points = np.vstack([pts[keep], y[None]])
    archive.hv += gain
    return gain


def normalized_reward(raw: float, hv_now: float, hv_star: float,
                      eps: float = REWARD_EPS, cap: float = REWARD_CAP) -> float:
    """Improvement scaled by the hypervolume still missing after the step."""
    if raw <= 0.0:
        return 0.0
    return float(min(raw / max(hv_star - hv_now, eps), cap))


def simple_regret(archive: ParetoArchive, hv_star: float) -> float:
    return max(hv_star - archive.hv, 0.0)
