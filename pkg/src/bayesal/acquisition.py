"""Batch selection strategies over an unlabeled candidate subset.

All distances are Euclidean on the flattened ``K*3`` prediction vectors.  Ties
are broken towards the lower global dataset index everywhere, which keeps every
selector a deterministic function of its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import DatasetError, _parse_header, read_numeric_rows

STRATEGIES = ("random", "uncertainty", "coreset", "cke")
LINE6_READINGS = ("lb_center", "ub_min")


class SelectionError(ValueError):
    pass


@dataclass(frozen=True)
class PoolPredictions:
    indices: np.ndarray  # (m,) global dataset indices
    means: np.ndarray  # (m, C)
    epistemic_sd: np.ndarray  # (m, C)

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64).reshape(-1)
        means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        sd = np.atleast_2d(np.asarray(self.epistemic_sd, dtype=np.float64))
        if idx.size == 0:
            means = means.reshape(0, means.shape[-1] if means.size else 0)
            sd = sd.reshape(means.shape)
        if means.shape[0] != idx.size or sd.shape != means.shape:
            raise SelectionError(
                f"shape mismatch: {idx.size} indices, means {means.shape}, sd {sd.shape}"
            )
        if not (np.all(np.isfinite(means)) and np.all(np.isfinite(sd))):
            raise SelectionError("predictions contain non-finite values")
        if np.any(sd < 0):
            raise SelectionError("epistemic standard deviations must be >= 0")
        if np.unique(idx).size != idx.size:
            raise SelectionError("duplicate indices in predictions")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "epistemic_sd", sd)

    def __len__(self):
        return self.indices.size

    @classmethod
    def from_prediction(cls, indices, prediction) -> "PoolPredictions":
        return cls(indices, prediction.mean, np.sqrt(prediction.epistemic_var))


@dataclass(frozen=True)
class SelectionResult:
    chosen: list
    scores: list = field(default_factory=list)


def _check_budget(B: int):
    if B < 1:
        raise SelectionError(f"budget must be >= 1, got {B}")


def _argmax_low_index(scores: np.ndarray, indices: np.ndarray, alive: np.ndarray) -> int:
    """Position of the largest live score; equal scores resolve to the lowest global index."""
    masked = np.where(alive, scores, -np.inf)
    best = masked.max()
    cands = np.flatnonzero(alive & (masked == best))
    return int(cands[np.argmin(indices[cands])])


def _dist(points: np.ndarray, center: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum((points - center) ** 2, axis=1))


def select_random(subset_indices, B: int, rng: np.random.Generator) -> SelectionResult:
    _check_budget(B)
    subset = np.asarray(subset_indices, dtype=np.int64).reshape(-1)
    if subset.size == 0:
        raise SelectionError("empty candidate subset")
    picked = rng.choice(subset, size=min(B, subset.size), replace=False)
    return SelectionResult([int(i) for i in picked])


def select_uncertainty(pool: PoolPredictions, B: int) -> SelectionResult:
    """Top-B rows by summed epistemic standard deviation."""
    _check_budget(B)
    if len(pool) == 0:
        raise SelectionError("empty pool")
    score = pool.epistemic_sd.sum(axis=1)
    order = np.lexsort((pool.indices, -score))[: min(B, len(pool))]
    return SelectionResult([int(pool.indices[i]) for i in order], [float(score[i]) for i in order])


def _check_sets(labeled: PoolPredictions, pool: PoolPredictions, B: int):
    _check_budget(B)
    if labeled is None or len(labeled) == 0:
        raise SelectionError("labeled set is empty; k-center selection needs initial centers")
    if len(pool) == 0:
        raise SelectionError("empty pool")
    if labeled.means.shape[1] != pool.means.shape[1]:
        raise SelectionError("labeled and pool predictions have different widths")


def _nearest(points: np.ndarray, centers: np.ndarray, center_ids: np.ndarray):
    """Min distance and nearest-center id (ties to the lower id) for each point."""
    dmin = np.full(points.shape[0], np.inf)
    arg = np.full(points.shape[0], np.iinfo(np.int64).max)
    for c, cid in sorted(zip(range(len(center_ids)), center_ids), key=lambda t: t[1]):
        d = _dist(points, centers[c])
        closer = d < dmin
        dmin = np.where(closer, d, dmin)
        arg = np.where(closer, cid, arg)
    return dmin, arg


def min_center_distances(labeled: PoolPredictions, pool: PoolPredictions) -> np.ndarray:
    """Distance from each pool row's mean to its nearest labeled mean."""
    return _nearest(pool.means, labeled.means, labeled.indices)[0]


def select_coreset(labeled: PoolPredictions, pool: PoolPredictions, B: int) -> SelectionResult:
    """k-Center Greedy on predicted means.

    Each pool row caches its distance to the nearest center, refreshed against
    the newly added center only.
    """
    _check_sets(labeled, pool, B)
    dmin, _ = _nearest(pool.means, labeled.means, labeled.indices)
    alive = np.ones(len(pool), dtype=bool)
    chosen, scores = [], []
    for _ in range(min(B, len(pool))):
        b = _argmax_low_index(dmin, pool.indices, alive)
        chosen.append(int(pool.indices[b]))
        scores.append(float(dmin[b]))
        alive[b] = False
        dmin = np.minimum(dmin, _dist(pool.means, pool.means[b]))
    return SelectionResult(chosen, scores)


def select_cke(
    labeled: PoolPredictions,
    pool: PoolPredictions,
    B: int,
    eta: float = 0.3,
    line6: str = "lb_center",
) -> SelectionResult:
    """k-Center Greedy with points shifted by +/- eta/2 epistemic deviations.

    For every pool row, the nearest center is found among the downward-shifted
    points (``mean - eta/2 sd``); its score is the distance between the
    upward-shifted (``mean + eta/2 sd``) versions of the row and that center.
    ``line6="ub_min"`` scores by the minimum upward-shifted distance instead.
    """
    _check_sets(labeled, pool, B)
    if not eta >= 0:
        raise SelectionError(f"eta must be >= 0, got {eta}")
    if line6 not in LINE6_READINGS:
        raise SelectionError(f"line6 must be one of {LINE6_READINGS}, got {line6!r}")
    h = eta / 2.0
    lab_ub = labeled.means + h * labeled.epistemic_sd
    lab_lb = labeled.means - h * labeled.epistemic_sd
    ub = pool.means + h * pool.epistemic_sd
    lb = pool.means - h * pool.epistemic_sd

    if line6 == "ub_min":
        score, _ = _nearest(ub, lab_ub, labeled.indices)
    else:
        lb_min, lb_arg = _nearest(lb, lab_lb, labeled.indices)
        # upper-bound distance to the lower-bound nearest center
        pos = {int(g): p for p, g in enumerate(labeled.indices)}
        lb_pos = np.array([pos[int(g)] for g in lb_arg])
        score = np.sqrt(np.sum((ub - lab_ub[lb_pos]) ** 2, axis=1))

    alive = np.ones(len(pool), dtype=bool)
    chosen, scores = [], []
    for _ in range(min(B, len(pool))):
        b = _argmax_low_index(score, pool.indices, alive)
        gidx = int(pool.indices[b])
        chosen.append(gidx)
        scores.append(float(score[b]))
        alive[b] = False
        d_ub = _dist(ub, ub[b])
        if line6 == "ub_min":
            score = np.minimum(score, d_ub)
            continue
        d_lb = _dist(lb, lb[b])
        moved = (d_lb < lb_min) | ((d_lb == lb_min) & (gidx < lb_arg))
        lb_min = np.where(moved, d_lb, lb_min)
        lb_arg = np.where(moved, gidx, lb_arg)
        score = np.where(moved, d_ub, score)
    return SelectionResult(chosen, scores)


def brute_force_coreset(labeled: PoolPredictions, pool: PoolPredictions, B: int) -> list:
    """Reference k-Center Greedy that recomputes every distance from scratch each step."""
    centers = [labeled.means[i] for i in range(len(labeled))]
    remaining = list(range(len(pool)))
    chosen = []
    for _ in range(min(B, len(pool))):
        best, best_score = None, -1.0
        for i in sorted(remaining, key=lambda r: pool.indices[r]):
            score = min(float(np.linalg.norm(pool.means[i] - c)) for c in centers)
            if score > best_score:
                best, best_score = i, score
        chosen.append(int(pool.indices[best]))
        centers.append(pool.means[best])
        remaining.remove(best)
    return chosen


def select(
    strategy: str,
    labeled: PoolPredictions | None,
    pool: PoolPredictions,
    B: int,
    *,
    eta: float = 0.3,
    line6: str = "lb_center",
    rng: np.random.Generator | None = None,
) -> SelectionResult:
    if strategy == "random":
        if rng is None:
            raise SelectionError("random selection needs an rng")
        return select_random(pool.indices, B, rng)
    if strategy == "uncertainty":
        return select_uncertainty(pool, B)
    if strategy == "coreset":
        return select_coreset(labeled, pool, B)
    if strategy == "cke":
        return select_cke(labeled, pool, B, eta, line6)
    raise SelectionError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")


# -- predictions file ---------------------------------------------------------
# Header ``C=<int>``; each row: index, labeled flag (1 labeled / 0 pool),
# C mean values, C epistemic standard deviations.


def save_pool_predictions(path, labeled: PoolPredictions | None, pool: PoolPredictions) -> None:
    C = pool.means.shape[1]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"C={C}\n")
        for flag, part in ((1, labeled), (0, pool)):
            if part is None:
                continue
            for i in range(len(part)):
                vals = [repr(float(v)) for v in part.means[i]] + [repr(float(v)) for v in part.epistemic_sd[i]]
                fh.write(f"{int(part.indices[i])},{flag}," + ",".join(vals) + "\n")


def load_pool_predictions(path) -> tuple[PoolPredictions, PoolPredictions]:
    """Return ``(labeled, pool)`` predictions read from ``path``."""
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"predictions file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        C = _parse_header(fh.readline(), ("C",), path)["C"]
    if C < 1:
        raise DatasetError(f"{path}:1: C must be positive")
    rows = read_numeric_rows(path, 2 + 2 * C)
    for lineno, row in enumerate(rows, start=2):
        if row[0] != int(row[0]) or row[1] not in (0.0, 1.0):
            raise DatasetError(f"{path}:{lineno}: index must be an integer and flag 0 or 1")
    flag = rows[:, 1] == 1.0

    def part(mask):
        r = rows[mask]
        return PoolPredictions(r[:, 0].astype(np.int64), r[:, 2 : 2 + C], r[:, 2 + C :])

    return part(flag), part(~flag)
