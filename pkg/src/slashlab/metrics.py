"""Segmentation metrics: Hungarian matching, ARI / fg-ARI, mIoU, seed aggregation.

All functions take integer label maps (any shape; flattened internally where a
partition is all that matters). Background is label 0 by convention.
"""

import threading
from dataclasses import dataclass, field

import numpy as np

METRIC_NAMES = ("ari", "fg_ari", "miou")

_counter_lock = threading.Lock()
counters = {"fg_ari_no_foreground": 0}


def reset_counters():
    with _counter_lock:
        for key in counters:
            counters[key] = 0


def _bump(key):
    with _counter_lock:
        counters[key] += 1


@dataclass(frozen=True)
class Segmentation:
    """An integer label map. Label 0 is background for fg-aware metrics."""

    labels: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.labels)
        if not np.issubdtype(arr.dtype, np.integer):
            raise ValueError(f"segmentation labels must be integers, got {arr.dtype}")
        if arr.size and arr.min() < 0:
            raise ValueError("segmentation labels must be nonnegative")
        object.__setattr__(self, "labels", arr)

    @property
    def num_segments(self):
        return len(np.unique(self.labels))


def _labels(seg) -> np.ndarray:
    arr = seg.labels if isinstance(seg, Segmentation) else np.asarray(seg)
    if not np.issubdtype(arr.dtype, np.integer):
        raise ValueError(f"expected integer labels, got {arr.dtype}")
    return arr


def hungarian(cost) -> list:
    """Minimum-cost assignment: list of (row, col) pairs, min(rows, cols) of them.

    Rectangular inputs are padded to square with a constant strictly above every
    real entry; since every dummy row/col contributes that same constant to any
    full assignment, the restriction to real pairs stays optimal.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] == 0 or c.shape[1] == 0:
        raise ValueError(f"cost matrix must be 2-D and nonempty, got shape {c.shape}")
    if not np.isfinite(c).all():
        raise ValueError("cost matrix contains non-finite entries")
    rows, cols = c.shape
    n = max(rows, cols)
    sq = np.full((n, n), c.max() + 1.0)
    sq[:rows, :cols] = c

    # shortest-augmenting-path form with row/col potentials, O(n^3)
    inf = float("inf")
    u = [0.0] * (n + 1)
    v = [0.0] * (n + 1)
    row_for_col = [0] * (n + 1)  # 1-based; 0 = unassigned
    for i in range(1, n + 1):
        row_for_col[0] = i
        j0 = 0
        minv = [inf] * (n + 1)
        way = [0] * (n + 1)
        used = [False] * (n + 1)
        while True:
            used[j0] = True
            i0 = row_for_col[j0]
            delta = inf
            j1 = 0
            for j in range(1, n + 1):
                if used[j]:
                    continue
                cur = sq[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[row_for_col[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if row_for_col[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            row_for_col[j0] = row_for_col[j1]
            j0 = j1

    pairs = [(row_for_col[j] - 1, j - 1) for j in range(1, n + 1)
             if row_for_col[j] - 1 < rows and j - 1 < cols]
    pairs.sort()
    return pairs


def _comb2(x):
    x = np.asarray(x, dtype=np.int64)
    return x * (x - 1) // 2


def _canonical_partition(inverse):
    """Relabel cluster ids by first occurrence so identical partitions compare equal."""
    remap = {}
    out = np.empty_like(inverse)
    for pos, cid in enumerate(inverse):
        if cid not in remap:
            remap[cid] = len(remap)
        out[pos] = remap[cid]
    return out


def ari(pred, gt) -> float:
    """Adjusted Rand index over all pixels, from the contingency table."""
    p = _labels(pred).ravel()
    g = _labels(gt).ravel()
    if p.shape != g.shape:
        raise ValueError(f"label maps differ in size: {p.shape} vs {g.shape}")
    n = p.size
    if n == 0:
        raise ValueError("empty label map")
    _, pi = np.unique(p, return_inverse=True)
    _, gi = np.unique(g, return_inverse=True)
    table = np.zeros((pi.max() + 1, gi.max() + 1), dtype=np.int64)
    np.add.at(table, (pi, gi), 1)

    pair_index = int(_comb2(table).sum())
    sum_rows = int(_comb2(table.sum(axis=1)).sum())
    sum_cols = int(_comb2(table.sum(axis=0)).sum())
    total_pairs = int(_comb2(n))
    if total_pairs == 0:
        return 1.0  # single pixel: both partitions are the same trivial partition
    expected = sum_rows * sum_cols / total_pairs
    max_index = (sum_rows + sum_cols) / 2.0
    denom = max_index - expected
    if denom == 0.0:
        # trivial partitions (all-one-cluster / all-singletons on both sides)
        same = np.array_equal(_canonical_partition(pi), _canonical_partition(gi))
        return 1.0 if same else 0.0
    return (pair_index - expected) / denom


def fg_ari(pred, gt) -> float:
    """ARI restricted to foreground pixels (gt label != 0).

    No foreground at all gives NaN and bumps counters["fg_ari_no_foreground"];
    callers drop NaN from aggregates.
    """
    p = _labels(pred).ravel()
    g = _labels(gt).ravel()
    if p.shape != g.shape:
        raise ValueError(f"label maps differ in size: {p.shape} vs {g.shape}")
    mask = g != 0
    if not mask.any():
        _bump("fg_ari_no_foreground")
        return float("nan")
    return ari(p[mask], g[mask])


def _iou_matrix(p, g):
    pu, pi = np.unique(p, return_inverse=True)
    gu, gi = np.unique(g, return_inverse=True)
    inter = np.zeros((len(pu), len(gu)), dtype=np.int64)
    np.add.at(inter, (pi, gi), 1)
    area_p = inter.sum(axis=1)
    area_g = inter.sum(axis=0)
    union = area_p[:, None] + area_g[None, :] - inter
    return inter / union


def miou(pred, gt) -> float:
    """Mean IoU over ground-truth segments, background included as a segment.

    Predicted and gt segments are matched one-to-one by Hungarian on 1 - IoU;
    gt segments left unmatched (fewer predicted segments) contribute 0.
    """
    p = _labels(pred).ravel()
    g = _labels(gt).ravel()
    if p.shape != g.shape:
        raise ValueError(f"label maps differ in size: {p.shape} vs {g.shape}")
    iou = _iou_matrix(p, g)
    pairs = hungarian(1.0 - iou)
    matched = sum(iou[i, j] for i, j in pairs)
    return float(matched / iou.shape[1])


def segmentation_scores(pred, gt) -> dict:
    """All three segmentation metrics for one (pred, gt) pair."""
    return {"ari": ari(pred, gt), "fg_ari": fg_ari(pred, gt), "miou": miou(pred, gt)}


@dataclass
class MetricReport:
    """Per-seed metric records plus mean and population std across seeds."""

    per_seed: list
    mean: dict = field(default_factory=dict)
    std: dict = field(default_factory=dict)

    def to_text(self) -> str:
        lines = []
        for record in self.per_seed:
            parts = [f"seed={record['seed']}"]
            parts += [f"{k}={record[k]:.6f}" for k in METRIC_NAMES if k in record]
            lines.append(" ".join(parts))
        lines.append(" ".join(["mean"] + [f"{k}={self.mean[k]:.6f}" for k in METRIC_NAMES if k in self.mean]))
        lines.append(" ".join(["std"] + [f"{k}={self.std[k]:.6f}" for k in METRIC_NAMES if k in self.std]))
        return "\n".join(lines)

    def to_csv(self) -> str:
        keys = [k for k in METRIC_NAMES if self.per_seed and k in self.per_seed[0]]
        lines = ["seed," + ",".join(keys)]
        for record in self.per_seed:
            lines.append(",".join([str(record["seed"])] + [repr(float(record[k])) for k in keys]))
        lines.append(",".join(["mean"] + [repr(float(self.mean[k])) for k in keys]))
        lines.append(",".join(["std"] + [repr(float(self.std[k])) for k in keys]))
        return "\n".join(lines) + "\n"


def aggregate_seeds(records: list) -> MetricReport:
    """Mean and population std (ddof=0) per metric across per-seed records.

    Each record is a dict with at least "seed" plus metric values. NaNs are not
    silently dropped here; per-sample NaN exclusion happens during evaluation.
    """
    if not records:
        raise ValueError("need at least one seed record")
    keys = [k for k in METRIC_NAMES if k in records[0]]
    mean = {}
    std = {}
    for k in keys:
        vals = np.array([r[k] for r in records], dtype=np.float64)
        mean[k] = float(vals.mean())
        std[k] = float(vals.std(ddof=0))
    return MetricReport(per_seed=list(records), mean=mean, std=std)
