"""Evaluation quantities: overlap, boundary distance, calibration,
uncertainty-vs-quality statistics and lesion-load stratification."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree
from scipy.special import ndtr

from maxent_seg.losses import binary_entropy
from maxent_seg.volume import BinaryMask, ProbMap, _require_same_dims, threshold

CONVENTIONS = ("positive_prob", "max_prob")
OUTCOMES = ("TP", "TN", "FP", "FN")


def dice(G: BinaryMask, P: BinaryMask) -> float:
    """Dice overlap; two empty masks score 1."""
    _require_same_dims(G, P)
    g, p = G.data, P.data
    denom = int(np.count_nonzero(g)) + int(np.count_nonzero(p))
    if denom == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(g & p)) / denom


def boundary(m: BinaryMask) -> np.ndarray:
    """Foreground voxels with a face neighbour outside the mask.

    Axes of extent 1 are ignored so a single-slice grid gets in-plane
    boundaries; the grid border counts as background.
    """
    active = [d > 1 for d in m.dims]
    structure = np.zeros((3, 3, 3), dtype=bool)
    structure[1, 1, 1] = True
    for axis, on in enumerate(active):
        if on:
            idx = [1, 1, 1]
            for k in (0, 2):
                idx[axis] = k
                structure[tuple(idx)] = True
    eroded = ndimage.binary_erosion(m.data, structure=structure, border_value=0)
    if not any(active):
        eroded = np.zeros_like(m.data)
    return m.data & ~eroded


def _directed_distances(src: np.ndarray, dst: np.ndarray, spacing) -> np.ndarray:
    scale = np.asarray(spacing, dtype=np.float64)
    a = np.argwhere(src) * scale
    b = np.argwhere(dst) * scale
    d, _ = cKDTree(b).query(a, k=1)
    return d


def hausdorff(G: BinaryMask, P: BinaryMask, percentile: float = 100.0) -> float:
    """Symmetric boundary Hausdorff distance in mm.

    With ``percentile < 100`` each directed distance pool is summarized by
    that percentile before taking the maximum (e.g. HD95).
    """
    _require_same_dims(G, P)
    if G.spacing != P.spacing:
        raise ValueError("spacing mismatch")
    if not 0 < percentile <= 100:
        raise ValueError("percentile must be in (0, 100]")
    if G.count == 0 or P.count == 0:
        raise ValueError("Hausdorff distance is undefined for an empty mask")
    bg, bp = boundary(G), boundary(P)
    d_gp = _directed_distances(bg, bp, G.spacing)
    d_pg = _directed_distances(bp, bg, G.spacing)
    if percentile == 100:
        return float(max(d_gp.max(), d_pg.max()))
    return float(max(np.percentile(d_gp, percentile), np.percentile(d_pg, percentile)))


@dataclass
class CalibrationBin:
    lower: float
    upper: float
    count: int
    mean_confidence: float | None
    fraction_positive: float | None


@dataclass
class CalibrationTable:
    bins: list[CalibrationBin]
    ece: float
    convention: str
    n: int

    def to_dict(self) -> dict:
        return asdict(self)


def _bin_edges(M: int, lo: float) -> list[float]:
    return [lo + (1.0 - lo) * m / M for m in range(M + 1)]


def _bin_index(conf: np.ndarray, M: int, lo: float) -> np.ndarray:
    # compare against the stored edges; dividing by the width misplaces values such as 0.3 and 0.9
    inner = np.asarray(_bin_edges(M, lo)[1:-1])
    return np.searchsorted(inner, conf, side="right").astype(np.int64)


def ece(probs, labels, M: int = 10, convention: str = "positive_prob") -> CalibrationTable:
    """Expected calibration error over ``M`` equal-width bins.

    ``positive_prob`` bins the foreground probability and compares its bin
    mean with the fraction of positive labels (the reliability-plot reading).
    ``max_prob`` bins the winning-class confidence over [0.5, 1] and compares
    it with the fraction of correctly classified voxels. The top bin is
    closed.
    """
    p = np.asarray(probs, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if p.size != y.size:
        raise ValueError("probs and labels differ in length")
    if p.size == 0:
        raise ValueError("ece needs at least one prediction")
    if np.any(p < 0) or np.any(p > 1):
        raise ValueError("probabilities must lie in [0, 1]")
    if convention == "positive_prob":
        conf, hit, lo = p, y, 0.0
    elif convention == "max_prob":
        conf = np.maximum(p, 1.0 - p)
        hit = (p > 0.5) == y
        lo = 0.5
    else:
        raise ValueError(f"convention must be one of {CONVENTIONS}")
    idx = _bin_index(conf, M, lo)
    edges = _bin_edges(M, lo)
    counts = np.bincount(idx, minlength=M)
    n = p.size
    bins = []
    gaps = []
    for m in range(M):
        lower, upper = edges[m], edges[m + 1]
        if counts[m] == 0:
            bins.append(CalibrationBin(lower, upper, 0, None, None))
            continue
        sel = idx == m
        c = math.fsum(conf[sel]) / counts[m]
        a = int(np.count_nonzero(hit[sel])) / counts[m]
        bins.append(CalibrationBin(lower, upper, int(counts[m]), c, a))
        gaps.append(counts[m] / n * abs(a - c))
    return CalibrationTable(bins, float(math.fsum(gaps)), convention, int(n))


def reliability_points(table: CalibrationTable) -> list[tuple[float, float, int]]:
    return [(b.mean_confidence, b.fraction_positive, b.count) for b in table.bins if b.count > 0]


def mean_foreground_entropy(Y: ProbMap, t: float = 0.5) -> float | None:
    """Mean voxel entropy over predicted foreground, ``None`` if there is none."""
    fg = Y.data > t
    if not fg.any():
        return None
    return math.fsum(binary_entropy(Y.data[fg])) / int(np.count_nonzero(fg))


def pearson_r(xs, ys) -> float:
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("pearson_r needs two 1D sequences of equal length")
    if x.size < 2:
        raise ValueError("pearson_r needs at least two points")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = math.fsum(dx * dx)
    syy = math.fsum(dy * dy)
    if sxx == 0 or syy == 0:
        raise ValueError("pearson_r is undefined for zero variance")
    r = math.fsum(dx * dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


@dataclass
class MannWhitneyResult:
    U: float
    p_value: float
    method: str


def _midranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(values.size, dtype=np.float64)
    sv = values[order]
    i = 0
    while i < sv.size:
        j = i
        while j + 1 < sv.size and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _exact_two_sided(twice_ranks: np.ndarray, na: int, observed_twice_sum: int) -> float:
    """Permutation p-value of the rank sum, counting subsets by dynamic programming.

    Works on doubled midranks so ties stay integral.
    """
    n = twice_ranks.size
    total = int(twice_ranks.sum())
    # counts[k][s]: number of size-k subsets with doubled rank sum s
    counts = [dict() for _ in range(na + 1)]
    counts[0][0] = 1
    for r in twice_ranks.tolist():
        for k in range(na, 0, -1):
            cur = counts[k]
            for s, c in counts[k - 1].items():
                cur[s + r] = cur.get(s + r, 0) + c
    # compare |s - na*total/n| scaled by n to stay in integers
    obs = abs(observed_twice_sum * n - na * total)
    hits = sum(c for s, c in counts[na].items() if abs(s * n - na * total) >= obs)
    return hits / math.comb(n, na)


def mann_whitney_u(a, b, method: str = "auto", exact_max_n: int = 20) -> MannWhitneyResult:
    """Two-sided Mann-Whitney U test.

    ``U`` counts pairs with ``a > b`` plus half the ties. The p-value is the
    exact permutation probability when ``len(a) + len(b) <= exact_max_n`` (or
    ``method='exact'``), otherwise the normal approximation with tie-corrected
    variance and continuity correction.
    """
    x = np.asarray(a, dtype=np.float64).ravel()
    y = np.asarray(b, dtype=np.float64).ravel()
    na, nb = x.size, y.size
    if na == 0 or nb == 0:
        raise ValueError("both groups must be non-empty")
    if method not in ("auto", "exact", "asymptotic"):
        raise ValueError(f"unknown method {method!r}")
    pooled = np.concatenate([x, y])
    ranks = _midranks(pooled)
    n = na + nb
    rank_sum_a = math.fsum(ranks[:na])
    U = rank_sum_a - na * (na + 1) / 2.0
    if method == "exact" or (method == "auto" and n <= exact_max_n):
        twice = np.rint(2 * ranks).astype(np.int64)
        p = _exact_two_sided(twice, na, int(twice[:na].sum()))
        return MannWhitneyResult(float(U), min(1.0, p), "exact")
    mu = na * nb / 2.0
    _, tie_counts = np.unique(pooled, return_counts=True)
    tie_term = float(np.sum(tie_counts.astype(np.float64) ** 3 - tie_counts)) / (n * (n - 1))
    var = na * nb / 12.0 * ((n + 1) - tie_term)
    if var <= 0:
        return MannWhitneyResult(float(U), 1.0, "asymptotic")
    z = max(abs(U - mu) - 0.5, 0.0) / math.sqrt(var)
    p = 2.0 * ndtr(-z)
    return MannWhitneyResult(float(U), float(min(1.0, p)), "asymptotic")


@dataclass
class EntropyStats:
    count: int
    median: float | None = None
    q1: float | None = None
    q3: float | None = None

    @classmethod
    def of(cls, values: np.ndarray) -> "EntropyStats":
        if values.size == 0:
            return cls(0)
        q1, med, q3 = np.percentile(values, [25, 50, 75])
        return cls(int(values.size), float(med), float(q1), float(q3))


@dataclass
class OutcomeBreakdown:
    stats: dict[str, EntropyStats] = field(default_factory=dict)

    @property
    def counts(self) -> dict[str, int]:
        return {k: v.count for k, v in self.stats.items()}

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def to_dict(self) -> dict:
        return {k: asdict(v) for k, v in self.stats.items()}


def outcome_entropies(Y: ProbMap, gt: BinaryMask, t: float = 0.5) -> dict[str, np.ndarray]:
    """Voxel entropies grouped by TP/TN/FP/FN."""
    _require_same_dims(Y, gt)
    pred = threshold(Y, t).data
    g = gt.data
    h = binary_entropy(Y.data)
    masks = {"TP": pred & g, "TN": ~pred & ~g, "FP": pred & ~g, "FN": ~pred & g}
    return {k: h[m] for k, m in masks.items()}


def breakdown_from_entropies(groups: dict[str, list[np.ndarray]] | dict[str, np.ndarray]) -> OutcomeBreakdown:
    stats = {}
    for k in OUTCOMES:
        v = groups.get(k, np.empty(0))
        if isinstance(v, list):
            v = np.concatenate(v) if v else np.empty(0)
        stats[k] = EntropyStats.of(np.asarray(v, dtype=np.float64))
    return OutcomeBreakdown(stats)


def confusion_outcomes(Y: ProbMap, gt: BinaryMask, t: float = 0.5) -> OutcomeBreakdown:
    return breakdown_from_entropies(outcome_entropies(Y, gt, t))


@dataclass
class ScanReport:
    scan_id: str
    dice: float
    hausdorff_mm: float | None
    mean_foreground_entropy: float | None
    total_lesion_load_mL: float
    domain: str = "ID"

    def __post_init__(self):
        if not 0.0 <= self.dice <= 1.0:
            raise ValueError("dice must be in [0, 1]")
        if self.hausdorff_mm is not None and self.hausdorff_mm < 0:
            raise ValueError("hausdorff must be non-negative")


STRATA = ("small", "medium", "large")


def stratify_by_lesion_load(reports, thresholds_mL=(5.0, 15.0)) -> dict[str, list]:
    """Split scans into ``< lo``, ``[lo, hi]`` and ``> hi`` mL of lesion load."""
    lo, hi = thresholds_mL
    groups = {k: [] for k in STRATA}
    for r in reports:
        load = r.total_lesion_load_mL
        if load < lo:
            groups["small"].append(r)
        elif load <= hi:
            groups["medium"].append(r)
        else:
            groups["large"].append(r)
    return groups
