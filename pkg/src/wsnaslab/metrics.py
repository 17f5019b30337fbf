"""Ranking metrics between super-net predictions and ground truth.

Sparse variants address near-tie noise: ground-truth accuracies are rounded
to a precision, then records whose accuracy differs from their group's first
(best) member by less than a threshold share a rank. Grouping walks the
descending sort and cuts at the group anchor, so a chain of small gaps does
not merge distant values. The same threshold grouping applies to both sides
of a sparse correlation; with threshold and rounding 0 the sparse metrics
degrade exactly to their plain forms.

Rank convention: rank 1 is the highest accuracy.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats


@dataclass(frozen=True)
class MetricConfig:
    sparse_threshold: float = 0.001   # accuracy units (fractions by default)
    gt_rounding: float = 0.001
    top_k: int = 3
    num_eval_archs: int = 200
    eval_warning_floor: int = 150

    def __post_init__(self):
        if self.sparse_threshold < 0 or self.gt_rounding < 0:
            raise ValueError("threshold and rounding must be non-negative")
        if self.top_k < 1:
            raise ValueError("top_k must be at least 1")
        if self.num_eval_archs < 1:
            raise ValueError("num_eval_archs must be positive")

    def to_dict(self) -> dict:
        return {
            "sparse_threshold": self.sparse_threshold,
            "gt_rounding": self.gt_rounding,
            "top_k": self.top_k,
            "num_eval_archs": self.num_eval_archs,
            "eval_warning_floor": self.eval_warning_floor,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricConfig":
        known = set(cls().to_dict())
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown metric keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class EvalRecord:
    """One architecture's ground truth and per-seed super-net accuracies."""

    arch_hash: str
    gt_accuracy: float
    supernet_accuracies: tuple[float, ...]

    @property
    def supernet_mean(self) -> float:
        return float(np.mean(self.supernet_accuracies))


def round_accuracies(values, precision: float) -> np.ndarray:
    """Round to multiples of `precision` (0 leaves values untouched)."""
    v = np.asarray(values, dtype=np.float64)
    if precision == 0:
        return v
    return np.round(v / precision) * precision


def sparse_ranks(values, threshold: float) -> np.ndarray:
    """Shared ranks for near-tied values, aligned to input order.

    Walk the values in descending order; a value joins the current group
    when  (anchor - value) < threshold  or it equals the anchor exactly,
    where the anchor is the group's first (largest) member. Rank 1 is the
    best group. threshold=0 gives dense ranking of distinct values.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ValueError("sparse_ranks needs a non-empty 1-d array")
    order = np.argsort(-v, kind="stable")
    ranks = np.empty(v.size, dtype=np.int64)
    rank = 0
    anchor = None
    for idx in order:
        if anchor is None or not (v[idx] == anchor or anchor - v[idx] < threshold):
            rank += 1
            anchor = v[idx]
        ranks[idx] = rank
    return ranks


def _clean_pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"paired vectors with equal length required, got {a.shape} and {b.shape}")
    if a.size < 2:
        raise ValueError("rank correlation needs at least two records")
    return a, b


def kendall_tau(a, b) -> float | None:
    """Tie-corrected Kendall tau-b; None when either side is all tied."""
    a, b = _clean_pair(a, b)
    if np.all(a == a[0]) or np.all(b == b[0]):
        return None
    tau = stats.kendalltau(a, b, variant="b").statistic
    return None if np.isnan(tau) else float(tau)


def spearman_rho(a, b) -> float | None:
    """Spearman correlation with average-rank ties; None when degenerate."""
    a, b = _clean_pair(a, b)
    if np.all(a == a[0]) or np.all(b == b[0]):
        return None
    rho = stats.spearmanr(a, b).statistic
    return None if np.isnan(rho) else float(rho)


def _sides(records: list[EvalRecord], config: MetricConfig, sparse: bool) -> tuple[np.ndarray, np.ndarray]:
    sn = np.asarray([r.supernet_mean for r in records], dtype=np.float64)
    gt = np.asarray([r.gt_accuracy for r in records], dtype=np.float64)
    if not sparse:
        return sn, gt
    gt_rounded = round_accuracies(gt, config.gt_rounding)
    # negate: sparse_ranks puts 1 at the best, correlations want "larger is better"
    return (
        -sparse_ranks(sn, config.sparse_threshold).astype(np.float64),
        -sparse_ranks(gt_rounded, config.sparse_threshold).astype(np.float64),
    )


def sparse_kendall_tau(records: list[EvalRecord], config: MetricConfig) -> float | None:
    sn, gt = _sides(records, config, sparse=True)
    return kendall_tau(sn, gt)


def plain_kendall_tau(records: list[EvalRecord], config: MetricConfig) -> float | None:
    sn, gt = _sides(records, config, sparse=False)
    return kendall_tau(sn, gt)


def sparse_spearman(records: list[EvalRecord], config: MetricConfig) -> float | None:
    sn, gt = _sides(records, config, sparse=True)
    return spearman_rho(sn, gt)


def plain_spearman(records: list[EvalRecord], config: MetricConfig) -> float | None:
    sn, gt = _sides(records, config, sparse=False)
    return spearman_rho(sn, gt)


def prob_surpass_random(r: int, r_max: int, n: int) -> float:
    """P(best of n uniform draws ranks above r), r counted from the worst.

    r = r_max is the best architecture; p = 1 - (1 - r / r_max)^n.
    """
    if r_max <= 0:
        raise ValueError("r_max must be positive")
    if not 0 <= r <= r_max:
        raise ValueError(f"rank {r} outside 0..{r_max}")
    if n < 1:
        raise ValueError("n must be at least 1")
    return 1.0 - (1.0 - r / r_max) ** n


def supernet_accuracy(records: list[EvalRecord]) -> float:
    if not records:
        raise ValueError("no records")
    return float(np.mean([r.supernet_mean for r in records]))


def final_performance(records: list[EvalRecord], top_k: int) -> float:
    """Mean ground truth of the top-k by super-net accuracy (ties by hash)."""
    if top_k < 1 or top_k > len(records):
        raise ValueError(f"top_k {top_k} outside 1..{len(records)}")
    chosen = sorted(records, key=lambda r: (-r.supernet_mean, r.arch_hash))[:top_k]
    return float(np.mean([r.gt_accuracy for r in chosen]))


def ordinal_ranks(records: list[EvalRecord], key) -> dict[str, int]:
    """Dense 1..N ranks, descending by key, ties broken by hash."""
    ordered = sorted(records, key=lambda r: (-key(r), r.arch_hash))
    return {r.arch_hash: i + 1 for i, r in enumerate(ordered)}


def rank_disorder(records: list[EvalRecord]) -> list[tuple[str, int, int]]:
    """(arch_hash, gt_rank, supernet_rank) triples for disorder plots."""
    gt = ordinal_ranks(records, lambda r: r.gt_accuracy)
    sn = ordinal_ranks(records, lambda r: r.supernet_mean)
    return [(r.arch_hash, gt[r.arch_hash], sn[r.arch_hash]) for r in sorted(records, key=lambda r: r.arch_hash)]


# ----------------------------------------------------------------- report

REPORT_FIELDS = (
    "kdt",
    "s_kdt",
    "spr",
    "s_spr",
    "p_surpass_random",
    "supernet_accuracy",
    "final_performance",
)

NA = "NA"


@dataclass
class MetricsReport:
    kdt: float | None = None
    s_kdt: float | None = None
    spr: float | None = None
    s_spr: float | None = None
    p_surpass_random: float | None = None
    supernet_accuracy: float | None = None
    final_performance: float | None = None
    extra: dict = field(default_factory=dict)

    def as_row(self) -> list[str]:
        return [NA if getattr(self, f) is None else repr(float(getattr(self, f))) for f in REPORT_FIELDS]

    def save_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(REPORT_FIELDS)
            writer.writerow(self.as_row())

    @classmethod
    def load_csv(cls, path: str | Path) -> "MetricsReport":
        with open(path, newline="") as f:
            reader = csv.reader(f)
            header = next(reader)
            if tuple(header) != REPORT_FIELDS:
                raise ValueError(f"unexpected report columns {header} in {path}")
            row = next(reader)
        values = {f: (None if v == NA else float(v)) for f, v in zip(REPORT_FIELDS, row)}
        return cls(**values)


def compute_report(
    records: list[EvalRecord],
    config: MetricConfig,
    surpass: tuple[int, int, int] | None = None,
) -> MetricsReport:
    """All seven metric fields from evaluation records.

    surpass = (r, r_max, n) feeds p_surpass_random; None leaves it NA.
    Correlations on fewer than two records are NA.
    """
    report = MetricsReport()
    if records:
        report.supernet_accuracy = supernet_accuracy(records)
        if len(records) >= config.top_k:
            report.final_performance = final_performance(records, config.top_k)
    if len(records) >= 2:
        report.kdt = plain_kendall_tau(records, config)
        report.s_kdt = sparse_kendall_tau(records, config)
        report.spr = plain_spearman(records, config)
        report.s_spr = sparse_spearman(records, config)
    if surpass is not None:
        report.p_surpass_random = prob_surpass_random(*surpass)
    return report


def metric_correlation(rows: list[dict], fields: tuple[str, ...] = ("supernet_accuracy", "s_kdt", "final_performance")) -> dict:
    """Pairwise Spearman between metric columns across sweep rows.

    Needs at least three rows; constant or missing columns give None.
    """
    if len(rows) < 3:
        raise ValueError("metric correlation needs at least three rows")
    out: dict[str, float | None] = {}
    for i, a in enumerate(fields):
        for b in fields[i + 1 :]:
            pairs = [(row[a], row[b]) for row in rows if row.get(a) is not None and row.get(b) is not None]
            if len(pairs) < 3:
                out[f"{a}~{b}"] = None
                continue
            va = np.asarray([p[0] for p in pairs])
            vb = np.asarray([p[1] for p in pairs])
            out[f"{a}~{b}"] = spearman_rho(va, vb)
    return out
