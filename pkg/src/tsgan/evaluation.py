"""Thresholding, classification metrics, and cross-dataset model comparison."""
from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.stats import rankdata

METRICS = ("accuracy", "precision", "recall", "f1", "cohen_kappa", "auc")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass
class EvalReport:
    model: str
    dataset: str
    threshold: float
    accuracy: float
    precision: float
    recall: float
    f1: float
    cohen_kappa: float
    auc: float
    counts: Optional[ConfusionCounts] = None

    def metric(self, name: str) -> float:
        if name not in METRICS:
            raise KeyError(f"unknown metric {name!r}; choose from {METRICS}")
        return getattr(self, name)


@dataclass
class ThresholdStrategy:
    kind: str               # "quantile" or "bestf1"
    q: float = 0.99

    @classmethod
    def parse(cls, text: str) -> "ThresholdStrategy":
        text = text.strip().lower()
        if text in ("bestf1", "best_f1"):
            return cls("bestf1")
        if text.startswith("quantile"):
            _, _, q = text.partition(":")
            q = float(q) if q else 0.99
            if not 0.0 <= q <= 1.0:
                raise ValueError(f"quantile must lie in [0, 1], got {q}")
            return cls("quantile", q)
        raise ValueError(f"unknown threshold strategy {text!r} (use quantile:Q or bestf1)")

    def __str__(self):
        return "bestf1" if self.kind == "bestf1" else f"quantile:{self.q}"


def _scores_of(scores) -> np.ndarray:
    return np.asarray(getattr(scores, "scores", scores), dtype=np.float64)


def confusion_counts(y_true, y_pred) -> ConfusionCounts:
    t = np.asarray(y_true).astype(bool)
    p = np.asarray(y_pred).astype(bool)
    return ConfusionCounts(int(np.sum(t & p)), int(np.sum(~t & p)),
                           int(np.sum(~t & ~p)), int(np.sum(t & ~p)))


def f1_from_counts(c: ConfusionCounts) -> float:
    pr = c.tp / (c.tp + c.fp) if c.tp + c.fp else 0.0
    re = c.tp / (c.tp + c.fn) if c.tp + c.fn else 0.0
    return 2 * pr * re / (pr + re) if pr + re else 0.0


def apply_threshold(scores, strategy, labels=None) -> tuple[np.ndarray, float]:
    """Binary predictions ``score > threshold`` and the threshold used.

    ``bestf1`` tries every distinct score as the threshold and keeps the
    lowest one reaching the maximal F1 against ``labels``.
    """
    s = _scores_of(scores)
    if s.size == 0:
        raise ValueError("cannot threshold an empty score series")
    if isinstance(strategy, str):
        strategy = ThresholdStrategy.parse(strategy)
    if strategy.kind == "quantile":
        thr = float(np.quantile(s, strategy.q))
    else:
        if labels is None:
            raise ValueError("bestf1 thresholding needs ground-truth labels")
        y = np.asarray(labels)
        if len(y) != len(s):
            raise ValueError("labels and scores differ in length")
        best_f1, thr = -1.0, None
        for cand in np.unique(s):  # ascending, so ties keep the lowest
            f1 = f1_from_counts(confusion_counts(y, s > cand))
            if f1 > best_f1:
                best_f1, thr = f1, float(cand)
    return (s > thr).astype(np.int64), thr


def roc_auc(y_true, scores) -> float:
    """Trapezoidal area under the ROC curve, tied scores grouped into one step."""
    y = np.asarray(y_true).astype(bool)
    s = _scores_of(scores)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        return 0.5
    order = np.argsort(-s, kind="stable")
    s_sorted, y_sorted = s[order], y[order]
    # last index of each group of equal scores
    ends = np.r_[np.flatnonzero(np.diff(s_sorted) != 0), len(s) - 1]
    tps = np.r_[0, np.cumsum(y_sorted)[ends]]
    fps = np.r_[0, ends + 1] - tps
    # integer trapezoids, one division at the end, so perfect rankings give exactly 1
    twice_area = int(np.sum(np.diff(fps) * (tps[1:] + tps[:-1])))
    return twice_area / (2 * n_pos * n_neg)


def compute_metrics(y_true, y_pred, scores, model: str = "", dataset: str = "",
                    threshold: float = float("nan")) -> EvalReport:
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if len(y_true) == 0 or len(y_true) != len(y_pred) or len(y_true) != len(_scores_of(scores)):
        raise ValueError("labels, predictions and scores must have equal non-zero length")
    c = confusion_counts(y_true, y_pred)
    n = c.total
    acc = (c.tp + c.tn) / n
    pr = c.tp / (c.tp + c.fp) if c.tp + c.fp else 0.0
    re = c.tp / (c.tp + c.fn) if c.tp + c.fn else 0.0
    f1 = 2 * pr * re / (pr + re) if pr + re else 0.0
    p_e = ((c.tp + c.fp) * (c.tp + c.fn) + (c.fn + c.tn) * (c.fp + c.tn)) / (n * n)
    ck = (acc - p_e) / (1.0 - p_e) if p_e != 1.0 else 0.0
    return EvalReport(model, dataset, threshold, acc, pr, re, f1, ck,
                      roc_auc(y_true, scores), counts=c)


def evaluate(scores, labels, strategy, model: str = "", dataset: str = "") -> EvalReport:
    preds, thr = apply_threshold(scores, strategy, labels)
    return compute_metrics(labels, preds, scores, model=model, dataset=dataset, threshold=thr)


# --- comparison across datasets ---------------------------------------------------

@dataclass
class RankTable:
    rank_sums: dict = field(default_factory=dict)     # (model, metric) -> float
    per_dataset: dict = field(default_factory=dict)   # (dataset, metric) -> {model: rank}
    pairwise: dict = field(default_factory=dict)      # (model_a, model_b) -> (wins, losses, ties)
    pair_metric: str = "f1"

    def models(self) -> list[str]:
        return sorted({m for m, _ in self.rank_sums})

    def metrics(self) -> list[str]:
        seen = []
        for _, metric in self.rank_sums:
            if metric not in seen:
                seen.append(metric)
        return seen


def _grid(reports: Iterable[EvalReport]) -> tuple[dict, list, list]:
    cells = {}
    for r in reports:
        cells[(r.model, r.dataset)] = r
    models = sorted({m for m, _ in cells})
    datasets = sorted({d for _, d in cells})
    return cells, models, datasets


def cumulative_ranking(reports: Sequence[EvalReport], metric: str,
                       table: Optional[RankTable] = None) -> RankTable:
    """Rank models per dataset (1 = best, ties averaged) and sum ranks per model."""
    cells, models, datasets = _grid(reports)
    gaps = [(m, d) for m in models for d in datasets if (m, d) not in cells]
    if gaps:
        raise ValueError(f"missing (model, dataset) reports: {gaps}")
    table = table if table is not None else RankTable()
    sums = defaultdict(float)
    for d in datasets:
        values = np.array([cells[(m, d)].metric(metric) for m in models])
        ranks = rankdata(-values, method="average")
        table.per_dataset[(d, metric)] = dict(zip(models, ranks.tolist()))
        for m, r in zip(models, ranks):
            sums[m] += float(r)
    for m in models:
        table.rank_sums[(m, metric)] = sums[m]
    return table


def pairwise_wins(reports: Sequence[EvalReport], model_a: str, model_b: str,
                  metric: str = "f1") -> tuple[int, int, int]:
    cells, _, _ = _grid(reports)
    da = {d for m, d in cells if m == model_a}
    db = {d for m, d in cells if m == model_b}
    if da != db or not da:
        raise ValueError(f"{model_a} and {model_b} cover different datasets: "
                         f"only {model_a}: {sorted(da - db)}, only {model_b}: {sorted(db - da)}")
    wins = losses = ties = 0
    for d in da:
        a, b = cells[(model_a, d)].metric(metric), cells[(model_b, d)].metric(metric)
        if a > b:
            wins += 1
        elif a < b:
            losses += 1
        else:
            ties += 1
    return wins, losses, ties


def build_rank_table(reports: Sequence[EvalReport], metrics: Sequence[str] = METRICS,
                     pair_metric: str = "f1") -> RankTable:
    table = RankTable(pair_metric=pair_metric)
    for metric in metrics:
        cumulative_ranking(reports, metric, table)
    _, models, _ = _grid(reports)
    for a in models:
        for b in models:
            if a != b:
                table.pairwise[(a, b)] = pairwise_wins(reports, a, b, pair_metric)
    return table


# --- CSV export -------------------------------------------------------------------

REPORT_COLUMNS = ["model", "dataset", "threshold"] + list(METRICS)


def write_reports_csv(reports: Sequence[EvalReport], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in sorted(reports, key=lambda r: (r.dataset, r.model)):
            w.writerow([r.model, r.dataset, repr(float(r.threshold))]
                       + [repr(float(r.metric(m))) for m in METRICS])


def read_reports_csv(path) -> list[EvalReport]:
    with open(path, newline="") as fh:
        return [EvalReport(row["model"], row["dataset"], float(row["threshold"]),
                           *(float(row[m]) for m in METRICS))
                for row in csv.DictReader(fh)]


def write_rank_csvs(table: RankTable, rank_path, pairwise_path) -> None:
    with open(rank_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "metric", "rank_sum"])
        for (model, metric), value in sorted(table.rank_sums.items(),
                                             key=lambda kv: (kv[0][1], kv[0][0])):
            w.writerow([model, metric, repr(float(value))])
    with open(pairwise_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model_a", "model_b", "wins", "losses", "ties"])
        for (a, b), (wins, losses, ties) in sorted(table.pairwise.items()):
            w.writerow([a, b, wins, losses, ties])
