"""Detection metrics, confusion matrices and localization error statistics.

Detection outcomes are counted per AP: a trial contributes one of TP, FP, FN
or TN for every AP, and precision/recall/F1 are micro-averaged over APs.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .locate import MatchDatabase, as_database
from .model import CrislocError, Fingerprint, Position, RadioMap, mw_to_dbm

NONE_ROW = "none"


@dataclass
class Counts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass
class DetectionCounts:
    per_ap: dict[str, Counts] = field(default_factory=dict)

    @classmethod
    def from_trials(cls, trials: Iterable[tuple[Iterable[str], Iterable[str]]],
                    ap_ids: Sequence[str]) -> "DetectionCounts":
        """``trials`` yields (truly altered, alarmed) AP sets."""
        out = cls({ap: Counts() for ap in ap_ids})
        for truth, alarms in trials:
            out.add(truth, alarms)
        return out

    def add(self, truth: Iterable[str], alarms: Iterable[str]) -> None:
        truth, alarms = set(truth), set(alarms)
        unknown = (truth | alarms) - set(self.per_ap)
        if unknown:
            raise CrislocError(f"unknown AP ids {sorted(unknown)}")
        for ap, c in self.per_ap.items():
            if ap in truth:
                if ap in alarms:
                    c.tp += 1
                else:
                    c.fn += 1
            elif ap in alarms:
                c.fp += 1
            else:
                c.tn += 1

    def totals(self) -> Counts:
        t = Counts()
        for c in self.per_ap.values():
            t.tp += c.tp
            t.fp += c.fp
            t.fn += c.fn
            t.tn += c.tn
        return t

    def false_alarm_rate(self) -> float | None:
        """Fraction of (trial, unaltered AP) pairs that raised an alarm."""
        t = self.totals()
        return _ratio(t.fp, t.fp + t.tn)


def _ratio(num: float, den: float) -> float | None:
    return num / den if den > 0 else None


@dataclass(frozen=True)
class MicroMetrics:
    precision: float | None
    recall: float | None
    f1: float | None

    def __iter__(self):
        return iter((self.precision, self.recall, self.f1))


def micro_metrics(counts: DetectionCounts) -> MicroMetrics:
    """Micro-averaged precision, recall and F1; None where undefined."""
    t = counts.totals()
    p = _ratio(t.tp, t.tp + t.fp)
    r = _ratio(t.tp, t.tp + t.fn)
    if p is None or r is None:
        f1 = None
    elif p + r == 0:
        f1 = 0.0
    else:
        f1 = 2 * p * r / (p + r)
    return MicroMetrics(p, r, f1)


def fmt_metric(v: float | None, digits: int = 4) -> str:
    return "undefined" if v is None else f"{v:.{digits}f}"


@dataclass(frozen=True)
class ConfusionMatrix:
    """``values[r, c]``: percent of trials of row ``r`` in which AP ``c`` alarmed.

    Rows are single altered APs plus a final ``none`` row; a row need not sum
    to 100.
    """

    rows: tuple[str, ...]
    cols: tuple[str, ...]
    values: np.ndarray
    trials: tuple[int, ...]

    def table(self, sep: str = "\t") -> str:
        lines = [sep.join(["altered", "trials", *self.cols])]
        for r, n, vals in zip(self.rows, self.trials, self.values):
            lines.append(sep.join([r, str(n), *(f"{v:.1f}" for v in vals)]))
        return "\n".join(lines) + "\n"


def confusion_matrix(trials: Iterable[tuple[Iterable[str], Iterable[str]]],
                     ap_ids: Sequence[str]) -> ConfusionMatrix:
    rows = tuple(ap_ids) + (NONE_ROW,)
    col = {ap: j for j, ap in enumerate(ap_ids)}
    hits = np.zeros((len(rows), len(ap_ids)))
    n = np.zeros(len(rows), dtype=int)
    for truth, alarms in trials:
        truth = set(truth)
        if len(truth) > 1:
            raise CrislocError("confusion rows need at most one altered AP per trial")
        r = rows.index(next(iter(truth))) if truth else len(ap_ids)
        n[r] += 1
        for ap in alarms:
            if ap not in col:
                raise CrislocError(f"unknown AP id {ap!r}")
            hits[r, col[ap]] += 1
    pct = 100.0 * hits / np.maximum(n[:, None], 1)
    return ConfusionMatrix(rows, tuple(ap_ids), pct, tuple(int(v) for v in n))


# -- localization errors ---------------------------------------------------------

@dataclass(frozen=True)
class ErrorStats:
    errors: np.ndarray
    mean: float
    median: float
    percentiles: Mapping[int, float]
    max: float

    def cdf(self) -> tuple[np.ndarray, np.ndarray]:
        """Sorted errors and the fraction of estimates at or below each."""
        e = np.sort(self.errors)
        return e, np.arange(1, len(e) + 1) / len(e)

    def cdf_table(self, sep: str = "\t") -> str:
        e, f = self.cdf()
        return "error_m" + sep + "fraction\n" + "".join(
            f"{a:.6f}{sep}{b:.6f}\n" for a, b in zip(e, f))

    def summary(self) -> dict:
        return {"n": int(len(self.errors)), "mean": self.mean, "median": self.median,
                **{f"p{k}": v for k, v in self.percentiles.items()}, "max": self.max}


def error_stats(pairs: Iterable[tuple[Position, Position]],
                percentiles: Sequence[int] = (25, 75, 90, 95)) -> ErrorStats:
    """Statistics of Euclidean errors for (estimate, truth) pairs."""
    e = np.array([est.distance(truth) for est, truth in pairs], dtype=float)
    if e.size == 0:
        raise CrislocError("no estimates to evaluate")
    return ErrorStats(e, float(e.mean()), float(np.median(e)),
                      {int(q): float(np.percentile(e, q)) for q in percentiles},
                      float(e.max()))


# -- RSS-only baseline -----------------------------------------------------------

def rss_of_block(block: np.ndarray) -> np.ndarray:
    """Calibrated power of an amplitude block in dBm (-inf-safe)."""
    p = np.sum(np.asarray(block) ** 2, axis=-1)
    return np.where(p > 0, mw_to_dbm(np.maximum(p, 1e-30)), -120.0)


def rss_database(rmap: RadioMap) -> MatchDatabase:
    """One scalar per AP and point: the RSS implied by the mean amplitudes."""
    db = as_database(rmap)
    blocks = {ap: rss_of_block(db.blocks[ap])[:, None] for ap in db.ap_ids}
    return MatchDatabase(db.xy, db.ap_ids, blocks, db.grid_spacing)


def rss_fingerprint(fp: Fingerprint) -> Fingerprint:
    return Fingerprint(fp.ap_ids, {ap: np.atleast_1d(rss_of_block(b)) for ap, b in
                                   fp.blocks.items()})

