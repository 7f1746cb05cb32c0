"""Matching predicted to reference needles and summary statistics."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .core import sample_equidistant

N_SAMPLES = 100


@dataclass(frozen=True)
class NeedleErrors:
    tip_mm: float
    bottom_mm: float
    shaft_mm: float


def needle_errors(pred, ref, n: int = N_SAMPLES) -> NeedleErrors:
    """Tip, bottom and shaft errors from index-paired equidistant samples."""
    a = sample_equidistant(pred, n)
    b = sample_equidistant(ref, n)
    d = np.linalg.norm(a - b, axis=1)
    return NeedleErrors(float(d[-1]), float(d[0]), float(d.mean()))


def shaft_matrix(preds, refs, n: int = N_SAMPLES) -> np.ndarray:
    A = [sample_equidistant(p, n) for p in preds]
    B = [sample_equidistant(r, n) for r in refs]
    out = np.empty((len(A), len(B)))
    for i, a in enumerate(A):
        for j, b in enumerate(B):
            out[i, j] = np.linalg.norm(a - b, axis=1).mean()
    return out


@dataclass
class Matching:
    pairs: list            # (pred index, ref index), gated
    cost: float            # total shaft error of the optimal assignment, before gating
    unmatched_pred: list
    unmatched_ref: list

    @property
    def fp(self) -> int:
        return len(self.unmatched_pred)

    @property
    def fn(self) -> int:
        return len(self.unmatched_ref)


def match_needles(preds, refs, gate_mm: float = 10.0) -> Matching:
    """Minimum-total-shaft-error one-to-one assignment; assigned pairs with
    shaft error above ``gate_mm`` are released as unmatched."""
    preds, refs = list(preds), list(refs)
    pairs, cost = [], 0.0
    if preds and refs:
        C = shaft_matrix(preds, refs)
        rows, cols = linear_sum_assignment(C)
        cost = float(C[rows, cols].sum())
        pairs = [(int(r), int(c)) for r, c in zip(rows, cols) if C[r, c] <= gate_mm]
    mp = {p for p, _ in pairs}
    mr = {r for _, r in pairs}
    return Matching(sorted(pairs), cost,
                    [i for i in range(len(preds)) if i not in mp],
                    [j for j in range(len(refs)) if j not in mr])


def _stats(values):
    if not values:
        return None, None
    q1, med, q3 = np.percentile(values, [25, 50, 75])
    return float(med), float(q3 - q1)


@dataclass
class EvalReport:
    """Errors of matched needles (medians over matched needles only)."""

    errors: list = field(default_factory=list)
    ids: list = field(default_factory=list)
    fp: int = 0
    fn: int = 0

    @property
    def nf(self) -> int:
        return len(self.errors)

    def _col(self, name):
        return [getattr(e, name) for e in self.errors]

    @property
    def nseb1(self) -> int:
        return sum(s > 1.0 for s in self._col("shaft_mm"))

    @property
    def nseb2(self) -> int:
        return sum(s > 2.0 for s in self._col("shaft_mm"))

    def summary(self) -> dict:
        out = {}
        for name in ("tip", "bottom", "shaft"):
            med, iqr = _stats(self._col(f"{name}_mm"))
            out[f"{name}_median_mm"] = med
            out[f"{name}_iqr_mm"] = iqr
        out.update(nf=self.nf, nseb1=self.nseb1, nseb2=self.nseb2, fp=self.fp, fn=self.fn)
        return out

    def to_json(self) -> str:
        rows = [{"pred": p, "ref": r, **asdict(e)} for (p, r), e in zip(self.ids, self.errors)]
        doc = {"summary": self.summary(), "medians_over": "matched needles", "needles": rows}
        return json.dumps(doc, indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["id", "tip_mm", "bottom_mm", "shaft_mm"])
        for (p, _), e in zip(self.ids, self.errors):
            w.writerow([p, repr(e.tip_mm), repr(e.bottom_mm), repr(e.shaft_mm)])
        return buf.getvalue()


def aggregate(pairs, fp: int, fn: int, ids=None) -> EvalReport:
    pairs = list(pairs)
    return EvalReport(pairs, list(ids) if ids is not None else [(i, i) for i in range(len(pairs))],
                      int(fp), int(fn))


def evaluate(preds, refs, gate_mm: float = 10.0) -> EvalReport:
    preds, refs = list(preds), list(refs)
    m = match_needles(preds, refs, gate_mm)
    errs = [needle_errors(preds[p], refs[r]) for p, r in m.pairs]
    return aggregate(errs, m.fp, m.fn, m.pairs)
