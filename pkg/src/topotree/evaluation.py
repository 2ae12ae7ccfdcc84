"""Tolerance-based centerline evaluation (per-class TP/FP/FN/TN, dice,
sensitivity, specificity).

Matching rules:

* each predicted node matches the nearest ground-truth node of any class
  whose own radius covers it; predictions without such a node are ignored;
* TP_c / FP_c: matched predictions labeled c whose gt node is / is not c;
* TN_c: matched predictions not labeled c whose gt node is not c;
* FN_c: gt nodes of class c with no matched class-c prediction inside their
  radius.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree


@dataclass
class ClassMetrics:
    TP: int
    FP: int
    FN: int
    TN: int

    @staticmethod
    def _ratio(num, den) -> Optional[float]:
        return None if den == 0 else num / den

    @property
    def dice(self) -> Optional[float]:
        return self._ratio(2 * self.TP, 2 * self.TP + self.FP + self.FN)

    @property
    def sensitivity(self) -> Optional[float]:
        return self._ratio(self.TP, self.TP + self.FN)

    @property
    def specificity(self) -> Optional[float]:
        return self._ratio(self.TN, self.TN + self.FP)

    def to_dict(self):
        return {
            "TP": self.TP,
            "FP": self.FP,
            "FN": self.FN,
            "TN": self.TN,
            "dice": self.dice,
            "sensitivity": self.sensitivity,
            "specificity": self.specificity,
        }


@dataclass
class EvalReport:
    classes: dict[int, ClassMetrics]
    ignored_predictions: int
    matched_pairs: list[tuple[int, int]] = field(default_factory=list)
    note: Optional[str] = None

    def to_dict(self):
        d = {
            "classes": {str(c): m.to_dict() for c, m in sorted(self.classes.items())},
            "ignored_predictions": self.ignored_predictions,
            "matched_pairs": [list(p) for p in self.matched_pairs],
        }
        if self.note:
            d["note"] = self.note
        return d

    @classmethod
    def from_dict(cls, d):
        classes = {
            int(c): ClassMetrics(m["TP"], m["FP"], m["FN"], m["TN"]) for c, m in d["classes"].items()
        }
        return cls(classes, d["ignored_predictions"], [tuple(p) for p in d.get("matched_pairs", [])], d.get("note"))


def _stack(trees):
    if not trees:
        return np.zeros(0, dtype=np.int64), np.zeros((0, 3)), np.zeros(0), np.zeros(0, dtype=np.int64)
    ids = np.concatenate([t.ids for t in trees])
    pos = np.vstack([t.pos for t in trees])
    rad = np.concatenate([t.radius for t in trees])
    lab = np.concatenate([np.full(len(t), t.label, dtype=np.int64) for t in trees])
    return ids, pos, rad, lab


def evaluate(gt_trees: Sequence, pred_trees: Sequence) -> EvalReport:
    g_ids, g_pos, g_rad, g_lab = _stack(gt_trees)
    if not len(g_ids):
        raise ValueError("no ground-truth nodes")
    if np.any(g_rad <= 0):
        raise ValueError("ground-truth node with non-positive radius")
    p_ids, p_pos, _, p_lab = _stack(pred_trees)
    classes = sorted(set(g_lab.tolist()) | set(p_lab.tolist()))

    kd = cKDTree(g_pos)
    r_max = float(g_rad.max())
    match = np.full(len(p_ids), -1, dtype=np.int64)
    if len(p_ids):
        for k, cand in enumerate(kd.query_ball_point(p_pos, r_max + 1e-9)):
            if not cand:
                continue
            cand = np.asarray(sorted(cand), dtype=np.int64)
            d = np.linalg.norm(g_pos[cand] - p_pos[k], axis=1)
            ok = d <= g_rad[cand]
            if ok.any():
                c, dd = cand[ok], d[ok]
                match[k] = c[np.lexsort((g_ids[c], dd))[0]]
    matched = match >= 0

    # FN: gt node of class c not covered by a matched class-c prediction within its radius
    covered = np.zeros(len(g_ids), dtype=bool)
    for c in classes:
        sel = matched & (p_lab == c)
        gsel = np.flatnonzero(g_lab == c)
        if not sel.any() or not len(gsel):
            continue
        pk = cKDTree(p_pos[sel])
        for g, cand in zip(gsel, pk.query_ball_point(g_pos[gsel], g_rad[gsel] + 1e-9)):
            if cand:
                d = np.linalg.norm(p_pos[sel][cand] - g_pos[g], axis=1)
                covered[g] = bool(np.any(d <= g_rad[g]))

    out = {}
    m_gt = np.where(matched, g_lab[np.maximum(match, 0)], 0)
    for c in classes:
        tp = int(np.count_nonzero(matched & (p_lab == c) & (m_gt == c)))
        fp = int(np.count_nonzero(matched & (p_lab == c) & (m_gt != c)))
        tn = int(np.count_nonzero(matched & (p_lab != c) & (m_gt != c)))
        fn = int(np.count_nonzero((g_lab == c) & ~covered))
        out[c] = ClassMetrics(tp, fp, fn, tn)
    pairs = [(int(p_ids[k]), int(g_ids[match[k]])) for k in np.flatnonzero(matched)]
    return EvalReport(out, int(np.count_nonzero(~matched)), pairs)


def write_eval_report(report: EvalReport, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    return path


def read_eval_report(path) -> EvalReport:
    return EvalReport.from_dict(json.loads(Path(path).read_text()))


def _fmt(x):
    return "" if x is None else f"{x:.6f}"


def compare_runs(reports) -> list[dict]:
    """Rows ``method, vessel, dice, specificity, sensitivity`` sorted by method name then class."""
    rows = []
    for name, rep in sorted(reports, key=lambda r: r[0]):
        for c, m in sorted(rep.classes.items()):
            rows.append(
                {
                    "method": name,
                    "vessel": c,
                    "dice": m.dice,
                    "specificity": m.specificity,
                    "sensitivity": m.sensitivity,
                }
            )
    return rows


def comparison_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "vessel", "dice", "specificity", "sensitivity"])
    for r in rows:
        w.writerow([r["method"], r["vessel"], _fmt(r["dice"]), _fmt(r["specificity"]), _fmt(r["sensitivity"])])
    return buf.getvalue()


def read_comparison_csv(text: str) -> list[dict]:
    rows = []
    for r in csv.DictReader(io.StringIO(text)):
        rows.append(
            {
                "method": r["method"],
                "vessel": int(r["vessel"]),
                **{k: (None if r[k] == "" else float(r[k])) for k in ("dice", "specificity", "sensitivity")},
            }
        )
    return rows


def label_accuracy(report: EvalReport) -> float:
    """Fraction of matched predictions whose class agrees with their gt node."""
    n = sum(m.TP + m.FP for m in report.classes.values())
    return math.nan if n == 0 else sum(m.TP for m in report.classes.values()) / n
