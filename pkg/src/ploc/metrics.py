"""Report evaluation against ground truth.

Vulnerable predictions count as positive; fixed and irrelevant count as
negative.  Rows whose evidence carries an error note are unsupported: they
still enter TPR/FPR (as irrelevant predictions) but are excluded from the
supported-only variants, and the support rate is their complement.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, asdict

from .classifier import FIXED, IRRELEVANT, VULNERABLE

VALID_LABELS = (VULNERABLE, FIXED, IRRELEVANT)


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class MetricsBundle:
    tp: int
    fp: int
    tn: int
    fn: int
    tpr: float
    fpr: float
    sr: float
    tpr_s: float
    fpr_s: float
    tc_supported: int
    tc_all: int

    def to_json(self) -> dict:
        return asdict(self)


def _rate(num: int, den: int) -> float:
    return num / den if den else 0.0


def _confusion(pairs) -> tuple[int, int, int, int]:
    tp = fp = tn = fn = 0
    for predicted, actual in pairs:
        if actual == VULNERABLE:
            if predicted == VULNERABLE:
                tp += 1
            else:
                fn += 1
        else:
            if predicted == VULNERABLE:
                fp += 1
            else:
                tn += 1
    return tp, fp, tn, fn


def compute_metrics(rows, truth: dict[str, str]) -> MetricsBundle:
    """Evaluate report rows against a {target id: label} ground truth."""
    row_ids = {row["target"] for row in rows}
    missing_truth = sorted(row_ids - truth.keys())
    missing_rows = sorted(truth.keys() - row_ids)
    if missing_truth or missing_rows:
        parts = []
        if missing_truth:
            parts.append(f"ids missing from truth: {missing_truth}")
        if missing_rows:
            parts.append(f"ids missing from report: {missing_rows}")
        raise EvaluationError("; ".join(parts))

    pairs_all = []
    pairs_supported = []
    for row in rows:
        predicted = row["label"]
        actual = truth[row["target"]]
        if actual not in VALID_LABELS:
            raise EvaluationError(
                f"bad truth label {actual!r} for {row['target']}")
        pairs_all.append((predicted, actual))
        if "error" not in row.get("evidence", {}):
            pairs_supported.append((predicted, actual))

    tp, fp, tn, fn = _confusion(pairs_all)
    tp_s, fp_s, tn_s, fn_s = _confusion(pairs_supported)
    return MetricsBundle(
        tp=tp, fp=fp, tn=tn, fn=fn,
        tpr=_rate(tp, tp + fn),
        fpr=_rate(fp, tn + fp),
        sr=_rate(len(pairs_supported), len(pairs_all)),
        tpr_s=_rate(tp_s, tp_s + fn_s),
        fpr_s=_rate(fp_s, tn_s + fp_s),
        tc_supported=len(pairs_supported),
        tc_all=len(pairs_all),
    )


def load_truth_csv(path) -> dict[str, str]:
    """Read target_id,label rows; a header row is tolerated."""
    truth: dict[str, str] = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for row in csv.reader(fh):
            if not row or len(row) < 2:
                continue
            target, label = row[0].strip(), row[1].strip().lower()
            if label not in VALID_LABELS:
                if target.lower() in ("target", "target_id", "id"):
                    continue
                raise EvaluationError(
                    f"{path}: unknown label {label!r} for {target!r}")
            truth[target] = label
    return truth
