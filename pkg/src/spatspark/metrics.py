"""Forecast verification: confusion counts at a rain threshold, pMSE and the
derived categorical scores, accumulated overall and per lead time.

Scores whose denominator is zero are reported as ``None`` (serialized ``NA``),
never as 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np

from .data import (RAIN_THRESHOLD_MM_PER_H, DataError, ScalingParams,
                   SequenceSample, inverse_minmax, mm_per_h_to_mm_per_5min,
                   stack_batch)
from .numcore import DimensionError, count_flops

SCORE_NAMES = ("accuracy", "precision", "recall", "f1", "csi", "far", "hss")
REPORT_COLUMNS = ("pmse",) + SCORE_NAMES


@dataclass(frozen=True)
class Confusion:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "Confusion") -> "Confusion":
        return Confusion(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)


def _check_same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{what}: prediction shape {a.shape} != truth shape {b.shape}")


def confusion_update(acc: Confusion, pred_mm5, truth_mm5,
                     threshold_mm_per_h: float = RAIN_THRESHOLD_MM_PER_H) -> Confusion:
    """Add the pixel counts of one prediction/truth pair (mm/5min) to ``acc``."""
    pred, truth = np.asarray(pred_mm5), np.asarray(truth_mm5)
    _check_same_shape(pred, truth, "confusion_update")
    thr = mm_per_h_to_mm_per_5min(threshold_mm_per_h)
    p, t = pred >= thr, truth >= thr
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return acc + Confusion(tp, fp, fn, pred.size - tp - fp - fn)


def pmse(pred_mm5, truth_mm5) -> float:
    """Squared-error sum per frame divided by H*W, averaged over frames."""
    pred, truth = np.asarray(pred_mm5, dtype=np.float64), np.asarray(truth_mm5, dtype=np.float64)
    _check_same_shape(pred, truth, "pmse")
    if pred.ndim not in (2, 3):
        raise DimensionError(f"pmse expects [H,W] or [T,H,W], got {pred.shape}")
    return float(frame_sse(pred, truth).mean() / (pred.shape[-1] * pred.shape[-2]))


def frame_sse(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    d = pred - truth
    return (d * d).reshape(-1, pred.shape[-2] * pred.shape[-1]).sum(axis=1)


def _ratio(num: float, den: float) -> Optional[float]:
    return None if den == 0 else num / den


def scores(c: Confusion, standard_hss: bool = False) -> Dict[str, Optional[float]]:
    """Accuracy, precision, recall, F1, CSI, FAR and HSS from one confusion table.

    HSS follows (TP*TN - FP*FN) / ((TP+FN)(FN+TN) + (TP+FP)(FP+TN)), which peaks
    at 0.5. ``standard_hss`` adds the conventional doubled form as
    ``hss_standard``.
    """
    if c.total <= 0:
        raise ValueError("scores need a non-empty confusion table")
    tp, fp, fn, tn = c.tp, c.fp, c.fn, c.tn
    hss_num = tp * tn - fp * fn
    hss_den = (tp + fn) * (fn + tn) + (tp + fp) * (fp + tn)
    out = {
        "accuracy": (tp + tn) / c.total,
        "precision": _ratio(tp, tp + fp),
        "recall": _ratio(tp, tp + fn),
        "f1": _ratio(2 * tp, 2 * tp + fp + fn),
        "csi": _ratio(tp, tp + fp + fn),
        "far": _ratio(fp, tp + fp),
        "hss": _ratio(hss_num, hss_den),
    }
    if standard_hss:
        out["hss_standard"] = _ratio(2 * hss_num, hss_den)
    return out


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    overall: Dict[str, Optional[float]]
    per_timestep: List[Dict[str, Optional[float]]]
    confusion: Confusion
    per_timestep_confusion: List[Confusion]
    n_samples: int
    threshold_mm_per_h: float = RAIN_THRESHOLD_MM_PER_H

    def rows(self) -> List[tuple]:
        return [("overall", self.overall)] + [(f"t={k + 1}", r) for k, r in enumerate(self.per_timestep)]


Predictor = Callable[[np.ndarray], np.ndarray]


def model_predictor(model) -> Predictor:
    """Inference-mode fine-tune forward of a model, as a plain array function."""
    return lambda inputs: model.forward_finetune(inputs, inference=True).data


def evaluate(model: Union[Predictor, object], samples: Sequence[SequenceSample], scaling: ScalingParams,
             threshold_mm_per_h: float = RAIN_THRESHOLD_MM_PER_H, batch_size: int = 8,
             standard_hss: bool = False) -> EvalReport:
    """Micro-averaged verification of future-frame predictions in mm/5min."""
    if not samples:
        raise DataError("evaluation dataset is empty")
    predict = model_predictor(model) if hasattr(model, "forward_finetune") else model
    T = samples[0].target.shape[0]
    conf_t = [Confusion() for _ in range(T)]
    sse_t = np.zeros(T)
    hw = samples[0].target.shape[1] * samples[0].target.shape[2]
    for b in range(0, len(samples), batch_size):
        batch = samples[b:b + batch_size]
        inputs, targets = stack_batch(batch)
        pred = np.asarray(predict(inputs), dtype=np.float64)
        _check_same_shape(pred, targets, "evaluate")
        pred_mm = inverse_minmax(pred, scaling)
        truth_mm = inverse_minmax(targets, scaling)
        for i in range(len(batch)):
            sse_t += frame_sse(pred_mm[i], truth_mm[i])
            for t in range(T):
                conf_t[t] = confusion_update(conf_t[t], pred_mm[i, t], truth_mm[i, t], threshold_mm_per_h)
    n = len(samples)
    per_t = []
    for t in range(T):
        row = {"pmse": float(sse_t[t] / (n * hw))}
        row.update(scores(conf_t[t], standard_hss))
        per_t.append(row)
    overall_conf = sum(conf_t, Confusion())
    overall = {"pmse": float(sse_t.sum() / (n * T * hw))}
    overall.update(scores(overall_conf, standard_hss))
    return EvalReport(overall, per_t, overall_conf, conf_t, n, threshold_mm_per_h)


def _fmt(value: Optional[float]) -> str:
    return "NA" if value is None else repr(float(value))


def report_csv(report: EvalReport, extra_columns: Sequence[str] = ()) -> str:
    cols = REPORT_COLUMNS + tuple(extra_columns)
    lines = [",".join(("row",) + cols)]
    for label, row in report.rows():
        lines.append(",".join([label] + [_fmt(row.get(c)) for c in cols]))
    return "\n".join(lines) + "\n"


def write_report(report: EvalReport, path, extra_columns: Sequence[str] = ()) -> None:
    Path(path).write_text(report_csv(report, extra_columns))


def read_report(path) -> Dict[str, Dict[str, Optional[float]]]:
    lines = Path(path).read_text().strip().splitlines()
    header = lines[0].split(",")
    out = {}
    for line in lines[1:]:
        cells = line.split(",")
        out[cells[0]] = {k: (None if v == "NA" else float(v)) for k, v in zip(header[1:], cells[1:])}
    return out


# ---------------------------------------------------------------------------
# efficiency accounting


def count_params(model) -> int:
    """Total learnable scalars."""
    return int(sum(p.data.size for p in model.params()))


def flop_breakdown(model, H: int, W: int, T: int) -> List[tuple]:
    with count_flops() as records:
        model.forward_finetune(np.zeros((1, T, H, W)), inference=True)
    return list(records)


def estimate_flops(model, H: int, W: int, T: int, include_elementwise: bool = True) -> int:
    """FLOPs of one inference-mode fine-tune forward for a single [T,H,W] input.

    Convolutions count 2*k*k*C_in*C_out per output position (per input position
    for transposed convolutions). Elementwise extras: 4 per normalized element,
    1 per ReLU/tanh element, 1 per pooled input element.
    """
    records = flop_breakdown(model, H, W, T)
    conv_kinds = ("conv", "tconv")
    return int(sum(f for kind, f in records if include_elementwise or kind in conv_kinds))
