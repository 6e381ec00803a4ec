"""Classification metrics and full-resolution evaluation.

Evaluation forwards every sample with all timesteps and all pixels in eval
mode (frozen per-domain normalization statistics), so results are
deterministic and repeated calls are bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DimensionError, EmptyDatasetError, ValidationError
from .model import ModelParams, classify_embedded, collate, pse_embed
from .sits_data import Dataset


@dataclass
class EvalResult:
    confusion: np.ndarray          # (K, K) counts, rows = truth
    per_class_precision: np.ndarray
    per_class_recall: np.ndarray
    per_class_f1: np.ndarray
    macro_f1: float                # unweighted mean over all K classes
    macro_f1_known: float          # same, excluding the unknown class
    accuracy: float
    n_evaluated: int
    absent_classes: list           # classes never true and never predicted

    def to_dict(self):
        return {
            "confusion": self.confusion.tolist(),
            "per_class_precision": [float(v) for v in self.per_class_precision],
            "per_class_recall": [float(v) for v in self.per_class_recall],
            "per_class_f1": [float(v) for v in self.per_class_f1],
            "macro_f1": self.macro_f1,
            "macro_f1_known": self.macro_f1_known,
            "accuracy": self.accuracy,
            "n_evaluated": self.n_evaluated,
            "absent_classes": list(self.absent_classes),
        }


def confusion_matrix(truth, pred, k: int) -> np.ndarray:
    truth = np.asarray(truth, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    if truth.shape != pred.shape:
        raise DimensionError("truth and prediction lengths differ")
    mat = np.zeros((k, k), dtype=np.int64)
    np.add.at(mat, (truth, pred), 1)
    return mat


def per_class_f1(confusion) -> np.ndarray:
    """Per-class F1 with the 0/0 -> 0 convention."""
    confusion = np.asarray(confusion, dtype=np.float64)
    tp = np.diag(confusion)
    pred_tot = confusion.sum(axis=0)
    true_tot = confusion.sum(axis=1)
    prec = np.divide(tp, pred_tot, out=np.zeros_like(tp), where=pred_tot > 0)
    rec = np.divide(tp, true_tot, out=np.zeros_like(tp), where=true_tot > 0)
    denom = prec + rec
    return np.divide(2 * prec * rec, denom, out=np.zeros_like(tp), where=denom > 0)


def macro_f1(confusion, include_last: bool = True) -> float:
    f1 = per_class_f1(confusion)
    if not include_last:
        f1 = f1[:-1]
    return float(f1.mean())


def result_from_confusion(confusion) -> EvalResult:
    confusion = np.asarray(confusion, dtype=np.int64)
    k = confusion.shape[0]
    tp = np.diag(confusion).astype(np.float64)
    pred_tot = confusion.sum(axis=0).astype(np.float64)
    true_tot = confusion.sum(axis=1).astype(np.float64)
    prec = np.divide(tp, pred_tot, out=np.zeros(k), where=pred_tot > 0)
    rec = np.divide(tp, true_tot, out=np.zeros(k), where=true_tot > 0)
    f1 = per_class_f1(confusion)
    absent = [int(c) for c in range(k) if pred_tot[c] == 0 and true_tot[c] == 0]
    total = confusion.sum()
    return EvalResult(
        confusion=confusion,
        per_class_precision=prec,
        per_class_recall=rec,
        per_class_f1=f1,
        macro_f1=float(f1.mean()),
        macro_f1_known=float(f1[:-1].mean()) if k > 1 else float(f1.mean()),
        accuracy=float(tp.sum() / total) if total else 0.0,
        n_evaluated=int(total),
        absent_classes=absent,
    )


def evaluate(params: ModelParams, dataset: Dataset, domain_tag: str = "target",
             shift: int = 0, batch_size: int = 256) -> EvalResult:
    """Full-resolution deterministic evaluation of a labeled dataset."""
    if not dataset.samples:
        raise EmptyDatasetError("evaluate needs a non-empty dataset")
    if dataset.n_channels != params.dims.n_channels:
        raise DimensionError(
            f"dataset has {dataset.n_channels} channels, model expects "
            f"{params.dims.n_channels}"
        )
    if dataset.n_classes != params.dims.n_classes or list(dataset.class_names) != list(params.class_names):
        raise DimensionError(
            f"dataset classes {dataset.class_names} do not match model classes "
            f"{params.class_names}"
        )
    truth = []
    pred = []
    samples = dataset.samples
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        for s in chunk:
            if s.label is None:
                raise ValidationError(f"sample {s.id} is unlabeled")
        batch = collate(chunk, dtype=params.dtype)
        e, _ = pse_embed(params, batch, domain_tag, train=False)
        probs, _ = classify_embedded(params, e, batch.days, batch.tmask, shift)
        truth.extend(int(s.label) for s in chunk)
        pred.extend(int(p) for p in np.argmax(probs, axis=1))
    return result_from_confusion(confusion_matrix(truth, pred, params.dims.n_classes))
