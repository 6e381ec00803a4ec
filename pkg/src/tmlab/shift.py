"""Temporal shift estimation from model prediction statistics.

A source-trained model is forwarded on target data at every candidate day
shift in {-max_shift, ..., +max_shift}. Per shift we compute:

  expected entropy   mean H(p(y|x, days+shift)) -- low when confident
  marginal           mean prediction            -- the predicted class mix
  inception score    H(marginal) - expected entropy (= mean KL to marginal)
  am score           expected entropy + KL(reference dist || marginal)

The estimator maximizes the inception score or minimizes the AM score over
the grid. The full pipeline bootstraps a class-distribution estimate from
inception-score pseudo-labels, then refines the shift with the AM score.

Candidate shifts only change the positional encoding, so the pixel-set
embeddings are computed once per sample and reused across the whole grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import EmptyDatasetError, ShiftRangeError, ValidationError
from .model import Batch, ModelParams, classify_embedded, collate, pse_embed
from .sits_data import Dataset, stable_subset

DEFAULT_SAMPLE_CAP = 5000
_LOG_FLOOR = 1e-12


@dataclass
class ClassDistribution:
    """A point on the probability simplex over the K classes."""

    probs: np.ndarray

    def validate(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 1 or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise ValidationError("class distribution must be a simplex point")

    @classmethod
    def uniform(cls, k: int):
        return cls(np.full(k, 1.0 / k))


@dataclass
class ShiftEstimate:
    """Estimated target-to-source day shift plus the full score curve."""

    delta_t_to_s: int
    metric: str                            # "entropy" | "is" | "am"
    curve: dict                            # candidate shift -> score
    class_distribution_used: Optional[np.ndarray] = None


@dataclass
class ScanCounters:
    """Observable effort counters for control-flow contracts."""

    is_scans: int = 0
    am_scans: int = 0
    entropy_scans: int = 0
    grid_forwards: int = 0                 # (shift, sample) prediction count


# ---------------------------------------------------------------------------
# Pure score statistics (probs arrays are (n, K) float64)


def entropy(p) -> float:
    p = np.asarray(p, dtype=np.float64)
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def expected_entropy_of(probs) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    nz = np.where(probs > 0, probs, 1.0)
    return float(-(probs * np.log(nz)).sum(axis=1).mean())


def marginal_of(probs) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    return probs.mean(axis=0)


def inception_score_of(probs) -> float:
    """H(marginal) - expected entropy; clamped to be non-negative."""
    value = entropy(marginal_of(probs)) - expected_entropy_of(probs)
    return max(0.0, value)


def am_score_of(probs, class_dist: np.ndarray) -> float:
    """Expected conditional entropy + KL(class_dist || marginal)."""
    c = np.asarray(class_dist, dtype=np.float64)
    marg = np.maximum(marginal_of(probs), _LOG_FLOOR)
    nz = c > 0
    kl = float((c[nz] * (np.log(c[nz]) - np.log(marg[nz]))).sum())
    return expected_entropy_of(probs) + kl


def pseudo_label_counts(probs, k: int) -> np.ndarray:
    labels = np.argmax(np.asarray(probs), axis=1)
    return np.bincount(labels, minlength=k).astype(np.float64)


# ---------------------------------------------------------------------------
# Model-driven prediction


def _capped_samples(dataset: Dataset, sample_cap, seed):
    if not dataset.samples:
        raise EmptyDatasetError("shift estimation needs a non-empty dataset")
    return stable_subset(dataset.samples, sample_cap, seed=seed)


def _batched(samples, batch_size=256):
    for start in range(0, len(samples), batch_size):
        yield samples[start : start + batch_size]


def predict_probs(params: ModelParams, samples, delta: int,
                  domain: str = "target", counters: Optional[ScanCounters] = None
                  ) -> np.ndarray:
    """Eval-mode probabilities (n, K) at one shift, float64."""
    out = []
    for chunk in _batched(samples):
        batch = collate(chunk, dtype=params.dtype)
        e, _ = pse_embed(params, batch, domain, train=False)
        probs, _ = classify_embedded(params, e, batch.days, batch.tmask, delta)
        out.append(probs.astype(np.float64))
    if counters is not None:
        counters.grid_forwards += sum(p.shape[0] for p in out)
    return np.concatenate(out, axis=0)


def grid_probs(params: ModelParams, samples, deltas,
               domain: str = "target", counters: Optional[ScanCounters] = None
               ) -> np.ndarray:
    """Probabilities (n_shifts, n, K) with embeddings computed once.

    Identical to calling predict_probs per shift (same code path), just
    without recomputing the shift-independent pixel-set embeddings.
    """
    per_shift = [[] for _ in deltas]
    for chunk in _batched(samples):
        batch = collate(chunk, dtype=params.dtype)
        e, _ = pse_embed(params, batch, domain, train=False)
        for j, delta in enumerate(deltas):
            probs, _ = classify_embedded(params, e, batch.days, batch.tmask, int(delta))
            per_shift[j].append(probs.astype(np.float64))
    if counters is not None:
        counters.grid_forwards += len(deltas) * len(samples)
    return np.stack([np.concatenate(chunks, axis=0) for chunks in per_shift])


# ---------------------------------------------------------------------------
# Spec operations at a single shift


def expected_entropy(params, dataset, delta, sample_cap=DEFAULT_SAMPLE_CAP,
                     seed=0) -> float:
    samples = _capped_samples(dataset, sample_cap, seed)
    return expected_entropy_of(predict_probs(params, samples, delta))


def marginal(params, dataset, delta, sample_cap=DEFAULT_SAMPLE_CAP,
             seed=0) -> ClassDistribution:
    samples = _capped_samples(dataset, sample_cap, seed)
    dist = ClassDistribution(marginal_of(predict_probs(params, samples, delta)))
    dist.validate()
    return dist


def inception_score(params, dataset, delta, sample_cap=DEFAULT_SAMPLE_CAP,
                    seed=0) -> float:
    samples = _capped_samples(dataset, sample_cap, seed)
    return inception_score_of(predict_probs(params, samples, delta))


def am_score(params, dataset, delta, class_dist, sample_cap=DEFAULT_SAMPLE_CAP,
             seed=0) -> float:
    if isinstance(class_dist, ClassDistribution):
        class_dist.validate()
        class_dist = class_dist.probs
    else:
        ClassDistribution(np.asarray(class_dist)).validate()
    samples = _capped_samples(dataset, sample_cap, seed)
    return am_score_of(predict_probs(params, samples, delta), class_dist)


def pseudo_label_distribution(params, dataset, delta,
                              sample_cap=DEFAULT_SAMPLE_CAP, seed=0
                              ) -> ClassDistribution:
    """Frequency of argmax predictions at `delta` over the capped dataset."""
    samples = _capped_samples(dataset, sample_cap, seed)
    probs = predict_probs(params, samples, delta)
    counts = pseudo_label_counts(probs, params.dims.n_classes)
    dist = ClassDistribution(counts / counts.sum())
    dist.validate()
    return dist


# ---------------------------------------------------------------------------
# Grid estimators


def candidate_shifts(max_shift: int) -> np.ndarray:
    if max_shift < 0:
        raise ValidationError("max_shift must be >= 0")
    return np.arange(-max_shift, max_shift + 1, dtype=np.int64)


def _tie_rank(delta: int):
    # prefer the smallest |shift|; break remaining ties toward negative
    return (abs(delta), 0 if delta < 0 else 1)


def _select(curve: dict, maximize: bool) -> int:
    best_delta = None
    best_score = None
    for delta in sorted(curve, key=_tie_rank):
        score = curve[delta]
        better = (
            best_score is None
            or (maximize and score > best_score)
            or (not maximize and score < best_score)
        )
        if better:
            best_delta, best_score = delta, score
    return int(best_delta)


def _check_max_shift(params, max_shift):
    if max_shift > params.posenc.max_shift:
        raise ShiftRangeError(
            f"grid max shift {max_shift} exceeds the model's encoding "
            f"offset {params.posenc.max_shift}"
        )


def estimate_shift_is(params, dataset, max_shift,
                      sample_cap=DEFAULT_SAMPLE_CAP, seed=0,
                      counters: Optional[ScanCounters] = None) -> ShiftEstimate:
    """Shift maximizing the inception score over the candidate grid."""
    _check_max_shift(params, max_shift)
    samples = _capped_samples(dataset, sample_cap, seed)
    deltas = candidate_shifts(max_shift)
    probs = grid_probs(params, samples, deltas, counters=counters)
    if counters is not None:
        counters.is_scans += 1
    curve = {int(d): inception_score_of(probs[j]) for j, d in enumerate(deltas)}
    return ShiftEstimate(delta_t_to_s=_select(curve, maximize=True),
                         metric="is", curve=curve)


def estimate_shift_am(params, dataset, max_shift, class_dist,
                      sample_cap=DEFAULT_SAMPLE_CAP, seed=0,
                      counters: Optional[ScanCounters] = None) -> ShiftEstimate:
    """Shift minimizing the AM score against `class_dist`."""
    _check_max_shift(params, max_shift)
    if isinstance(class_dist, ClassDistribution):
        class_dist = class_dist.probs
    ClassDistribution(np.asarray(class_dist)).validate()
    samples = _capped_samples(dataset, sample_cap, seed)
    deltas = candidate_shifts(max_shift)
    probs = grid_probs(params, samples, deltas, counters=counters)
    if counters is not None:
        counters.am_scans += 1
    curve = {int(d): am_score_of(probs[j], class_dist) for j, d in enumerate(deltas)}
    return ShiftEstimate(delta_t_to_s=_select(curve, maximize=False),
                         metric="am", curve=curve,
                         class_distribution_used=np.asarray(class_dist, dtype=np.float64))


def estimate_shift_entropy(params, dataset, max_shift,
                           sample_cap=DEFAULT_SAMPLE_CAP, seed=0,
                           counters: Optional[ScanCounters] = None) -> ShiftEstimate:
    """Shift minimizing the expected prediction entropy."""
    _check_max_shift(params, max_shift)
    samples = _capped_samples(dataset, sample_cap, seed)
    deltas = candidate_shifts(max_shift)
    probs = grid_probs(params, samples, deltas, counters=counters)
    if counters is not None:
        counters.entropy_scans += 1
    curve = {int(d): expected_entropy_of(probs[j]) for j, d in enumerate(deltas)}
    return ShiftEstimate(delta_t_to_s=_select(curve, maximize=False),
                         metric="entropy", curve=curve)


def estimate_temporal_shift(params, dataset, max_shift,
                            prior_dist=None,
                            sample_cap=DEFAULT_SAMPLE_CAP, seed=0,
                            counters: Optional[ScanCounters] = None
                            ) -> ShiftEstimate:
    """Full estimation pipeline.

    Without a prior class distribution: estimate an initial shift with the
    inception score, pseudo-label the (capped) dataset at that shift to
    estimate the class distribution, then re-estimate with the AM score.
    With a prior: a single AM scan against it.

    The same capped sample is used throughout; its predictions per shift
    are computed once and shared by both scans.
    """
    _check_max_shift(params, max_shift)
    samples = _capped_samples(dataset, sample_cap, seed)
    deltas = candidate_shifts(max_shift)

    if prior_dist is not None:
        if isinstance(prior_dist, ClassDistribution):
            prior_dist = prior_dist.probs
        ClassDistribution(np.asarray(prior_dist)).validate()
        probs = grid_probs(params, samples, deltas, counters=counters)
        if counters is not None:
            counters.am_scans += 1
        class_dist = np.asarray(prior_dist, dtype=np.float64)
    else:
        probs = grid_probs(params, samples, deltas, counters=counters)
        if counters is not None:
            counters.is_scans += 1
        is_curve = {int(d): inception_score_of(probs[j]) for j, d in enumerate(deltas)}
        delta_is = _select(is_curve, maximize=True)
        j_is = int(np.where(deltas == delta_is)[0][0])
        counts = pseudo_label_counts(probs[j_is], params.dims.n_classes)
        class_dist = counts / counts.sum()
        if counters is not None:
            counters.am_scans += 1

    am_curve = {int(d): am_score_of(probs[j], class_dist) for j, d in enumerate(deltas)}
    return ShiftEstimate(delta_t_to_s=_select(am_curve, maximize=False),
                         metric="am", curve=am_curve,
                         class_distribution_used=class_dist)


def score_curves(params, dataset, max_shift, class_dist=None,
                 sample_cap=DEFAULT_SAMPLE_CAP, seed=0) -> dict:
    """Entropy, inception-score, and AM curves over the full grid.

    When no class distribution is given, the AM curve uses the pseudo-label
    distribution bootstrapped at the inception-score optimum.
    """
    _check_max_shift(params, max_shift)
    samples = _capped_samples(dataset, sample_cap, seed)
    deltas = candidate_shifts(max_shift)
    probs = grid_probs(params, samples, deltas)
    ent = {int(d): expected_entropy_of(probs[j]) for j, d in enumerate(deltas)}
    is_curve = {int(d): inception_score_of(probs[j]) for j, d in enumerate(deltas)}
    if class_dist is None:
        delta_is = _select(is_curve, maximize=True)
        j_is = int(np.where(deltas == delta_is)[0][0])
        counts = pseudo_label_counts(probs[j_is], params.dims.n_classes)
        class_dist = counts / counts.sum()
    elif isinstance(class_dist, ClassDistribution):
        class_dist = class_dist.probs
    am_curve = {int(d): am_score_of(probs[j], class_dist) for j, d in enumerate(deltas)}
    return {
        "entropy": ent,
        "is": is_curve,
        "am": am_curve,
        "class_distribution": np.asarray(class_dist, dtype=np.float64),
    }
