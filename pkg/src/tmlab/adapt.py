"""Training procedures: source pre-training, the shift-aware self-training
loop, and its shift-free ablation.

The adaptation loop keeps two copies of a source-trained model. The
student trains by gradient descent on (a) source data shifted into target
time with its real labels and (b) unshifted target data with confident
teacher pseudo-labels; the teacher follows the student as an exponential
moving average and re-estimates its best target-to-source shift once per
epoch.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import EmptyDatasetError, NumericError, ValidationError
from .eval_metrics import evaluate
from .model import (
    CosineSchedule,
    ModelDims,
    ModelParams,
    PosEncConfig,
    adam_step,
    add_gradients,
    backward_batch,
    collate,
    ema_update,
    focal_loss_batch,
    forward_batch,
    init_optimizer,
    init_params,
)
from .rng import stream
from .shift import ScanCounters, estimate_temporal_shift
from .sits_data import (
    Dataset,
    balanced_batches,
    shift_days,
    split_dataset,
    subsample_pixels,
    subsample_timesteps,
)


@dataclass
class TrainConfig:
    """Hyperparameters of pre-training and adaptation."""

    max_shift: int = 60            # candidate shift grid half-width, days
    unsup_weight: float = 2.0      # weight of the pseudo-label loss term
    ema_decay: float = 0.9999      # teacher keep-rate per step
    conf_threshold: float = 0.9    # pseudo-label confidence gate
    focal_gamma: float = 1.0
    batch_size: int = 128          # per-domain batch size
    pixel_sample: int = 64
    timestep_sample: int = 30
    pretrain_epochs: int = 100
    pretrain_lr: float = 0.001
    adapt_epochs: int = 20
    iters_per_epoch: int = 500
    adapt_lr: float = 0.0001
    weight_decay: float = 0.0001
    sample_cap: int = 5000
    val_fraction: float = 0.1
    val_every: int = 1             # epochs between validation passes
    seed: int = 0

    def validate(self, strict_threshold: bool = False):
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ValidationError("ema_decay must be in [0, 1]")
        if self.conf_threshold < 0.0:
            raise ValidationError("conf_threshold must be >= 0")
        if strict_threshold and self.conf_threshold > 1.0:
            raise ValidationError("conf_threshold must be in [0, 1]")
        if self.unsup_weight < 0.0:
            raise ValidationError("unsup_weight must be >= 0")
        if self.max_shift < 0:
            raise ValidationError("max_shift must be >= 0")
        if self.batch_size < 1 or self.pixel_sample < 1 or self.timestep_sample < 1:
            raise ValidationError("batch and sample sizes must be >= 1")
        if min(self.pretrain_epochs, self.adapt_epochs, self.iters_per_epoch) < 1:
            raise ValidationError("epoch and iteration counts must be >= 1")
        if self.pretrain_lr <= 0 or self.adapt_lr <= 0:
            raise ValidationError("learning rates must be > 0")
        if self.weight_decay < 0:
            raise ValidationError("weight_decay must be >= 0")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValidationError("val_fraction must be in [0, 1)")
        if self.val_every < 1:
            raise ValidationError("val_every must be >= 1")
        if self.sample_cap < 1:
            raise ValidationError("sample_cap must be >= 1")
        if self.seed < 0:
            raise ValidationError("seed must be >= 0")

    def to_dict(self):
        return dict(self.__dict__)


@dataclass
class PretrainResult:
    params: ModelParams
    best_epoch: int
    log: list                      # one dict per epoch


@dataclass
class AdaptReport:
    """Per-epoch adaptation diagnostics plus a run summary."""

    method: str
    epochs: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def to_json_lines(self) -> str:
        lines = [json.dumps(rec, sort_keys=True) for rec in self.epochs]
        lines.append(json.dumps({"summary": self.summary}, sort_keys=True))
        return "\n".join(lines) + "\n"


def _check_labeled(dataset: Dataset):
    for s in dataset.samples:
        if s.label is None:
            raise ValidationError(f"sample {s.id} is unlabeled")


def _augment_strong(sample, cfg: TrainConfig, rng):
    s = subsample_timesteps(sample, cfg.timestep_sample, rng)
    return subsample_pixels(s, cfg.pixel_sample, rng)


def _augment_weak(sample, cfg: TrainConfig, rng):
    # weak augmentation keeps every timestep; pixel-set sampling stays on
    return subsample_pixels(sample, cfg.pixel_sample, rng)


def _check_finite(value, what):
    if not math.isfinite(value):
        raise NumericError(f"non-finite {what}")


def default_dims(dataset: Dataset, d_h=64, d_e=64, d_k=16, d_v=64) -> ModelDims:
    return ModelDims(
        n_channels=dataset.n_channels,
        n_classes=dataset.n_classes,
        d_h=d_h, d_e=d_e, d_k=d_k, d_v=d_v,
    )


def pretrain_source(dataset: Dataset, cfg: TrainConfig, shiftaug: bool = False,
                    val_dataset: Optional[Dataset] = None,
                    dims: Optional[ModelDims] = None) -> PretrainResult:
    """Train a model on labeled source data.

    Class-balanced mini-batches, timestep/pixel subsampling, focal loss,
    Adam with a cosine schedule. With `shiftaug`, each presentation of an
    example is shifted by an independent uniform integer in
    [-max_shift, max_shift]. The returned weights are the epoch with the
    best held-out macro-F1; both domains' normalization statistics are
    initialized from the source statistics.
    """
    cfg.validate()
    _check_labeled(dataset)
    if not dataset.samples:
        raise EmptyDatasetError("pretraining needs a non-empty dataset")

    rng_data = stream(cfg.seed, "data")
    rng_init = stream(cfg.seed, "init")
    rng_batches = stream(cfg.seed, "batches")
    rng_aug = stream(cfg.seed, "augmentation")
    rng_shift = stream(cfg.seed, "shiftaug")

    train_ds = dataset
    if val_dataset is None and cfg.val_fraction > 0:
        val_dataset, train_ds = split_dataset(
            dataset, (cfg.val_fraction, 1.0 - cfg.val_fraction), rng_data
        )

    if dims is None:
        dims = default_dims(train_ds)
    posenc = PosEncConfig(d_e=dims.d_e, max_shift=cfg.max_shift)
    params = init_params(dims, posenc, train_ds.class_names, rng_init)

    iters = max(1, math.ceil(len(train_ds.labeled()) / cfg.batch_size))
    schedule = CosineSchedule(cfg.pretrain_lr, cfg.pretrain_epochs * iters)
    state = init_optimizer(params, schedule)
    batches = balanced_batches(train_ds, cfg.batch_size, rng_batches)

    best_f1 = -1.0
    best_epoch = 0
    best_params = params.copy()
    log = []
    for epoch in range(1, cfg.pretrain_epochs + 1):
        losses = []
        for _ in range(iters):
            raw = next(batches)
            prepared = []
            for s in raw:
                s = _augment_strong(s, cfg, rng_aug)
                if shiftaug and cfg.max_shift > 0:
                    s = shift_days(s, int(rng_shift.integers(-cfg.max_shift,
                                                             cfg.max_shift + 1)))
                prepared.append(s)
            batch = collate(prepared, dtype=params.dtype)
            probs, cache = forward_batch(params, batch, 0, "source",
                                         train=True, want_cache=True)
            loss, _ = focal_loss_batch(probs, batch.labels, cfg.focal_gamma)
            _check_finite(loss, "pretraining loss")
            grads = backward_batch(params, cache, batch.labels, cfg.focal_gamma)
            adam_step(params, grads, state, cfg.weight_decay)
            losses.append(loss)

        record = {"epoch": epoch, "train_loss": float(np.mean(losses))}
        due = epoch % cfg.val_every == 0 or epoch == cfg.pretrain_epochs
        if due and val_dataset is not None and val_dataset.samples:
            val = evaluate(params, val_dataset, "source", 0)
            record["val_macro_f1"] = val.macro_f1
            # ties go to the later epoch: equal-F1 models keep gaining
            # prediction confidence, which the shift statistics rely on
            if val.macro_f1 >= best_f1:
                best_f1 = val.macro_f1
                best_epoch = epoch
                best_params = params.copy()
        log.append(record)

    if best_epoch == 0:          # no validation split: keep the final epoch
        best_epoch = cfg.pretrain_epochs
        best_params = params
    for name, arr in best_params.norm_stats["source"].items():
        best_params.norm_stats["target"][name] = arr.copy()
    return PretrainResult(params=best_params, best_epoch=best_epoch, log=log)


def _uniform_batches(samples, batch_size, rng):
    """Infinite uniform batches by reshuffled cycling."""
    n = len(samples)
    pool = []
    while True:
        if len(pool) < batch_size:
            pool.extend(samples[int(j)] for j in rng.permutation(n))
        yield pool[:batch_size]
        del pool[:batch_size]


def _adapt_loop(source: Dataset, target: Dataset, init: ModelParams,
                cfg: TrainConfig, method: str) -> tuple:
    """Shared loop: per-epoch shift estimation when method = 'timematch',
    both shifts pinned to zero when method = 'fixmatch'."""
    cfg.validate()
    _check_labeled(source)
    if not source.samples or not target.samples:
        raise EmptyDatasetError("adaptation needs non-empty source and target")
    estimate = method == "timematch"

    rng_batches = stream(cfg.seed, "batches")
    rng_aug = stream(cfg.seed, "augmentation")
    est_seed = int(stream(cfg.seed, "estimation").integers(2**31))

    student = init.copy()
    teacher = init.copy()
    schedule = CosineSchedule(cfg.adapt_lr, cfg.adapt_epochs * cfg.iters_per_epoch)
    state = init_optimizer(student, schedule)
    counters = ScanCounters()
    n_estimation_calls = 0

    src_batches = balanced_batches(source, cfg.batch_size, rng_batches)
    tgt_batches = _uniform_batches(target.samples, cfg.batch_size, rng_batches)

    class_dist = None              # estimated target class distribution
    delta_s2t = 0
    report = AdaptReport(method=method)
    k = init.dims.n_classes

    for epoch in range(1, cfg.adapt_epochs + 1):
        if estimate:
            est = estimate_temporal_shift(
                teacher, target, cfg.max_shift, prior_dist=class_dist,
                sample_cap=cfg.sample_cap, seed=est_seed, counters=counters,
            )
            n_estimation_calls += 1
            delta_t2s = est.delta_t_to_s
            scores = list(est.curve.values())
            if epoch == 1 and max(scores) - min(scores) < 1e-12:
                warnings.warn("flat shift score curve; proceeding with shift 0")
        else:
            delta_t2s = 0
        if epoch == 1:
            delta_s2t = -delta_t2s

        label_counts = np.zeros(k, dtype=np.float64)
        n_confident = 0
        n_conf_correct = 0
        n_conf_labeled = 0
        losses_s = []
        losses_t = []
        for _ in range(cfg.iters_per_epoch):
            src_raw = next(src_batches)
            tgt_raw = next(tgt_batches)

            src_prepared = [_augment_strong(s, cfg, rng_aug) for s in src_raw]
            src_batch = collate(src_prepared, dtype=student.dtype)
            probs_s, cache_s = forward_batch(student, src_batch, delta_s2t,
                                             "source", train=True, want_cache=True)
            loss_s, _ = focal_loss_batch(probs_s, src_batch.labels, cfg.focal_gamma)
            grads = backward_batch(student, cache_s, src_batch.labels, cfg.focal_gamma)

            weak = [_augment_weak(s, cfg, rng_aug) for s in tgt_raw]
            weak_batch = collate(weak, dtype=teacher.dtype)
            q, _ = forward_batch(teacher, weak_batch, delta_t2s, "target",
                                 train=False)
            pseudo = np.argmax(q, axis=1)
            conf = q[np.arange(len(tgt_raw)), pseudo]
            confident = (conf > cfg.conf_threshold).astype(np.float64)

            label_counts += np.bincount(pseudo, minlength=k)
            n_confident += int(confident.sum())
            for s, lab, c in zip(tgt_raw, pseudo, confident):
                if c and s.label is not None:
                    n_conf_labeled += 1
                    n_conf_correct += int(int(lab) == s.label)

            strong = [_augment_strong(s, cfg, rng_aug) for s in tgt_raw]
            strong_batch = collate(strong, dtype=student.dtype)
            probs_t, cache_t = forward_batch(student, strong_batch, 0, "target",
                                             train=True, want_cache=True)
            loss_t, _ = focal_loss_batch(probs_t, pseudo, cfg.focal_gamma,
                                         weights=confident)
            grads_t = backward_batch(student, cache_t, pseudo, cfg.focal_gamma,
                                     weights=confident)
            add_gradients(grads, grads_t, factor=cfg.unsup_weight)

            _check_finite(loss_s + loss_t, "adaptation loss")
            adam_step(student, grads, state, cfg.weight_decay)
            ema_update(teacher, student, cfg.ema_decay)
            losses_s.append(loss_s)
            losses_t.append(loss_t)

        total_pseudo = cfg.iters_per_epoch * cfg.batch_size
        class_dist = label_counts / label_counts.sum()
        report.epochs.append({
            "epoch": epoch,
            "delta_t_to_s": int(delta_t2s),
            "delta_s_to_t": int(delta_s2t),
            "frac_confident": n_confident / total_pseudo,
            "pseudo_label_accuracy": (
                n_conf_correct / n_conf_labeled if n_conf_labeled else None
            ),
            "loss_s2t": float(np.mean(losses_s)),
            "loss_t": float(np.mean(losses_t)),
            "class_distribution": [float(v) for v in class_dist],
        })

    report.summary = {
        "method": method,
        "epochs": cfg.adapt_epochs,
        "iters_per_epoch": cfg.iters_per_epoch,
        "batch_size": cfg.batch_size,
        "delta_s_to_t": int(delta_s2t),
        "final_delta_t_to_s": int(report.epochs[-1]["delta_t_to_s"]),
        "n_estimation_calls": n_estimation_calls,
        "seed": cfg.seed,
    }
    return student, teacher, report


def timematch(source: Dataset, target: Dataset, init: ModelParams,
              cfg: TrainConfig):
    """Adapt `init` to the target domain; target labels are never trained on
    (they only feed the pseudo-label-accuracy diagnostic when present)."""
    student, _, report = _adapt_loop(source, target, init, cfg, "timematch")
    return student, report


def timematch_with_teacher(source: Dataset, target: Dataset, init: ModelParams,
                           cfg: TrainConfig):
    """As `timematch` but also returns the final teacher."""
    return _adapt_loop(source, target, init, cfg, "timematch")


def fixmatch_baseline(source: Dataset, target: Dataset, init: ModelParams,
                      cfg: TrainConfig):
    """The same loop with both shifts pinned to zero and no estimation."""
    student, _, report = _adapt_loop(source, target, init, cfg, "fixmatch")
    return student, report


def fixmatch_with_teacher(source: Dataset, target: Dataset, init: ModelParams,
                          cfg: TrainConfig):
    return _adapt_loop(source, target, init, cfg, "fixmatch")
