"""A small differentiable pixel-set temporal classifier.

Architecture, per sample: two dense layers (batch-normalized) embed every
pixel at every timestep, mean-and-std pooling over pixels plus one dense
layer yields a per-timestep embedding, sinusoidal day-of-year encoding is
added, a single attention head with a learnable master query pools the
sequence into one vector, and a two-layer head produces class logits.

Everything is plain numpy: forward, exact analytic backward, Adam with a
cosine learning-rate schedule, EMA weight averaging, and a binary
checkpoint format. Normalization layers keep separate running statistics
per domain ("source"/"target") so each domain is forwarded with its own
statistics.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import (
    CheckpointError,
    DimensionError,
    ShiftRangeError,
    ValidationError,
)
from .sits_data import TimeSeriesSample

BN_EPS = 1e-5
BN_MOMENTUM = 0.9          # keep-rate of the running statistics
POOL_STD_EPS = 1e-5        # inside sqrt of the std pooling
PROB_FLOOR = 1e-12
DOMAIN_TAGS = ("source", "target")


def _mm(x, w):
    """Matmul over the last axis via one 2-D GEMM regardless of rank."""
    lead = x.shape[:-1]
    return (x.reshape(-1, x.shape[-1]) @ w).reshape(lead + (w.shape[-1],))

PARAM_NAMES = (
    "pse1_w", "pse1_b",
    "pse2_w", "pse2_b",
    "pse3_w", "pse3_b",
    "att_key_w", "att_val_w", "att_query",
    "head1_w", "head1_b",
    "head2_w", "head2_b",
)
STAT_NAMES = ("bn1_mean", "bn1_var", "bn2_mean", "bn2_var")


# ---------------------------------------------------------------------------
# Positional encoding


@dataclass
class PosEncConfig:
    """Sinusoidal day encoding with an offset so shifted days stay valid."""

    d_e: int
    max_shift: int = 60
    base: float = 10000.0

    def validate(self):
        if self.d_e % 2 != 0 or self.d_e < 2:
            raise ValidationError("d_e must be a positive even number")
        if self.max_shift < 0:
            raise ValidationError("max_shift must be >= 0")


def positional_encoding(days, cfg: PosEncConfig, shift: int = 0, dtype=np.float32):
    """Sinusoid rows for (days + shift + max_shift); errors on negative input."""
    cfg.validate()
    pos = np.asarray(days, dtype=np.int64) + int(shift) + cfg.max_shift
    if pos.size and pos.min() < 0:
        raise ShiftRangeError(
            f"day + shift + {cfg.max_shift} fell below 0 (min {int(pos.min())})"
        )
    half = cfg.d_e // 2
    freq = cfg.base ** (2.0 * np.arange(half, dtype=np.float64) / cfg.d_e)
    ang = pos[..., None].astype(np.float64) / freq
    out = np.empty(pos.shape + (cfg.d_e,), dtype=dtype)
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out


# ---------------------------------------------------------------------------
# Parameters


@dataclass
class ModelDims:
    n_channels: int
    n_classes: int
    d_h: int = 64
    d_e: int = 64
    d_k: int = 16
    d_v: int = 64

    def validate(self):
        for name in ("n_channels", "n_classes", "d_h", "d_e", "d_k", "d_v"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")

    def to_dict(self):
        return {
            "n_channels": self.n_channels,
            "n_classes": self.n_classes,
            "d_h": self.d_h,
            "d_e": self.d_e,
            "d_k": self.d_k,
            "d_v": self.d_v,
        }


@dataclass
class ModelParams:
    """All learnable weights plus per-domain normalization statistics."""

    dims: ModelDims
    posenc: PosEncConfig
    class_names: list
    weights: dict                      # name -> ndarray, keys PARAM_NAMES
    norm_stats: dict                   # domain tag -> {stat name -> ndarray}

    @property
    def dtype(self):
        return self.weights["pse1_w"].dtype

    def param_items(self):
        return [(name, self.weights[name]) for name in PARAM_NAMES]

    def stat_items(self):
        return [
            (f"{dom}/{name}", self.norm_stats[dom][name])
            for dom in DOMAIN_TAGS
            for name in STAT_NAMES
        ]

    def copy(self) -> "ModelParams":
        return ModelParams(
            dims=ModelDims(**self.dims.to_dict()),
            posenc=PosEncConfig(self.posenc.d_e, self.posenc.max_shift, self.posenc.base),
            class_names=list(self.class_names),
            weights={k: v.copy() for k, v in self.weights.items()},
            norm_stats={
                dom: {k: v.copy() for k, v in stats.items()}
                for dom, stats in self.norm_stats.items()
            },
        )

    def astype(self, dtype) -> "ModelParams":
        out = self.copy()
        out.weights = {k: v.astype(dtype) for k, v in out.weights.items()}
        out.norm_stats = {
            dom: {k: v.astype(dtype) for k, v in stats.items()}
            for dom, stats in out.norm_stats.items()
        }
        return out

    def validate(self):
        self.dims.validate()
        self.posenc.validate()
        if len(self.class_names) != self.dims.n_classes:
            raise DimensionError("class_names length != n_classes")
        for name, arr in self.param_items():
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"non-finite weights in {name}")
        for dom in DOMAIN_TAGS:
            if dom not in self.norm_stats:
                raise ValidationError(f"missing norm stats for domain {dom!r}")
            for name in ("bn1_var", "bn2_var"):
                if np.any(self.norm_stats[dom][name] <= 0):
                    raise ValidationError(f"{dom}/{name} must be > 0")


def _dense_init(rng, fan_in, shape, dtype):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_params(dims: ModelDims, posenc: PosEncConfig, class_names, rng,
                dtype=np.float32) -> ModelParams:
    """Fan-in uniform init for dense layers, scaled normal master query."""
    dims.validate()
    posenc.validate()
    if posenc.d_e != dims.d_e:
        raise DimensionError("positional encoding width must equal d_e")
    if len(class_names) != dims.n_classes:
        raise DimensionError("class_names length != n_classes")
    c, k = dims.n_channels, dims.n_classes
    dh, de, dk, dv = dims.d_h, dims.d_e, dims.d_k, dims.d_v
    weights = {
        "pse1_w": _dense_init(rng, c, (c, dh), dtype),
        "pse1_b": _dense_init(rng, c, (dh,), dtype),
        "pse2_w": _dense_init(rng, dh, (dh, de), dtype),
        "pse2_b": _dense_init(rng, dh, (de,), dtype),
        "pse3_w": _dense_init(rng, 2 * de, (2 * de, de), dtype),
        "pse3_b": _dense_init(rng, 2 * de, (de,), dtype),
        "att_key_w": _dense_init(rng, de, (de, dk), dtype),
        "att_val_w": _dense_init(rng, de, (de, dv), dtype),
        "att_query": (rng.standard_normal(dk) / math.sqrt(dk)).astype(dtype),
        "head1_w": _dense_init(rng, dv, (dv, dh), dtype),
        "head1_b": _dense_init(rng, dv, (dh,), dtype),
        "head2_w": _dense_init(rng, dh, (dh, k), dtype),
        "head2_b": _dense_init(rng, dh, (k,), dtype),
    }
    norm_stats = {
        dom: {
            "bn1_mean": np.zeros(dh, dtype=dtype),
            "bn1_var": np.ones(dh, dtype=dtype),
            "bn2_mean": np.zeros(de, dtype=dtype),
            "bn2_var": np.ones(de, dtype=dtype),
        }
        for dom in DOMAIN_TAGS
    }
    return ModelParams(
        dims=dims, posenc=posenc, class_names=list(class_names),
        weights=weights, norm_stats=norm_stats,
    )


# ---------------------------------------------------------------------------
# Batching


@dataclass
class Batch:
    """Zero-padded batch with validity masks."""

    pixels: np.ndarray     # (B, T, N, C)
    days: np.ndarray       # (B, T) int64, padded with day 1
    tmask: np.ndarray      # (B, T) bool
    pmask: np.ndarray      # (B, N) bool
    labels: Optional[np.ndarray] = None   # (B,) int64, -1 where absent

    @property
    def size(self):
        return self.pixels.shape[0]


def collate(samples, dtype=np.float32) -> Batch:
    if not samples:
        raise ValidationError("cannot collate an empty batch")
    b = len(samples)
    t_max = max(s.n_steps for s in samples)
    n_max = max(s.n_pixels for s in samples)
    c = samples[0].n_channels
    pixels = np.zeros((b, t_max, n_max, c), dtype=dtype)
    days = np.ones((b, t_max), dtype=np.int64)
    tmask = np.zeros((b, t_max), dtype=bool)
    pmask = np.zeros((b, n_max), dtype=bool)
    labels = np.full(b, -1, dtype=np.int64)
    for i, s in enumerate(samples):
        if s.n_channels != c:
            raise DimensionError(f"sample {s.id}: channel count {s.n_channels} != {c}")
        t, n = s.n_steps, s.n_pixels
        pixels[i, :t, :n] = s.pixels
        days[i, :t] = s.days
        tmask[i, :t] = True
        pmask[i, :n] = True
        if s.label is not None:
            labels[i] = s.label
    return Batch(pixels=pixels, days=days, tmask=tmask, pmask=pmask, labels=labels)


# ---------------------------------------------------------------------------
# Forward


def _bn_forward(a, wf, cnt, mean_run, var_run, train, update_running):
    """Batch norm (no affine) over valid (b,t,n) positions, per channel.

    `wf` is the float validity mask (B,T,N); `a` is consumed (normalized in
    place) and returned as xhat.
    """
    if train:
        mean = np.einsum("btnc,btn->c", a, wf) / cnt
        msq = np.einsum("btnc,btnc,btn->c", a, a, wf) / cnt
        var = np.maximum(msq - mean * mean, 0.0)
        if update_running:
            m = a.dtype.type(BN_MOMENTUM)
            mean_run *= m
            mean_run += (1 - m) * mean.astype(mean_run.dtype)
            var_run *= m
            var_run += (1 - m) * var.astype(var_run.dtype)
    else:
        mean = mean_run
        var = var_run
    istd = 1.0 / np.sqrt(var + a.dtype.type(BN_EPS))
    a -= mean
    a *= istd
    return a, {"istd": istd, "cnt": cnt}


def pse_embed(params: ModelParams, batch: Batch, domain: str,
              train: bool = False, update_running: bool = False,
              want_cache: bool = False):
    """Pixel-set embedding stage: per-timestep vectors e of shape (B, T, d_e).

    These do not depend on the temporal shift, so shift scans compute them
    once and reuse them for every candidate shift.
    """
    if domain not in DOMAIN_TAGS:
        raise ValidationError(f"domain must be one of {DOMAIN_TAGS}")
    if batch.pixels.shape[-1] != params.dims.n_channels:
        raise DimensionError(
            f"batch has {batch.pixels.shape[-1]} channels, model expects "
            f"{params.dims.n_channels}"
        )
    w = params.weights
    stats = params.norm_stats[domain]
    dt = params.dtype
    x = batch.pixels.astype(dt, copy=False)
    tmask, pmask = batch.tmask, batch.pmask
    wf = (tmask[:, :, None] & pmask[:, None, :]).astype(dt)    # (B,T,N)
    cnt = dt.type(wf.sum())

    a1 = _mm(x, w["pse1_w"])
    a1 += w["pse1_b"]
    xhat1, bn1 = _bn_forward(a1, wf, cnt, stats["bn1_mean"], stats["bn1_var"],
                             train, update_running)
    h1 = np.maximum(xhat1, 0)

    a2 = _mm(h1, w["pse2_w"])
    a2 += w["pse2_b"]
    xhat2, bn2 = _bn_forward(a2, wf, cnt, stats["bn2_mean"], stats["bn2_var"],
                             train, update_running)
    h2 = np.maximum(xhat2, 0)

    pmask_f = pmask.astype(dt)
    pcnt = pmask_f.sum(axis=1)[:, None, None]                  # (B,1,1)
    mu = np.einsum("btnc,bn->btc", h2, pmask_f) / pcnt         # (B,T,de)
    msq = np.einsum("btnc,btnc,bn->btc", h2, h2, pmask_f) / pcnt
    var_p = np.maximum(msq - mu * mu, 0.0)
    sd = np.sqrt(var_p + dt.type(POOL_STD_EPS))
    u = np.concatenate([mu, sd], axis=-1)                      # (B,T,2de)

    a3 = _mm(u, w["pse3_w"])
    a3 += w["pse3_b"]
    e = np.maximum(a3, 0)                                      # (B,T,de)

    if not want_cache:
        return e, None
    cache = {
        "x": x, "tmask": tmask, "pmask": pmask, "wf": wf,
        "xhat1": xhat1, "bn1": bn1, "h1": h1,
        "xhat2": xhat2, "bn2": bn2, "h2": h2,
        "pmask_f": pmask_f, "pcnt": pcnt, "mu": mu, "sd": sd, "u": u,
        "a3": a3, "train": train,
    }
    return e, cache


def classify_embedded(params: ModelParams, e, days, tmask, shift: int,
                      want_cache: bool = False):
    """Attention pooling + head on precomputed embeddings; returns probs."""
    if abs(int(shift)) > params.posenc.max_shift:
        raise ShiftRangeError(
            f"|shift| = {abs(int(shift))} exceeds max shift {params.posenc.max_shift}"
        )
    w = params.weights
    dt = params.dtype

    pe = positional_encoding(np.where(tmask, days, 1), params.posenc,
                             shift=shift, dtype=dt)
    z = e + pe

    scale = dt.type(1.0 / math.sqrt(params.dims.d_k))
    keys = _mm(z, w["att_key_w"])
    scores = (keys @ w["att_query"]) * scale                   # (B,T)
    neg = dt.type(-1e30) if dt == np.float32 else dt.type(-1e300)
    scores = np.where(tmask, scores, neg)
    smax = scores.max(axis=1, keepdims=True)
    ex = np.exp(scores - smax) * tmask
    attn = ex / ex.sum(axis=1, keepdims=True)                  # (B,T)

    zbar = np.einsum("bt,bte->be", attn, z)                    # pooled embedding
    o = zbar @ w["att_val_w"]                                  # (B,dv)

    g1p = o @ w["head1_w"] + w["head1_b"]
    g1 = np.maximum(g1p, 0)
    logits = g1 @ w["head2_w"] + w["head2_b"]
    lmax = logits.max(axis=1, keepdims=True)
    elog = np.exp(logits - lmax)
    probs = elog / elog.sum(axis=1, keepdims=True)

    if not want_cache:
        return probs, None
    cache = {
        "z": z, "keys": keys, "attn": attn, "zbar": zbar,
        "o": o, "g1p": g1p, "g1": g1, "probs": probs, "scale": scale,
    }
    return probs, cache


def forward_batch(params: ModelParams, batch: Batch, shift: int, domain: str,
                  train: bool, update_running: Optional[bool] = None,
                  want_cache: bool = False):
    """Class probabilities (B, K) for a padded batch; optionally a cache.

    `train` selects batch statistics for normalization (frozen running
    statistics otherwise); `update_running` (default = train) controls the
    running-statistic side effect so gradient checks can evaluate the loss
    as a pure function.
    """
    if abs(int(shift)) > params.posenc.max_shift:
        raise ShiftRangeError(
            f"|shift| = {abs(int(shift))} exceeds max shift {params.posenc.max_shift}"
        )
    if update_running is None:
        update_running = train
    e, pse_cache = pse_embed(params, batch, domain, train=train,
                             update_running=update_running, want_cache=want_cache)
    probs, att_cache = classify_embedded(params, e, batch.days, batch.tmask,
                                         shift, want_cache=want_cache)
    if not want_cache:
        return probs, None
    cache = dict(pse_cache)
    cache.update(att_cache)
    return probs, cache


def forward(params: ModelParams, sample: TimeSeriesSample, shift: int,
            domain: str, mode: str = "eval"):
    """Single-sample convenience wrapper; returns (probs (K,), cache)."""
    if mode not in ("train", "eval"):
        raise ValidationError("mode must be 'train' or 'eval'")
    batch = collate([sample], dtype=params.dtype)
    probs, cache = forward_batch(
        params, batch, shift, domain, train=(mode == "train"), want_cache=True
    )
    return probs[0], cache


def attention_weights(cache) -> np.ndarray:
    """Per-sample attention weights over timesteps from a forward cache."""
    return cache["attn"]


# ---------------------------------------------------------------------------
# Loss


def focal_loss(probs, label, gamma: float) -> float:
    """-(1 - p_y)^gamma * ln(p_y), with p_y clamped to [1e-12, 1]."""
    p = float(np.clip(probs[label], PROB_FLOOR, 1.0))
    return -((1.0 - p) ** gamma) * math.log(p)


def focal_loss_batch(probs, labels, gamma: float, weights=None):
    """Mean weighted focal loss over the batch, accumulated in float64."""
    b = probs.shape[0]
    if weights is None:
        weights = np.ones(b, dtype=np.float64)
    p = np.clip(probs[np.arange(b), labels].astype(np.float64), PROB_FLOOR, 1.0)
    per = -((1.0 - p) ** gamma) * np.log(p)
    return float((weights * per).sum() / b), per


def _focal_dlogits(probs, labels, gamma, weights, b):
    """d(mean weighted focal loss)/dlogits, shape (B, K)."""
    dt = probs.dtype
    p = probs[np.arange(b), labels]
    pc = np.clip(p, dt.type(PROB_FLOOR), dt.type(1.0))
    omp = np.maximum(dt.type(1.0) - pc, dt.type(PROB_FLOOR))
    if gamma == 0:
        s = -np.ones_like(pc)
    else:
        s = gamma * pc * omp ** dt.type(gamma - 1.0) * np.log(pc) - omp ** dt.type(gamma)
    s = np.where(p < PROB_FLOOR, dt.type(0.0), s)       # clamp region: flat loss
    coef = (s * weights.astype(dt) / dt.type(b))[:, None]
    dlogits = -probs * coef
    dlogits[np.arange(b), labels] += coef[:, 0]
    return dlogits


def _bn_backward(dxhat, xhat, bn_ctx, wf):
    """Backward through train-mode batch norm over the valid positions.

    Consumes `dxhat` in place.
    """
    istd, cnt = bn_ctx["istd"], bn_ctx["cnt"]
    s1 = np.einsum("btnc,btn->c", dxhat, wf) / cnt
    s2 = np.einsum("btnc,btnc,btn->c", dxhat, xhat, wf) / cnt
    dxhat -= s1
    dxhat -= xhat * s2
    dxhat *= istd
    dxhat *= wf[..., None]
    return dxhat


def backward_batch(params: ModelParams, cache, labels, gamma: float,
                   weights=None) -> dict:
    """Exact gradients of the mean weighted focal loss for every weight.

    Requires a cache from a train-mode forward (eval-mode caches would
    differentiate a different normalization function than the one used in
    training).
    """
    if cache is None:
        raise ValidationError("backward requires a forward cache")
    w = params.weights
    dt = params.dtype
    probs = cache["probs"]
    b, k = probs.shape
    labels = np.asarray(labels)
    if weights is None:
        weights = np.ones(b, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)

    dlogits = _focal_dlogits(probs, labels, gamma, weights, b)

    g = {}
    g["head2_w"] = cache["g1"].T @ dlogits
    g["head2_b"] = dlogits.sum(axis=0)
    dg1 = dlogits @ w["head2_w"].T
    dg1p = dg1 * (cache["g1p"] > 0)
    g["head1_w"] = cache["o"].T @ dg1p
    g["head1_b"] = dg1p.sum(axis=0)
    do = dg1p @ w["head1_w"].T                                  # (B,dv)

    attn, zbar, keys, z = cache["attn"], cache["zbar"], cache["keys"], cache["z"]
    g["att_val_w"] = zbar.T @ do
    dzbar = do @ w["att_val_w"].T                               # (B,de)
    dattn = np.einsum("be,bte->bt", dzbar, z)
    dscores = attn * (dattn - (attn * dattn).sum(axis=1, keepdims=True))
    scale = cache["scale"]
    dkeys = dscores[:, :, None] * (w["att_query"] * scale)
    g["att_query"] = np.einsum("bt,btk->k", dscores, keys) * scale
    bt = b * z.shape[1]
    z2 = z.reshape(bt, -1)
    g["att_key_w"] = z2.T @ dkeys.reshape(bt, -1)
    dz = _mm(dkeys, w["att_key_w"].T)
    dz += attn[:, :, None] * dzbar[:, None, :]                  # (B,T,de)

    da3 = dz * (cache["a3"] > 0)
    u2 = cache["u"].reshape(bt, -1)
    g["pse3_w"] = u2.T @ da3.reshape(bt, -1)
    g["pse3_b"] = da3.sum(axis=(0, 1))
    du = _mm(da3, w["pse3_w"].T)
    de_ = params.dims.d_e
    dmu, dsd = du[..., :de_], du[..., de_:]

    pcnt = cache["pcnt"]
    h2, mu, sd = cache["h2"], cache["mu"], cache["sd"]
    coef_mu = dmu / pcnt
    coef_var = dsd / sd / pcnt                       # d(sd)/d(var) = 0.5/sd
    dh2 = h2 - mu[:, :, None, :]
    dh2 *= coef_var[:, :, None, :]
    dh2 += coef_mu[:, :, None, :]
    dh2 *= cache["pmask_f"][:, None, :, None]

    wf = cache["wf"]
    dxhat2 = dh2
    dxhat2 *= cache["xhat2"] > 0
    da2 = _bn_backward(dxhat2, cache["xhat2"], cache["bn2"], wf)
    btn = bt * h2.shape[2]
    h1_2 = cache["h1"].reshape(btn, -1)
    g["pse2_w"] = h1_2.T @ da2.reshape(btn, -1)
    g["pse2_b"] = da2.sum(axis=(0, 1, 2))
    dh1 = _mm(da2, w["pse2_w"].T)

    dxhat1 = dh1
    dxhat1 *= cache["xhat1"] > 0
    da1 = _bn_backward(dxhat1, cache["xhat1"], cache["bn1"], wf)
    x2 = cache["x"].reshape(btn, -1)
    g["pse1_w"] = x2.T @ da1.reshape(btn, -1)
    g["pse1_b"] = da1.sum(axis=(0, 1, 2))

    return {name: g[name].astype(dt, copy=False) for name in PARAM_NAMES}


def zero_gradients(params: ModelParams) -> dict:
    return {name: np.zeros_like(arr) for name, arr in params.param_items()}


def add_gradients(acc: dict, other: dict, factor: float = 1.0) -> dict:
    for name in PARAM_NAMES:
        acc[name] += factor * other[name]
    return acc


# ---------------------------------------------------------------------------
# Optimizer


@dataclass
class CosineSchedule:
    base_lr: float
    total_steps: int

    def lr_at(self, step: int) -> float:
        if self.total_steps <= 0:
            return self.base_lr
        frac = min(max(step / self.total_steps, 0.0), 1.0)
        return self.base_lr * 0.5 * (1.0 + math.cos(math.pi * frac))


@dataclass
class OptimizerState:
    schedule: CosineSchedule
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def init_optimizer(params: ModelParams, schedule: CosineSchedule) -> OptimizerState:
    state = OptimizerState(schedule=schedule)
    for name, arr in params.param_items():
        state.m[name] = np.zeros_like(arr)
        state.v[name] = np.zeros_like(arr)
    return state


def adam_step(params: ModelParams, grads: dict, state: OptimizerState,
              weight_decay: float = 0.0) -> float:
    """One Adam update with decoupled weight decay; returns the lr used."""
    lr = state.schedule.lr_at(state.step)
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, p in params.param_items():
        g = grads[name]
        if g.shape != p.shape:
            raise DimensionError(f"gradient shape mismatch for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        if weight_decay:
            update = update + weight_decay * p
        p -= p.dtype.type(lr) * update.astype(p.dtype, copy=False)
    state.step = t
    return lr


def ema_update(teacher: ModelParams, student: ModelParams, alpha: float) -> ModelParams:
    """teacher <- (1 - alpha) * student + alpha * teacher, in place.

    alpha = 1 leaves the teacher untouched; alpha = 0 assigns the student.
    Running normalization statistics follow the same rule.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValidationError("alpha must be in [0, 1]")
    pairs = list(zip(teacher.param_items(), student.param_items())) + list(
        zip(teacher.stat_items(), student.stat_items())
    )
    if alpha == 1.0:
        return teacher
    for (_, t_arr), (_, s_arr) in pairs:
        if alpha == 0.0:
            t_arr[...] = s_arr
        else:
            a = t_arr.dtype.type(alpha)
            t_arr *= a
            t_arr += (1 - a) * s_arr
    return teacher


# ---------------------------------------------------------------------------
# Checkpoint IO


_CKPT_FORMAT = "tmlab-ckpt"


def _write_record(fh, name: str, arr: np.ndarray):
    data = np.ascontiguousarray(arr, dtype="<f4")
    name_b = name.encode("utf-8")
    fh.write(struct.pack("<I", len(name_b)))
    fh.write(name_b)
    fh.write(struct.pack("<I", 3))
    fh.write(b"f32")
    fh.write(struct.pack("<I", data.ndim))
    fh.write(struct.pack(f"<{data.ndim}Q", *data.shape))
    fh.write(data.tobytes())


def _read_exact(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return buf


def _read_record(fh):
    head = fh.read(4)
    if not head:
        return None
    if len(head) != 4:
        raise CheckpointError("truncated checkpoint while reading record header")
    (name_len,) = struct.unpack("<I", head)
    name = _read_exact(fh, name_len, "record name").decode("utf-8")
    (dtype_len,) = struct.unpack("<I", _read_exact(fh, 4, "dtype length"))
    dtype = _read_exact(fh, dtype_len, "dtype").decode("ascii")
    if dtype != "f32":
        raise CheckpointError(f"unsupported dtype {dtype!r} in record {name!r}")
    (rank,) = struct.unpack("<I", _read_exact(fh, 4, "rank"))
    shape = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank, "shape"))
    count = int(np.prod(shape)) if rank else 1
    payload = _read_exact(fh, 4 * count, f"payload of {name!r}")
    arr = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    return name, arr


def save_checkpoint(params: ModelParams, path, optimizer_state: Optional[OptimizerState] = None):
    """Binary checkpoint: one JSON header line, then typed array records."""
    header = {
        "format": _CKPT_FORMAT,
        "version": 1,
        "dims": params.dims.to_dict(),
        "classes": list(params.class_names),
        "posenc": {
            "d_e": params.posenc.d_e,
            "max_shift": params.posenc.max_shift,
            "base": params.posenc.base,
        },
        "has_optimizer": optimizer_state is not None,
    }
    if optimizer_state is not None:
        header["optimizer"] = {
            "step": optimizer_state.step,
            "beta1": optimizer_state.beta1,
            "beta2": optimizer_state.beta2,
            "eps": optimizer_state.eps,
            "base_lr": optimizer_state.schedule.base_lr,
            "total_steps": optimizer_state.schedule.total_steps,
        }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for name, arr in params.param_items():
            _write_record(fh, f"w/{name}", arr)
        for name, arr in params.stat_items():
            _write_record(fh, f"s/{name}", arr)
        if optimizer_state is not None:
            for name in PARAM_NAMES:
                _write_record(fh, f"om/{name}", optimizer_state.m[name])
                _write_record(fh, f"ov/{name}", optimizer_state.v[name])


def load_checkpoint(path):
    """Load (params, optimizer_state or None); never returns a partial model."""
    with open(path, "rb") as fh:
        header_line = fh.readline()
        if not header_line:
            raise CheckpointError("empty checkpoint file")
        try:
            header = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"bad checkpoint header: {exc}") from exc
        if header.get("format") != _CKPT_FORMAT:
            raise CheckpointError("not a tmlab checkpoint")
        if header.get("version") != 1:
            raise CheckpointError(f"unsupported checkpoint version {header.get('version')}")
        try:
            dims = ModelDims(**header["dims"])
            posenc = PosEncConfig(**header["posenc"])
            classes = list(header["classes"])
        except (KeyError, TypeError) as exc:
            raise CheckpointError(f"malformed checkpoint header: {exc}") from exc

        records = {}
        while True:
            rec = _read_record(fh)
            if rec is None:
                break
            records[rec[0]] = rec[1]

    weights = {}
    for name in PARAM_NAMES:
        key = f"w/{name}"
        if key not in records:
            raise CheckpointError(f"missing weight record {name!r}")
        weights[name] = records[key]
    norm_stats = {}
    for dom in DOMAIN_TAGS:
        norm_stats[dom] = {}
        for name in STAT_NAMES:
            key = f"s/{dom}/{name}"
            if key not in records:
                raise CheckpointError(f"missing stat record {dom}/{name}")
            norm_stats[dom][name] = records[key]
    params = ModelParams(dims=dims, posenc=posenc, class_names=classes,
                         weights=weights, norm_stats=norm_stats)
    _check_shapes(params)

    state = None
    if header.get("has_optimizer"):
        meta = header.get("optimizer", {})
        state = OptimizerState(
            schedule=CosineSchedule(meta.get("base_lr", 0.0), meta.get("total_steps", 0)),
            step=int(meta.get("step", 0)),
            beta1=float(meta.get("beta1", 0.9)),
            beta2=float(meta.get("beta2", 0.999)),
            eps=float(meta.get("eps", 1e-8)),
        )
        for name in PARAM_NAMES:
            mk, vk = f"om/{name}", f"ov/{name}"
            if mk not in records or vk not in records:
                raise CheckpointError(f"missing optimizer record for {name!r}")
            state.m[name] = records[mk]
            state.v[name] = records[vk]
    return params, state


def _check_shapes(params: ModelParams):
    d = params.dims
    expected = {
        "pse1_w": (d.n_channels, d.d_h), "pse1_b": (d.d_h,),
        "pse2_w": (d.d_h, d.d_e), "pse2_b": (d.d_e,),
        "pse3_w": (2 * d.d_e, d.d_e), "pse3_b": (d.d_e,),
        "att_key_w": (d.d_e, d.d_k), "att_val_w": (d.d_e, d.d_v),
        "att_query": (d.d_k,),
        "head1_w": (d.d_v, d.d_h), "head1_b": (d.d_h,),
        "head2_w": (d.d_h, d.n_classes), "head2_b": (d.n_classes,),
    }
    for name, shape in expected.items():
        if params.weights[name].shape != shape:
            raise CheckpointError(
                f"record {name!r} has shape {params.weights[name].shape}, expected {shape}"
            )
