"""Pixel-set time series data: domain types, synthetic generation, and IO.

A sample is one parcel: a T x N x C tensor of reflectance-like values in
[0, 1] observed on T irregular days-of-year by N pixels of C channels.
Synthetic domains are driven by per-class double-logistic seasonal curves
whose timing can be offset per domain, which injects a known temporal shift
between domains.
"""

from __future__ import annotations

import gzip
import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import DatasetFormatError, EmptyDatasetError, ValidationError
from .rng import sample_seed

UNKNOWN_CLASS = "unknown"
DAY_MIN = 1
DAY_MAX = 366


# ---------------------------------------------------------------------------
# Domain types


@dataclass
class TimeSeriesSample:
    """One parcel: acquisition days, pixel tensor, optional class label."""

    id: str
    days: np.ndarray           # (T,) int64, strictly increasing
    pixels: np.ndarray         # (T, N, C) float32
    label: Optional[int] = None

    @property
    def n_steps(self):
        return self.pixels.shape[0]

    @property
    def n_pixels(self):
        return self.pixels.shape[1]

    @property
    def n_channels(self):
        return self.pixels.shape[2]

    def validate(self, n_classes=None, check_day_range=True):
        """Check structural invariants; raise ValidationError on violation.

        `check_day_range` is off for shifted samples, whose days may
        legitimately leave [1, 366].
        """
        if self.days.ndim != 1 or self.pixels.ndim != 3:
            raise ValidationError(f"sample {self.id}: bad array ranks")
        t, n, c = self.pixels.shape
        if t < 1 or n < 1 or c < 1:
            raise ValidationError(f"sample {self.id}: empty axis in {self.pixels.shape}")
        if len(self.days) != t:
            raise ValidationError(f"sample {self.id}: {len(self.days)} days for {t} steps")
        if np.any(np.diff(self.days) <= 0):
            raise ValidationError(f"sample {self.id}: days not strictly increasing")
        if check_day_range and (self.days[0] < DAY_MIN or self.days[-1] > DAY_MAX):
            raise ValidationError(f"sample {self.id}: days outside [{DAY_MIN}, {DAY_MAX}]")
        if not np.all(np.isfinite(self.pixels)):
            raise ValidationError(f"sample {self.id}: non-finite pixels")
        if self.label is not None:
            if self.label < 0 or (n_classes is not None and self.label >= n_classes):
                raise ValidationError(f"sample {self.id}: label {self.label} out of range")


@dataclass
class Dataset:
    """A domain's samples plus its class inventory."""

    samples: list
    class_names: list
    domain_id: str

    @property
    def n_classes(self):
        return len(self.class_names)

    @property
    def n_channels(self):
        if not self.samples:
            return None
        return self.samples[0].n_channels

    def labeled(self):
        return [s for s in self.samples if s.label is not None]

    def validate(self, check_day_range=True):
        if not self.class_names:
            raise ValidationError("class_names must be non-empty")
        if self.class_names.count(UNKNOWN_CLASS) != 1:
            raise ValidationError(f"exactly one {UNKNOWN_CLASS!r} class required")
        c = self.n_channels
        for s in self.samples:
            s.validate(n_classes=self.n_classes, check_day_range=check_day_range)
            if s.n_channels != c:
                raise ValidationError(f"sample {s.id}: channel count {s.n_channels} != {c}")


def datasets_equal(a: Dataset, b: Dataset) -> bool:
    """Field-for-field equality, pixel payloads compared bit-exactly."""
    if a.class_names != b.class_names or a.domain_id != b.domain_id:
        return False
    if len(a.samples) != len(b.samples):
        return False
    for sa, sb in zip(a.samples, b.samples):
        if sa.id != sb.id or sa.label != sb.label:
            return False
        if not np.array_equal(sa.days, sb.days):
            return False
        if sa.pixels.shape != sb.pixels.shape:
            return False
        if not np.array_equal(sa.pixels.view(np.uint32), sb.pixels.view(np.uint32)):
            return False
    return True


@dataclass
class PhenologyClassSpec:
    """Double-logistic seasonal curve for one crop-like class."""

    class_index: int
    t_sos: float               # start-of-season day
    t_eos: float               # end-of-season day
    amplitude: float
    baseline: float
    k1: float                  # green-up slope
    k2: float                  # senescence slope
    mix: Sequence[float]       # per-channel weights, length C

    def validate(self, n_channels=None):
        if not self.t_sos < self.t_eos:
            raise ValidationError(f"class {self.class_index}: t_sos must precede t_eos")
        if self.amplitude <= 0:
            raise ValidationError(f"class {self.class_index}: amplitude must be > 0")
        if self.k1 <= 0 or self.k2 <= 0:
            raise ValidationError(f"class {self.class_index}: slopes must be > 0")
        if n_channels is not None and len(self.mix) != n_channels:
            raise ValidationError(f"class {self.class_index}: mix length != channels")


@dataclass
class UnknownClassSpec:
    """Diffuse catch-all class: per-parcel random baseline plus slow wander."""

    baseline_range: tuple = (0.1, 0.6)
    wander_amplitude: float = 0.05
    n_harmonics: int = 3


@dataclass
class DomainSpec:
    """Per-domain knobs of a scenario."""

    season_offset_days: float = 0.0     # added to every class's t_sos/t_eos
    calendar_days: Sequence[int] = ()   # candidate acquisition days, increasing
    calendar_dropout: float = 0.0       # per-day drop probability per parcel
    calendar_jitter_days: int = 0       # per-parcel uniform day jitter per candidate
    n_samples: int = 0

    def validate(self):
        if abs(self.season_offset_days) > 120:
            raise ValidationError("|season_offset_days| must be <= 120")
        cal = np.asarray(self.calendar_days)
        if cal.size == 0:
            raise ValidationError("calendar_days must be non-empty")
        if np.any(np.diff(cal) <= 0):
            raise ValidationError("calendar_days must be strictly increasing")
        if cal[0] < DAY_MIN or cal[-1] > DAY_MAX:
            raise ValidationError(f"calendar_days must lie in [{DAY_MIN}, {DAY_MAX}]")
        if not 0.0 <= self.calendar_dropout <= 0.9:
            raise ValidationError("calendar_dropout must be in [0, 0.9]")
        if self.calendar_jitter_days < 0:
            raise ValidationError("calendar_jitter_days must be >= 0")
        if self.n_samples < 0:
            raise ValidationError("n_samples must be >= 0")


@dataclass
class ScenarioSpec:
    """Full recipe for a multi-domain synthetic benchmark."""

    class_specs: list                   # K-1 PhenologyClassSpec entries
    unknown_spec: UnknownClassSpec
    class_names: list                   # K names, last is "unknown"
    class_frequencies: Sequence[float]  # K values, sum to 1
    domains: dict                       # domain_id -> DomainSpec
    n_channels: int
    pixel_count_range: tuple = (8, 24)
    pixel_noise: float = 0.02           # per-element Gaussian sigma
    season_jitter: float = 2.0          # per-parcel timing jitter sigma, days

    def validate(self):
        k = len(self.class_names)
        if k < 2 or self.class_names[-1] != UNKNOWN_CLASS:
            raise ValidationError(f"class_names must end with {UNKNOWN_CLASS!r}")
        if len(self.class_specs) != k - 1:
            raise ValidationError("need one PhenologyClassSpec per non-unknown class")
        freqs = np.asarray(self.class_frequencies, dtype=np.float64)
        if len(freqs) != k:
            raise ValidationError("class_frequencies length must equal class count")
        if np.any(freqs < 0) or abs(freqs.sum() - 1.0) > 1e-9:
            raise ValidationError("class_frequencies must be non-negative and sum to 1")
        if not self.domains:
            raise ValidationError("at least one domain required")
        for spec in self.class_specs:
            spec.validate(self.n_channels)
        for dom in self.domains.values():
            dom.validate()
        lo, hi = self.pixel_count_range
        if lo < 1 or hi < lo:
            raise ValidationError("pixel_count_range must satisfy 1 <= lo <= hi")
        if self.pixel_noise < 0 or self.season_jitter < 0:
            raise ValidationError("noise levels must be >= 0")

    def to_dict(self):
        return {
            "class_names": list(self.class_names),
            "class_frequencies": [float(f) for f in self.class_frequencies],
            "n_channels": self.n_channels,
            "pixel_count_range": list(self.pixel_count_range),
            "pixel_noise": self.pixel_noise,
            "season_jitter": self.season_jitter,
            "class_specs": [
                {
                    "class_index": s.class_index,
                    "t_sos": s.t_sos,
                    "t_eos": s.t_eos,
                    "amplitude": s.amplitude,
                    "baseline": s.baseline,
                    "k1": s.k1,
                    "k2": s.k2,
                    "mix": [float(m) for m in s.mix],
                }
                for s in self.class_specs
            ],
            "unknown_spec": {
                "baseline_range": list(self.unknown_spec.baseline_range),
                "wander_amplitude": self.unknown_spec.wander_amplitude,
                "n_harmonics": self.unknown_spec.n_harmonics,
            },
            "domains": {
                name: {
                    "season_offset_days": d.season_offset_days,
                    "calendar_days": [int(x) for x in d.calendar_days],
                    "calendar_dropout": d.calendar_dropout,
                    "calendar_jitter_days": d.calendar_jitter_days,
                    "n_samples": d.n_samples,
                }
                for name, d in self.domains.items()
            },
        }

    @classmethod
    def from_dict(cls, data):
        try:
            spec = cls(
                class_specs=[PhenologyClassSpec(**s) for s in data["class_specs"]],
                unknown_spec=UnknownClassSpec(
                    baseline_range=tuple(data["unknown_spec"]["baseline_range"]),
                    wander_amplitude=data["unknown_spec"]["wander_amplitude"],
                    n_harmonics=data["unknown_spec"]["n_harmonics"],
                ),
                class_names=list(data["class_names"]),
                class_frequencies=list(data["class_frequencies"]),
                domains={
                    name: DomainSpec(
                        season_offset_days=d["season_offset_days"],
                        calendar_days=list(d["calendar_days"]),
                        calendar_dropout=d["calendar_dropout"],
                        calendar_jitter_days=d.get("calendar_jitter_days", 0),
                        n_samples=d["n_samples"],
                    )
                    for name, d in data["domains"].items()
                },
                n_channels=int(data["n_channels"]),
                pixel_count_range=tuple(data["pixel_count_range"]),
                pixel_noise=data["pixel_noise"],
                season_jitter=data["season_jitter"],
            )
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed scenario: {exc}") from exc
        spec.validate()
        return spec


# ---------------------------------------------------------------------------
# Phenology curves


def _logistic(x):
    return 1.0 / (1.0 + np.exp(-x))


def phenology_value(spec: PhenologyClassSpec, day) -> np.ndarray:
    """Per-channel curve value at `day` (scalar or array -> (..., C))."""
    day = np.asarray(day, dtype=np.float64)
    curve = spec.baseline + spec.amplitude * (
        _logistic(spec.k1 * (day - spec.t_sos)) - _logistic(spec.k2 * (day - spec.t_eos))
    )
    mix = np.asarray(spec.mix, dtype=np.float64)
    return curve[..., None] * mix


def _unknown_series(spec: UnknownClassSpec, days, rng):
    """Per-parcel diffuse series: random baseline + slow harmonic wander."""
    lo, hi = spec.baseline_range
    # channel count comes from caller via mix-free broadcast; draw later
    amps = rng.normal(0.0, spec.wander_amplitude, size=spec.n_harmonics)
    amps = amps / np.arange(1, spec.n_harmonics + 1)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=spec.n_harmonics)
    t = np.asarray(days, dtype=np.float64)
    wander = np.zeros_like(t)
    for h in range(spec.n_harmonics):
        wander += amps[h] * np.sin(2.0 * np.pi * (h + 1) * t / 366.0 + phases[h])
    return wander, (lo, hi)


# ---------------------------------------------------------------------------
# Generation


def generate_domain(scenario: ScenarioSpec, domain_id: str, seed: int) -> Dataset:
    """Synthesize one domain of `scenario` deterministically from `seed`.

    Per-sample randomness comes from a generator keyed by (seed, sample
    index) only, so two domains generated with the same seed and identical
    domain specs are identical sample-for-sample.
    """
    scenario.validate()
    if domain_id not in scenario.domains:
        raise ValidationError(f"unknown domain {domain_id!r}")
    dom = scenario.domains[domain_id]
    freqs = np.asarray(scenario.class_frequencies, dtype=np.float64)
    freqs = freqs / freqs.sum()
    k = len(scenario.class_names)
    c = scenario.n_channels
    cal = np.asarray(dom.calendar_days, dtype=np.int64)
    lo_n, hi_n = scenario.pixel_count_range

    samples = []
    for i in range(dom.n_samples):
        rng = np.random.default_rng(sample_seed(seed, i))
        label = int(rng.choice(k, p=freqs))
        n_pix = int(rng.integers(lo_n, hi_n + 1))

        keep = rng.random(cal.size) >= dom.calendar_dropout
        if not keep.any():
            keep[int(np.argmin(rng.random(cal.size)))] = True
        days = cal[keep]
        if dom.calendar_jitter_days:
            j = dom.calendar_jitter_days
            days = np.unique(np.clip(
                days + rng.integers(-j, j + 1, size=days.size), DAY_MIN, DAY_MAX
            ))

        jitter = rng.normal(0.0, scenario.season_jitter)
        if label == k - 1:
            wander, (blo, bhi) = _unknown_series(scenario.unknown_spec, days, rng)
            base = rng.uniform(blo, bhi, size=c)
            clean = base[None, :] + wander[:, None]          # (T, C)
        else:
            spec = scenario.class_specs[label]
            offset = dom.season_offset_days + jitter
            shifted = PhenologyClassSpec(
                class_index=spec.class_index,
                t_sos=spec.t_sos + offset,
                t_eos=spec.t_eos + offset,
                amplitude=spec.amplitude,
                baseline=spec.baseline,
                k1=spec.k1,
                k2=spec.k2,
                mix=spec.mix,
            )
            clean = phenology_value(shifted, days)           # (T, C)

        noise = rng.normal(0.0, scenario.pixel_noise, size=(days.size, n_pix, c))
        pixels = np.clip(clean[:, None, :] + noise, 0.0, 1.0).astype(np.float32)
        samples.append(
            TimeSeriesSample(id=f"{domain_id}-{i:05d}", days=days, pixels=pixels, label=label)
        )

    ds = Dataset(samples=samples, class_names=list(scenario.class_names), domain_id=domain_id)
    ds.validate()
    return ds


def true_shift_t2s(scenario: ScenarioSpec, source_id: str, target_id: str) -> float:
    """Ground-truth day shift that aligns target data with source timing."""
    return (
        scenario.domains[source_id].season_offset_days
        - scenario.domains[target_id].season_offset_days
    )


# ---------------------------------------------------------------------------
# Sample transforms


def shift_days(sample: TimeSeriesSample, delta: int) -> TimeSeriesSample:
    """Add `delta` to every acquisition day; pixels are shared, not copied."""
    return TimeSeriesSample(
        id=sample.id,
        days=sample.days + int(delta),
        pixels=sample.pixels,
        label=sample.label,
    )


def subsample_timesteps(sample: TimeSeriesSample, k: int, rng) -> TimeSeriesSample:
    """Keep k uniformly chosen timesteps (sorted); identity when T <= k."""
    if k < 1:
        raise ValidationError("k must be >= 1")
    t = sample.n_steps
    if t <= k:
        return sample
    idx = np.sort(rng.choice(t, size=k, replace=False))
    return TimeSeriesSample(
        id=sample.id,
        days=sample.days[idx],
        pixels=sample.pixels[idx],
        label=sample.label,
    )


def subsample_pixels(sample: TimeSeriesSample, s: int, rng) -> TimeSeriesSample:
    """Keep a random pixel set of size s, with replacement when N < s."""
    if s < 1:
        raise ValidationError("s must be >= 1")
    n = sample.n_pixels
    idx = np.sort(rng.choice(n, size=s, replace=n < s))
    return TimeSeriesSample(
        id=sample.id,
        days=sample.days,
        pixels=sample.pixels[:, idx],
        label=sample.label,
    )


# ---------------------------------------------------------------------------
# Batch sampling


def balanced_batches(dataset: Dataset, batch_size: int, rng) -> Iterator[list]:
    """Infinite stream of class-balanced batches of labeled samples.

    Per-class counts within a batch differ by at most one; classes with too
    few samples are recycled (reshuffled) as needed.
    """
    if batch_size < 1:
        raise ValidationError("batch_size must be >= 1")
    k = dataset.n_classes
    by_class = [[] for _ in range(k)]
    for s in dataset.samples:
        if s.label is not None:
            by_class[s.label].append(s)
    if all(not pool for pool in by_class):
        raise EmptyDatasetError("balanced_batches requires labeled samples")
    for ci, pool in enumerate(by_class):
        if not pool:
            raise ValidationError(
                f"class {dataset.class_names[ci]!r} has no labeled samples"
            )

    def cycled(pool):
        while True:
            for j in rng.permutation(len(pool)):
                yield pool[int(j)]

    iters = [cycled(pool) for pool in by_class]
    base, rem = divmod(batch_size, k)
    while True:
        counts = np.full(k, base, dtype=np.int64)
        if rem:
            counts[rng.permutation(k)[:rem]] += 1
        batch = []
        for ci in range(k):
            batch.extend(next(iters[ci]) for _ in range(int(counts[ci])))
        order = rng.permutation(len(batch))
        yield [batch[int(j)] for j in order]


def split_dataset(dataset: Dataset, fractions, rng):
    """Random partition of the samples by `fractions`; sizes sum to n."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValidationError("split fractions must sum to 1")
    n = len(dataset.samples)
    order = rng.permutation(n)
    sizes = [int(math.floor(f * n)) for f in fractions]
    sizes[-1] = n - sum(sizes[:-1])
    parts = []
    start = 0
    for size in sizes:
        idx = sorted(int(j) for j in order[start : start + size])
        parts.append(
            Dataset(
                samples=[dataset.samples[j] for j in idx],
                class_names=list(dataset.class_names),
                domain_id=dataset.domain_id,
            )
        )
        start += size
    return parts


def remap_to_classes(dataset: Dataset, class_names: list) -> Dataset:
    """Relabel samples onto `class_names`; unlisted classes become unknown."""
    if class_names[-1] != UNKNOWN_CLASS:
        raise ValidationError(f"class_names must end with {UNKNOWN_CLASS!r}")
    unknown_idx = len(class_names) - 1
    index_of = {name: i for i, name in enumerate(class_names)}
    samples = []
    for s in dataset.samples:
        label = s.label
        if label is not None:
            name = dataset.class_names[label]
            label = index_of.get(name, unknown_idx)
        samples.append(
            TimeSeriesSample(id=s.id, days=s.days, pixels=s.pixels, label=label)
        )
    return Dataset(samples=samples, class_names=list(class_names), domain_id=dataset.domain_id)


def select_frequent_classes(dataset: Dataset, min_count: int) -> Dataset:
    """Keep classes with >= min_count labeled samples; remap the rest to unknown."""
    counts = np.zeros(dataset.n_classes, dtype=np.int64)
    for s in dataset.samples:
        if s.label is not None:
            counts[s.label] += 1
    kept = [
        name
        for i, name in enumerate(dataset.class_names[:-1])
        if counts[i] >= min_count
    ]
    return remap_to_classes(dataset, kept + [UNKNOWN_CLASS])


def stable_subset(samples: Sequence[TimeSeriesSample], cap: int, seed: int = 0) -> list:
    """First `cap` samples after a seeded id-keyed shuffle.

    Keyed by sample id so the retained subset does not depend on the order
    the samples arrive in.
    """
    if cap is None or len(samples) <= cap:
        return list(samples)
    def key(s):
        return hashlib.sha256(f"{seed}:{s.id}".encode("utf-8")).digest()
    chosen = set(id(s) for s in sorted(samples, key=key)[:cap])
    return [s for s in samples if id(s) in chosen]


# ---------------------------------------------------------------------------
# File format: one JSON object per line, optional gzip by extension


def _opener(path, mode):
    if str(path).endswith(".gz"):
        return gzip.open(path, mode + "t", encoding="utf-8")
    return open(path, mode, encoding="utf-8")


def save_dataset(dataset: Dataset, path) -> None:
    """Write the line-delimited JSON dataset format (gzip if path ends .gz)."""
    header = {
        "format": "tmlab-dataset",
        "version": 1,
        "classes": list(dataset.class_names),
        "channels": dataset.n_channels if dataset.n_channels is not None else 0,
        "domain_id": dataset.domain_id,
    }
    with _opener(path, "w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for s in dataset.samples:
            t, n, c = s.pixels.shape
            record = {
                "id": s.id,
                "days": [int(d) for d in s.days],
                "shape": [t, n, c],
                "pixels": [float(v) for v in np.ascontiguousarray(s.pixels, dtype=np.float32).ravel()],
                "label": None if s.label is None else int(s.label),
            }
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def load_dataset(path) -> Dataset:
    """Parse a dataset file; structured errors name the line and sample id."""
    with _opener(path, "r") as fh:
        header_line = fh.readline()
        if not header_line:
            raise DatasetFormatError("empty file", line=1)
        try:
            header = json.loads(header_line)
        except json.JSONDecodeError as exc:
            raise DatasetFormatError(f"bad header JSON: {exc}", line=1) from exc
        if header.get("format") != "tmlab-dataset":
            raise DatasetFormatError("not a tmlab-dataset file", line=1)
        if header.get("version") != 1:
            raise DatasetFormatError(f"unsupported version {header.get('version')}", line=1)
        classes = header.get("classes")
        channels = header.get("channels")
        domain_id = header.get("domain_id", "")
        if not isinstance(classes, list) or not classes:
            raise DatasetFormatError("header missing class list", line=1)
        if classes.count(UNKNOWN_CLASS) != 1:
            raise DatasetFormatError(f"header classes need exactly one {UNKNOWN_CLASS!r}", line=1)

        samples = []
        for lineno, raw in enumerate(fh, start=2):
            if not raw.strip():
                continue
            try:
                rec = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(f"bad sample JSON: {exc}", line=lineno) from exc
            sid = rec.get("id")
            try:
                t, n, c = (int(v) for v in rec["shape"])
                days = np.asarray(rec["days"], dtype=np.int64)
                flat = np.asarray(rec["pixels"], dtype=np.float32)
                label = rec["label"]
            except (KeyError, TypeError, ValueError) as exc:
                raise DatasetFormatError(f"malformed record: {exc}", line=lineno, sample_id=sid) from exc
            if c != channels:
                raise DatasetFormatError(
                    f"channel count {c} != header {channels}", line=lineno, sample_id=sid
                )
            if days.size != t:
                raise DatasetFormatError(
                    f"{days.size} days for {t} steps", line=lineno, sample_id=sid
                )
            if flat.size != t * n * c:
                raise DatasetFormatError(
                    f"pixel payload size {flat.size} != {t}*{n}*{c}", line=lineno, sample_id=sid
                )
            if np.any(np.diff(days) <= 0):
                raise DatasetFormatError("days not strictly increasing", line=lineno, sample_id=sid)
            if label is not None:
                label = int(label)
                if label < 0 or label >= len(classes):
                    raise DatasetFormatError(f"label {label} out of range", line=lineno, sample_id=sid)
            samples.append(
                TimeSeriesSample(
                    id=str(sid), days=days, pixels=flat.reshape(t, n, c), label=label
                )
            )

    return Dataset(samples=samples, class_names=list(classes), domain_id=domain_id)
