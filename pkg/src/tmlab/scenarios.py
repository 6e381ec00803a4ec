"""Ready-made synthetic scenarios.

Domain timing is controlled by `season_offset_days` (positive = later
season). The ground-truth target-to-source shift is therefore
source_offset - target_offset: a target whose season runs earlier than the
source needs a positive day shift to align with it.
"""

from __future__ import annotations

from .sits_data import (
    DomainSpec,
    PhenologyClassSpec,
    ScenarioSpec,
    UnknownClassSpec,
)

_CAL_DENSE = list(range(5, 366, 5))      # ~73 candidate acquisition days


def _domains(true_shift_t2s: float, n_per_domain: int, calendar, dropout):
    """Source at offset 0; target offset chosen so the true shift is as asked."""
    return {
        "source": DomainSpec(
            season_offset_days=0.0,
            calendar_days=list(calendar),
            calendar_dropout=dropout,
            calendar_jitter_days=2,
            n_samples=n_per_domain,
        ),
        "target": DomainSpec(
            season_offset_days=-float(true_shift_t2s),
            calendar_days=list(calendar),
            calendar_dropout=dropout,
            calendar_jitter_days=2,
            n_samples=n_per_domain,
        ),
    }


def standard_scenario(true_shift_t2s: float = 20.0, n_per_domain: int = 2000,
                      pixel_noise: float = 0.02, season_jitter: float = 2.0
                      ) -> ScenarioSpec:
    """Four crop-like classes plus unknown, separated purely by timing.

    All real classes are day-translations of one curve shape (identical
    spectral mix, width, and slopes), so the classifier has to rely on the
    temporal axis. That makes its prediction statistics sharply informative
    about the injected shift. The inter-class gaps are unequal so no single
    global shift re-aligns every class with a neighbour.
    """
    mix = (1.0, 0.85, 0.7, 0.55)
    shape = dict(amplitude=0.55, baseline=0.15, k1=0.18, k2=0.18, mix=mix)
    classes = [
        PhenologyClassSpec(0, t_sos=55.0, t_eos=150.0, **shape),
        PhenologyClassSpec(1, t_sos=80.0, t_eos=175.0, **shape),
        PhenologyClassSpec(2, t_sos=130.0, t_eos=225.0, **shape),
        PhenologyClassSpec(3, t_sos=162.0, t_eos=257.0, **shape),
    ]
    return ScenarioSpec(
        class_specs=classes,
        unknown_spec=UnknownClassSpec(baseline_range=(0.1, 0.55),
                                      wander_amplitude=0.05, n_harmonics=3),
        class_names=["spring", "early", "mid", "late", "unknown"],
        class_frequencies=(0.28, 0.24, 0.2, 0.16, 0.12),
        domains=_domains(true_shift_t2s, n_per_domain, _CAL_DENSE, 0.2),
        n_channels=4,
        pixel_count_range=(8, 24),
        pixel_noise=pixel_noise,
        season_jitter=season_jitter,
    )


def confusable_pair_scenario(true_shift_t2s: float = 20.0, pair_gap: float = 25.0,
                             n_per_domain: int = 1200, pixel_noise: float = 0.02,
                             season_jitter: float = 2.0) -> ScenarioSpec:
    """Two classes identical up to `pair_gap` days, plus two spectrally
    distinct classes and unknown.

    A model applied across a domain shift close to `pair_gap` confuses the
    twin classes; spectrally distinct classes survive shift-invariant
    training, so shift-aware and shift-invariant methods separate cleanly.
    """
    twin_mix = (1.0, 0.85, 0.7, 0.55)
    classes = [
        PhenologyClassSpec(0, t_sos=110.0, t_eos=210.0, amplitude=0.55,
                           baseline=0.15, k1=0.11, k2=0.1, mix=twin_mix),
        PhenologyClassSpec(1, t_sos=110.0 + pair_gap, t_eos=210.0 + pair_gap,
                           amplitude=0.55, baseline=0.15, k1=0.11, k2=0.1,
                           mix=twin_mix),
        PhenologyClassSpec(2, t_sos=70.0, t_eos=260.0, amplitude=0.35,
                           baseline=0.3, k1=0.05, k2=0.05, mix=(0.5, 0.95, 0.4, 0.9)),
        PhenologyClassSpec(3, t_sos=140.0, t_eos=230.0, amplitude=0.6,
                           baseline=0.1, k1=0.14, k2=0.13, mix=(0.3, 0.5, 1.0, 0.75)),
    ]
    return ScenarioSpec(
        class_specs=classes,
        unknown_spec=UnknownClassSpec(baseline_range=(0.1, 0.55),
                                      wander_amplitude=0.05, n_harmonics=3),
        class_names=["twin_a", "twin_b", "broad", "distinct", "unknown"],
        class_frequencies=(0.26, 0.22, 0.2, 0.17, 0.15),
        domains=_domains(true_shift_t2s, n_per_domain, _CAL_DENSE, 0.2),
        n_channels=4,
        pixel_count_range=(8, 24),
        pixel_noise=pixel_noise,
        season_jitter=season_jitter,
    )


def mirrored_scenario(half_shift: float = 10.0, n_per_domain: int = 1500
                      ) -> ScenarioSpec:
    """Two symmetric domains offset by +/- half_shift around the base timing."""
    spec = standard_scenario(true_shift_t2s=0.0, n_per_domain=n_per_domain)
    spec.domains = {
        "source": DomainSpec(
            season_offset_days=-float(half_shift),
            calendar_days=_CAL_DENSE, calendar_dropout=0.2,
            calendar_jitter_days=2, n_samples=n_per_domain,
        ),
        "target": DomainSpec(
            season_offset_days=float(half_shift),
            calendar_days=_CAL_DENSE, calendar_dropout=0.2,
            calendar_jitter_days=2, n_samples=n_per_domain,
        ),
    }
    return spec


def separable_scenario(n_per_domain: int = 400) -> ScenarioSpec:
    """Two easily separable classes plus unknown; a training sanity check."""
    classes = [
        PhenologyClassSpec(0, t_sos=90.0, t_eos=180.0, amplitude=0.6,
                           baseline=0.1, k1=0.12, k2=0.1, mix=(1.0, 0.3, 0.8, 0.2)),
        PhenologyClassSpec(1, t_sos=180.0, t_eos=290.0, amplitude=0.5,
                           baseline=0.25, k1=0.08, k2=0.12, mix=(0.3, 1.0, 0.2, 0.9)),
    ]
    return ScenarioSpec(
        class_specs=classes,
        unknown_spec=UnknownClassSpec(baseline_range=(0.15, 0.5),
                                      wander_amplitude=0.04, n_harmonics=3),
        class_names=["early", "late", "unknown"],
        class_frequencies=(0.4, 0.4, 0.2),
        domains=_domains(0.0, n_per_domain, list(range(10, 366, 10)), 0.1),
        n_channels=4,
        pixel_count_range=(6, 16),
        pixel_noise=0.02,
        season_jitter=1.0,
    )
