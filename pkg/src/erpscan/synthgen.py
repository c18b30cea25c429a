"""Synthetic participants and stimulus-locked three-channel EEG trials.

The generator plants known structure so downstream models can be checked
against ground truth:

* the ERP is a sum of Gaussian components (P1, N1, P3, a late slow wave)
  whose latencies and amplitudes depend on age group and gender plus
  per-participant jitter;
* the positive condition adds a late positive potential (LPP) centred in the
  300-700 ms window, scaled by ``1 - anhedonia``;
* every participant has an overall scalp gain (volume conduction), so
  absolute amplitudes in volts vary a lot between people while the waveform
  shape does not;
* site sets slow drift, line-noise amplitude and a small per-channel gain
  mismatch;
* background EEG is pink noise made by filtering white noise.

All randomness is derived from the cohort seed with ``SeedSequence`` keys, so
cohorts and sessions are bit-reproducible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import signal

from .labels import BLOCKS, FACTORS, LabelVector

FS_HZ = 250.0
CHANNELS = ("Fz", "Cz", "Pz")
CONDITIONS = ("neutral", "positive")
PRE_SAMPLES = 250   # 1 s of fixation before onset
POST_SAMPLES = 300  # 1.2 s after onset
MIN_PRE, MIN_POST = 62, 193
AMPLITUDE_LIMIT_V = 0.005

# Table A1 marginals (758 participants): 117 adults, 398 female, sites
# 117/223/291/127, 273 Axis-1 positive; depression uses the n=110 count.
DEFAULT_MARGINALS = {
    "age": [641 / 758, 117 / 758],
    "gender": [360 / 758, 398 / 758],
    "site": [117 / 758, 223 / 758, 291 / 758, 127 / 758],
    "depression": [648 / 758, 110 / 758],
    "axis1": [485 / 758, 273 / 758],
}

# name, latency (s), width (s), amplitude (V), channel weights (Fz, Cz, Pz)
BASE_COMPONENTS = (
    ("P1", 0.100, 0.020, 2.5e-6, (0.6, 0.8, 1.0)),
    ("N1", 0.170, 0.025, -4.0e-6, (1.0, 0.9, 0.7)),
    ("P3", 0.320, 0.050, 5.0e-6, (0.6, 0.9, 1.0)),
    ("SW", 0.720, 0.150, -1.5e-6, (1.0, 0.8, 0.6)),
)
LPP_LATENCY, LPP_WIDTH, LPP_WEIGHTS = 0.520, 0.120, (0.5, 0.8, 1.0)

SITE_DRIFT_V = (4e-6, 8e-6, 12e-6, 6e-6)
SITE_LINE_V = (1e-6, 3e-6, 6e-6, 2e-6)
SITE_CHANNEL_GAIN = ((1.0, 1.0, 1.0), (1.15, 1.0, 0.9), (0.9, 1.0, 1.15), (1.0, 1.2, 1.0))


class SpecificationError(ValueError):
    """Invalid generator configuration or unknown option."""


@dataclass
class CohortSpec:
    n_participants: int = 512
    label_marginals: dict = field(default_factory=lambda: {k: list(v) for k, v in DEFAULT_MARGINALS.items()})
    trials_per_condition: int = 40
    kept_trials_target: int = 37
    noise_scale: float = 10e-6
    artifact_rate: Optional[float] = None
    seed: int = 0
    lpp_amplitude: float = 4.0e-6
    gain_spread: float = 0.45
    line_hz: float = 60.0

    def __post_init__(self):
        self.validate()

    @property
    def effective_artifact_rate(self) -> float:
        # default: enough injected artifacts to leave kept_trials_target trials
        if self.artifact_rate is not None:
            return self.artifact_rate
        return 1.0 - self.kept_trials_target / self.trials_per_condition

    def validate(self) -> None:
        if self.n_participants < 0 or self.trials_per_condition <= 0 or self.kept_trials_target <= 0:
            raise SpecificationError("counts must be positive")
        if self.noise_scale < 0:
            raise SpecificationError("noise_scale must be >= 0")
        rate = self.effective_artifact_rate
        if not 0.0 <= rate <= 1.0:
            raise SpecificationError(f"artifact rate {rate} outside [0, 1]")
        if set(self.label_marginals) != set(FACTORS):
            raise SpecificationError(f"label_marginals needs exactly the factors {FACTORS}")
        for name, width in zip(FACTORS, BLOCKS):
            p = np.asarray(self.label_marginals[name], dtype=float)
            if p.shape != (width,) or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
                raise SpecificationError(f"marginals for {name} must be {width} probabilities summing to 1")
        if self.label_marginals["axis1"][1] < self.label_marginals["depression"][1]:
            raise SpecificationError("axis1-positive rate must cover the depression-positive rate")

    @classmethod
    def from_json(cls, path) -> "CohortSpec":
        data = json.loads(Path(path).read_text())
        return cls.from_dict(data)

    @classmethod
    def from_dict(cls, data: dict) -> "CohortSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise SpecificationError(f"unknown cohort keys: {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class Component:
    name: str
    latency: float
    width: float
    amplitude: float
    weights: tuple


@dataclass
class ParticipantProfile:
    id: int
    labels: LabelVector
    anhedonia: float
    gain: float
    components: tuple           # Component, shared by both conditions
    lpp: Component              # positive condition only, already scaled by 1 - anhedonia
    site_noise: dict            # drift_v, line_v, channel_gain
    cohort_seed: int = 0

    @property
    def healthy(self) -> bool:
        return self.labels.depression == 0


@dataclass
class TrialRecording:
    samples: np.ndarray            # (3, n) volts
    condition: str
    event_index: int
    channels: tuple = CHANNELS
    fs_hz: float = FS_HZ
    artifact: Optional[str] = None

    def __post_init__(self):
        if self.samples.ndim != 2 or self.samples.shape[0] != len(self.channels):
            raise SpecificationError("samples must be (channels, time)")
        if self.event_index < MIN_PRE or self.samples.shape[1] - self.event_index - 1 < MIN_POST:
            raise SpecificationError("event_index leaves too little margin for an epoch")


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


# stream ids for SeedSequence keys
_COHORT, _SESSION, _TRIAL, _ARTIFACT = 11, 23, 37, 41


def sample_cohort(spec: CohortSpec) -> list[ParticipantProfile]:
    spec.validate()
    rng = _rng(spec.seed, _COHORT)
    marg = spec.label_marginals
    p_dep = marg["depression"][1]
    p_axis_given_healthy = (marg["axis1"][1] - p_dep) / (1.0 - p_dep) if p_dep < 1 else 1.0
    out = []
    for pid in range(spec.n_participants):
        age = int(rng.choice(2, p=marg["age"]))
        gender = int(rng.choice(2, p=marg["gender"]))
        site = int(rng.choice(4, p=marg["site"]))
        dep = int(rng.random() < p_dep)
        axis1 = 1 if dep else int(rng.random() < p_axis_given_healthy)
        anhedonia = rng.uniform(0.7, 1.0) if dep else rng.uniform(0.0, 0.3)
        gain = float(np.exp(spec.gain_spread * rng.standard_normal()))
        # children: larger, slower components; female: slightly larger, faster
        amp_scale = (1.4 if age == 0 else 1.0) * (1.1 if gender == 1 else 1.0)
        lat_shift = (0.030 if age == 0 else 0.0) + (-0.008 if gender == 1 else 0.0)
        jitter = 0.010 * rng.standard_normal()
        comps = []
        for name, lat, width, amp, w in BASE_COMPONENTS:
            a = amp * amp_scale * float(np.exp(0.15 * rng.standard_normal()))
            comps.append(Component(name, lat + lat_shift + jitter, width, a, w))
        lpp_amp = spec.lpp_amplitude * amp_scale * float(np.exp(0.15 * rng.standard_normal()))
        lpp = Component("LPP", LPP_LATENCY + 0.5 * lat_shift + jitter, LPP_WIDTH,
                        lpp_amp * (1.0 - anhedonia), LPP_WEIGHTS)
        site_noise = dict(drift_v=SITE_DRIFT_V[site], line_v=SITE_LINE_V[site],
                          channel_gain=SITE_CHANNEL_GAIN[site])
        labels = LabelVector(age=age, gender=gender, site=site, depression=dep, axis1=axis1)
        out.append(ParticipantProfile(pid, labels, float(anhedonia), gain, tuple(comps), lpp,
                                      site_noise, spec.seed))
    return out


def trial_times(n: int = PRE_SAMPLES + POST_SAMPLES, event_index: int = PRE_SAMPLES) -> np.ndarray:
    return (np.arange(n) - event_index) / FS_HZ


def erp_template(profile: ParticipantProfile, condition: str, times: np.ndarray) -> np.ndarray:
    """Noise-free (3, len(times)) waveform in volts for one condition."""
    if condition not in CONDITIONS:
        raise SpecificationError(f"unknown condition {condition!r}")
    comps = list(profile.components)
    if condition == "positive":
        comps.append(profile.lpp)
    wave = np.zeros((3, len(times)))
    for c in comps:
        bump = c.amplitude * np.exp(-0.5 * ((times - c.latency) / c.width) ** 2)
        wave += np.outer(c.weights, bump)
    gains = np.asarray(profile.site_noise["channel_gain"])[:, None]
    return profile.gain * gains * wave


# Kellet's economy pinking filter: white -> approx. 1/f power spectrum
_PINK_B = np.array([0.049922035, -0.095993537, 0.050612699, -0.004408786])
_PINK_A = np.array([1.0, -2.494956002, 2.017265875, -0.522189400])


def pink_noise(rng: np.random.Generator, shape: tuple, scale: float) -> np.ndarray:
    if scale == 0:
        return np.zeros(shape)
    burn = 500
    white = rng.standard_normal(shape[:-1] + (shape[-1] + burn,))
    pink = signal.lfilter(_PINK_B, _PINK_A, white, axis=-1)[..., burn:]
    pink /= pink.std(axis=-1, keepdims=True)
    return scale * pink


def synthesize_trial(profile: ParticipantProfile, condition: str, trial_seed: int,
                     spec: Optional[CohortSpec] = None) -> TrialRecording:
    """One raw trial: template + site drift and line noise + pink background."""
    spec = spec or CohortSpec(n_participants=0)
    n = PRE_SAMPLES + POST_SAMPLES
    t = trial_times(n)
    x = erp_template(profile, condition, t)
    rng = _rng(profile.cohort_seed, _TRIAL, profile.id, trial_seed)
    # one child stream per channel so channel noise seeds are independent
    chan_rngs = [np.random.default_rng(s) for s in rng.bit_generator.seed_seq.spawn(3)]
    sn = profile.site_noise
    for ch, crng in enumerate(chan_rngs):
        drift_f = crng.uniform(0.05, 0.3)
        drift = sn["drift_v"] * np.sin(2 * np.pi * drift_f * t + crng.uniform(0, 2 * np.pi))
        line = sn["line_v"] * np.sin(2 * np.pi * spec.line_hz * t + crng.uniform(0, 2 * np.pi))
        x[ch] += drift + line + pink_noise(crng, (n,), spec.noise_scale)
    return TrialRecording(x, condition, PRE_SAMPLES)


def inject_artifacts(trial: TrialRecording, kind: str, trial_seed: int,
                     noise_scale: float = 10e-6) -> TrialRecording:
    """Corrupt a trial inside its epoch window.

    ``spike`` pushes one sample of one channel to 30-60 mV, large enough to
    stay above the 5 mV limit after 30 Hz low-pass smearing; ``transient``
    adds a step of 30 noise standard deviations that persists to the end of
    the trial.
    """
    if kind not in ("spike", "transient"):
        raise SpecificationError(f"unknown artifact kind {kind!r}")
    rng = _rng(_ARTIFACT, trial_seed)
    x = trial.samples.copy()
    ch = int(rng.integers(3))
    pos = trial.event_index + int(rng.integers(-50, 180))
    sign = 1.0 if rng.random() < 0.5 else -1.0
    if kind == "spike":
        x[ch, pos] += sign * rng.uniform(0.03, 0.06)
    else:
        x[ch, pos:] += sign * 30.0 * max(noise_scale, 1e-6)
    return replace(trial, samples=x, artifact=kind)


def synthesize_session(profile: ParticipantProfile, spec: CohortSpec) -> list[TrialRecording]:
    """All trials of one participant in randomized presentation order."""
    rng = _rng(spec.seed, _SESSION, profile.id)
    conds = np.repeat(np.arange(2), spec.trials_per_condition)
    conds = conds[rng.permutation(len(conds))]
    rate = spec.effective_artifact_rate
    out = []
    for k, c in enumerate(conds):
        trial_seed = k
        tr = synthesize_trial(profile, CONDITIONS[c], trial_seed, spec)
        if rng.random() < rate:
            kind = "spike" if rng.random() < 0.5 else "transient"
            tr = inject_artifacts(tr, kind, spec.seed * 1_000_003 + profile.id * 1009 + k, spec.noise_scale)
        out.append(tr)
    return out


def planted_lpp_delta(profile: ParticipantProfile) -> np.ndarray:
    """Generator-level LPP feature: mean positive-minus-neutral template over
    300-700 ms, baseline corrected.  Ground truth for the LPP pipeline."""
    t = trial_times()
    d = erp_template(profile, "positive", t) - erp_template(profile, "neutral", t)
    base = d[:, (t >= -0.1) & (t < 0)].mean(axis=1)
    win = (t >= 0.3) & (t < 0.7)
    return d[:, win].mean(axis=1) - base
