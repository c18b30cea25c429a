"""Filtering, epoching, trial rejection, ERP averaging, LPP features and
assembly of the normalized 6x256 model input."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import signal

from .synthgen import CONDITIONS, FS_HZ, TrialRecording

EPOCH_LEN = 256
ONSET = 62                     # samples before onset inside an epoch (-248 ms)
POST = EPOCH_LEN - ONSET - 1   # 193 samples after onset (+772 ms)
BASELINE = slice(37, 62)       # 100 ms before onset
LPP_WINDOW = slice(137, 237)   # 300-700 ms
AMPLITUDE_LIMIT_V = 0.005
SIGMA_LIMIT = 5.0
TRANSIENT_LIMIT = 3.0
SOURCES = ("ERP", "SMPL")


class SpecificationError(ValueError):
    pass


class EmptyConditionError(ValueError):
    pass


@dataclass(frozen=True)
class FilterCoefficients:
    numerator: np.ndarray
    denominator: np.ndarray
    kind: str
    order: int
    cutoff_hz: float
    fs_hz: float

    def poles(self) -> np.ndarray:
        return np.roots(self.denominator) if len(self.denominator) > 1 else np.zeros(0)

    def is_stable(self) -> bool:
        return bool(np.all(np.abs(self.poles()) < 1.0))


def design_butterworth(kind: str, order: int, cutoff_hz: float, fs_hz: float = FS_HZ) -> FilterCoefficients:
    if kind not in ("high-pass", "low-pass"):
        raise SpecificationError(f"unknown filter kind {kind!r}")
    if order < 1:
        raise SpecificationError("order must be >= 1")
    if not 0 < cutoff_hz < fs_hz / 2:
        raise SpecificationError(f"cutoff {cutoff_hz} Hz must lie strictly inside (0, {fs_hz / 2})")
    btype = "highpass" if kind == "high-pass" else "lowpass"
    b, a = signal.butter(order, cutoff_hz, btype=btype, fs=fs_hz)
    return FilterCoefficients(b / a[0], a / a[0], kind, order, float(cutoff_hz), float(fs_hz))


def frequency_response(coeffs: FilterCoefficients, freqs_hz) -> np.ndarray:
    """H(e^{jw}) evaluated directly from the polynomial coefficients."""
    w = 2 * np.pi * np.asarray(freqs_hz, dtype=float) / coeffs.fs_hz
    zinv = np.exp(-1j * w)
    # polyval wants highest power first; coefficients are in powers of z^-1
    return np.polyval(coeffs.numerator[::-1], zinv) / np.polyval(coeffs.denominator[::-1], zinv)


def apply_filter(coeffs: FilterCoefficients, x, steady_state: bool = False, axis: int = -1) -> np.ndarray:
    """Causal direct-form filtering along ``axis``.

    With ``steady_state`` the filter state starts as if the first sample had
    been held forever, which avoids the start-up transient on short trials.
    """
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        raise SpecificationError("cannot filter an empty signal")
    if not coeffs.is_stable():
        raise SpecificationError("filter has poles on or outside the unit circle")
    b, a = coeffs.numerator, coeffs.denominator
    if not steady_state or max(len(a), len(b)) == 1:
        return signal.lfilter(b, a, x, axis=axis)
    zi = signal.lfilter_zi(b, a)
    x0 = np.take(x, [0], axis=axis)
    shape = [1] * x.ndim
    shape[axis] = len(zi)
    zi = zi.reshape(shape) * x0
    y, _ = signal.lfilter(b, a, x, axis=axis, zi=zi)
    return y


def default_filters(fs_hz: float = FS_HZ) -> tuple:
    return (design_butterworth("high-pass", 2, 0.1, fs_hz), design_butterworth("low-pass", 12, 30.0, fs_hz))


def filter_trial(trial: TrialRecording, filters: Optional[Sequence[FilterCoefficients]] = None) -> TrialRecording:
    y = trial.samples
    for f in filters or default_filters(trial.fs_hz):
        y = apply_filter(f, y, steady_state=True, axis=-1)
    return TrialRecording(y, trial.condition, trial.event_index, trial.channels, trial.fs_hz, trial.artifact)


@dataclass
class Epoch:
    condition: str
    samples: np.ndarray   # (3, 256) volts
    participant_id: int = 0

    def __post_init__(self):
        if self.samples.shape != (3, EPOCH_LEN):
            raise SpecificationError(f"epoch must be 3x{EPOCH_LEN}, got {self.samples.shape}")


def segment_epochs(recording: TrialRecording, participant_id: int = 0) -> Epoch:
    e = recording.event_index
    n = recording.samples.shape[1]
    if e < ONSET or e + POST >= n:
        raise IndexError(f"event_index {e} leaves < {ONSET} samples before or < {POST} after onset (length {n})")
    return Epoch(recording.condition, recording.samples[:, e - ONSET:e + POST + 1].copy(), participant_id)


@dataclass
class RejectionReport:
    kept: list = field(default_factory=list)
    rejected: list = field(default_factory=list)   # (index, rule)

    def counts(self) -> dict:
        out = {"amplitude": 0, "sigma": 0, "transient": 0}
        for _, rule in self.rejected:
            out[rule] += 1
        return out


def reject_epochs(epochs: Sequence[Epoch]) -> RejectionReport:
    """Amplitude limit, then pooled z-scoring, then |z| and |dz| limits."""
    report = RejectionReport()
    if not epochs:
        return report
    data = np.stack([e.samples for e in epochs])
    survivors = []
    for i, x in enumerate(data):
        if np.any(np.abs(x) > AMPLITUDE_LIMIT_V):
            report.rejected.append((i, "amplitude"))
        else:
            survivors.append(i)
    if survivors:
        pool = data[survivors]
        mu = pool.mean(dtype=np.float64)
        sd = pool.std(dtype=np.float64)
        z = (pool - mu) / sd if sd > 0 else np.zeros_like(pool)
        bad_sigma = np.any(np.abs(z) >= SIGMA_LIMIT, axis=(1, 2))
        bad_step = np.any(np.abs(np.diff(z, axis=-1)) >= TRANSIENT_LIMIT, axis=(1, 2))
        for k, i in enumerate(survivors):
            if bad_sigma[k]:
                report.rejected.append((i, "sigma"))
            elif bad_step[k]:
                report.rejected.append((i, "transient"))
            else:
                report.kept.append(i)
    report.rejected.sort()
    return report


def average_erp(epochs: Sequence[Epoch], condition: str) -> np.ndarray:
    sel = [e.samples for e in epochs if e.condition == condition]
    if not sel:
        raise EmptyConditionError(f"no kept epochs for condition {condition!r}")
    return np.mean(sel, axis=0)


def _check_traj(x, name="trajectory") -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (3, EPOCH_LEN):
        raise SpecificationError(f"{name} must be 3x{EPOCH_LEN}, got {x.shape}")
    return x


def baseline_correct(erp) -> np.ndarray:
    erp = np.asarray(erp, dtype=float)
    return erp - erp[..., BASELINE].mean(axis=-1, keepdims=True)


def lpp_features(erp_pos, erp_neu) -> np.ndarray:
    """Per-channel mean of the baseline-corrected positive-minus-neutral
    difference over 300-700 ms."""
    pos = baseline_correct(_check_traj(erp_pos, "erp_pos"))
    neu = baseline_correct(_check_traj(erp_neu, "erp_neu"))
    return (pos - neu)[:, LPP_WINDOW].mean(axis=1)


@dataclass
class ErpImage:
    values: np.ndarray   # (6, 256) in [0, 1]
    source: str = "ERP"
    participant_id: int = 0

    def __post_init__(self):
        if self.values.shape != (6, EPOCH_LEN):
            raise SpecificationError(f"image must be 6x{EPOCH_LEN}")
        if self.source not in SOURCES:
            raise SpecificationError(f"unknown source tag {self.source!r}")


def assemble_image(erp_neu, erp_pos, source_tag: str = "ERP", participant_id: int = 0) -> ErpImage:
    """Rows [neutral Fz, Cz, Pz, positive Fz, Cz, Pz], one joint min-max map."""
    x = np.vstack([_check_traj(erp_neu, "erp_neu"), _check_traj(erp_pos, "erp_pos")])
    lo, hi = x.min(), x.max()
    if hi == lo:
        v = np.full_like(x, 0.5)
    else:
        v = np.clip((x - lo) / (hi - lo), 0.0, 1.0)
    return ErpImage(v, source_tag, participant_id)


@dataclass
class ParticipantResult:
    participant_id: int
    report: RejectionReport
    erp: dict                 # condition -> 3x256 averaged ERP, volts
    image: ErpImage
    smpl: list                # ErpImage list built from single kept trials
    lpp: np.ndarray           # 3-vector
    epochs: list


def process_participant(trials: Sequence[TrialRecording], participant_id: int,
                        rng: Optional[np.random.Generator] = None, n_smpl: int = 1,
                        filters=None) -> ParticipantResult:
    """Filter, epoch, reject, average, then build the ERP image, ``n_smpl``
    single-trial images and the LPP feature vector for one participant.

    Trajectories are baseline corrected before image assembly so slow
    offsets do not dominate the min-max range.
    """
    filters = filters or default_filters()
    epochs = [segment_epochs(filter_trial(t, filters), participant_id) for t in trials]
    report = reject_epochs(epochs)
    kept = [epochs[i] for i in report.kept]
    erp = {c: average_erp(kept, c) for c in CONDITIONS}
    neu, pos = baseline_correct(erp["neutral"]), baseline_correct(erp["positive"])
    image = assemble_image(neu, pos, "ERP", participant_id)
    rng = rng if rng is not None else np.random.default_rng(participant_id)
    by_cond = {c: [e for e in kept if e.condition == c] for c in CONDITIONS}
    smpl = []
    for _ in range(n_smpl):
        pick = {c: by_cond[c][int(rng.integers(len(by_cond[c])))] for c in CONDITIONS}
        smpl.append(assemble_image(baseline_correct(pick["neutral"].samples),
                                   baseline_correct(pick["positive"].samples), "SMPL", participant_id))
    return ParticipantResult(participant_id, report, erp, image, smpl,
                             lpp_features(erp["positive"], erp["neutral"]), epochs)


def write_rejection_csv(path, rows) -> None:
    """rows: iterable of (participant_id, RejectionReport)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["participant_id", "epoch_index", "rule"])
        for pid, report in rows:
            for idx, rule in report.rejected:
                w.writerow([pid, idx, rule])
