"""Pipeline configuration and seed derivation."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

from .synthgen import DEFAULT_MARGINALS
from .vae import default_beta_grid


class ConfigError(ValueError):
    pass


def derive_seed(top_seed: int, component: str) -> int:
    """Stream seed for one pipeline component: the top-level seed offset by
    a hash of the component name, kept in 63 bits."""
    h = int.from_bytes(hashlib.sha256(component.encode()).digest()[:8], "little")
    return (int(top_seed) + h) % (2**63)


@dataclass
class SynthSection:
    n_participants: int = 512
    heldout_participants: int = 128
    label_marginals: dict = field(default_factory=lambda: {k: list(v) for k, v in DEFAULT_MARGINALS.items()})
    trials_per_condition: int = 40
    kept_trials_target: int = 37
    noise_scale: float = 10e-6
    artifact_rate: Optional[float] = None
    lpp_amplitude: float = 4.0e-6
    gain_spread: float = 0.45
    line_hz: float = 60.0
    smpl_per_participant: int = 1


@dataclass
class PreprocessSection:
    highpass_hz: float = 0.1
    highpass_order: int = 2
    lowpass_hz: float = 30.0
    lowpass_order: int = 12


@dataclass
class TrainSection:
    iterations: int = 20_000
    lr: float = 1e-4
    batch: int = 16
    dtype: str = "float32"


@dataclass
class SweepSection:
    betas: list = field(default_factory=lambda: default_beta_grid(4))
    seeds_per_beta: int = 3
    # one AE alongside the sweep, the entangled control for SCAN
    include_ae: bool = True


@dataclass
class ScanSection:
    iterations: int = 20_000
    lr: float = 1e-4
    batch: int = 16
    mask_rate: float = 0.5
    # unweighted label likelihood; True reweights classes like the linear baselines
    balance_labels: bool = False
    symbol_samples: int = 200


@dataclass
class EvalSection:
    folds: int = 5
    reg: str = "L2"
    strength: float = 1.0
    mc_samples: int = 100_000
    # label permutations averaged for the chance row
    shuffles: int = 20


_SECTIONS = {"synth": SynthSection, "preprocess": PreprocessSection, "train": TrainSection,
             "sweep": SweepSection, "scan": ScanSection, "eval": EvalSection}


@dataclass
class PipelineConfig:
    seed: int = 0
    synth: SynthSection = field(default_factory=SynthSection)
    preprocess: PreprocessSection = field(default_factory=PreprocessSection)
    train: TrainSection = field(default_factory=TrainSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    scan: ScanSection = field(default_factory=ScanSection)
    eval: EvalSection = field(default_factory=EvalSection)

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        if not isinstance(data, dict):
            raise ConfigError("configuration must be a JSON object")
        unknown = set(data) - set(_SECTIONS) - {"seed"}
        if unknown:
            raise ConfigError(f"unknown configuration sections: {sorted(unknown)}")
        kwargs = {}
        for name, section in _SECTIONS.items():
            raw = data.get(name, {})
            if not isinstance(raw, dict):
                raise ConfigError(f"section {name!r} must be an object")
            known = {f.name for f in fields(section)}
            bad = set(raw) - known
            if bad:
                raise ConfigError(f"unknown keys in section {name!r}: {sorted(bad)}")
            kwargs[name] = section(**raw)
        if "seed" in data:
            kwargs["seed"] = int(data["seed"])
        try:
            cfg = cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> None:
        """Range checks the dataclass types cannot express."""
        s, t, w, c, e = self.synth, self.train, self.sweep, self.scan, self.eval
        checks = [
            (s.n_participants >= 0 and s.heldout_participants >= 0, "participant counts must be >= 0"),
            (s.smpl_per_participant >= 1, "smpl_per_participant must be >= 1"),
            (t.iterations >= 0 and t.batch >= 1 and t.lr > 0, "train needs iterations >= 0, batch >= 1, lr > 0"),
            (t.dtype in ("float32", "float64"), "train.dtype must be float32 or float64"),
            (len(w.betas) > 0 and all(b >= 0 for b in w.betas), "sweep.betas must be nonnegative and nonempty"),
            (w.seeds_per_beta >= 2, "UDR needs sweep.seeds_per_beta >= 2"),
            (c.iterations >= 0 and c.batch >= 1 and c.lr > 0, "scan needs iterations >= 0, batch >= 1, lr > 0"),
            (0.0 <= c.mask_rate < 1.0, "scan.mask_rate must lie in [0, 1)"),
            (c.symbol_samples >= 0, "scan.symbol_samples must be >= 0"),
            (e.folds >= 2, "eval.folds must be >= 2"),
            (e.reg in ("L1", "L2") and e.strength >= 0, "eval.reg must be L1 or L2 with strength >= 0"),
            (e.mc_samples >= 1 and e.shuffles >= 1, "eval.mc_samples and eval.shuffles must be >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
