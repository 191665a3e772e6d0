"""Experiment configuration: a YAML tree with documented defaults.

Every section maps onto a frozen dataclass; unknown keys are rejected so
typos fail before any work starts.  All randomness derives from the single
top-level ``seed``.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import yaml

DETECTORS = ("threshold", "omp", "amp", "cnn", "oracle")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SystemConfig:
    K: int = 16
    Nc: int = 16
    M: int = 8
    Ns: int = 8
    Pmax: float = 0.1
    coeff_var: float = 1.0
    group_powers: Tuple[float, ...] = (1.0,)
    group_sizes: Optional[Tuple[int, ...]] = None  # None: all devices in group 0
    snr_activity: Optional[float] = None  # activity rate in the SNR definition; None -> Pmax/2

    def validate(self):
        for name in ("K", "Nc", "M", "Ns"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ConfigError(f"system.{name} must be a positive integer, got {v!r}")
        if not 0 <= self.Pmax <= 1:
            raise ConfigError(f"system.Pmax must lie in [0, 1], got {self.Pmax}")
        if not self.coeff_var > 0:
            raise ConfigError("system.coeff_var must be positive")
        if not self.group_powers or any(p <= 0 for p in self.group_powers):
            raise ConfigError("system.group_powers must be positive")
        sizes = self.group_sizes
        if sizes is None:
            if len(self.group_powers) != 1:
                raise ConfigError("system.group_sizes is required with several power groups")
        elif len(sizes) != len(self.group_powers) or sum(sizes) != self.K or min(sizes) < 1:
            raise ConfigError("system.group_sizes must give one positive size per group, "
                              "summing to K")
        pa = self.nominal_activity
        if not 0 < pa <= 1:
            raise ConfigError(f"nominal activity for the SNR definition must lie in (0, 1], got {pa}")

    @property
    def nominal_activity(self) -> float:
        return self.Pmax / 2 if self.snr_activity is None else self.snr_activity


@dataclass(frozen=True)
class DataConfig:
    n_samples: int = 20000
    gamma_db: float = 10.0
    split: Tuple[float, float, float] = (0.8, 0.1, 0.1)
    shard_size: int = 5000

    def validate(self):
        if not isinstance(self.n_samples, int) or self.n_samples < 1:
            raise ConfigError(f"data.n_samples must be a positive integer, got {self.n_samples!r}")
        if len(self.split) != 3 or any(f < 0 for f in self.split) or abs(sum(self.split) - 1) > 1e-9:
            raise ConfigError("data.split must be three non-negative fractions summing to 1")
        if self.shard_size < 1:
            raise ConfigError("data.shard_size must be positive")

    def split_sizes(self) -> Tuple[int, int, int]:
        n_train = int(round(self.split[0] * self.n_samples))
        n_val = int(round(self.split[1] * self.n_samples))
        return n_train, n_val, self.n_samples - n_train - n_val


@dataclass(frozen=True)
class TrainSection:
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 30
    patience: int = 5
    conv_channels: Tuple[int, ...] = (8, 16)
    kernel_size: Tuple[int, int] = (1, 3)
    hidden_units: int = 64
    pos_weight: float = 1.0
    augment: bool = True  # random symbol permutation and per-symbol sign flip
    dtype: str = "float32"

    def validate(self):
        if not self.learning_rate > 0:
            raise ConfigError("train.learning_rate must be positive")
        if self.batch_size < 1 or self.epochs < 1 or self.patience < 1:
            raise ConfigError("train.batch_size, epochs and patience must be at least 1")
        if len(self.kernel_size) != 2 or any(k % 2 == 0 for k in self.kernel_size):
            raise ConfigError("train.kernel_size must be two odd integers")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("train.dtype must be float32 or float64")


@dataclass(frozen=True)
class ThresholdSection:
    rule: str = "majority"
    statistic: str = "real"
    assumed_pa: Optional[float] = None

    def validate(self):
        if self.rule != "majority" and not (isinstance(self.rule, int) and self.rule >= 1):
            raise ConfigError("detectors.threshold.rule must be 'majority' or a positive count")
        if self.statistic not in ("real", "abs"):
            raise ConfigError("detectors.threshold.statistic must be 'real' or 'abs'")


@dataclass(frozen=True)
class OmpSection:
    residual_tol: float = 0.3
    max_iters: Optional[int] = None
    calibrate: bool = True

    def validate(self):
        if not self.residual_tol > 0:
            raise ConfigError("detectors.omp.residual_tol must be positive")


@dataclass(frozen=True)
class AmpSection:
    n_iters: int = 30
    damping: float = 0.0
    alpha: float = 1.5
    score_threshold: Optional[float] = None
    score_mode: str = "denormalized"

    def validate(self):
        if self.n_iters < 1 or not 0 <= self.damping <= 1 or not self.alpha > 0:
            raise ConfigError("detectors.amp: n_iters >= 1, damping in [0, 1], alpha > 0")
        if self.score_mode not in ("denormalized", "normalized"):
            raise ConfigError("detectors.amp.score_mode must be 'denormalized' or 'normalized'")


@dataclass(frozen=True)
class CnnSection:
    threshold: float = 0.5

    def validate(self):
        if not 0 < self.threshold < 1:
            raise ConfigError("detectors.cnn.threshold must lie in (0, 1)")


@dataclass(frozen=True)
class DetectorsConfig:
    selected: Tuple[str, ...] = DETECTORS
    calibration_frames: int = 2000
    threshold: ThresholdSection = field(default_factory=ThresholdSection)
    omp: OmpSection = field(default_factory=OmpSection)
    amp: AmpSection = field(default_factory=AmpSection)
    cnn: CnnSection = field(default_factory=CnnSection)

    def validate(self):
        unknown = set(self.selected) - set(DETECTORS)
        if unknown or not self.selected:
            raise ConfigError(f"detectors.selected must be a non-empty subset of {DETECTORS}")
        if self.calibration_frames < 1:
            raise ConfigError("detectors.calibration_frames must be positive")
        for sub in (self.threshold, self.omp, self.amp, self.cnn):
            sub.validate()


@dataclass(frozen=True)
class EvaluationConfig:
    snr_db: Tuple[float, ...] = (0.0, 5.0, 10.0, 15.0)
    activity_rates: Tuple[float, ...] = (0.02, 0.05, 0.1, 0.15, 0.2)
    activity_gamma_db: float = 10.0
    table_gamma_db: float = 10.0
    n_frames: int = 2000
    ber_mode: str = "missed_as_errors"

    def validate(self):
        if not self.snr_db:
            raise ConfigError("evaluation.snr_db must not be empty")
        if not self.activity_rates or any(not 0 <= p <= 1 for p in self.activity_rates):
            raise ConfigError("evaluation.activity_rates must be rates in [0, 1]")
        if self.n_frames < 1:
            raise ConfigError("evaluation.n_frames must be positive")
        if self.ber_mode not in ("missed_as_errors", "detected_only"):
            raise ConfigError("evaluation.ber_mode must be missed_as_errors or detected_only")


@dataclass(frozen=True)
class ThresholdAnalysisConfig:
    K_values: Tuple[int, ...] = (1, 4)
    Nc: int = 16
    gamma_db: Tuple[float, ...] = (5.0, 10.0)
    pa: float = 0.1
    n_draws: int = 1000
    symbols_per_draw: int = 100
    statistic: str = "real"
    convexity_draws: int = 100
    grid_points: int = 1000

    def validate(self):
        if not self.K_values or min(self.K_values) < 1 or self.Nc < 1:
            raise ConfigError("threshold_analysis: K_values and Nc must be positive")
        if not 0 < self.pa < 1:
            raise ConfigError("threshold_analysis.pa must lie in (0, 1)")
        if self.n_draws < 1 or self.symbols_per_draw < 1:
            raise ConfigError("threshold_analysis: n_draws and symbols_per_draw must be positive")
        if self.statistic not in ("real", "abs"):
            raise ConfigError("threshold_analysis.statistic must be 'real' or 'abs'")
        if self.grid_points < 3 or self.convexity_draws < 1:
            raise ConfigError("threshold_analysis: grid_points >= 3, convexity_draws >= 1")


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs/desk"
    system: SystemConfig = field(default_factory=SystemConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainSection = field(default_factory=TrainSection)
    detectors: DetectorsConfig = field(default_factory=DetectorsConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    threshold_analysis: ThresholdAnalysisConfig = field(default_factory=ThresholdAnalysisConfig)

    def validate(self) -> "ExperimentConfig":
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {self.seed!r}")
        for sec in (self.system, self.data, self.train, self.detectors, self.evaluation,
                    self.threshold_analysis):
            sec.validate()
        return self

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def fingerprint(self) -> str:
        """Hash of everything that affects results (the output directory does not)."""
        d = self.to_dict()
        d.pop("output_dir")
        raw = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(raw).hexdigest()[:16]

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes).validate()


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, data, path):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'} must be a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"unknown key(s) in {path or 'config'}: {', '.join(sorted(unknown))}")
    kwargs = {}
    for name, value in data.items():
        f = fields[name]
        sub = f.default_factory if f.default_factory is not dataclasses.MISSING else None
        if sub is not None and dataclasses.is_dataclass(sub):
            kwargs[name] = _build(sub, value, f"{path}.{name}" if path else name)
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def config_from_dict(data: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, data, "").validate()


def load_config(path=None) -> ExperimentConfig:
    """Read a YAML file; ``None`` gives the desk-scale defaults."""
    if path is None:
        return ExperimentConfig().validate()
    try:
        data = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return config_from_dict(data or {})


def dump_config(cfg: ExperimentConfig, path) -> Path:
    path = Path(path)
    path.write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
    return path
