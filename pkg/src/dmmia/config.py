"""Pipeline configuration: a TOML file mapped onto nested dataclasses.

Every key has a default, unknown keys are rejected, and ``digest`` hashes
the fully resolved configuration so artifacts can name what produced them.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

from .attack import PRESETS, AttackConfig
from .errors import ConfigError, MissingInputError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


@dataclass
class DataSection:
    source: str = "synthetic"  # or "idx"
    n_per_class: int = 300
    noise: float = 0.05
    max_shift: int = 2
    vertex_jitter: float = 1.0
    images: str = ""
    labels: str = ""
    public_labels: list = field(default_factory=lambda: [5, 6, 7, 8, 9])
    private_labels: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    holdout_fraction: float = 0.2


@dataclass
class ClassifierSection:
    hidden: list = field(default_factory=lambda: [256, 128])
    epochs: int = 20
    lr: float = 1e-3
    batch_size: int = 64


def _evaluator_default():
    return ClassifierSection(hidden=[320, 128])


@dataclass
class GeneratorSection:
    mode: str = "autoencoder"
    z_dim: int = 32
    w_dim: int = 64
    hidden: int = 256
    epochs: int = 30
    lr: float = 1e-3
    batch_size: int = 64
    prior_std: float = 0.5
    kl_weight: float = 1.0
    mse_threshold: float = 0.05


_ATTACK_FIELDS = {f.name for f in dataclasses.fields(AttackConfig)} - {"target_class", "seed", "baseline_mode"}


@dataclass
class AttackSection:
    preset: str = "desk"
    classes: list = field(default_factory=list)  # empty: every private class
    methods: list = field(default_factory=lambda: ["dmmia", "baseline"])
    workers: int = 1
    overrides: dict = field(default_factory=dict)

    def base_config(self, seed):
        return PRESETS[self.preset].replace(seed=seed, **self.overrides)


@dataclass
class MetricsSection:
    prdc_k: int = 0  # 0 picks the size-dependent default


@dataclass
class SweepSection:
    lambda_imr: list = field(default_factory=lambda: [0.3])
    lambda_idr: list = field(default_factory=lambda: [0.0, 0.7])
    n_prototypes: list = field(default_factory=list)
    n_positive: list = field(default_factory=list)
    momentum: list = field(default_factory=list)


@dataclass
class TheorySection:
    n_probes: int = 20
    mc_samples: int = 1_000_000
    simplex_sizes: list = field(default_factory=lambda: [2, 5, 10])


@dataclass
class PipelineConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    data: DataSection = field(default_factory=DataSection)
    target: ClassifierSection = field(default_factory=ClassifierSection)
    evaluator: ClassifierSection = field(default_factory=_evaluator_default)
    generator: GeneratorSection = field(default_factory=GeneratorSection)
    attack: AttackSection = field(default_factory=AttackSection)
    metrics: MetricsSection = field(default_factory=MetricsSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    theory: TheorySection = field(default_factory=TheorySection)

    def to_dict(self):
        return dataclasses.asdict(self)

    def digest(self):
        # out_dir is where results go, not what they are; leaving it out lets a rerun elsewhere compare equal
        body = self.to_dict()
        body.pop("out_dir")
        blob = json.dumps(body, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @property
    def out(self):
        return Path(self.out_dir)

    def validate(self):
        d = self.data
        if d.source not in ("synthetic", "idx"):
            raise ConfigError(f"data.source must be 'synthetic' or 'idx', got {d.source!r}")
        if d.source == "idx" and not (d.images and d.labels):
            raise ConfigError("data.source = 'idx' needs data.images and data.labels")
        if set(d.public_labels) & set(d.private_labels):
            raise ConfigError("data.public_labels and data.private_labels overlap")
        if not 0 < d.holdout_fraction < 1:
            raise ConfigError("data.holdout_fraction must lie in (0, 1)")
        if self.generator.mode not in ("autoencoder", "gan"):
            raise ConfigError(f"generator.mode must be 'autoencoder' or 'gan', got {self.generator.mode!r}")
        a = self.attack
        if a.preset not in PRESETS:
            raise ConfigError(f"attack.preset must be one of {sorted(PRESETS)}, got {a.preset!r}")
        bad = set(a.methods) - {"dmmia", "baseline"}
        if bad or not a.methods:
            raise ConfigError(f"attack.methods must be a non-empty subset of dmmia, baseline; got {a.methods}")
        unknown = set(a.overrides) - _ATTACK_FIELDS
        if unknown:
            raise ConfigError(f"unknown attack keys: {', '.join(sorted(unknown))}")
        if a.workers < 1:
            raise ConfigError("attack.workers must be >= 1")
        n_private = len(d.private_labels)
        if any(not 0 <= c < n_private for c in a.classes):
            raise ConfigError(f"attack.classes must index the {n_private} private classes")
        try:
            a.base_config(self.seed).validate()
        except Exception as exc:
            raise ConfigError(f"attack settings invalid: {exc}") from None
        if self.metrics.prdc_k < 0:
            raise ConfigError("metrics.prdc_k must be >= 0")
        return self


_SECTIONS = {
    "data": DataSection,
    "target": ClassifierSection,
    "evaluator": ClassifierSection,
    "generator": GeneratorSection,
    "metrics": MetricsSection,
    "sweep": SweepSection,
    "theory": TheorySection,
}


def _coerce(name, value, default):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, list):
        ok = isinstance(value, list)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{name}: expected {type(default).__name__}, got {value!r}")
    return value


def _fill(cls, raw, prefix, base=None):
    obj = base if base is not None else cls()
    for key, value in raw.items():
        if not hasattr(obj, key) or key == "overrides":
            raise ConfigError(f"unknown key {prefix}{key}")
        setattr(obj, key, _coerce(prefix + key, value, getattr(obj, key)))
    return obj


def from_dict(raw):
    raw = dict(raw)
    cfg = PipelineConfig()
    for name, cls in _SECTIONS.items():
        section = raw.pop(name, {})
        if not isinstance(section, dict):
            raise ConfigError(f"[{name}] must be a table")
        setattr(cfg, name, _fill(cls, section, f"{name}.", base=getattr(cfg, name)))
    attack = dict(raw.pop("attack", {}))
    own = {k: attack.pop(k) for k in ("preset", "classes", "methods", "workers") if k in attack}
    cfg.attack = _fill(AttackSection, own, "attack.")
    defaults = dataclasses.asdict(PRESETS[cfg.attack.preset]) if cfg.attack.preset in PRESETS else {}
    for key, value in attack.items():
        if key not in _ATTACK_FIELDS:
            raise ConfigError(f"unknown key attack.{key}")
        cfg.attack.overrides[key] = _coerce(f"attack.{key}", value, defaults.get(key, value))
    for key, value in raw.items():
        if key not in ("seed", "out_dir"):
            raise ConfigError(f"unknown key {key}")
        setattr(cfg, key, _coerce(key, value, getattr(cfg, key)))
    return cfg.validate()


def loads(text):
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config is not valid TOML: {exc}") from None
    return from_dict(raw)


def load(path):
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"config file not found: {path}")
    return loads(path.read_text())
