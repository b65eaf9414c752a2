"""Run configuration shared by the CLI and the evaluation harness."""
from __future__ import annotations

import json
import typing
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from . import adapters as ad
from .errors import ConfigurationError

METHODS = ("ta", "tan", "scratch", "p", "d+a", "prolad-sim", "prolad-loss")


@dataclass
class RunConfig:
    """Every knob of a run.  Field names double as CLI flags (``_`` -> ``-``)."""

    seed: int = 0
    widths: list = field(default_factory=lambda: [16, 32, 64, 64])
    image_size: int = 16
    # generator
    shifts: list = field(default_factory=lambda: [0.0, 0.25, 0.5, 0.75, 1.0])
    noise: float = 0.8
    cast: float = 0.0
    contrast_jitter: float = 1.0
    offset_magnitude: float = 2.0
    scale_magnitude: float = 3.0
    shift_exponent: float = 2.0
    colour_min: float = 0.2
    classes_per_domain: int = 20
    # episodes
    episodes: int = 100
    way_min: int = 5
    way_max: int = 10
    shot_min: int = 1
    shot_max: int = 10
    query_per_class: int = 10
    # pretraining
    source_classes: int = 64
    samples_per_class: int = 40
    epochs: int = 20
    pretrain_lr: float = 0.1
    batch_size: int = 64
    weight_decay: float = 7e-4
    # fine-tuning
    method: str = "prolad-sim"
    lam: float = 0.0
    variant: str = ad.SN_GROUPCONV
    beta: float = 1.5
    gamma: float = 0.02
    tau: float = 10.0
    group_size: int = ad.GROUP_SIZE
    sn_momentum: float = ad.SN_MOMENTUM
    adapter_lr: float = 0.5
    head_lr: float = 1.0
    seen_lr_scale: float = 0.1
    target_acc: float = 0.99
    extra_iters: int = 25
    max_iters: int = 200
    query_sn: str = "running"
    # plumbing
    kind: str = "adapters"
    checkpoint: str = "checkpoint"
    dataset_dir: typing.Optional[str] = None
    out_dir: typing.Optional[str] = None
    threads: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self):
        for f in fields(self):
            check_type(f.name, getattr(self, f.name), _hint(f.name))
        if not self.shifts:
            raise ConfigurationError("config field 'shifts': domain grid is empty")
        for s in self.shifts:
            if not 0.0 <= s <= 1.0:
                raise ConfigurationError(f"config field 'shifts': {s} outside [0, 1]")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigurationError(f"config field 'lam': {self.lam} outside [0, 1]")
        if self.episodes < 1:
            raise ConfigurationError("config field 'episodes': must be >= 1")
        if self.threads < 1:
            raise ConfigurationError("config field 'threads': must be >= 1")
        if self.query_sn not in ("running", "batch"):
            raise ConfigurationError("config field 'query_sn': expected 'running' or 'batch'")
        if not (1 <= self.way_min <= self.way_max and 1 <= self.shot_min <= self.shot_max):
            raise ConfigurationError("config fields 'way_*'/'shot_*': need 1 <= min <= max")

    # -- serialization ---------------------------------------------------------------------
    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigurationError(f"unknown config field {unknown[0]!r}")
        return cls(**{k: coerce(k, v) for k, v in data.items()})

    @classmethod
    def load(cls, path):
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigurationError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigurationError(f"config file {path} must hold a JSON object")
        return cls.from_dict(data)

    def save(self, path):
        Path(path).write_text(self.to_json() + "\n")

    def replace(self, **changes):
        data = self.to_dict()
        data.update(changes)
        return RunConfig.from_dict(data)

    def finetune_config(self):
        from .pipeline import FinetuneConfig
        return FinetuneConfig(adapter_lr=self.adapter_lr, head_lr=self.head_lr,
                              seen_lr_scale=self.seen_lr_scale, tau=self.tau,
                              target_acc=self.target_acc, extra_iters=self.extra_iters,
                              max_iters=self.max_iters, group_size=self.group_size,
                              sn_momentum=self.sn_momentum, query_sn=self.query_sn)

    def domain_kwargs(self):
        return dict(image_size=self.image_size, noise=self.noise, cast=self.cast,
                    contrast_jitter=self.contrast_jitter, shift_exponent=self.shift_exponent,
                    colour_min=self.colour_min,
                    offset_magnitude=self.offset_magnitude,
                    scale_magnitude=self.scale_magnitude, num_classes=self.classes_per_domain)


_HINTS = None


def _hint(name):
    global _HINTS
    if _HINTS is None:
        _HINTS = typing.get_type_hints(RunConfig)
        _HINTS["widths"] = list
        _HINTS["shifts"] = list
    return _HINTS[name]


def _base(hint):
    args = [a for a in typing.get_args(hint) if a is not type(None)]
    return (args[0], True) if args else (hint, False)


def check_type(name, value, hint):
    base, optional = _base(hint)
    if value is None:
        if optional:
            return
        raise ConfigurationError(f"config field {name!r}: expected {base.__name__}, got null")
    ok = (isinstance(value, base) and not (base is int and isinstance(value, bool))
          or base is float and isinstance(value, int) and not isinstance(value, bool))
    if not ok:
        raise ConfigurationError(
            f"config field {name!r}: expected {base.__name__}, got {type(value).__name__}")
    if base is list:
        elem = int if name == "widths" else (int, float)
        if not all(isinstance(v, elem) and not isinstance(v, bool) for v in value):
            raise ConfigurationError(f"config field {name!r}: list holds non-numeric entries")


def coerce(name, value):
    """Normalize JSON numbers: ints become floats for float fields."""
    base, _ = _base(_hint(name))
    if base is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if name == "shifts" and isinstance(value, list):
        return [float(v) if isinstance(v, int) and not isinstance(v, bool) else v for v in value]
    return value
