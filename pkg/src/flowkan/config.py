"""Run configuration: typed sections, strict JSON round-trip.

Unknown keys are rejected so a typo in a config file fails loudly instead
of silently training with a default. The exact dict is persisted next to
every checkpoint.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .backbone import BackboneConfig
from .envsuite import EnvConfig


@dataclass
class FlowSection:
    segments_k: int = 2
    dt: float = 1e-2
    alpha: float = 1.0
    lambda_acr: float = 1.0
    t_start: float = 0.0

    def validate(self):
        if self.segments_k < 1:
            raise ValueError("segments_k must be >= 1")
        if not 0 < self.dt < 1.0 / self.segments_k:
            raise ValueError("dt must lie in (0, 1/K)")
        if self.lambda_acr < 0:
            raise ValueError("lambda_acr must be >= 0")
        if not 0 <= self.t_start < 1:
            raise ValueError("t_start must lie in [0,1)")


@dataclass
class OptimizerSection:
    lr: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-6
    batch_size: int = 64
    epochs: int = 300
    ema_decay: float = 0.95
    lr_schedule: str = "constant"

    def validate(self):
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError("lr, batch_size and epochs must be positive")
        if not 0 <= self.ema_decay < 1:
            raise ValueError("ema_decay must lie in [0,1)")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")


@dataclass
class EvalSection:
    seeds: tuple = (0, 42, 100)
    rounds: int = 10
    episodes_per_round: int = 20

    def validate(self):
        if self.rounds < 1 or self.episodes_per_round < 1:
            raise ValueError("rounds and episodes_per_round must be positive")


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    n_obs: int = 2
    exec_horizon: int = 3
    demo_count: int = 10
    demo_noise: float = 0.5
    fps_points: int = 64
    vision_dim: int = 64
    state_dim: int = 64
    env: EnvConfig = field(default_factory=EnvConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    flow: FlowSection = field(default_factory=FlowSection)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def validate(self):
        self.flow.validate()
        self.optimizer.validate()
        self.eval.validate()
        if self.n_obs < 1 or self.demo_count < 1:
            raise ValueError("n_obs and demo_count must be positive")
        if self.demo_noise < 0:
            raise ValueError("demo_noise must be non-negative")
        if not 1 <= self.exec_horizon <= self.backbone.horizon:
            raise ValueError("exec_horizon must lie in [1, prediction horizon]")
        if self.backbone.segments_k != self.flow.segments_k:
            raise ValueError("backbone.segments_k must match flow.segments_k")
        return self


_SECTIONS = {
    "env": EnvConfig, "backbone": BackboneConfig, "flow": FlowSection,
    "optimizer": OptimizerSection, "eval": EvalSection,
}
_TUPLE_FIELDS = {"widths", "betas", "seeds"}


def _build(cls, d, path):
    if not isinstance(d, dict):
        raise ValueError(f"config section '{path}' must be an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ValueError(f"unknown config key(s) under '{path}': {sorted(unknown)}")
    kwargs = {}
    for k, v in d.items():
        if k in _SECTIONS:
            kwargs[k] = _build(_SECTIONS[k], v, f"{path}.{k}" if path else k)
        elif k in _TUPLE_FIELDS:
            kwargs[k] = tuple(v)
        else:
            kwargs[k] = v
    return cls(**kwargs)


def from_dict(d) -> RunConfig:
    return _build(RunConfig, d, "").validate()


def to_dict(cfg: RunConfig):
    return json.loads(json.dumps(dataclasses.asdict(cfg)))


def load_config(path) -> RunConfig:
    with open(path) as fh:
        return from_dict(json.load(fh))


def save_config(cfg: RunConfig, path):
    with open(path, "w") as fh:
        json.dump(to_dict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")
