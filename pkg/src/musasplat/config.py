"""Run configuration: one JSON document, fully defaulted, with named ablation presets."""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .augment import AugmentConfig
from .model import ModelConfig
from .splat import RenderSettings
from .train import LossConfig, OptimConfig

FORMAT_VERSION = 1


@dataclass
class Stage1Config:
    """Point-head fitting against ground-truth geometry, before g_phi is frozen."""

    iterations: int = 1500
    lr: float = 1e-3
    depth_weight: float = 1.0
    # stand-in for geometric pretraining: the backbone is fit here too, then frozen for stage 2
    train_backbone: bool = True

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunConfig:
    name: str = "full"
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    render: RenderSettings = field(default_factory=RenderSettings)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    checkpoint_every: int = 500
    log_every: int = 1

    def __post_init__(self):
        self.model.seed = self.seed

    @property
    def switches(self) -> dict:
        return {"adapter": self.model.use_adapters, "mini_grid": self.model.musa.mini_grid_enabled,
                "aggregation": self.model.aggregation, "augmentation": self.augment.enabled}

    def to_dict(self) -> dict:
        return {"format_version": FORMAT_VERSION, "name": self.name, "seed": self.seed,
                "model": self.model.to_dict(), "loss": self.loss.to_dict(), "optim": self.optim.to_dict(),
                "augment": self.augment.to_dict(), "render": _render_dict(self.render),
                "stage1": self.stage1.to_dict(), "checkpoint_every": self.checkpoint_every,
                "log_every": self.log_every}

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        version = d.pop("format_version", FORMAT_VERSION)
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported config format {version}")
        render = d.pop("render", {})
        if "background" in render:
            render["background"] = tuple(render["background"])
        return cls(model=ModelConfig.from_dict(d.pop("model", {})), loss=LossConfig(**d.pop("loss", {})),
                   optim=OptimConfig(**d.pop("optim", {})), augment=AugmentConfig(**d.pop("augment", {})),
                   render=RenderSettings(**render), stage1=Stage1Config(**d.pop("stage1", {})), **d)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        return path

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _render_dict(r: RenderSettings) -> dict:
    d = asdict(r)
    d["background"] = list(r.background)
    return d


# toy-scale optimizer: the default 5e-5 barely moves a zero-initialized head in 2000 steps
TOY_LR = 2e-3

PRESETS = {
    "full": {},
    "no-adapter": {"model": {"use_adapters": False}},
    "no-aggregator": {"model": {"aggregation": "none"}},
    "no-augment": {"augment": {"enabled": False}},
    "memory-bank": {"model": {"aggregation": "memory-bank"}},
    "mini-grid": {"model": {"musa": {"mini_grid_enabled": True}}},
}


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def preset(name: str, seed: int = 0, toy: bool = True, **overrides) -> RunConfig:
    """A named ablation row. ``toy`` swaps in the desk-scale learning rate."""
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    d = RunConfig(name=name, seed=seed).to_dict()
    if toy:
        d["optim"]["lr"] = TOY_LR
    d = _merge(d, PRESETS[name])
    d = _merge(d, overrides)
    return RunConfig.from_dict(d)
