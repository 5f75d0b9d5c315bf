"""Run configuration: profiles, JSON round trip and model-config derivation."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from importlib import resources
from dataclasses import dataclass
from pathlib import Path

from .aca import STRATEGY_ALIASES, AcaConfig
from .data import SceneSpec
from .errors import ConfigError
from .model import ModelConfig

SCALE_NAMES = {"1/4": 0.25, "1/2": 0.5, "1/1": 1.0}


@dataclass
class TrainConfig:
    seed: int = 0
    epochs: int = 40
    lr: float = 1e-3
    milestones: tuple[int, ...] = (5, 15, 25, 35)
    lr_decay: float = 5.0
    lam: float = 0.01
    beta: float = 0.01  # displacement regulariser inside the point loss
    tau: float = 0.05  # confidence target temperature, meters
    stage_weights: tuple[float, float, float] = (0.25, 0.5, 1.0)
    K: int = 16
    r_min: float = 0.05
    r_max: float = 0.1
    strategy: str = "adaptive"
    gcmf: tuple[str, ...] = ("1/4", "1/2", "1/1")
    use_point_branch: bool = True
    detach_point_features: bool = False
    layer_norm: bool = True
    widths: tuple[int, int, int] = (32, 48, 64)
    point_features: int = 64
    n_fixed: int = 256
    max_depth: float = 3.0
    width: int = 64
    height: int = 48
    n_samples: int = 100
    steps_per_epoch: int | None = None
    data_dir: str = "data/desk"
    out_dir: str = "runs/desk"

    def __post_init__(self):
        self.milestones = tuple(int(m) for m in self.milestones)
        self.gcmf = tuple(self.gcmf)
        self.widths = tuple(self.widths)
        self.stage_weights = tuple(self.stage_weights)
        self.strategy = STRATEGY_ALIASES.get(self.strategy, self.strategy)
        if self.lam < 0:
            raise ConfigError("lambda must be non-negative")
        if list(self.milestones) != sorted(self.milestones):
            raise ConfigError("lr milestones must be ascending")
        bad = [g for g in self.gcmf if g not in SCALE_NAMES]
        if bad:
            raise ConfigError(f"unknown GCMF scales {bad}; use 1/4, 1/2, 1/1")
        if self.width % 4 or self.height % 4:
            raise ConfigError("image width and height must be divisible by 4")
        AcaConfig(self.K, self.r_min, self.r_max, self.strategy)

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            widths=self.widths,
            point_features=self.point_features,
            n_fixed=self.n_fixed,
            max_depth=self.max_depth,
            use_point_branch=self.use_point_branch,
            gcmf_scales=tuple(SCALE_NAMES[g] for g in self.gcmf),
            aca=AcaConfig(self.K, self.r_min, self.r_max, self.strategy),
            layer_norm=self.layer_norm,
            detach_point_features=self.detach_point_features,
        )

    def scene_spec(self) -> SceneSpec:
        return SceneSpec(width=self.width, height=self.height)

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def model_hash(self) -> str:
        """Digest of the fields that determine the parameter layout and forward pass."""
        keys = ("K", "r_min", "r_max", "strategy", "gcmf", "use_point_branch", "layer_norm",
                "widths", "point_features", "n_fixed", "max_depth")
        blob = json.dumps({k: getattr(self, k) for k in keys}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _shipped(name: str) -> TrainConfig:
    text = resources.files("geodepth").joinpath("configs", f"{name}.json").read_text()
    return TrainConfig(**json.loads(text))


PROFILES = {name: _shipped(name) for name in ("desk", "paper")}


def load_config(path: str | Path | None = None, profile: str = "desk", **overrides) -> TrainConfig:
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}")
    base = PROFILES[profile].to_dict()
    if path is not None:
        try:
            base.update(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON at byte {exc.pos}: {exc.msg}") from exc
    base.update({k: v for k, v in overrides.items() if v is not None})
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = set(base) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return TrainConfig(**base)


def save_config(cfg: TrainConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2))


def parse_gcmf(text: str) -> tuple[str, ...]:
    """'1/4,1/2' -> ('1/4', '1/2'); 'none' or '' -> ()."""
    text = text.strip()
    if text in ("", "none"):
        return ()
    if text in ("all", "full"):
        return ("1/4", "1/2", "1/1")
    parts = tuple(p.strip() for p in text.split(","))
    bad = [p for p in parts if p not in SCALE_NAMES]
    if bad:
        raise ConfigError(f"unknown GCMF scales {bad}")
    return parts

