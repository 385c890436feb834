"""Flat ``section.key = value`` configuration with validated defaults.

Every tunable of the pipeline lives here so a single file drives training,
inference and evaluation. Unknown keys and out-of-range values are rejected
by name. Parsing is order-independent; duplicate keys are an error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

from .data import SyntheticConfig
from .decoder import DecoderConfig
from .diffusion import BoxNormalizer, NoiseSchedule, linear_beta_schedule
from .features import GridConfig
from .matching import MatchWeights
from .proposals import DynamicTimeConfig


class ConfigError(ValueError):
    pass


def _boolean(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


@dataclass
class DiffusionSection:
    steps: int = 1000
    signal_scale: float = 2.0
    beta_start: float = 1e-4
    beta_end: float = 0.02
    ddim_eta: float = 1.0
    printed_sigma: bool = False


@dataclass
class SceneSection:
    x_min: float = 0.0
    x_max: float = 70.4
    y_min: float = -40.0
    y_max: float = 40.0
    size_max_x: float = 8.0
    size_max_y: float = 5.0


@dataclass
class ProposalSection:
    n: int = 300
    eta: int = 5
    rho: float = 0.8
    omega: int = 5
    sigma: float = 0.5
    resample: bool = True
    size_correlation: bool = True


@dataclass
class GridSection:
    cell_size: float = 0.4


@dataclass
class DecoderSection:
    hidden: int = 128
    pool_size: int = 7
    time_dim: int = 64
    height_mode: str = "regressed"
    prior_cz: float = 0.75
    prior_dz: float = 1.5


@dataclass
class MatchSection:
    lambda_cls: float = 2.0
    lambda_reg: float = 5.0
    lambda_iou: float = 2.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0


@dataclass
class TrainSection:
    epochs: int = 12
    lr: float = 1e-3
    weight_decay: float = 0.01
    warmup_frac: float = 0.3


@dataclass
class EvalSection:
    iou_threshold: float = 0.7
    recall_positions: int = 40
    mode: str = "bev"


@dataclass
class NmsSection:
    iou_threshold: float = 0.1
    pool_all_steps: bool = True


@dataclass
class SyntheticSection:
    max_boxes: int = 6
    clutter_points: int = 6000
    min_points_per_box: int = 10


@dataclass
class Config:
    diffusion: DiffusionSection = field(default_factory=DiffusionSection)
    scene: SceneSection = field(default_factory=SceneSection)
    proposals: ProposalSection = field(default_factory=ProposalSection)
    grid: GridSection = field(default_factory=GridSection)
    decoder: DecoderSection = field(default_factory=DecoderSection)
    match: MatchSection = field(default_factory=MatchSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    nms: NmsSection = field(default_factory=NmsSection)
    synthetic: SyntheticSection = field(default_factory=SyntheticSection)

    # ---- derived pipeline objects -------------------------------------

    def schedule(self) -> NoiseSchedule:
        return linear_beta_schedule(self.diffusion.steps, self.diffusion.beta_start, self.diffusion.beta_end)

    def normalizer(self) -> BoxNormalizer:
        s = self.scene
        return BoxNormalizer(
            x_min=s.x_min,
            x_max=s.x_max,
            y_min=s.y_min,
            y_max=s.y_max,
            size_max_x=s.size_max_x,
            size_max_y=s.size_max_y,
            signal_scale=self.diffusion.signal_scale,
        )

    def grid_config(self) -> GridConfig:
        s = self.scene
        return GridConfig(x_min=s.x_min, x_max=s.x_max, y_min=s.y_min, y_max=s.y_max, cell=self.grid.cell_size)

    def decoder_config(self) -> DecoderConfig:
        d = self.decoder
        return DecoderConfig(
            pool_size=d.pool_size,
            hidden=d.hidden,
            time_dim=d.time_dim,
            signal_scale=self.diffusion.signal_scale,
            height_mode=d.height_mode,
            prior_cz=d.prior_cz,
            prior_dz=d.prior_dz,
        )

    def match_weights(self) -> MatchWeights:
        m = self.match
        return MatchWeights(
            lambda_cls=m.lambda_cls,
            lambda_reg=m.lambda_reg,
            lambda_iou=m.lambda_iou,
            focal_alpha=m.focal_alpha,
            focal_gamma=m.focal_gamma,
        )

    def time_config(self, epochs: int | None = None) -> DynamicTimeConfig:
        return DynamicTimeConfig(
            max_time=self.diffusion.steps,
            omega=self.proposals.omega,
            sigma=self.proposals.sigma,
            epochs=epochs if epochs is not None else self.train.epochs,
        )

    def synthetic_config(self) -> SyntheticConfig:
        s = self.scene
        y = self.synthetic
        return SyntheticConfig(
            x_min=s.x_min,
            x_max=s.x_max,
            y_min=s.y_min,
            y_max=s.y_max,
            max_boxes=y.max_boxes,
            clutter_points=y.clutter_points,
            min_points_per_box=y.min_points_per_box,
        )

    def effective_rho(self) -> float:
        """Correlated sizes when enabled, otherwise independent draws (rho 0)."""
        return self.proposals.rho if self.proposals.size_correlation else 0.0


_RANGE_CHECKS = {
    "diffusion.steps": lambda v: v >= 1,
    "diffusion.signal_scale": lambda v: v > 0,
    "diffusion.beta_start": lambda v: 0 < v < 1,
    "diffusion.beta_end": lambda v: 0 < v < 1,
    "diffusion.ddim_eta": lambda v: v >= 0,
    "proposals.n": lambda v: v >= 1,
    "proposals.eta": lambda v: v >= 0,
    "proposals.rho": lambda v: -1.0 <= v <= 1.0,
    "proposals.omega": lambda v: v >= 1,
    "proposals.sigma": lambda v: 0 < v <= 1,
    "grid.cell_size": lambda v: v > 0,
    "decoder.hidden": lambda v: v >= 1,
    "decoder.pool_size": lambda v: v >= 1,
    "decoder.time_dim": lambda v: v >= 2 and v % 2 == 0,
    "decoder.height_mode": lambda v: v in ("regressed", "prior"),
    "decoder.prior_dz": lambda v: v > 0,
    "match.lambda_cls": lambda v: v >= 0,
    "match.lambda_reg": lambda v: v >= 0,
    "match.lambda_iou": lambda v: v >= 0,
    "match.focal_alpha": lambda v: 0 <= v <= 1,
    "match.focal_gamma": lambda v: v >= 0,
    "train.epochs": lambda v: v >= 1,
    "train.lr": lambda v: v > 0,
    "train.weight_decay": lambda v: v >= 0,
    "train.warmup_frac": lambda v: 0 <= v < 1,
    "eval.iou_threshold": lambda v: 0 < v <= 1,
    "eval.recall_positions": lambda v: v in (11, 40),
    "eval.mode": lambda v: v in ("bev", "3d"),
    "nms.iou_threshold": lambda v: 0 <= v <= 1,
    "synthetic.max_boxes": lambda v: v >= 1,
    "synthetic.clutter_points": lambda v: v >= 0,
    "synthetic.min_points_per_box": lambda v: v >= 0,
}


def default_config() -> Config:
    return Config()


def _convert(key: str, raw: str, current):
    try:
        if isinstance(current, bool):
            return _boolean(raw)
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            val = float(raw)
            if not math.isfinite(val):
                raise ValueError("non-finite value")
            return val
        return raw.strip()
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(current).__name__} ({exc})") from None


def apply_overrides(cfg: Config, items) -> Config:
    for key, raw in items:
        if "." not in key:
            raise ConfigError(f"unknown key {key!r} (expected section.field)")
        section_name, field_name = key.split(".", 1)
        section = getattr(cfg, section_name, None)
        if section is None or not hasattr(section, field_name):
            raise ConfigError(f"unknown key {key!r}")
        value = _convert(key, raw, getattr(section, field_name))
        check = _RANGE_CHECKS.get(key)
        if check is not None and not check(value):
            raise ConfigError(f"{key}: value {value!r} out of range")
        setattr(section, field_name, value)
    return cfg


def load_config(text: str) -> Config:
    """Parse ``key = value`` lines ('#' starts a comment) over the defaults."""
    items = []
    seen = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {body!r}")
        key, raw = (part.strip() for part in body.split("=", 1))
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        seen.add(key)
        items.append((key, raw))
    return apply_overrides(default_config(), items)


def load_config_file(path) -> Config:
    with open(path, "r", encoding="utf-8") as fh:
        return load_config(fh.read())


def config_to_text(cfg: Config) -> str:
    """Serialize every key; load_config(config_to_text(c)) reproduces c."""
    lines = []
    for section_field in fields(cfg):
        section = getattr(cfg, section_field.name)
        for f in fields(section):
            value = getattr(section, f.name)
            if isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{section_field.name}.{f.name} = {value}")
    return "\n".join(lines) + "\n"
