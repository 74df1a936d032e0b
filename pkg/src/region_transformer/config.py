"""TOML run configuration: sections, defaults, range checks and overrides."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .errors import ConfigError
from .inference import SegmentParams
from .network import NetworkConfig
from .simulate import SceneSpec
from .train import TrainConfig

__all__ = ["RunConfig", "load_config", "parse_config", "DEFAULT_NETWORK"]

DEFAULT_NETWORK = NetworkConfig()


@dataclass(frozen=True)
class ScenesSection:
    count: int = 2
    seed: int = 0
    room: tuple = (3.0, 3.0, 2.5)
    objects: tuple = (2, 5)
    primitives: tuple = ("box", "sphere", "cylinder")
    size: tuple = (0.25, 0.6)
    density: float = 200.0
    min_points: int = 8
    floor: bool = True
    walls: bool = False
    spacing: float = 0.1
    lift: float = 0.0
    color_noise: float = 0.03

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("count must be at least 1")
        self.spec(0)  # range checks live on SceneSpec

    def spec(self, seed: int) -> SceneSpec:
        d = asdict(self)
        d.pop("count")
        d["seed"] = seed
        return SceneSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})

    def scene_seeds(self) -> list[int]:
        return [self.seed + i for i in range(self.count)]


@dataclass(frozen=True)
class GrowthSection:
    r_grow: float = 0.15
    theta_max: float = 0.2
    examples_per_scene: int = 100
    max_step: int = 20
    k_normal: int = 10

    def __post_init__(self):
        if not self.r_grow > 0:
            raise ValueError("r_grow must be positive")
        if not 0.0 <= self.theta_max <= 0.5:
            raise ValueError("theta_max must lie in [0, 0.5]")
        if self.examples_per_scene < 1 or self.max_step < 0:
            raise ValueError("examples_per_scene must be positive and max_step non-negative")
        if self.k_normal < 3:
            raise ValueError("k_normal must be at least 3")


@dataclass(frozen=True)
class TrainSection:
    epochs: int = 90
    examples_per_epoch: int | None = None
    batch_size: int = 16
    lr: float = 1e-3
    seed: int = 0
    checkpoint_every: int = 1
    dtype: str = "float32"
    augment: bool = True


@dataclass(frozen=True)
class SegmentSection:
    max_iters: int = 200
    min_size: int = 8
    permanent_exclusion: bool = False
    seed: int = 0
    chunked: bool = True


@dataclass(frozen=True)
class BaselineSection:
    angle_thresh: float = 20.0
    curv_thresh: float = 0.03

    def __post_init__(self):
        if not 0.0 < self.angle_thresh <= 90.0:
            raise ValueError("angle_thresh must lie in (0, 90] degrees")
        if self.curv_thresh < 0:
            raise ValueError("curv_thresh must be non-negative")


@dataclass(frozen=True)
class EvalSection:
    iou_thresh: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.iou_thresh <= 1.0:
            raise ValueError("iou_thresh must lie in (0, 1]")


@dataclass(frozen=True)
class RunConfig:
    scenes: ScenesSection = field(default_factory=ScenesSection)
    growth: GrowthSection = field(default_factory=GrowthSection)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainSection = field(default_factory=TrainSection)
    segment: SegmentSection = field(default_factory=SegmentSection)
    baseline: BaselineSection = field(default_factory=BaselineSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            **asdict(self.train), theta_max=self.growth.theta_max, r_grow=self.growth.r_grow, network=self.network
        )

    def segment_params(self) -> SegmentParams:
        s = self.segment
        return SegmentParams(self.growth.r_grow, s.max_iters, s.min_size, s.permanent_exclusion, s.seed)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            section = getattr(self, f.name)
            out[f.name] = {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(section).items()}
        return out


_SECTIONS = {f.name: f for f in fields(RunConfig)}
_TYPES = {
    "scenes": ScenesSection,
    "growth": GrowthSection,
    "network": NetworkConfig,
    "train": TrainSection,
    "segment": SegmentSection,
    "baseline": BaselineSection,
    "eval": EvalSection,
}


def _coerce(default, value, where):
    """Match ``value`` to the default's type; lists become tuples."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be true or false")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where} must be an array")
        return tuple(value)
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{where} must be a string")
    return value


def parse_config(doc: dict, base: RunConfig | None = None) -> RunConfig:
    """Validate a nested mapping against the schema, rejecting unknown keys."""
    base = base or RunConfig()
    unknown = set(doc) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(sorted(unknown))}")
    updates = {}
    for name, values in doc.items():
        if not isinstance(values, dict):
            raise ConfigError(f"[{name}] must be a table")
        current = getattr(base, name)
        known = {f.name for f in fields(current)}
        bad = set(values) - known
        if bad:
            raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(sorted(bad))}")
        kwargs = {}
        for key, value in values.items():
            default = getattr(current, key)
            if default is None:
                if not (value is None or (isinstance(value, int) and not isinstance(value, bool))):
                    raise ConfigError(f"{name}.{key} must be an integer")
                kwargs[key] = value
            else:
                kwargs[key] = _coerce(default, value, f"{name}.{key}")
        try:
            updates[name] = replace(current, **kwargs)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"[{name}]: {exc}") from None
    cfg = replace(base, **updates)
    try:
        cfg.train_config()
        cfg.segment_params()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the TOML file at ``path``, then ``{section: {key: value}}`` overrides."""
    cfg = RunConfig()
    if path is not None:
        try:
            with open(path, "rb") as fh:
                doc = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        cfg = parse_config(doc, cfg)
    if overrides:
        cfg = parse_config({k: v for k, v in overrides.items() if v}, cfg)
    return cfg
