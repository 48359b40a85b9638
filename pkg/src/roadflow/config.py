"""Run configuration: defaults, key=value config files, validation.

One flat dataclass drives every CLI command. Desk-scale defaults keep every
stage small enough for laptop CPUs; ``apply_paper_scale`` switches the model
width, kernel radius and learning rate to the published full-scale settings.
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    """Invalid configuration or mismatched artifacts; CLI exit code 2."""


VARIANTS = ("short", "short-road", "short-long-road", "full")
ROAD_CONVS = ("md1d", "square2d")
ROAD_WEIGHTINGS = ("weighted", "common")
QUERY_MODES = ("road", "positional")


@dataclass
class RunConfig:
    # Grid geometry. Fine extents are derived: i_f = n * i_c, j_f = n * j_c.
    i_c: int = 8
    j_c: int = 8
    n: int = 4
    # Model shape.
    channels: int = 16
    radius: int = 2
    pool: int = 2
    variant: str = "full"
    road_conv: str = "md1d"
    road_weighting: str = "weighted"
    query_mode: str = "road"
    # Optimization.
    lr: float = 1e-3
    lr_decay: float = 0.5
    lr_patience: int = 3
    batch_size: int = 8
    epochs: int = 30
    seed: int = 0
    eps_loss: float = 1e-5
    clamp_nonneg: bool = False
    # Synthetic city generation.
    days: int = 28
    intervals_per_day: int = 96
    interval_minutes: int = 15
    start_dow: int = 0
    n_arterial: int = 3
    n_secondary: int = 5
    noise_scale: float = 0.2
    noise_base: float = 0.2
    suburban_artifact: bool = True
    train_days: int = 21
    val_days: int = 3
    test_days: int = 4
    # Optional cap on optimizer steps per run (0 = no cap); useful for
    # fixed-budget comparisons.
    max_steps: int = 0

    @property
    def i_f(self) -> int:
        return self.n * self.i_c

    @property
    def j_f(self) -> int:
        return self.n * self.j_c

    def validate(self) -> None:
        if self.channels <= 0 or self.channels % 4 != 0:
            raise ConfigError(
                f"channels must be a positive multiple of 4, got {self.channels}")
        if self.n < 1:
            raise ConfigError(f"upscaling factor must be >= 1, got {self.n}")
        if self.i_c < 1 or self.j_c < 1:
            raise ConfigError(f"coarse extents must be >= 1, got {self.i_c}x{self.j_c}")
        if self.radius < 1:
            raise ConfigError(f"kernel radius must be >= 1, got {self.radius}")
        if self.pool < 1 or self.i_f % self.pool or self.j_f % self.pool:
            raise ConfigError(
                f"pool factor {self.pool} must divide fine extents {self.i_f}x{self.j_f}")
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if not 0 < self.lr_decay <= 1:
            raise ConfigError(f"lr decay must be in (0, 1], got {self.lr_decay}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.road_conv not in ROAD_CONVS:
            raise ConfigError(f"road_conv must be one of {ROAD_CONVS}")
        if self.road_weighting not in ROAD_WEIGHTINGS:
            raise ConfigError(f"road_weighting must be one of {ROAD_WEIGHTINGS}")
        if self.query_mode not in QUERY_MODES:
            raise ConfigError(f"query_mode must be one of {QUERY_MODES}")
        if self.days < 1 or self.intervals_per_day < 1 or self.interval_minutes < 1:
            raise ConfigError("calendar settings must be positive")
        if not 0 <= self.start_dow <= 6:
            raise ConfigError(f"start_dow must be in [0, 6], got {self.start_dow}")
        if self.n_arterial < 1 or self.n_secondary < 1:
            raise ConfigError("need at least one arterial and one secondary road")
        if self.noise_scale < 0 or self.noise_base < 0:
            raise ConfigError("noise settings must be nonnegative")
        if self.train_days + self.val_days + self.test_days != self.days:
            raise ConfigError(
                f"split {self.train_days}+{self.val_days}+{self.test_days} "
                f"does not cover {self.days} days")
        if min(self.train_days, self.val_days, self.test_days) < 1:
            raise ConfigError("every split needs at least one day")
        if self.max_steps < 0:
            raise ConfigError(f"max_steps must be >= 0, got {self.max_steps}")

    def apply_paper_scale(self) -> None:
        self.channels = 128
        self.radius = 4
        self.lr = 2e-4
        self.pool = 4 if min(self.i_f, self.j_f) >= 128 else 2


_BOOL_WORDS = {"true": True, "false": False, "1": True, "0": False,
               "yes": True, "no": False}


def _coerce(name: str, kind: type, raw: str):
    raw = raw.strip()
    if kind is bool:
        if raw.lower() not in _BOOL_WORDS:
            raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
        return _BOOL_WORDS[raw.lower()]
    try:
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{name}: expected {kind.__name__}, got {raw!r}") from None


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse ``key = value`` lines (# comments allowed) over a base config."""
    cfg = base if base is not None else RunConfig()
    kinds = {f.name: f.type for f in fields(RunConfig)}
    # dataclass field annotations are strings under future-annotations; map
    # them back to constructors.
    named = {"int": int, "float": float, "str": str, "bool": bool}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        if key not in kinds:
            raise ConfigError(f"line {lineno}: unknown setting {key!r}")
        kind = kinds[key]
        if isinstance(kind, str):
            kind = named[kind]
        setattr(cfg, key, _coerce(key, kind, raw))
    return cfg


def load_config_file(path, base: RunConfig | None = None) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config_text(p.read_text(), base)
