"""Plain-text ``key = value`` run configuration.

Precedence is defaults < config file < command-line flags.  Unknown keys are
rejected so a typo cannot silently fall back to a default.
"""

from dataclasses import dataclass, fields, replace
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # data
    preset: str = "desk"
    data_dir: str = "data"
    folds: int = 3
    # network
    variant: str = "B"
    depth: int = 3
    base_filters: int = 8
    head_kernel: int = 3
    image_size: int = 0  # 0: the preset's size
    locnet_hidden: int = 64
    locnet_pooling: str = "gap"
    hourglass_target: str = "predicted"
    dtype: str = "float32"
    alpha1: float = 100.0
    alpha2: float = 100.0
    alpha3: float = 0.1
    alpha4: float = 1.0
    # training
    seed: int = 42
    epochs: int = 30
    batch_size: int = 8
    lr: float = 1e-3
    lr_decay: float = 0.1
    lr_period: int = 26
    weight_decay: float = 1e-4
    aug_translation: float = 0.15
    aug_rotation: float = 15.0
    aug_scale: float = 0.15
    val_every: int = 1
    train_folds: str = "all"
    # evaluation / misc
    workers: int = 1
    svg: bool = True

    @property
    def size(self):
        """Image size in pixels: ``image_size``, or the preset's size when 0."""
        from .data import PRESETS
        return self.image_size or PRESETS[self.preset]["image_size"]

    def network_config(self):
        from .omeganet import NetworkConfig
        from .unet import UNetConfig
        unet = UNetConfig(depth=self.depth, base_filters=self.base_filters,
                          head_kernel=self.head_kernel)
        return NetworkConfig(variant=self.variant, unet=unet, image_size=self.size,
                             alphas=(self.alpha1, self.alpha2, self.alpha3, self.alpha4),
                             locnet_hidden=self.locnet_hidden, locnet_pooling=self.locnet_pooling,
                             hourglass_target=self.hourglass_target, dtype=self.dtype)

    def train_config(self):
        from .data import AugmentRanges
        from .training import TrainConfig
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, seed=self.seed,
                           lr=self.lr, lr_decay=self.lr_decay, lr_period=self.lr_period,
                           weight_decay=self.weight_decay, val_every=self.val_every,
                           augment=AugmentRanges(self.aug_translation, self.aug_rotation,
                                                 self.aug_scale))

    def fold_list(self):
        if self.train_folds == "all":
            return list(range(self.folds))
        out = [int(f) for f in self.train_folds.split(",") if f.strip()]
        bad = [f for f in out if not 0 <= f < self.folds]
        if bad:
            raise ConfigError(f"train_folds {bad} outside 0..{self.folds - 1}")
        return out

    def to_text(self):
        return "".join(f"{f.name} = {_render(getattr(self, f.name))}\n" for f in fields(self))


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _render(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(key, raw):
    kind = _TYPES[key]
    kind = {"str": str, "int": int, "float": float, "bool": bool}.get(kind, kind)
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind.__name__}") from None


def parse_pairs(lines, source="config"):
    """Parse ``key = value`` lines ('#' starts a comment) into typed values."""
    out = {}
    for n, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key = value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"{source}:{n}: unknown key {key!r}")
        out[key] = _coerce(key, value)
    return out


def load_file(path):
    return parse_pairs(Path(path).read_text().splitlines(), str(path))


def resolve(path=None, overrides=None, base=None):
    """Defaults (or ``base``) updated by the file at ``path``, then ``overrides``."""
    cfg = base or RunConfig()
    values = {}
    if path:
        values.update(load_file(path))
    for k, v in (overrides or {}).items():
        if v is None:
            continue
        if k not in _TYPES:
            raise ConfigError(f"unknown key {k!r}")
        values[k] = _coerce(k, v) if isinstance(v, str) else v
    cfg = replace(cfg, **values)
    validate(cfg)
    return cfg


def validate(cfg):
    from .data import PRESETS
    if cfg.variant not in ("A", "B", "C", "D"):
        raise ConfigError(f"variant must be one of A, B, C, D; got {cfg.variant!r}")
    if cfg.preset not in PRESETS:
        raise ConfigError(f"unknown preset {cfg.preset!r}; valid presets: {', '.join(PRESETS)}")
    for key in ("epochs", "batch_size", "folds", "workers", "val_every", "depth", "base_filters"):
        if getattr(cfg, key) < 1:
            raise ConfigError(f"{key} must be positive")
    if cfg.image_size < 0:
        raise ConfigError("image_size must be positive (or 0 for the preset's size)")
    if cfg.batch_size < 2:
        raise ConfigError("batch_size must be at least 2 for batch statistics")
    cfg.fold_list()
    cfg.network_config()


def write_lock(out_dir, cfg, command):
    path = Path(out_dir) / "run.lock"
    path.write_text(f"# resolved configuration for '{command}'\n" + cfg.to_text())
    return path
