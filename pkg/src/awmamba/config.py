"""Run configuration: defaults, config-file parsing, flag merging.

Config files are UTF-8 text, one `key = value` per line, `#` starts a
comment.  Unknown keys are errors (they are almost always typos).  The
resolved configuration is serialized into every run directory; its
canonical text (sorted keys) is hashed so twin runs can prove they differ
only where intended.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field, fields, replace

OUTPUT_ROOT_ENV = "AWMAMBA_OUT_ROOT"


class ConfigError(ValueError):
    pass


def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


def _parse_int_list(s) -> tuple:
    if isinstance(s, (tuple, list)):
        return tuple(int(v) for v in s)
    return tuple(int(v) for v in str(s).split(",") if v.strip())


@dataclass(frozen=True)
class RunConfig:
    """Everything a run needs; field names double as config-file keys."""

    task: str = "bcd"  # bcd | scd
    data_dir: str = "data"
    out_dir: str = "runs/run0"
    seed: int = 0

    # model
    rates: tuple = (2, 5, 7, 9)
    window_mode: str = "contiguous"  # contiguous | dilated
    state_dim: int = 8
    widths: tuple = (12, 24, 48, 96)
    depths: tuple = (1, 1, 2, 1)
    decoder_width: int = 16
    scan_strategy: str = "atrous"  # atrous | csm
    merge_mode: str = "concat"  # concat | sum
    zoh_mode: str = "printed"  # printed | simplified
    num_classes: int = 4

    # optimization
    steps: int = 500
    batch_size: int = 8
    lr: float = 1e-4
    weight_decay: float = 5e-3
    lambda_cd: float = 1.0
    lambda_sc: float = 1.0
    lambda_ss: float = 1.0

    # augmentation
    aug_rotate90: bool = True
    aug_flip_lr: bool = True
    aug_flip_tb: bool = True

    # data generation
    image_size: int = 64
    train_count: int = 200
    val_count: int = 50
    test_count: int = 50
    noise: float = 0.05

    # evaluation
    sek_eta: str = "squared"  # squared | printed
    cos_mode: str = "hinge"  # hinge | raw

    def validate(self) -> "RunConfig":
        if self.task not in ("bcd", "scd"):
            raise ConfigError(f"task must be bcd or scd, got {self.task!r}")
        if self.scan_strategy not in ("atrous", "csm"):
            raise ConfigError(f"scan_strategy must be atrous or csm, got {self.scan_strategy!r}")
        if self.window_mode not in ("contiguous", "dilated"):
            raise ConfigError(f"window_mode must be contiguous or dilated, got {self.window_mode!r}")
        if self.merge_mode not in ("concat", "sum"):
            raise ConfigError(f"merge_mode must be concat or sum, got {self.merge_mode!r}")
        if self.zoh_mode not in ("printed", "simplified"):
            raise ConfigError(f"zoh_mode must be printed or simplified, got {self.zoh_mode!r}")
        if self.sek_eta not in ("squared", "printed"):
            raise ConfigError(f"sek_eta must be squared or printed, got {self.sek_eta!r}")
        if self.cos_mode not in ("hinge", "raw"):
            raise ConfigError(f"cos_mode must be hinge or raw, got {self.cos_mode!r}")
        if len(self.widths) != 4 or len(self.depths) != 4:
            raise ConfigError("widths and depths must list exactly four stages")
        if self.image_size % 32:
            raise ConfigError(f"image_size must be divisible by 32, got {self.image_size}")
        if min(self.lambda_cd, self.lambda_sc, self.lambda_ss) < 0:
            raise ConfigError("loss weights must be non-negative")
        return self


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}
_TUPLE_KEYS = {"rates", "widths", "depths"}
_BOOL_KEYS = {"aug_rotate90", "aug_flip_lr", "aug_flip_tb"}
_INT_KEYS = {"seed", "state_dim", "decoder_width", "num_classes", "steps", "batch_size",
             "image_size", "train_count", "val_count", "test_count"}
_FLOAT_KEYS = {"lr", "weight_decay", "lambda_cd", "lambda_sc", "lambda_ss", "noise"}


def _coerce(key: str, value: str):
    if key in _TUPLE_KEYS:
        return _parse_int_list(value)
    if key in _BOOL_KEYS:
        return _parse_bool(value) if isinstance(value, str) else bool(value)
    if key in _INT_KEYS:
        return int(value)
    if key in _FLOAT_KEYS:
        return float(value)
    return str(value)


def parse_config_file(path) -> dict:
    """Read `key = value` lines; returns raw (coerced) overrides."""
    overrides = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw.rstrip()!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in _FIELD_TYPES:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            overrides[key] = _coerce(key, value)
    return overrides


def build_config(file_path=None, flag_overrides=None) -> RunConfig:
    """Merge precedence: explicit flags > config file > env output root > defaults."""
    values = {}
    env_root = os.environ.get(OUTPUT_ROOT_ENV)
    if file_path:
        values.update(parse_config_file(file_path))
    if flag_overrides:
        for key, value in flag_overrides.items():
            if value is None:
                continue
            if key not in _FIELD_TYPES:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = _coerce(key, value) if isinstance(value, str) else value
    cfg = replace(RunConfig(), **values)
    if env_root and "out_dir" not in values:
        cfg = replace(cfg, out_dir=os.path.join(env_root, os.path.basename(cfg.out_dir)))
    return cfg.validate()


def config_text(cfg: RunConfig) -> str:
    """Canonical serialized form: sorted `key = value` lines."""
    lines = []
    for f in sorted(fields(RunConfig), key=lambda f: f.name):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: RunConfig, exclude=()) -> str:
    """Hash of the canonical text, optionally with some keys removed."""
    lines = [ln for ln in config_text(cfg).splitlines()
             if ln.split(" = ")[0] not in set(exclude)]
    return hashlib.sha256("\n".join(lines).encode("utf-8")).hexdigest()


def save_config(cfg: RunConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(config_text(cfg))
