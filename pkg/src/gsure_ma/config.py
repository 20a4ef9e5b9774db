"""Flat ``key = value`` run configuration.

Values come from, in increasing precedence: the defaults below, the config
file, ``GSURE_MA_<KEY>`` environment variables, and explicit CLI flags.
"""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .exceptions import ConfigError

ENV_PREFIX = "GSURE_MA_"
RESOLVED_NAME = "resolved_config.txt"


@dataclass
class RunConfig:
    # run
    seed: int = 0
    out_dir: str = "runs"
    # data
    image_size: int = 64
    num_ellipses: int = 8
    n_train: int = 6
    n_val: int = 0
    n_test: int = 4
    data_seed: int = 100
    test_image: int = 0
    # acquisition
    num_coils: int = 4
    snr_db: float = 20.0
    mask_kind: str = "variable-density-2d"
    train_acceleration: float = 6.0
    test_acceleration: float = 4.0
    sweep_accelerations: str = "2,4,6,8"
    center_lines: int = 4
    density_power: float = 3.0
    center_fraction: float = 0.08
    # network
    architecture: str = "modl"
    blocks: int = 4
    features: int = 16
    unrolls: int = 3
    dc_lambda: float = 1.0
    dc_iters: int = 10
    # pre-training
    pretrain_epochs: int = 150
    pretrain_lr: float = 1e-3
    # adaptation
    strategies: str = "dip,ssdu,gsure"
    adapt_epochs: int = 400
    adapt_lr: float = 1e-3
    track_oracle_psnr: bool = True
    ssdu_dc_fraction: float = 0.6
    # GSURE
    mc_probes: int = 1
    epsilon_scale: float = 1e-3
    divergence_weight_sigma2: bool = True
    pinv_reg: float = 0.1
    proj_iters: int = 20
    project_probes: bool = True
    cg_tol: float = 1e-8

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.image_size < 4:
            raise ConfigError("image_size must be >= 4")
        if self.mask_kind not in ("variable-density-2d", "cartesian-1d"):
            raise ConfigError(f"mask_kind: unknown mask kind {self.mask_kind!r}")
        if self.architecture not in ("modl", "resnet"):
            raise ConfigError(f"architecture: unknown architecture {self.architecture!r}")
        for name in ("n_train", "n_val", "n_test", "pretrain_epochs", "blocks"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in ("features", "unrolls", "adapt_epochs", "mc_probes", "num_coils", "dc_iters"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("dc_lambda", "pretrain_lr", "adapt_lr", "epsilon_scale", "cg_tol"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0")
        if not 0 < self.ssdu_dc_fraction < 1:
            raise ConfigError("ssdu_dc_fraction must lie in (0, 1)")
        if self.pinv_reg < 0:
            raise ConfigError("pinv_reg must be >= 0")
        bad = [s for s in self.strategy_list() if s not in ("dip", "ssdu", "gsure")]
        if bad:
            raise ConfigError(f"strategies: unknown strategy {bad[0]!r}")
        self.acceleration_list()

    def strategy_list(self) -> list[str]:
        return [s.strip() for s in self.strategies.split(",") if s.strip()]

    def acceleration_list(self) -> list[float]:
        try:
            return [float(a) for a in self.sweep_accelerations.split(",") if a.strip()]
        except ValueError as exc:
            raise ConfigError(f"sweep_accelerations: {exc}") from None

    def to_text(self) -> str:
        lines = ["# resolved configuration (all keys, defaults included)"]
        for k, v in asdict(self).items():
            lines.append(f"{k} = {_format(v)}")
        return "\n".join(lines) + "\n"

    def write_resolved(self, directory) -> Path:
        path = Path(directory) / RESOLVED_NAME
        path.write_text(self.to_text(), encoding="utf-8")
        return path


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(key: str, raw: str):
    kind = _FIELDS[key].type
    raw = raw.strip()
    try:
        if kind == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from None
    return raw


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate config key {key!r}")
        values[key] = _coerce(key, raw)
    return values


def env_overrides(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    out = {}
    for name, raw in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        key = name[len(ENV_PREFIX):].lower()
        if key not in _FIELDS:
            raise ConfigError(f"environment variable {name}: unknown config key {key!r}")
        out[key] = _coerce(key, raw)
    return out


def load_config(path=None, overrides: dict | None = None, environ=None) -> RunConfig:
    """Resolve defaults < file < environment < ``overrides``."""
    values = {}
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {p}: {exc.strerror}") from None
        values.update(parse_config_text(text, str(p)))
    values.update(env_overrides(environ))
    for k, v in (overrides or {}).items():
        if v is None:
            continue
        if k not in _FIELDS:
            raise ConfigError(f"unknown config key {k!r}")
        values[k] = v
    return RunConfig(**values)
