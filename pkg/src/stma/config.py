"""Plain-text ``key=value`` configuration."""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .exceptions import ContractError

SEED_ENV = "STMA_SEED"


@dataclass
class Config:
    patch_size: int = 16
    channel_dim: int = 64
    heads: int = 4
    n_blocks: int = 2
    value_dim: int = 32
    quarter_dim: int = 32
    eighth_dim: int = 32
    spatial_capacity: int = 4
    temporal_capacity: int = 8
    insertion_stride: int = 3
    mode: str = "full"
    update_objects: bool = True
    similarity: str = "dot"
    keep_fraction: float = 0.25
    seed: int = 0

    def as_dict(self) -> dict:
        return asdict(self)


def _coerce(kind, raw: str, key: str):
    try:
        if kind in (bool, "bool"):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind in (int, "int"):
            return int(raw)
        if kind in (float, "float"):
            return float(raw)
        return raw
    except ValueError:
        raise ContractError(f"config key {key!r}: cannot parse {raw!r}") from None


def parse_config(text: str, env=None) -> Config:
    types = {f.name: f.type for f in fields(Config)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ContractError(f"config line {lineno}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ContractError(f"config line {lineno}: unknown key {key!r}")
        values[key] = _coerce(types[key], raw, key)
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        values["seed"] = _coerce("int", env[SEED_ENV], SEED_ENV)
    return Config(**values)


def load_config(path=None, env=None) -> Config:
    text = Path(path).read_text() if path is not None else ""
    return parse_config(text, env)


def dump_config(cfg: Config) -> str:
    return "".join(f"{k}={str(v).lower() if isinstance(v, bool) else v}\n" for k, v in cfg.as_dict().items())
