"""Line-oriented ``key = value`` configuration."""
from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .errors import ConfigError


def parse_kv_text(text: str) -> dict:
    """Parse ``key = value`` lines (``#`` comments allowed) into a dict of strings."""
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#",),
                                   inline_comment_prefixes=("#",))
    cp.optionxform = str
    try:
        cp.read_string("[main]\n" + text)
    except configparser.Error as e:
        raise ConfigError(f"malformed config: {e}") from e
    # an optional section header (``[phantom]``, ``[pipeline]``) is accepted; keys from all sections merge
    out = {}
    for name in cp.sections():
        out.update(cp[name])
    return out


@dataclass(frozen=True)
class Config:
    seed: int = 0
    # shape model
    variance_fraction: float = 0.95
    # appearance model
    profile_k: int = 4
    profile_step: float = 1.0
    # matching
    search_m: int = 5
    sigma: float = 10.0
    max_iters: int = 50
    conv_tol: float = 0.1
    clamp_enabled: bool = True
    observe_fraction: float = 0.6
    min_inplane_normal: float = 0.5
    # organ detection
    search_radius: float = 60.0
    # quality gates
    iqa_threshold: float = 0.5
    sqa_threshold: float = 0.5
    n_trees: int = 50
    max_depth: int = 6
    # quantification
    density: float = 1.05

    def __post_init__(self):
        if not 0 < self.variance_fraction <= 1:
            raise ConfigError("variance_fraction must be in (0, 1]")
        if self.profile_k < 1 or self.profile_step <= 0:
            raise ConfigError("profile_k >= 1 and profile_step > 0 required")
        if self.search_m < 1 or self.sigma <= 0:
            raise ConfigError("search_m >= 1 and sigma > 0 required")
        if self.max_iters < 1 or self.conv_tol <= 0:
            raise ConfigError("max_iters >= 1 and conv_tol > 0 required")
        if self.n_trees < 1 or self.max_depth < 1:
            raise ConfigError("n_trees and max_depth must be >= 1")
        if self.density <= 0:
            raise ConfigError("density must be positive")

    @classmethod
    def from_text(cls, text: str) -> "Config":
        kv = parse_kv_text(text)
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, value in kv.items():
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[key] = _convert(types[key], key, value)
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "Config":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        return cls.from_text(text)

    def to_text(self) -> str:
        out = []
        for k, v in asdict(self).items():
            if isinstance(v, bool):
                v = "true" if v else "false"
            out.append(f"{k} = {v}")
        return "\n".join(out) + "\n"

    def with_overrides(self, **kw) -> "Config":
        return replace(self, **{k: v for k, v in kw.items() if v is not None})


def _convert(typ, key, value):
    try:
        if typ in ("bool", bool):
            low = value.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return low in ("true", "1", "yes")
        if typ in ("int", int):
            return int(value)
        if typ in ("float", float):
            return float(value)
    except ValueError:
        raise ConfigError(f"bad value for {key!r}: {value!r}") from None
    return value
