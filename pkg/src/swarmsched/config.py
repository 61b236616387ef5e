"""Run settings shared by the CLI, the simulator, and the manager.

Values resolve in precedence order: explicit overrides (CLI flags) beat the
config file, which beats the built-in defaults. The file format is TOML
with flat top-level keys matching the field names.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from typing import Mapping, Optional

try:  # tomllib landed in 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - depends on interpreter
    import tomli as tomllib  # type: ignore[no-redef]


@dataclass(frozen=True)
class RunConfig:
    alpha: float = 1.0
    mix_alpha: float = 0.5
    cov_threshold: float = 0.5
    publish_interval_s: float = 1.5
    ttl_multiplier: float = 3.0
    reserve_fraction: float = 0.2
    contention_exponent: float = 1.0
    mean_tokens_per_request: float = 128.0
    amortize_rtt: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        if self.alpha <= 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if not 0.0 <= self.mix_alpha <= 1.0:
            raise ValueError(f"mix_alpha must be in [0, 1], got {self.mix_alpha}")
        if self.cov_threshold < 0:
            raise ValueError(f"cov_threshold must be >= 0, got {self.cov_threshold}")
        if self.publish_interval_s <= 0:
            raise ValueError(
                f"publish_interval_s must be positive, got {self.publish_interval_s}"
            )
        if self.ttl_multiplier < 1.0:
            raise ValueError(
                f"ttl_multiplier must be >= 1, got {self.ttl_multiplier}"
            )
        if not 0.0 <= self.reserve_fraction < 1.0:
            raise ValueError(
                f"reserve_fraction must be in [0, 1), got {self.reserve_fraction}"
            )
        if self.contention_exponent < 0:
            raise ValueError(
                f"contention_exponent must be >= 0, got {self.contention_exponent}"
            )
        if self.mean_tokens_per_request <= 0:
            raise ValueError(
                f"mean_tokens_per_request must be positive, got"
                f" {self.mean_tokens_per_request}"
            )

    @property
    def ttl_s(self) -> float:
        return self.publish_interval_s * self.ttl_multiplier


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def config_from_dict(raw: Mapping) -> RunConfig:
    unknown = sorted(set(raw) - set(_FIELD_TYPES))
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(unknown)}")
    kwargs = {}
    for name, value in raw.items():
        if name == "amortize_rtt":
            if not isinstance(value, bool):
                raise ValueError(f"amortize_rtt must be a bool, got {value!r}")
            kwargs[name] = value
        elif name == "seed":
            if isinstance(value, bool) or (
                isinstance(value, float) and not value.is_integer()
            ):
                raise ValueError(f"seed must be an integer, got {value!r}")
            kwargs[name] = int(value)
        else:
            kwargs[name] = float(value)
    return RunConfig(**kwargs)


def config_to_dict(config: RunConfig) -> dict:
    return asdict(config)


def load_config(path: str) -> RunConfig:
    with open(path, "rb") as fh:
        return config_from_dict(tomllib.load(fh))


def save_config(config: RunConfig, path: str) -> None:
    lines = []
    for name, value in config_to_dict(config).items():
        if isinstance(value, bool):
            rendered = "true" if value else "false"
        else:
            rendered = repr(value)
        lines.append(f"{name} = {rendered}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def merge_overrides(config: RunConfig, **overrides) -> RunConfig:
    """New config with every non-None override applied."""
    applied = {k: v for k, v in overrides.items() if v is not None}
    unknown = sorted(set(applied) - set(_FIELD_TYPES))
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(unknown)}")
    return replace(config, **applied) if applied else config


def resolve_config(path: Optional[str] = None, **overrides) -> RunConfig:
    """Defaults, then the file (if given), then the overrides."""
    config = load_config(path) if path else RunConfig()
    return merge_overrides(config, **overrides)
