"""Run configuration: a flat `key = value` text format and its schema."""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path


class ConfigError(ValueError):
    """A configuration value is missing, unknown, or out of range."""


@dataclass
class RunConfig:
    # backbone
    layers: int = 2
    dim: int = 32
    heads: int = 4
    patch_tokens: int = 4
    frames: int = 4
    text_dim: int = 16
    patch_dim: int = 16
    adapter_ratio: float = 0.25
    joint_scale_r: float = 0.5
    adapter_skip: bool = False
    train_output_proj: bool = True
    tpcm_heads: int = 1
    # text tower
    text_layers: int = 2
    text_width: int = 32
    text_heads: int = 4
    text_tokens: int = 6
    # episode shape
    way: int = 5
    shot: int = 1
    queries: int = 1
    # metric and losses
    metric: str = "otam"
    alpha: float = 0.5
    tau: float = 0.07
    tau_d: float = 0.1
    lam: float = 0.1
    omega: tuple[int, ...] = (2,)
    label_smoothing: float = 0.0
    # ablation switches
    use_tma: bool = True
    use_tpcm: bool = True
    support_text: bool = True
    # training
    episodes_train: int = 1000
    episodes_eval: int = 1000
    lr: float = 2e-3
    milestones: tuple[int, ...] = ()
    gamma: float = 0.5
    seed: int = 0
    # data
    data: str = "synth"
    synth_classes: int = 24
    synth_videos_per_class: int = 10
    synth_frames: int = 8
    synth_grid_rows: int = 2
    synth_grid_cols: int = 2
    synth_noise: float = 0.0
    synth_drift: float = 3.0
    synth_seed: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not (0.0 <= self.alpha <= 1.0):
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not (0.0 < self.gamma <= 1.0):
            raise ConfigError(f"gamma must lie in (0, 1], got {self.gamma}")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ConfigError(f"milestones must be strictly increasing, got {self.milestones}")
        if self.episodes_train < 1 or self.episodes_eval < 1:
            raise ConfigError("episode counts must be >= 1")
        if self.patch_tokens != self.synth_grid_rows * self.synth_grid_cols and self.data == "synth":
            raise ConfigError(
                f"patch_tokens {self.patch_tokens} != grid {self.synth_grid_rows}x{self.synth_grid_cols}"
            )
        from fsar.metrics import METRIC_REGISTRY  # deferred: metrics imports ConfigError

        if self.metric not in METRIC_REGISTRY:
            raise ConfigError(
                f"unknown metric {self.metric!r}; registered: {sorted(METRIC_REGISTRY)}"
            )
        if not (0.0 <= self.label_smoothing < 1.0):
            raise ConfigError(f"label_smoothing must lie in [0, 1), got {self.label_smoothing}")


_BOOL_KEYS = {"adapter_skip", "train_output_proj", "use_tma", "use_tpcm", "support_text"}
_TUPLE_KEYS = {"milestones", "omega"}


def _parse_value(key: str, raw: str, target_type):
    raw = raw.strip()
    if key in _BOOL_KEYS:
        if raw.lower() in ("true", "on", "1", "yes"):
            return True
        if raw.lower() in ("false", "off", "0", "no"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if key in _TUPLE_KEYS:
        if not raw:
            return ()
        return tuple(int(x) for x in raw.split(","))
    if target_type is int:
        return int(raw)
    if target_type is float:
        return float(raw)
    return raw


def parse_config(text: str) -> RunConfig:
    """Parse UTF-8 `key = value` lines; '#' starts a comment."""
    schema = {f.name: f.type for f in fields(RunConfig)}
    types = {f.name: type(getattr(RunConfig(), f.name)) for f in fields(RunConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in schema:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            values[key] = _parse_value(key, raw, types[key])
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {exc}") from exc
    return RunConfig(**values)


def load_config(path: str | Path) -> RunConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def dump_config(config: RunConfig) -> str:
    lines = []
    for f in fields(RunConfig):
        v = getattr(config, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
