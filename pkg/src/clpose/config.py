"""Plain-text experiment configs: one ``key: value`` per line, ``#`` comments.

Every field of :class:`PipelineConfig` may appear; anything else is an
error. ``none`` stands for an unset optional value.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from typing import Optional, get_type_hints

import numpy as np


class ConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    # simulation
    seed: int = 0
    n: int = 50
    side: int = 64
    snr: Optional[float] = None
    max_shift: float = 0.0
    threads: int = 1
    # polar transform and common lines
    n_theta: int = 180
    n_r: Optional[int] = None
    rmax: float = 0.35
    mask_radius: Optional[float] = None
    T: int = 60
    # pose optimization
    alpha: Optional[float] = None
    beta: Optional[float] = None
    K_max: int = 2000
    tol: float = 1e-7
    patience: int = 50
    decay_every: int = 200
    max_decays: int = 6
    init_iters: int = 1500
    restarts: int = 4
    loss: str = "l1"
    # shift refinement
    shifts: str = "auto"  # auto: run when max_shift > 0 or the stack has no truth
    s_range: Optional[float] = None
    s_step: float = 0.25
    epsilon: float = 0.05
    max_rounds: int = 10
    min_ncc: Optional[float] = None
    detect_step: float = 0.5
    # reconstruction check
    fsc: bool = False
    # paths (relative to the output directory unless absolute)
    out_dir: str = "out"
    stack_path: str = "stack.cps"
    volume_path: str = "volume.cpv"
    shifts_path: str = "shifts.csv"
    poses_path: str = "poses.csv"

    def __post_init__(self):
        if self.n < 3:
            raise ConfigError("n must be >= 3")
        if self.side < 8:
            raise ConfigError("side must be >= 8")
        if self.snr is not None and not self.snr > 0:
            raise ConfigError("snr must be positive or none")
        if not 0 <= self.max_shift <= self.side / 8:
            raise ConfigError("max_shift must lie in [0, side/8]")
        if self.loss not in ("l1", "l2"):
            raise ConfigError("loss must be l1 or l2")
        if self.shifts not in ("auto", "on", "off"):
            raise ConfigError("shifts must be auto, on or off")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if self.T < 18:
            raise ConfigError("T must be >= 18")

    def stage_seeds(self) -> dict:
        """Independent integer seeds per stage, all derived from ``seed``."""
        names = ("simulate", "poses")
        kids = np.random.SeedSequence(self.seed).spawn(len(names))
        return {k: int(s.generate_state(1)[0]) for k, s in zip(names, kids)}

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name}: {_format(v)}")
        return "\n".join(lines) + "\n"

    def replace(self, **kw) -> "PipelineConfig":
        return dataclasses.replace(self, **kw)


def _format(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _convert(name, raw: str, hint):
    text = raw.strip()
    optional = getattr(hint, "__origin__", None) is not None and type(None) in hint.__args__
    base = [a for a in hint.__args__ if a is not type(None)][0] if optional else hint
    if text.lower() == "none":
        if optional:
            return None
        raise ConfigError(f"{name}: value is required")
    try:
        if base is bool:
            if text.lower() in ("true", "yes", "1", "on"):
                return True
            if text.lower() in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        if base is int:
            return int(text)
        if base is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {text!r} as {base.__name__}") from None


def parse_config(text: str, **overrides) -> PipelineConfig:
    hints = get_type_hints(PipelineConfig)
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if ":" not in line:
            raise ConfigError(f"line {lineno}: expected 'key: value'")
        key, raw = (s.strip() for s in line.split(":", 1))
        if key not in hints:
            raise ConfigError(f"unknown config key {key!r} (line {lineno})")
        if key in values:
            raise ConfigError(f"duplicate config key {key!r} (line {lineno})")
        values[key] = _convert(key, raw, hints[key])
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return PipelineConfig(**values)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None


def load_config(path, **overrides) -> PipelineConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    return parse_config(text, **overrides)
