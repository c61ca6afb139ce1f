"""Run configuration: ``key=value`` lines or a JSON object, validated."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, fields


class ConfigError(ValueError):
    pass


@dataclass
class Config:
    seed: int = 0
    views: int = 5
    hypotheses: int = 64
    gamma: float = 2.0
    # occupancy grid and extraction
    grid: int = 32
    mise_coarse: int = 16
    mise_target: int = 64
    # multi-task weighting
    loss_mode: str = "uncertainty"
    alpha: float = 1.0
    beta: float = 1.0
    delta: float = 1.0
    log_sigma_init: float | None = None  # None: start at the stationary point
    # recurrence and adaptation
    T: int = 2
    width_factor: float = 0.25
    carry_factor: float = 4.0  # previous-mesh samples per fused point; 0 disables
    lam: float = 0.1
    adapt_epochs: int = 2
    adapt_lr: float = 3e-3
    # matching training (reference schedule: 10 epochs, 10000 steps)
    match_lr: float = 1e-3
    match_decay: float = 0.5
    match_decay_every: int = 200
    match_iterations: int = 400
    # occupancy pre-training (reference schedule: 30k iterations, batch 32)
    pretrain_lr: float = 1e-3
    pretrain_iterations: int = 1000
    # sign-agnostic fine-tuning
    finetune_iterations: int = 1000
    finetune_lr: float = 3e-5
    finetune_decay: float = 0.3
    finetune_decay_every: int = 400
    finetune_scope: str = "decoder"
    m_surface: int = 1024
    m_volume: int = 1024
    rho_pitches: float = 1.5
    smooth: bool = True
    smooth_every: int = 100
    smooth_support: float = 0.0  # pitches from the cloud; 0 puts curvature points on the whole mesh
    # fusion and evaluation
    p_thresh: float = 0.3
    fusion_views: int = 2
    texture_thresh: float = 1e-3
    fs_tau: float = 0.01
    eval_samples: int = 20000
    photo_samples: int = 2000
    output: str = "out"

    def validate(self) -> "Config":
        rules = [
            ("seed", self.seed >= 0, "must be >= 0"),
            ("views", self.views >= 2, "matching needs at least 2 views"),
            ("hypotheses", self.hypotheses >= 2, "must be >= 2"),
            ("gamma", self.gamma >= 0, "must be >= 0"),
            ("grid", self.grid >= 4 and self.grid % 2 == 0, "must be even and >= 4"),
            ("mise_coarse", self.mise_coarse >= 2, "must be >= 2"),
            ("mise_target", _pow2_multiple(self.mise_target, self.mise_coarse),
             "must be mise_coarse * 2**k"),
            ("loss_mode", self.loss_mode in ("fixed", "uncertainty"), "fixed or uncertainty"),
            ("alpha", self.alpha > 0, "must be > 0"),
            ("beta", self.beta > 0, "must be > 0"),
            ("delta", self.delta > 0, "must be > 0"),
            ("T", self.T >= 1, "must be >= 1"),
            ("width_factor", 0 < self.width_factor <= 1, "must lie in (0, 1]"),
            ("carry_factor", self.carry_factor >= 0, "must be >= 0"),
            ("lam", self.lam >= 0, "must be >= 0"),
            ("adapt_epochs", self.adapt_epochs >= 0, "must be >= 0"),
            ("finetune_iterations", self.finetune_iterations >= 0, "must be >= 0"),
            ("finetune_scope", self.finetune_scope in ("decoder", "all"), "decoder or all"),
            ("finetune_decay", 0 < self.finetune_decay <= 1, "must lie in (0, 1]"),
            ("match_decay", 0 < self.match_decay <= 1, "must lie in (0, 1]"),
            ("m_surface", self.m_surface >= 1, "must be >= 1"),
            ("m_volume", self.m_volume >= 0, "must be >= 0"),
            ("rho_pitches", self.rho_pitches >= 0, "must be >= 0"),
            ("smooth_every", self.smooth_every >= 1, "must be >= 1"),
            ("smooth_support", self.smooth_support >= 0, "must be >= 0"),
            ("p_thresh", self.p_thresh >= 0, "must be >= 0"),
            ("fusion_views", self.fusion_views >= 0, "must be >= 0"),
            ("texture_thresh", self.texture_thresh >= 0, "must be >= 0"),
            ("fs_tau", self.fs_tau > 0, "must be > 0"),
            ("eval_samples", self.eval_samples >= 1, "must be >= 1"),
        ]
        for name in ("match_lr", "pretrain_lr", "finetune_lr", "adapt_lr"):
            rules.append((name, getattr(self, name) > 0, "must be > 0"))
        for key, ok, why in rules:
            if not ok:
                raise ConfigError(f"{key}={getattr(self, key)!r}: {why}")
        return self

    def echo(self) -> str:
        """``key=value`` text that parses back to an equal config."""
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name}={_format(v)}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _pow2_multiple(target: int, coarse: int) -> bool:
    if coarse < 1 or target % coarse:
        return False
    r = target // coarse
    return r >= 1 and r & (r - 1) == 0


def _format(v) -> str:
    if v is None:
        return "auto"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


_TYPES = {f.name: f.type for f in fields(Config)}


def _coerce(key: str, raw, where: str):
    kind = _TYPES[key]
    try:
        if kind == "bool":
            if isinstance(raw, bool):
                return raw
            s = str(raw).strip().lower()
            if s in ("1", "true", "yes", "on"):
                return True
            if s in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if kind == "int":
            if isinstance(raw, bool):
                raise ValueError("not an integer")
            if isinstance(raw, float) and not raw.is_integer():
                raise ValueError(f"not an integer: {raw!r}")
            return int(raw) if not isinstance(raw, str) else int(raw.strip())
        if kind == "float":
            return float(raw)
        if kind == "float | None":
            if raw is None or str(raw).strip().lower() in ("auto", "none", ""):
                return None
            return float(raw)
        return str(raw).strip() if isinstance(raw, str) else str(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: bad value for {key}: {exc}") from exc


def parse_config(text: str, env: dict | None = None) -> Config:
    """Parse ``key=value`` lines (``#`` comments allowed) or a JSON object.

    Absent keys take their defaults; unknown keys and out-of-range values
    raise ``ConfigError`` naming the line or key.  ``MRIO_SEED`` in ``env``
    (default: the process environment) overrides the seed.
    """
    env = os.environ if env is None else env
    values: dict = {}
    stripped = text.strip()
    if stripped.startswith("{"):
        try:
            obj = json.loads(stripped)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"line {exc.lineno}: invalid JSON ({exc.msg})") from exc
        if not isinstance(obj, dict):
            raise ConfigError("JSON config must be an object")
        for k, v in obj.items():
            if k not in _TYPES:
                raise ConfigError(f"unknown key {k!r}")
            values[k] = _coerce(k, v, f"key {k!r}")
    else:
        for no, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {no}: expected key=value, got {line!r}")
            k, v = (s.strip() for s in line.split("=", 1))
            if k not in _TYPES:
                raise ConfigError(f"line {no}: unknown key {k!r}")
            values[k] = _coerce(k, v, f"line {no}")
    if env.get("MRIO_SEED") not in (None, ""):
        values["seed"] = _coerce("seed", env["MRIO_SEED"], "MRIO_SEED")
    return Config(**values).validate()


def load_config(path=None, env: dict | None = None) -> Config:
    if path is None:
        return parse_config("", env)
    with open(path) as fh:
        return parse_config(fh.read(), env)
