"""Run configuration: defaults, INI-style config files, flag overrides, and
a canonical hash that is stable under key reordering."""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields


@dataclass(frozen=True)
class TrainConfig:
    """Everything a run needs; field names double as override keys."""

    # task
    task: str = "european_call"
    dim: int = 1
    s0: float = 100.0
    strike: float = 100.0
    sigma: float = 0.2
    rate: float = 0.0
    rho: float = 0.3          # basket equicorrelation (multi-asset tasks)
    barrier: float = 120.0    # knock-out tasks

    # grid and sampling
    n_steps: int = 50
    horizon: float = 1.0
    batch: int = 256
    epochs: int = 300
    antithetic: bool = True
    eval_paths: int = 4096

    # architecture
    sig_depth: int = 3        # prefix log-signature depth m
    control_depth: int = 2    # per-step control depth m_u
    width: int = 128          # hidden width p
    window: int = 12          # local window K
    stride: int = 6
    activation: str = "tanh"
    head_activation: str = "relu"
    head_hidden: int = 0      # 0 = width // 4

    # optimizer
    lr: float = 3e-3
    weight_decay: float = 0.0
    clip: float = 1.0

    # objective
    q_start: float = 0.95
    q_end: float = 0.99
    eta_start: float = 0.5
    eta_end: float = 1.5
    phase_split: float = 0.2
    lambda2_late: float = 0.2
    alpha_z: float = 0.1
    alpha_gamma: float = 0.01
    gamma_reg: float = 1e-4
    z_shrink: float = 0.5
    gamma_bump: float = 0.5

    # toggles
    use_malliavin: bool = True
    use_hjb: bool = False
    use_signatures: bool = True
    baseline: str = "rde"     # "rde" | "rnn"
    warm_start_bias: bool = True
    norm_warmup: int = 10
    deterministic: bool = True

    # bookkeeping
    seed: int = 13
    seeds: tuple = (13, 31, 71, 97, 123)
    cvar_grid: tuple = (0.90, 0.95, 0.975, 0.99)
    mc_ref_paths: int = 200_000
    outdir: str = "runs"

    def __post_init__(self):
        if self.stride > self.window:
            raise ValueError("stride must not exceed the window length")
        if self.window > self.n_steps:
            raise ValueError("window must not exceed the grid length")
        if self.baseline not in ("rde", "rnn"):
            raise ValueError("baseline must be 'rde' or 'rnn'")

    def replace(self, **kwargs) -> "TrainConfig":
        return dataclasses.replace(self, **kwargs)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["seeds"] = list(self.seeds)
        out["cvar_grid"] = list(self.cvar_grid)
        return out

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:12]


_SECTIONS = {
    "task": ("task", "dim", "s0", "strike", "sigma", "rate", "rho", "barrier"),
    "grid": ("n_steps", "horizon", "batch", "epochs", "antithetic", "eval_paths"),
    "model": ("sig_depth", "control_depth", "width", "window", "stride",
              "activation", "head_activation", "head_hidden", "baseline",
              "use_signatures"),
    "optim": ("lr", "weight_decay", "clip"),
    "objective": ("q_start", "q_end", "eta_start", "eta_end", "phase_split",
                  "lambda2_late", "alpha_z", "alpha_gamma", "gamma_reg",
                  "z_shrink", "gamma_bump", "use_malliavin", "use_hjb"),
    "run": ("warm_start_bias", "norm_warmup", "deterministic", "seed", "seeds",
            "cvar_grid", "mc_ref_paths", "outdir"),
}

_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _parse_value(name: str, raw: str):
    kind = _FIELD_TYPES[name]
    raw = raw.strip()
    if kind == "bool":
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"cannot parse boolean '{raw}' for {name}")
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    if kind == "tuple":
        parts = [p for p in raw.replace(",", " ").split() if p]
        caster = float if name == "cvar_grid" else int
        return tuple(caster(p) for p in parts)
    return raw


def load_config(path: str, overrides: dict | None = None) -> TrainConfig:
    """Read an INI config (sections as grouped above) and apply overrides."""
    parser = configparser.ConfigParser()
    with open(path) as fh:
        parser.read_file(fh)
    values: dict = {}
    for section in parser.sections():
        for key, raw in parser.items(section):
            if key not in _FIELD_TYPES:
                raise KeyError(f"unknown config key '{key}' in [{section}]")
            values[key] = _parse_value(key, raw)
    if overrides:
        values.update(overrides)
    return TrainConfig(**values)


def save_config(cfg: TrainConfig, path: str) -> None:
    parser = configparser.ConfigParser()
    for section, names in _SECTIONS.items():
        parser[section] = {}
        for name in names:
            value = getattr(cfg, name)
            if isinstance(value, tuple):
                value = ", ".join(str(v) for v in value)
            parser[section][name] = str(value)
    with open(path, "w") as fh:
        parser.write(fh)


def parse_overrides(pairs: list[str]) -> dict:
    """Parse repeated ``--set key=value`` flags into typed values."""
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ValueError(f"override '{pair}' is not of the form key=value")
        key, raw = pair.split("=", 1)
        key = key.strip()
        if key not in _FIELD_TYPES:
            raise KeyError(f"unknown config key '{key}'")
        out[key] = _parse_value(key, raw)
    return out
