"""Flat ``key = value`` run configuration with typed parsing.

Precedence (lowest first): built-in defaults, config file, ``DISTAC_<KEY>``
environment variables, ``--set key=value`` overrides.  Unknown keys and
missing required keys are rejected before any work starts.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields
from pathlib import Path

from ..agent import VARIANTS, TrainConfig

ENV_PREFIX = "DISTAC_"
ENVIRONMENTS = ("five_state", "gridworld", "lqr1d")


class ConfigError(ValueError):
    pass


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "yes", "1", "on"):
        return True
    if t in ("false", "no", "0", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _parse_ints(text: str) -> tuple:
    parts = [p for p in text.replace(" ", "").split(",") if p]
    return tuple(int(p) for p in parts)


def _parse_opt_float(text: str):
    return None if text.strip().lower() in ("auto", "none", "") else float(text)


# key -> (parser, default); default None with required=True means must be given
_KEYS = {
    "env": (str, None),
    "variant": (str, None),
    "seed": (int, 0),
    "iterations": (int, 100),
    "eval_every": (int, 10),
    "eval_episodes": (int, 10),
    "eval_seed": (int, 12345),
    "checkpoint_every": (int, 0),
    # environment parameters
    "grid_size": (int, 5),
    "grid_variant": (str, "dense"),
    "slip": (float, 0.0),
    "grid_max_steps": (int, 0),
    "lqr_noise": (float, 0.0),
    "lqr_horizon": (int, 32),
    "reward_noise_var": (float, 0.01),
    # training parameters
    "gamma": (float, 0.99),
    "lam": (float, 0.95),
    "clip_eps": (float, 0.2),
    "epochs": (int, 4),
    "minibatch_size": (int, 128),
    "rollout_steps": (int, 64),
    "n_envs": (int, 8),
    "lr": (float, 2.5e-4),
    "entropy_coef": (_parse_opt_float, None),
    "value_coef": (float, 0.5),
    "max_grad_norm": (float, 0.5),
    "normalize_advantages": (_parse_bool, True),
    "n_atoms": (int, 64),
    "n_modes": (int, 5),
    "sr_particles": (int, 5),
    "kappa": (float, 1.0),
    "hidden": (_parse_ints, (64, 64)),
    "intrinsic_coef": (float, 0.0),
    "init_log_std": (float, 0.0),
    "anneal_iterations": (int, 0),
}
REQUIRED = ("env", "variant")
_TRAIN_FIELDS = {f.name for f in fields(TrainConfig)}


@dataclass(frozen=True)
class RunConfig:
    values: dict

    def __getitem__(self, key):
        return self.values[key]

    def train_config(self) -> TrainConfig:
        return TrainConfig(**{k: v for k, v in self.values.items() if k in _TRAIN_FIELDS})

    def env_kwargs(self) -> dict:
        v = self.values
        if v["env"] == "gridworld":
            kw = {"size": v["grid_size"], "variant": v["grid_variant"], "slip": v["slip"]}
            if v["grid_max_steps"]:
                kw["max_steps"] = v["grid_max_steps"]
            return kw
        if v["env"] == "lqr1d":
            return {"noise_sigma": v["lqr_noise"], "horizon": v["lqr_horizon"]}
        return {"reward_noise_var": v["reward_noise_var"]}

    def snapshot(self) -> str:
        """Canonical text form; parsing it yields an equal config."""
        lines = []
        for key in _KEYS:
            val = self.values[key]
            if isinstance(val, bool):
                text = "true" if val else "false"
            elif isinstance(val, tuple):
                text = ",".join(str(x) for x in val)
            elif val is None:
                text = "auto"
            else:
                text = repr(val) if isinstance(val, float) else str(val)
            lines.append(f"{key} = {text}")
        return "\n".join(lines) + "\n"


def parse_text(text: str, source: str = "<config>") -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = val
    return out


def build_config(file: str | Path | None = None, overrides: list[str] | None = None,
                 environ: dict | None = None) -> RunConfig:
    raw: dict[str, str] = {}
    if file is not None:
        path = Path(file)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        raw.update(parse_text(path.read_text(), str(path)))
    environ = os.environ if environ is None else environ
    for name, val in environ.items():
        if name.startswith(ENV_PREFIX):
            raw[name[len(ENV_PREFIX):].lower()] = val
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override must be key=value: {item!r}")
        k, v = item.split("=", 1)
        raw[k.strip()] = v.strip()
    unknown = sorted(set(raw) - set(_KEYS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    missing = [k for k in REQUIRED if k not in raw]
    if missing:
        raise ConfigError(f"missing required config keys: {', '.join(missing)}")
    values = {}
    for key, (parser, default) in _KEYS.items():
        if key in raw:
            try:
                values[key] = parser(raw[key])
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {raw[key]!r} ({exc})") from exc
        else:
            values[key] = default
    return validate(values)


def validate(values: dict) -> RunConfig:
    if values["env"] not in ENVIRONMENTS:
        raise ConfigError(f"env must be one of {ENVIRONMENTS}")
    if values["variant"] not in VARIANTS:
        raise ConfigError(f"variant must be one of {VARIANTS}")
    for key in ("iterations", "eval_every", "eval_episodes"):
        if values[key] < 1:
            raise ConfigError(f"{key} must be >= 1")
    if values["checkpoint_every"] < 0:
        raise ConfigError("checkpoint_every must be >= 0")
    cfg = RunConfig(values)
    try:
        cfg.train_config()
        from ..envs import make_env

        make_env(values["env"], 0, **cfg.env_kwargs())
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def documented_keys() -> dict:
    """Key -> default, in canonical order (for the README and ``--help``)."""
    return {k: d for k, (_, d) in _KEYS.items()}
