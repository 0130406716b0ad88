"""Flat experiment configuration: ``section.key = value`` lines, ``#`` comments.

Every key has a default; values are parsed to the default's type. Unknown
keys and unparsable values raise :class:`ConfigError` naming the field.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable

from .envs import EnvSpec
from .policy import PolicyConfig
from .synth import RolloutConfig
from .world_model import WorldModelConfig


class ConfigError(ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


# key -> (default, description)
SCHEMA: dict[str, tuple[Any, str]] = {
    "experiment": ("default", "run name; outputs go to <outdir>/<experiment>/<seed>/"),
    "outdir": ("", "output root; empty means $LOGO_OUT, else ./runs"),
    "seeds": ("0", "comma-separated integer seeds"),
    "env.n_agents": (2, "number of agents (2n particles)"),
    "env.episode_cap": (25, "steps per episode"),
    "env.gamma": (0.99, "environment discount"),
    "data.tier": ("medium", "behaviour tier: random | medium | expert | medium-replay | mixed"),
    "data.episodes": (200, "episodes collected per seed"),
    "data.val_fraction": (0.1, "held-out episode fraction"),
    "wm.hidden": (128, "world-model hidden width"),
    "wm.steps": (2000, "world-model Adam steps"),
    "wm.lr": (1e-3, "world-model peak learning rate"),
    "wm.lr_floor": (0.1, "final learning rate as a fraction of wm.lr (cosine decay)"),
    "wm.batch_size": (256, "world-model minibatch size"),
    "wm.val_every": (100, "validation cadence in steps"),
    "rollout.horizon": (15, "synthetic rollout length H"),
    "rollout.starts": (1000, "rollout start states per refresh"),
    "rollout.noise": (0.1, "Gaussian action noise of the rollout policy"),
    "rollout.C": (0.0, "clipping constant override; 0 means calibrate on the validation split"),
    "policy.alpha": (1.0, "conservative regulariser weight"),
    "policy.lam": (2.5, "BC weight; the effective weight is mean|Q| / lam"),
    "policy.gamma": (0.99, "policy discount"),
    "policy.tau": (0.005, "Polyak rate of the target critic"),
    "policy.lr": (3e-4, "actor and critic learning rate"),
    "policy.steps": (5000, "policy gradient steps"),
    "policy.batch_size": (256, "minibatch size (half real, half synthetic)"),
    "policy.hidden": (128, "actor and critic hidden width"),
    "policy.eval_every": (1000, "evaluation cadence in steps; 0 disables"),
    "policy.eval_episodes": (20, "episodes per evaluation"),
    "policy.refresh_every": (1000, "synthetic buffer refresh cadence in steps"),
    "policy.mpc_k": (3, "MPC candidate actions"),
    "policy.mpc_noise": (0.2, "std of MPC candidate perturbations"),
    "ablation.disable_buffer": (False, "train on real data only"),
    "ablation.reward_penalty": (False, "use r - lambda*u with uniform synthetic sampling"),
    "ablation.penalty_lambda": (1.0, "lambda of the reward-penalty arm"),
    "ablation.direct_state": (False, "also fit the direct-state baseline in train-wm"),
    "ablation.ensemble_k": (5, "ensemble members for the timing comparison"),
    "ablation.mpc": (False, "train the policy toward MPC-selected actions"),
    "ablation.horizons": ("5,10,15,20", "rollout horizons of the sweep"),
    "ablation.arms": ("none,weighted,penalty,horizons,mpc,models,timing",
                      "ablation groups: none weighted penalty horizons mpc models timing"),
}


def _parse(field: str, raw: Any, default: Any) -> Any:
    if not isinstance(raw, str):
        raw = str(raw)
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError as exc:
        raise ConfigError(field, str(exc)) from None
    return raw


@dataclass
class ExperimentConfig:
    values: dict[str, Any]

    @classmethod
    def default(cls) -> "ExperimentConfig":
        return cls({k: v for k, (v, _) in SCHEMA.items()})

    @classmethod
    def from_text(cls, text: str, overrides: Iterable[tuple[str, str]] = ()) -> "ExperimentConfig":
        pairs = []
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}", f"expected 'key = value', got {line!r}")
            key, value = line.split("=", 1)
            pairs.append((key.strip(), value.strip()))
        return cls.default().updated(pairs + list(overrides))

    @classmethod
    def from_file(cls, path: str | os.PathLike | None, overrides: Iterable[tuple[str, str]] = ()):
        text = Path(path).read_text() if path else ""
        return cls.from_text(text, overrides)

    def updated(self, pairs: Iterable[tuple[str, Any]]) -> "ExperimentConfig":
        values = dict(self.values)
        for key, raw in pairs:
            if key not in SCHEMA:
                raise ConfigError(key, "unknown key")
            values[key] = _parse(key, raw, SCHEMA[key][0])
        cfg = ExperimentConfig(values)
        cfg.validate()
        return cfg

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def validate(self) -> None:
        v = self.values
        checks = [
            ("env.n_agents", v["env.n_agents"] >= 1, "must be >= 1"),
            ("env.episode_cap", v["env.episode_cap"] >= 1, "must be >= 1"),
            ("env.gamma", 0.0 <= v["env.gamma"] < 1.0, "must lie in [0, 1)"),
            ("policy.gamma", 0.0 <= v["policy.gamma"] < 1.0, "must lie in [0, 1)"),
            ("data.episodes", v["data.episodes"] >= 1, "must be >= 1"),
            ("data.val_fraction", 0.0 < v["data.val_fraction"] < 0.5, "must lie in (0, 0.5)"),
            ("data.tier", v["data.tier"] in ("random", "medium", "expert", "medium-replay", "mixed"),
             "unknown tier"),
            ("wm.steps", v["wm.steps"] >= 0, "must be >= 0"),
            ("wm.lr", v["wm.lr"] > 0, "must be positive"),
            ("policy.steps", v["policy.steps"] >= 0, "must be >= 0"),
            ("policy.lr", v["policy.lr"] > 0, "must be positive"),
            ("policy.batch_size", v["policy.batch_size"] >= 2 and v["policy.batch_size"] % 2 == 0,
             "must be even and >= 2"),
            ("policy.tau", 0.0 < v["policy.tau"] <= 1.0, "must lie in (0, 1]"),
            ("policy.alpha", v["policy.alpha"] >= 0, "must be >= 0"),
            ("policy.lam", v["policy.lam"] >= 0, "must be >= 0"),
            ("policy.mpc_k", v["policy.mpc_k"] >= 1, "must be >= 1"),
            ("rollout.horizon", v["rollout.horizon"] >= 1, "must be >= 1"),
            ("rollout.starts", v["rollout.starts"] >= 1, "must be >= 1"),
            ("rollout.C", v["rollout.C"] >= 0, "must be >= 0"),
            ("ablation.ensemble_k", v["ablation.ensemble_k"] >= 2, "must be >= 2"),
        ]
        for field, ok, msg in checks:
            if not ok:
                raise ConfigError(field, msg)
        try:
            self.seeds
            self.horizons
        except ValueError as exc:
            raise ConfigError("seeds" if "seed" in str(exc) else "ablation.horizons", str(exc)) from None

    # ------------------------------------------------------------- views
    @property
    def seeds(self) -> list[int]:
        try:
            return [int(x) for x in str(self.values["seeds"]).split(",") if x.strip()]
        except ValueError:
            raise ValueError(f"bad seed list {self.values['seeds']!r}") from None

    @property
    def horizons(self) -> list[int]:
        return [int(x) for x in str(self.values["ablation.horizons"]).split(",") if x.strip()]

    @property
    def arms(self) -> list[str]:
        return [x.strip() for x in str(self.values["ablation.arms"]).split(",") if x.strip()]

    @property
    def root(self) -> Path:
        out = self.values["outdir"] or os.environ.get("LOGO_OUT") or "runs"
        return Path(out) / self.values["experiment"]

    def run_dir(self, seed: int) -> Path:
        return self.root / str(seed)

    def env_spec(self) -> EnvSpec:
        return EnvSpec(n_agents=self["env.n_agents"], episode_cap=self["env.episode_cap"], gamma=self["env.gamma"])

    def wm_config(self, seed: int) -> WorldModelConfig:
        return WorldModelConfig(hidden=self["wm.hidden"], steps=self["wm.steps"], lr=self["wm.lr"],
                                batch_size=self["wm.batch_size"], val_every=self["wm.val_every"],
                                seed=seed, lr_floor=self["wm.lr_floor"])

    def rollout_config(self, horizon: int | None = None) -> RolloutConfig:
        C = self["rollout.C"]
        return RolloutConfig(horizon=horizon or self["rollout.horizon"], starts_per_refresh=self["rollout.starts"],
                             noise=self["rollout.noise"], C=C if C > 0 else None)

    def policy_config(self, seed: int, **changes) -> PolicyConfig:
        if self["ablation.disable_buffer"]:
            buffer = "none"
        elif self["ablation.reward_penalty"]:
            buffer = "penalty"
        else:
            buffer = "weighted"
        kw = dict(steps=self["policy.steps"], batch_size=self["policy.batch_size"], hidden=self["policy.hidden"],
                  alpha=self["policy.alpha"], lam=self["policy.lam"], gamma=self["policy.gamma"],
                  tau=self["policy.tau"], lr=self["policy.lr"], eval_every=self["policy.eval_every"],
                  eval_episodes=self["policy.eval_episodes"], refresh_every=self["policy.refresh_every"],
                  buffer=buffer, penalty_lambda=self["ablation.penalty_lambda"], mpc=self["ablation.mpc"],
                  mpc_k=self["policy.mpc_k"], mpc_noise=self["policy.mpc_noise"], seed=seed)
        kw.update(changes)
        return PolicyConfig(**kw)

    def resolved_text(self) -> str:
        lines = []
        for key in SCHEMA:
            value = self.values[key]
            if isinstance(value, bool):
                value = "true" if value else "false"
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"


def schema_text() -> str:
    """Documentation of every key with its default."""
    return "\n".join(f"{k} = {v!r}  # {doc}" for k, (v, doc) in SCHEMA.items()) + "\n"
