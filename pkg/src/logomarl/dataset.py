"""Offline datasets: scripted behaviour tiers, persistence and episode-aligned splits."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, replace

import numpy as np

from . import container
from .container import BadFormatError, EnvMismatchError
from .envs import EnvSpec, ParticleEnv
from .rng import rng_for

PROVENANCE = ("random", "medium", "expert", "mixed", "synthetic")
TIER_NOISE = {"expert": 0.05, "medium": 0.4}
EXPERT_GAIN = 5.0
TIERS = ("random", "medium", "expert", "medium-replay", "mixed")


@dataclass(frozen=True)
class BehaviorSpec:
    tier: str = "medium"

    def __post_init__(self):
        if self.tier not in TIERS:
            raise ValueError(f"unknown tier {self.tier!r}; choose from {TIERS}")


@dataclass(frozen=True)
class Transition:
    o_t: np.ndarray
    s_t: np.ndarray
    a_t: np.ndarray
    s_next: np.ndarray
    o_next: np.ndarray
    r: float
    done: bool
    priority: float | None = None


@dataclass
class Dataset:
    obs: np.ndarray          # (N, n, obs_dim)
    state: np.ndarray        # (N, state_dim)
    action: np.ndarray       # (N, n, action_dim)
    next_state: np.ndarray
    next_obs: np.ndarray
    reward: np.ndarray       # (N,)
    done: np.ndarray         # (N,) float 0/1
    episode: np.ndarray      # (N,) episode index
    source: np.ndarray       # (N,) per-transition provenance code
    provenance: str = "medium"
    env_hash: str = ""
    spec: EnvSpec | None = None
    priority: np.ndarray | None = None
    uncertainty: np.ndarray | None = None

    ARRAYS = ("obs", "state", "action", "next_state", "next_obs", "reward", "done",
              "episode", "source", "priority", "uncertainty")

    def __len__(self) -> int:
        return len(self.reward)

    def __getitem__(self, k: int) -> Transition:
        return Transition(self.obs[k], self.state[k], self.action[k], self.next_state[k],
                          self.next_obs[k], float(self.reward[k]), bool(self.done[k]),
                          None if self.priority is None else float(self.priority[k]))

    @property
    def n_episodes(self) -> int:
        return len(np.unique(self.episode))

    def subset(self, idx) -> "Dataset":
        kw = {name: (None if getattr(self, name) is None else getattr(self, name)[idx])
              for name in self.ARRAYS}
        return replace(self, **kw)

    def episode_returns(self) -> np.ndarray:
        eps = np.unique(self.episode)
        return np.array([self.reward[self.episode == e].sum() for e in eps], dtype=np.float64)

    def equals(self, other: "Dataset") -> bool:
        if (self.provenance, self.env_hash) != (other.provenance, other.env_hash):
            return False
        for name in self.ARRAYS:
            a, b = getattr(self, name), getattr(other, name)
            if (a is None) != (b is None):
                return False
            if a is not None and (a.shape != b.shape or a.tobytes() != b.tobytes()):
                return False
        return True


def concat(parts: list[Dataset], provenance: str) -> Dataset:
    """Concatenate datasets, renumbering episodes so they stay distinct."""
    offset = 0
    episodes = []
    for p in parts:
        episodes.append(p.episode + offset)
        offset += int(p.episode.max()) + 1 if len(p) else 0
    if len({p.env_hash for p in parts}) != 1:
        raise EnvMismatchError("env mismatch: cannot concatenate datasets from different EnvSpecs")
    kw = {}
    for name in Dataset.ARRAYS:
        vals = [getattr(p, name) for p in parts]
        if name == "episode":
            kw[name] = np.concatenate(episodes).astype(np.float32)
        elif any(v is None for v in vals):
            kw[name] = None
        else:
            kw[name] = np.concatenate(vals)
    return Dataset(**kw, provenance=provenance, env_hash=parts[0].env_hash, spec=parts[0].spec)


def expert_action(env: ParticleEnv, s: np.ndarray) -> np.ndarray:
    """Proportional controller toward each agent's landmark."""
    return np.clip(EXPERT_GAIN * (env.landmarks(s) - env.positions(s)), -1.0, 1.0)


def behavior_action(env: ParticleEnv, s: np.ndarray, tier: str, rng: np.random.Generator) -> np.ndarray:
    n, d = env.spec.n_agents, env.spec.action_dim
    if tier == "random":
        return rng.uniform(-1.0, 1.0, (n, d))
    a = expert_action(env, s) + rng.normal(0.0, TIER_NOISE[tier], (n, d))
    return np.clip(a, -1.0, 1.0)


def _episode_tier(tier: str, episode: int, episodes: int) -> str:
    if tier == "medium-replay":
        return "random" if episode % 5 == 4 else "medium"
    if tier == "mixed":
        return "medium" if episode < (episodes + 1) // 2 else "expert"
    return tier


def collect(spec: EnvSpec, behavior: BehaviorSpec | str, episodes: int, seed: int) -> Dataset:
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    behavior = BehaviorSpec(behavior) if isinstance(behavior, str) else behavior
    env = ParticleEnv(spec)
    rows: dict[str, list] = {k: [] for k in ("obs", "state", "action", "next_state", "next_obs",
                                             "reward", "done", "episode", "source")}
    for e in range(episodes):
        tier = _episode_tier(behavior.tier, e, episodes)
        reset_seed = int(rng_for(seed, "collect-reset", e).integers(2**31 - 1))
        rng = rng_for(seed, "collect-noise", e)
        state, obs = env.reset(reset_seed)
        done = False
        while not done:
            a = behavior_action(env, state.s, tier, rng).astype(np.float32)
            res = env.step(state, a)
            rows["obs"].append(obs)
            rows["state"].append(state.s)
            rows["action"].append(a)
            rows["next_state"].append(res.state.s)
            rows["next_obs"].append(res.obs)
            rows["reward"].append(res.reward)
            rows["done"].append(float(res.done))
            rows["episode"].append(e)
            rows["source"].append(PROVENANCE.index(tier))
            state, obs, done = res.state, res.obs, res.done
    arrays = {k: np.asarray(v, dtype=np.float32) for k, v in rows.items()}
    provenance = "medium" if behavior.tier == "medium-replay" else behavior.tier
    return Dataset(**arrays, provenance=provenance, env_hash=spec.hash(), spec=spec)


def to_tensors(ds: Dataset) -> dict[str, np.ndarray]:
    meta = {"provenance": ds.provenance, "env_hash": ds.env_hash,
            "spec": None if ds.spec is None else ds.spec.to_dict()}
    tensors = {"meta/" + json.dumps(meta, sort_keys=True): np.zeros((), np.float32)}
    for name in Dataset.ARRAYS:
        val = getattr(ds, name)
        if val is not None:
            tensors[name] = np.asarray(val, dtype=np.float32)
    return tensors


def from_tensors(tensors: dict[str, np.ndarray]) -> Dataset:
    meta_keys = [k for k in tensors if k.startswith("meta/")]
    if len(meta_keys) != 1:
        raise BadFormatError("bad format: dataset metadata record missing")
    meta = json.loads(meta_keys[0][len("meta/"):])
    required = [n for n in Dataset.ARRAYS if n not in ("priority", "uncertainty")]
    missing = [n for n in required if n not in tensors]
    if missing:
        raise BadFormatError(f"bad format: dataset is missing arrays {missing}")
    spec = EnvSpec(**meta["spec"]) if meta.get("spec") else None
    kw = {n: tensors.get(n) for n in Dataset.ARRAYS}
    return Dataset(**kw, provenance=meta["provenance"], env_hash=meta["env_hash"], spec=spec)


def save(ds: Dataset, path: str | os.PathLike) -> None:
    container.save(path, "DATA", to_tensors(ds))


def load(path: str | os.PathLike, expect_spec: EnvSpec | None = None) -> Dataset:
    """Load a dataset; with ``expect_spec`` refuse files collected under another EnvSpec."""
    _, tensors = container.load(path, expect_tag="DATA")
    ds = from_tensors(tensors)
    if expect_spec is not None and ds.env_hash != expect_spec.hash():
        raise EnvMismatchError(
            f"env mismatch: dataset was collected for env {ds.env_hash}, training env is {expect_spec.hash()}")
    return ds


def split(ds: Dataset, val_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Episode-aligned random split into (train, val)."""
    if not 0.0 < val_fraction < 0.5:
        raise ValueError("val_fraction must lie in (0, 0.5)")
    episodes = np.unique(ds.episode)
    n_val = max(1, int(round(val_fraction * len(episodes))))
    perm = rng_for(seed, "split").permutation(len(episodes))
    val_eps = episodes[np.sort(perm[:n_val])]
    is_val = np.isin(ds.episode, val_eps)
    return ds.subset(np.flatnonzero(~is_val)), ds.subset(np.flatnonzero(is_val))
