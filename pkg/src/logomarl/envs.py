"""Cooperative toy environments.

``ParticleEnv`` is a continuous-action navigation task: n agents in the arena
[-1, 1]^2, each assigned one landmark. Global state layout::

    [p_1, v_1, ..., p_n, v_n, l_1, ..., l_n]     (state_dim = 6n)

Reset draws positions uniformly in the arena, landmarks uniformly in
[-0.8, 0.8]^2 and zero velocities. A step sets each velocity to the clipped
action (max speed 1) and integrates positions with dt = 0.1, clipping to the
arena. The shared reward, evaluated on the post-step positions, is
``-mean_i ||p_i - l_i|| - 0.25 * (#pairs closer than 0.1)``.

Agent i observes ``[p_i, v_i, l_i - p_i, p_j - p_i for j != i]`` where the
relative slot of agent j is zeroed when ||p_j - p_i|| > sensing radius.

``TabularMDP`` is a small enumerable MDP used by the oracles.
"""
from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from .rng import rng_for


@dataclass(frozen=True)
class EnvSpec:
    n_agents: int = 2
    episode_cap: int = 25
    gamma: float = 0.99
    sense_radius: float = 1.0
    dt: float = 0.1
    collision_dist: float = 0.1
    collision_penalty: float = 0.25
    action_kind: str = "continuous"

    def __post_init__(self):
        if self.n_agents < 1:
            raise ValueError("n_agents must be positive")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if self.episode_cap < 1:
            raise ValueError("episode_cap must be positive")

    @property
    def state_dim(self) -> int:
        return 6 * self.n_agents

    @property
    def obs_dim(self) -> int:
        return 2 * self.n_agents + 4

    @property
    def action_dim(self) -> int:
        return 2

    @property
    def n_pairs(self) -> int:
        return self.n_agents * (self.n_agents - 1) // 2

    @property
    def r_max(self) -> float:
        """Largest possible per-step penalty: arena diagonal plus every pair colliding."""
        return 2.0 * np.sqrt(2.0) + self.collision_penalty * self.n_pairs

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class EnvState:
    s: np.ndarray
    t: int = 0
    seed: int | None = None


class StepResult(NamedTuple):
    state: EnvState
    obs: np.ndarray          # (n, obs_dim)
    reward: float
    done: bool
    clipped: bool


class ParticleEnv:
    def __init__(self, spec: EnvSpec | None = None):
        self.spec = spec or EnvSpec()

    # layout helpers -------------------------------------------------------
    def positions(self, s: np.ndarray) -> np.ndarray:
        n = self.spec.n_agents
        return s[..., : 4 * n].reshape(s.shape[:-1] + (n, 4))[..., :2]

    def velocities(self, s: np.ndarray) -> np.ndarray:
        n = self.spec.n_agents
        return s[..., : 4 * n].reshape(s.shape[:-1] + (n, 4))[..., 2:]

    def landmarks(self, s: np.ndarray) -> np.ndarray:
        n = self.spec.n_agents
        return s[..., 4 * n:].reshape(s.shape[:-1] + (n, 2))

    def pack(self, pos, vel, lm) -> np.ndarray:
        lead = pos.shape[:-2]
        agents = np.concatenate([pos, vel], axis=-1).reshape(lead + (-1,))
        return np.concatenate([agents, lm.reshape(lead + (-1,))], axis=-1).astype(np.float32)

    # dynamics -------------------------------------------------------------
    def reset(self, seed: int) -> tuple[EnvState, np.ndarray]:
        rng = rng_for(seed, "particle-reset")
        n = self.spec.n_agents
        pos = rng.uniform(-1.0, 1.0, (n, 2))
        lm = rng.uniform(-0.8, 0.8, (n, 2))
        s = self.pack(pos, np.zeros((n, 2)), lm)
        state = EnvState(s=s, t=0, seed=seed)
        return state, self.observe_all(s)

    def reward(self, s: np.ndarray) -> np.ndarray:
        """Shared reward of (a batch of) global states."""
        pos = self.positions(s).astype(np.float64)
        lm = self.landmarks(s).astype(np.float64)
        dist = np.linalg.norm(pos - lm, axis=-1).mean(axis=-1)
        penalty = np.zeros_like(dist)
        for i, j in itertools.combinations(range(self.spec.n_agents), 2):
            close = np.linalg.norm(pos[..., i, :] - pos[..., j, :], axis=-1) < self.spec.collision_dist
            penalty = penalty + self.spec.collision_penalty * close
        return -(dist + penalty)

    def transition(self, s: np.ndarray, actions: np.ndarray) -> np.ndarray:
        """Batched deterministic dynamics; ``actions`` is (..., n, 2) and already clipped."""
        pos = self.positions(s)
        vel = actions.astype(np.float32)
        new_pos = np.clip(pos + np.float32(self.spec.dt) * vel, -1.0, 1.0)
        return self.pack(new_pos, vel, self.landmarks(s))

    def step(self, state: EnvState, joint_action) -> StepResult:
        a = np.asarray(joint_action, dtype=np.float32).reshape(self.spec.n_agents, self.spec.action_dim)
        clipped_a = np.clip(a, -1.0, 1.0)
        clipped = bool(np.any(clipped_a != a))
        s_next = self.transition(state.s, clipped_a)
        t = state.t + 1
        new_state = EnvState(s=s_next, t=t, seed=state.seed)
        return StepResult(new_state, self.observe_all(s_next), float(self.reward(s_next)),
                          t >= self.spec.episode_cap, clipped)

    # observations ---------------------------------------------------------
    def observe(self, state: EnvState | np.ndarray, agent: int) -> np.ndarray:
        if not 0 <= agent < self.spec.n_agents:
            raise IndexError(f"agent index {agent} out of range for {self.spec.n_agents} agents")
        s = state.s if isinstance(state, EnvState) else state
        return self.observe_all(s)[..., agent, :]

    def observe_all(self, s: np.ndarray) -> np.ndarray:
        """Agent-centric observations for (a batch of) states: shape (..., n, obs_dim)."""
        n = self.spec.n_agents
        pos, vel, lm = self.positions(s), self.velocities(s), self.landmarks(s)
        rel = pos[..., None, :, :] - pos[..., :, None, :]          # [..., i, j] = p_j - p_i
        in_range = np.linalg.norm(rel, axis=-1) <= self.spec.sense_radius
        rel = rel * in_range[..., None]
        others = [rel[..., i, [j for j in range(n) if j != i], :].reshape(s.shape[:-1] + (-1,))
                  for i in range(n)]
        obs = [np.concatenate([pos[..., i, :], vel[..., i, :], lm[..., i, :] - pos[..., i, :], others[i]],
                              axis=-1) for i in range(n)]
        return np.stack(obs, axis=-2).astype(np.float32)

    def state_from_observations(self, obs: np.ndarray) -> np.ndarray:
        """Invert the agent-centric frames back to the global state layout."""
        pos = obs[..., :, 0:2]
        vel = obs[..., :, 2:4]
        lm = obs[..., :, 4:6] + pos
        return self.pack(pos, vel, lm)


@dataclass
class TabularMDP:
    """P[s, a, s'] transition tensor, R[s, a] reward table."""

    P: np.ndarray
    R: np.ndarray
    gamma: float
    name: str = field(default="mdp")

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=np.float64)
        self.R = np.asarray(self.R, dtype=np.float64)
        S, A = self.R.shape
        if self.P.shape != (S, A, S):
            raise ValueError(f"P has shape {self.P.shape}, expected {(S, A, S)}")
        if S > 64 or A > 16:
            raise ValueError("tabular MDPs are limited to 64 states and 16 joint actions")
        if np.any(self.P < 0) or not np.allclose(self.P.sum(axis=-1), 1.0, atol=1e-9, rtol=0):
            raise ValueError("transition rows must be distributions")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if not np.all(np.isfinite(self.R)):
            raise ValueError("rewards must be finite")

    @property
    def n_states(self) -> int:
        return self.R.shape[0]

    @property
    def n_actions(self) -> int:
        return self.R.shape[1]


def tabular_enumerate(mdp: TabularMDP) -> list[tuple[int, int, np.ndarray, float]]:
    return [(s, a, mdp.P[s, a].copy(), float(mdp.R[s, a]))
            for s in range(mdp.n_states) for a in range(mdp.n_actions)]


def chain_mdp(n_states: int = 5, gamma: float = 0.9, slip: float = 0.1) -> TabularMDP:
    """Two actions: 0 moves left, 1 moves right; with prob ``slip`` the agent stays.

    Reward 1 for taking 'right' in the last state, else 0.
    """
    P = np.zeros((n_states, 2, n_states))
    R = np.zeros((n_states, 2))
    for s in range(n_states):
        left, right = max(s - 1, 0), min(s + 1, n_states - 1)
        P[s, 0, left] += 1.0 - slip
        P[s, 0, s] += slip
        P[s, 1, right] += 1.0 - slip
        P[s, 1, s] += slip
    R[n_states - 1, 1] = 1.0
    return TabularMDP(P, R, gamma, name="chain")


def random_mdp(n_states: int, n_actions: int, gamma: float, rng: np.random.Generator,
               smooth: bool = True) -> TabularMDP:
    """Random MDP. With ``smooth`` the reward varies slowly along the state index."""
    P = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    if smooth:
        base = np.cumsum(rng.uniform(-0.3, 0.3, size=(n_states, n_actions)), axis=0)
        R = base + rng.uniform(-0.1, 0.1, size=n_actions)
    else:
        R = rng.uniform(-1.0, 1.0, size=(n_states, n_actions))
    return TabularMDP(P, R, gamma, name="random")
