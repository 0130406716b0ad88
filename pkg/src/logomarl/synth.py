"""Synthetic replay: world-model rollouts, confidence priorities and weighted draws."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .dataset import PROVENANCE, Dataset
from .world_model import WorldModel, clip_constant, predict_next


@dataclass
class RolloutConfig:
    horizon: int = 15
    starts_per_refresh: int = 1000
    noise: float = 0.1
    C: float | None = None

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.C is not None and not self.C > 0:
            raise ValueError("C must be positive")


def compute_priority(u, C: float):
    """Confidence priority clip(C - u, [0, C])."""
    if not C > 0:
        raise ValueError("C must be positive")
    out = np.clip(C - np.asarray(u, dtype=np.float64), 0.0, C)
    return float(out) if out.ndim == 0 else out


def calibrate_C(wm: WorldModel, val: Dataset) -> float:
    """mean(u) + 2 std(u) over the validation transitions."""
    if val is None or len(val) == 0:
        raise ValueError("calibrate_C needs a non-empty validation split")
    return clip_constant(predict_next(wm, val.obs, val.action, val.state).u)


def softmax_weights(priorities) -> np.ndarray:
    p = np.asarray(priorities, dtype=np.float64)
    if p.size == 0:
        raise ValueError("cannot weight an empty buffer")
    e = np.exp(p - p.max())
    return e / e.sum()


class SyntheticBuffer:
    """World-model transitions with priorities; sampling weights follow every mutation.

    ``mode="weighted"`` samples by the softmax of priorities, ``"uniform"``
    ignores them (used by the reward-penalty comparison arm).
    """

    def __init__(self, data: Dataset | None = None, step_index: np.ndarray | None = None,
                 mode: str = "weighted"):
        self.mode = mode
        self.refresh_epoch = 0
        self.data: Dataset | None = None
        self.step_index = None
        self.weights = np.zeros(0)
        self.log_norm = float("nan")
        if data is not None:
            self.replace_contents(data, step_index)

    def __len__(self) -> int:
        return 0 if self.data is None else len(self.data)

    @property
    def priority(self) -> np.ndarray:
        return self.data.priority

    @property
    def uncertainty(self) -> np.ndarray:
        return self.data.uncertainty

    def replace_contents(self, data: Dataset, step_index: np.ndarray | None = None) -> None:
        if data.priority is None:
            raise ValueError("synthetic transitions need priorities")
        self.data = data
        self.step_index = step_index
        self.refresh_epoch += 1
        self._reweight()

    def _reweight(self) -> None:
        if len(self) == 0:
            self.weights, self.log_norm = np.zeros(0), float("nan")
            return
        if self.mode == "uniform":
            self.weights = np.full(len(self), 1.0 / len(self))
            self.log_norm = float(np.log(len(self)))
            return
        p = self.data.priority.astype(np.float64)
        top = p.max()
        self.log_norm = float(top + np.log(np.exp(p - top).sum()))
        self.weights = softmax_weights(p)


def sample_weights(buffer: SyntheticBuffer) -> np.ndarray:
    if len(buffer) == 0:
        raise ValueError("cannot weight an empty buffer")
    return buffer.weights


def generate_rollouts(wm: WorldModel, policy, D: Dataset, cfg: RolloutConfig, seed_rng: np.random.Generator,
                      C: float | None = None) -> SyntheticBuffer:
    """Branch ``cfg.starts_per_refresh`` rollouts of ``cfg.horizon`` steps from states of D.

    ``policy`` maps joint observations (B, n, obs_dim) to mean joint actions.
    Rollouts continue from the predicted (s', o'); a rollout whose prediction
    turns non-finite stops there, keeping its earlier steps.
    """
    C = C if C is not None else cfg.C
    if C is None:
        raise ValueError("a clipping constant C is required")
    rng = seed_rng
    starts = rng.integers(0, len(D), cfg.starts_per_refresh)
    obs, s = D.obs[starts], D.state[starts]
    alive = np.arange(len(starts))
    rows = {k: [] for k in ("obs", "state", "action", "next_state", "next_obs", "reward", "u", "rollout", "step")}
    for t in range(cfg.horizon):
        if len(alive) == 0:
            break
        mean_a = np.asarray(policy(obs), dtype=np.float32)
        a = np.clip(mean_a + rng.normal(0.0, cfg.noise, mean_a.shape), -1.0, 1.0).astype(np.float32)
        pred = predict_next(wm, obs, a, s, check_finite=False)
        ok = np.isfinite(pred.s_next).all(axis=1) & np.isfinite(pred.r) & np.isfinite(pred.u) \
            & np.isfinite(pred.o_next).reshape(len(alive), -1).all(axis=1)
        for key, val in (("obs", obs), ("state", s), ("action", a), ("next_state", pred.s_next),
                         ("next_obs", pred.o_next), ("reward", pred.r), ("u", pred.u),
                         ("rollout", alive), ("step", np.full(len(alive), t))):
            rows[key].append(val[ok])
        obs, s, alive = pred.o_next[ok], pred.s_next[ok], alive[ok]
    arrays = {k: np.concatenate(v) if v else np.zeros(0) for k, v in rows.items()}
    n = len(arrays["reward"])
    data = Dataset(
        obs=arrays["obs"].astype(np.float32), state=arrays["state"].astype(np.float32),
        action=arrays["action"].astype(np.float32), next_state=arrays["next_state"].astype(np.float32),
        next_obs=arrays["next_obs"].astype(np.float32), reward=arrays["reward"].astype(np.float32),
        done=np.zeros(n, np.float32), episode=arrays["rollout"].astype(np.float32),
        source=np.full(n, PROVENANCE.index("synthetic"), np.float32), provenance="synthetic",
        env_hash=D.env_hash, spec=D.spec,
        priority=np.asarray(compute_priority(arrays["u"], C), dtype=np.float32).reshape(n),
        uncertainty=arrays["u"].astype(np.float32))
    return SyntheticBuffer(data, arrays["step"].astype(int))


def reward_penalty(buffer: SyntheticBuffer, lam: float) -> SyntheticBuffer:
    """Copy of the buffer with r - lam * u rewards and uniform sampling."""
    data = buffer.data
    penalised = replace(data, reward=(data.reward - np.float32(lam) * data.uncertainty).astype(np.float32))
    return SyntheticBuffer(penalised, buffer.step_index, mode="uniform")


BATCH_KEYS = ("obs", "state", "action", "next_state", "next_obs", "reward", "done")


def mixed_minibatch(D: Dataset, buffer: SyntheticBuffer | None, B: int, rng: np.random.Generator):
    """Half uniform real transitions, half weighted synthetic draws (with replacement).

    Returns ``(batch, fell_back)``; with an empty buffer the whole batch is real.
    """
    if B % 2:
        raise ValueError("minibatch size must be even")
    if buffer is None or len(buffer) == 0:
        idx = rng.integers(0, len(D), B)
        batch = {k: getattr(D, k)[idx] for k in BATCH_KEYS}
        batch["real_index"] = idx
        batch["synthetic_index"] = np.zeros(0, dtype=int)
        return batch, True
    half = B // 2
    real = rng.integers(0, len(D), half)
    syn = rng.choice(len(buffer), half, p=buffer.weights)
    batch = {k: np.concatenate([getattr(D, k)[real], getattr(buffer.data, k)[syn]]) for k in BATCH_KEYS}
    batch["real_index"] = real
    batch["synthetic_index"] = syn
    return batch, False
