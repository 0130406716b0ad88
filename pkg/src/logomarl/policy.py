"""Conservative multi-agent actor-critic.

A central critic Q(s, joint a) is trained with a conservative regulariser
(push down Q at the policy's action, push up at dataset actions) plus half
the squared Bellman error. Per-agent deterministic policies pi_i(o_i) maximise
Q while staying close to dataset actions. Targets use a Polyak-averaged copy
of the critic and the current joint policy at the next state.
"""
from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import container
from .autodiff import Adam, Node, Tape, TapeGraph
from .dataset import Dataset
from .envs import EnvSpec, ParticleEnv
from .nn import MLP
from .rng import rng_for
from .synth import RolloutConfig, SyntheticBuffer, generate_rollouts, mixed_minibatch, reward_penalty
from .world_model import TrainingDivergedError, WorldModel, predict_next

log = logging.getLogger(__name__)


@dataclass
class PolicyConfig:
    steps: int = 3000
    batch_size: int = 256
    hidden: int = 128
    alpha: float = 1.0
    lam: float = 2.5
    gamma: float = 0.99
    tau: float = 0.005
    lr: float = 3e-4
    eval_every: int = 1000
    eval_episodes: int = 20
    refresh_every: int = 1000
    buffer: str = "weighted"          # none | weighted | penalty
    penalty_lambda: float = 1.0
    mpc: bool = False
    mpc_k: int = 3
    mpc_noise: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.buffer not in ("none", "weighted", "penalty"):
            raise ValueError(f"unknown buffer mode {self.buffer!r}")


class PolicyBundle:
    def __init__(self, spec: EnvSpec, hidden: int = 128, seed: int = 0, alpha: float = 1.0,
                 lam: float = 2.5, gamma: float = 0.99, tau: float = 0.005):
        self.spec = spec
        self.hidden = hidden
        self.alpha, self.lam, self.gamma, self.tau = alpha, lam, gamma, tau
        n, sd, od, ad = spec.n_agents, spec.state_dim, spec.obs_dim, spec.action_dim
        self.q = MLP("q", (sd + n * ad, hidden, hidden, 1), act="relu")
        self.pis = [MLP(f"pi{i}", (od, hidden, hidden, ad), act="relu") for i in range(n)]
        rng = rng_for(seed, "policy-init")
        self.q_params = self.q.init(rng)
        self.target_params = {k: v.copy() for k, v in self.q_params.items()}
        self.pi_params = {}
        for pi in self.pis:
            self.pi_params.update(pi.init(rng, out_scale=0.1))

    # ------------------------------------------------------------ pieces
    def q_node(self, tape: Tape, s: Node, a_joint: Node) -> Node:
        return self.q(tape, tape.concat([s, a_joint]))

    def pi_node(self, tape: Tape, i: int, o: Node) -> Node:
        return tape.tanh(self.pis[i](tape, o))

    def act(self, obs: np.ndarray) -> np.ndarray:
        """Deterministic joint action for observations (B, n, obs_dim)."""
        obs = np.asarray(obs, dtype=np.float32)
        squeeze = obs.ndim == 2
        if squeeze:
            obs = obs[None]
        tape = Tape(self.pi_params, record=False)
        acts = np.stack([self.pi_node(tape, i, tape.input(obs[:, i])).value
                         for i in range(self.spec.n_agents)], axis=1)
        return acts[0] if squeeze else acts

    __call__ = act

    def q_value(self, state: np.ndarray, action: np.ndarray, target: bool = False) -> np.ndarray:
        tape = Tape(self.target_params if target else self.q_params, record=False)
        a = np.asarray(action, np.float32).reshape(len(action), -1)
        return self.q_node(tape, tape.input(np.asarray(state, np.float32)), tape.input(a)).value[:, 0]

    def polyak_update(self) -> None:
        tau = np.float32(self.tau)
        for k, v in self.q_params.items():
            t = self.target_params[k]
            t *= (1.0 - tau)
            t += tau * v

    def copy(self) -> "PolicyBundle":
        other = PolicyBundle.__new__(PolicyBundle)
        other.__dict__.update(self.__dict__)
        other.q_params = {k: v.copy() for k, v in self.q_params.items()}
        other.target_params = {k: v.copy() for k, v in self.target_params.items()}
        other.pi_params = {k: v.copy() for k, v in self.pi_params.items()}
        return other

    def all_params(self) -> dict[str, np.ndarray]:
        out = {k: self.q_params[k] for k in sorted(self.q_params)}
        out.update({"target/" + k: self.target_params[k] for k in sorted(self.target_params)})
        out.update({k: self.pi_params[k] for k in sorted(self.pi_params)})
        return out


# ------------------------------------------------------------------ losses
def bellman_target(bundle: PolicyBundle, batch: Mapping, gamma: float | None = None) -> np.ndarray:
    """r + gamma (1 - done) Q_target(s', pi(o')); no gradient flows through it."""
    gamma = bundle.gamma if gamma is None else gamma
    next_a = bundle.act(batch["next_obs"])
    q_next = bundle.q_value(batch["next_state"], next_a, target=True)
    r = np.asarray(batch["reward"], dtype=np.float64)
    done = np.asarray(batch["done"], dtype=np.float64)
    return (r + gamma * (1.0 - done) * q_next).astype(np.float32)


def cql_q_loss_node(tape: Tape, bundle: PolicyBundle, batch: Mapping, alpha: float,
                    pi_action: np.ndarray, target: np.ndarray) -> Node:
    """alpha * (mean Q(s, pi(s)) - mean Q(s, a)) over real rows + 0.5 * Bellman MSE over all rows.

    Rows past ``len(batch["real_index"])`` are synthetic; they enter only the
    Bellman error.
    """
    B = len(batch["state"])
    s = tape.input(batch["state"])
    q_data = bundle.q_node(tape, s, tape.input(np.asarray(batch["action"]).reshape(B, -1)))
    err = tape.sub(q_data, tape.input(np.asarray(target, dtype=q_data.value.dtype).reshape(B, 1)))
    bellman = tape.scale(tape.mean(tape.sqnorm(err)), 0.5)
    if alpha == 0.0:
        return bellman
    n_real = len(batch["real_index"]) if "real_index" in batch else B
    if n_real == B:
        s_real, q_real = s, q_data
    else:
        s_real = tape.input(batch["state"][:n_real])
        q_real = bundle.q_node(tape, s_real, tape.input(np.asarray(batch["action"][:n_real]).reshape(n_real, -1)))
    q_pi = bundle.q_node(tape, s_real, tape.input(np.asarray(pi_action)[:n_real].reshape(n_real, -1)))
    reg = tape.sub(tape.mean(q_pi), tape.mean(q_real))
    return tape.add(tape.scale(reg, alpha), bellman)


def cql_q_loss(bundle: PolicyBundle, batch: Mapping, alpha: float | None = None) -> float:
    alpha = bundle.alpha if alpha is None else alpha
    tape = Tape(bundle.q_params, record=False)
    return float(cql_q_loss_node(tape, bundle, batch, alpha, bundle.act(batch["obs"]),
                                 bellman_target(bundle, batch)).value)


def q_loss_graph(bundle: PolicyBundle, alpha: float | None = None) -> TapeGraph:
    """Graph over the critic parameters; bindings carry batch, pi_action and target."""
    alpha = bundle.alpha if alpha is None else alpha
    return TapeGraph(lambda tape, b: cql_q_loss_node(tape, bundle, b, alpha, b["pi_action"], b["target"]),
                     bundle.q_params)


def _bc_term(tape: Tape, pis: list[Node], actions: np.ndarray) -> Node:
    terms = [tape.mean(tape.sqnorm(tape.sub(p, tape.input(actions[:, i].astype(p.value.dtype)))))
             for i, p in enumerate(pis)]
    total = terms[0]
    for t in terms[1:]:
        total = tape.add(total, t)
    return tape.scale(total, 1.0 / len(terms))


def policy_loss_node(tape: Tape, bundle: PolicyBundle, batch: Mapping, lam: float,
                     a_max: np.ndarray | None = None) -> Node:
    """-mean Q(s, pi(o)) + lam * BC  [+ pull toward the MPC-selected actions]."""
    obs = batch["obs"]
    pis = [bundle.pi_node(tape, i, tape.input(obs[:, i])) for i in range(bundle.spec.n_agents)]
    q = bundle.q_node(tape, tape.input(batch["state"]), tape.concat(pis))
    loss = tape.scale(tape.mean(q), -1.0)
    if lam != 0.0:
        loss = tape.add(loss, tape.scale(_bc_term(tape, pis, np.asarray(batch["action"])), lam))
    if a_max is not None:
        loss = tape.add(loss, _bc_term(tape, pis, np.asarray(a_max)))
    return loss


def _policy_tape(bundle: PolicyBundle, record: bool = True) -> Tape:
    return Tape({**bundle.q_params, **bundle.pi_params}, trainable=bundle.pi_params.keys(), record=record)


def policy_loss(bundle: PolicyBundle, batch: Mapping, lam: float | None = None) -> float:
    lam = bundle.lam if lam is None else lam
    return float(policy_loss_node(_policy_tape(bundle, False), bundle, batch, lam).value)


def mpc_policy_loss(bundle: PolicyBundle, batch: Mapping, a_max: np.ndarray, lam: float | None = None) -> float:
    lam = bundle.lam if lam is None else lam
    return float(policy_loss_node(_policy_tape(bundle, False), bundle, batch, lam, a_max).value)


def policy_loss_graph(bundle: PolicyBundle, lam: float | None = None, mpc: bool = False) -> TapeGraph:
    """Graph over the policy parameters (critic frozen); ``a_max`` binding used when ``mpc``."""
    lam = bundle.lam if lam is None else lam
    params = {**bundle.q_params, **bundle.pi_params}
    return TapeGraph(lambda tape, b: policy_loss_node(tape, bundle, b, lam, b["a_max"] if mpc else None),
                     params, trainable=sorted(bundle.pi_params))


def policy_gradient(bundle: PolicyBundle, batch: Mapping, lam: float, a_max=None) -> dict[str, np.ndarray]:
    tape = _policy_tape(bundle)
    return tape.backward(policy_loss_node(tape, bundle, batch, lam, a_max))


def reward_penalty_baseline(buffer: SyntheticBuffer, lam_pen: float) -> SyntheticBuffer:
    """Comparison arm: synthetic rewards r' - lam_pen * u, synthetic half drawn uniformly."""
    return reward_penalty(buffer, lam_pen)


# ---------------------------------------------------------------------- MPC
@dataclass
class MPCChoice:
    action: np.ndarray        # (B, n, ad) selected joint action
    index: np.ndarray         # (B,) chosen candidate
    scores: np.ndarray        # (B, k)
    candidates: np.ndarray    # (k, B, n, ad)


def mpc_select_action(bundle: PolicyBundle, wm: WorldModel, obs: np.ndarray, state: np.ndarray, k: int = 3,
                      rng: np.random.Generator | None = None, noise: float = 0.2) -> MPCChoice:
    """One-step lookahead over the policy mean and k-1 perturbed candidates.

    Score = r' + gamma * Q_target(s', pi(o')); ties go to the lowest index.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    obs = np.asarray(obs, np.float32)
    state = np.asarray(state, np.float32)
    rng = rng if rng is not None else rng_for(0, "mpc")
    mean = bundle.act(obs)
    cands = [mean] + [np.clip(mean + rng.normal(0.0, noise, mean.shape), -1.0, 1.0).astype(np.float32)
                      for _ in range(k - 1)]
    scores = []
    for a in cands:
        pred = predict_next(wm, obs, a, state)
        q_next = bundle.q_value(pred.s_next, bundle.act(pred.o_next), target=True)
        scores.append(pred.r + bundle.gamma * q_next)
    scores = np.stack(scores, axis=1)
    idx = np.argmax(scores, axis=1)
    cands = np.stack(cands)
    chosen = cands[idx, np.arange(len(idx))]
    return MPCChoice(chosen, idx, scores, cands)


# --------------------------------------------------------------- evaluation
@dataclass
class EvalResult:
    mean: float
    std: float
    returns: np.ndarray


def evaluate(policy: Callable[[np.ndarray], np.ndarray], spec: EnvSpec, episodes: int, seed: int) -> EvalResult:
    """Noise-free rollouts in the real environment; episodes run in lock-step."""
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    env = ParticleEnv(spec)
    states = np.stack([env.reset(int(rng_for(seed, "eval-reset", e).integers(2**31 - 1)))[0].s
                       for e in range(episodes)])
    returns = np.zeros(episodes)
    for _ in range(spec.episode_cap):
        a = np.clip(np.asarray(policy(env.observe_all(states)), np.float32), -1.0, 1.0)
        states = env.transition(states, a)
        returns += env.reward(states)
    return EvalResult(float(returns.mean()), float(returns.std()), returns)


def expert_policy(spec: EnvSpec) -> Callable[[np.ndarray], np.ndarray]:
    """Noise-free scripted controller acting on observations (landmark offset in slots 4:6)."""
    from .dataset import EXPERT_GAIN

    def act(obs):
        return np.clip(EXPERT_GAIN * np.asarray(obs)[..., 4:6], -1.0, 1.0)
    return act


def write_eval_csv(rows: list[tuple], path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "episode", "return"])
        for seed, ep, ret in rows:
            w.writerow([seed, ep, repr(float(ret))])


# ----------------------------------------------------------------- training
@dataclass
class PolicyTrainResult:
    bundle: PolicyBundle
    log: list[dict] = field(default_factory=list)
    buffer: SyntheticBuffer | None = None


def train_policy(bundle: PolicyBundle, D: Dataset, config: PolicyConfig, wm: WorldModel | None = None,
                 C: float | None = None, rollout: RolloutConfig | None = None) -> PolicyTrainResult:
    """Alternate critic and actor Adam steps on mixed real/synthetic minibatches."""
    rows: list[dict] = []
    if config.steps <= 0:
        return PolicyTrainResult(bundle, rows)
    use_buffer = config.buffer != "none"
    if (use_buffer or config.mpc) and wm is None:
        raise ValueError("a trained world model is required for synthetic data or MPC")
    rollout = rollout or RolloutConfig()
    q_opt, pi_opt = Adam(lr=config.lr), Adam(lr=config.lr)
    q_names, pi_names = sorted(bundle.q_params), sorted(bundle.pi_params)
    batch_rng = rng_for(config.seed, "policy-batch")
    rollout_rng = rng_for(config.seed, "policy-rollout")
    mpc_rng = rng_for(config.seed, "policy-mpc")
    buffer = None
    for step in range(1, config.steps + 1):
        if use_buffer and (step - 1) % config.refresh_every == 0:
            buffer = generate_rollouts(wm, bundle.act, D, rollout, rollout_rng, C=C)
            if config.buffer == "penalty":
                buffer = reward_penalty_baseline(buffer, config.penalty_lambda)
        batch, _ = mixed_minibatch(D, buffer, config.batch_size, batch_rng)

        target = bellman_target(bundle, batch)
        pi_action = bundle.act(batch["obs"])
        tape = Tape(bundle.q_params)
        q_loss = cql_q_loss_node(tape, bundle, batch, bundle.alpha, pi_action, target)
        q_opt.step(bundle.q_params, tape.backward(q_loss), q_names)

        q_pi = bundle.q_value(batch["state"], bundle.act(batch["obs"]))
        lam = float(np.abs(q_pi).mean()) / bundle.lam if bundle.lam > 0 else 0.0
        a_max = None
        if config.mpc:
            a_max = mpc_select_action(bundle, wm, batch["obs"], batch["state"], config.mpc_k,
                                      mpc_rng, config.mpc_noise).action
        tape = _policy_tape(bundle)
        p_loss = policy_loss_node(tape, bundle, batch, lam, a_max)
        pi_opt.step(bundle.pi_params, tape.backward(p_loss), pi_names)
        bundle.polyak_update()

        ql, pl = float(q_loss.value), float(p_loss.value)
        if not (abs(ql) < 1e6 and abs(pl) < 1e6):
            raise TrainingDivergedError(f"policy training diverged at step {step}", rows)
        row = {"step": step, "q_loss": ql, "policy_loss": pl, "eval_return": ""}
        if config.eval_every and step % config.eval_every == 0:
            row["eval_return"] = evaluate(bundle.act, bundle.spec, config.eval_episodes,
                                          rng_for(config.seed, "policy-eval").integers(2**31 - 1)).mean
            log.debug("policy step %d q %.4f pi %.4f return %s", step, ql, pl, row["eval_return"])
        rows.append(row)
    return PolicyTrainResult(bundle, rows, buffer)


def save_policy(bundle: PolicyBundle, path: str | os.PathLike) -> None:
    meta = {"spec": bundle.spec.to_dict(), "hidden": bundle.hidden, "alpha": bundle.alpha,
            "lam": bundle.lam, "gamma": bundle.gamma, "tau": bundle.tau}
    tensors = {"meta/" + json.dumps(meta, sort_keys=True): np.zeros((), np.float32)}
    tensors.update(bundle.all_params())
    container.save(path, "PLCY", tensors)


def load_policy(path: str | os.PathLike) -> PolicyBundle:
    _, tensors = container.load(path, expect_tag="PLCY")
    meta_key = next(k for k in tensors if k.startswith("meta/"))
    meta = json.loads(meta_key[len("meta/"):])
    spec = EnvSpec(**meta.pop("spec"))
    bundle = PolicyBundle(spec, **meta)
    for k, v in tensors.items():
        if k.startswith("meta/"):
            continue
        if k.startswith("target/"):
            bundle.target_params[k[len("target/"):]] = v
        elif k.startswith("q."):
            bundle.q_params[k] = v
        else:
            bundle.pi_params[k] = v
    return bundle
