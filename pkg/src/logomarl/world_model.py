"""Local-to-global world model.

Each agent i owns a predictive model: a state feature encoder (s -> h_s), an
obs-action feature encoder (o_i + a_i -> h_oa), an observation head E_p
(h_s + h_oa -> Gaussian over the agent's next observation), a reconstruction
decoder R_p (next observation -> o_i + a_i) and an auxiliary state head E_ps
(h_s + h_oa -> Gaussian over next state and reward). One deductive model maps
next state and reward to the joint observation (E_d) and back (R_d).

At inference the per-agent observation means are concatenated and decoded by
R_d into the next state s' and reward r'. The E_ps means, fused across
agents by per-coordinate inverse variance, give a second estimate s_hat;
``u = ||s_hat - s'||``.
"""
from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Callable, Mapping, NamedTuple

import numpy as np

from . import container
from .autodiff import Adam, Node, NonFiniteError, Tape, TapeGraph
from .dataset import Dataset
from .envs import EnvSpec
from .nn import MLP, gaussian_head, reparam_sample
from .rng import rng_for

log = logging.getLogger(__name__)

LOSS_NAMES = ("L_p", "L_d", "L_Rd", "L_Eps")


class TrainingDivergedError(RuntimeError):
    def __init__(self, message, log_rows=None):
        super().__init__(message)
        self.log_rows = log_rows or []


class PredictionError(FloatingPointError):
    def __init__(self, message, inputs):
        super().__init__(message)
        self.inputs = inputs


@dataclass
class WorldModelConfig:
    hidden: int = 128
    steps: int = 2000
    lr: float = 1e-3
    batch_size: int = 256
    val_every: int = 100
    seed: int = 0
    lr_floor: float = 0.1     # cosine decay of the learning rate down to lr * lr_floor

    def lr_at(self, step: int) -> float:
        frac = (step - 1) / max(1, self.steps - 1)
        return self.lr * (self.lr_floor + (1.0 - self.lr_floor) * 0.5 * (1.0 + np.cos(np.pi * frac)))


class WorldModel:
    """Parameter store plus network layout for n predictive models and one deductive model."""

    def __init__(self, spec: EnvSpec, hidden: int = 128, seed: int = 0,
                 params: dict[str, np.ndarray] | None = None):
        self.spec = spec
        self.hidden = hidden
        n, od, sd, ad, H = spec.n_agents, spec.obs_dim, spec.state_dim, spec.action_dim, hidden
        self.agent_order = tuple(range(n))
        self.hs = [MLP(f"wm.p{i}.hs", (sd, H)) for i in range(n)]
        self.hoa = [MLP(f"wm.p{i}.hoa", (od + ad, H)) for i in range(n)]
        self.ep = [MLP(f"wm.p{i}.Ep", (2 * H, H, 2 * od)) for i in range(n)]
        self.rp = [MLP(f"wm.p{i}.Rp", (od, H, H, od + ad)) for i in range(n)]
        self.eps = [MLP(f"wm.p{i}.Eps", (2 * H, H, 2 * (sd + 1))) for i in range(n)]
        self.ed = MLP("wm.d.Ed", (sd + 1, H, H, 2 * n * od))
        # R_d: separate state and reward branches, concatenated to s + r
        self.rd_s = MLP("wm.d.Rd_s", (n * od, H, H, sd))
        self.rd_r = MLP("wm.d.Rd_r", (n * od, H, H, 1))
        if params is None:
            rng = rng_for(seed, "wm-init")
            params = {}
            for net in self.networks():
                params.update(net.init(rng))
        self.params = params

    def networks(self) -> list[MLP]:
        nets = []
        for i in self.agent_order:
            nets += [self.hs[i], self.hoa[i], self.ep[i], self.rp[i], self.eps[i]]
        return nets + [self.ed, self.rd_s, self.rd_r]

    @property
    def n_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    @staticmethod
    def param_count(spec: EnvSpec, hidden: int) -> int:
        return sum(net.n_params for net in WorldModel(spec, hidden, params={}).networks())

    def copy(self) -> "WorldModel":
        return WorldModel(self.spec, self.hidden, params={k: v.copy() for k, v in self.params.items()})

    # --------------------------------------------------------------- pieces
    def features(self, tape: Tape, i: int, s: Node, o: Node, a: Node) -> Node:
        h_s = tape.tanh(self.hs[i](tape, s))
        h_oa = tape.tanh(self.hoa[i](tape, tape.concat([o, a])))
        return tape.concat([h_s, h_oa])

    def obs_head(self, tape: Tape, i: int, h: Node) -> tuple[Node, Node]:
        return gaussian_head(tape, self.ep[i](tape, h), self.spec.obs_dim)

    def state_head(self, tape: Tape, i: int, h: Node) -> tuple[Node, Node]:
        return gaussian_head(tape, self.eps[i](tape, h), self.spec.state_dim + 1)

    def decode(self, tape: Tape, joint_obs: Node) -> Node:
        """R_d: joint observation -> (s', r')."""
        return tape.concat([self.rd_s(tape, joint_obs), self.rd_r(tape, joint_obs)])

    def deduce_encoder(self, tape: Tape, sr: Node) -> tuple[Node, Node]:
        return gaussian_head(tape, self.ed(tape, sr), self.spec.n_agents * self.spec.obs_dim)


# ------------------------------------------------------------------ batches
def make_batch(ds: Dataset, idx) -> dict[str, np.ndarray]:
    return {"obs": ds.obs[idx], "state": ds.state[idx], "action": ds.action[idx],
            "next_state": ds.next_state[idx], "next_obs": ds.next_obs[idx],
            "reward": ds.reward[idx]}


def draw_noise(wm: WorldModel, batch_size: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Reparameterisation noise for one training batch."""
    n, od = wm.spec.n_agents, wm.spec.obs_dim
    return {"noise_p": rng.standard_normal((n, batch_size, od)).astype(np.float32),
            "noise_d": rng.standard_normal((batch_size, n * od)).astype(np.float32)}


class _Inputs:
    """Per-tape input nodes for a batch, created lazily and shared between losses."""

    def __init__(self, tape: Tape, batch: Mapping):
        self.tape = tape
        self.batch = batch
        self._cache: dict = {}

    def get(self, key, fn):
        if key not in self._cache:
            self._cache[key] = fn()
        return self._cache[key]

    def s(self):
        return self.get("s", lambda: self.tape.input(self.batch["state"], "s"))

    def o(self, i):
        return self.get(("o", i), lambda: self.tape.input(self.batch["obs"][:, i], f"o{i}"))

    def a(self, i):
        return self.get(("a", i), lambda: self.tape.input(self.batch["action"][:, i], f"a{i}"))

    def o_next(self, i):
        return self.get(("on", i), lambda: self.tape.input(self.batch["next_obs"][:, i], f"o_next{i}"))

    def joint_o_next(self):
        b = self.batch["next_obs"]
        return self.get("jon", lambda: self.tape.input(b.reshape(b.shape[0], -1), "joint_o_next"))

    def sr_next(self):
        def build():
            r = np.asarray(self.batch["reward"], dtype=self.batch["next_state"].dtype)[:, None]
            return self.tape.input(np.concatenate([self.batch["next_state"], r], axis=1), "sr_next")
        return self.get("sr", build)


def _agent_terms(wm: WorldModel, tape: Tape, inp: _Inputs, i: int):
    """Shared per-agent forward pieces: features, observation head and its sample."""
    def build():
        h = wm.features(tape, i, inp.s(), inp.o(i), inp.a(i))
        mean, log_std = wm.obs_head(tape, i, h)
        noise = inp.batch.get("noise_p")
        o_hat = reparam_sample(tape, mean, log_std, None if noise is None else noise[i])
        return h, mean, log_std, o_hat
    return inp.get(("agent", i), build)


def _mean_over(tape: Tape, terms: list[Node]) -> Node:
    total = terms[0]
    for t in terms[1:]:
        total = tape.add(total, t)
    return tape.scale(total, 1.0 / len(terms))


# ------------------------------------------------------------------- losses
def predictive_loss_node(wm: WorldModel, tape: Tape, inp: _Inputs) -> Node:
    terms = []
    for i in wm.agent_order:
        _, mean, log_std, o_hat = _agent_terms(wm, tape, inp, i)
        nll = tape.gaussian_nll(inp.o_next(i), mean, log_std)
        recon = wm.rp[i](tape, o_hat)
        rec = tape.sqnorm(tape.sub(tape.concat([inp.o(i), inp.a(i)]), recon))
        terms.append(tape.mean(tape.add(nll, rec)))
    return _mean_over(tape, terms)


def deductive_loss_node(wm: WorldModel, tape: Tape, inp: _Inputs) -> Node:
    sr = inp.sr_next()
    mean, log_std = wm.deduce_encoder(tape, sr)
    nll = tape.gaussian_nll(inp.joint_o_next(), mean, log_std)
    o_prime = reparam_sample(tape, mean, log_std, inp.batch.get("noise_d"))
    rec = tape.sqnorm(tape.sub(sr, wm.decode(tape, o_prime)))
    return tape.mean(tape.add(nll, rec))


def deduce_reg_loss_node(wm: WorldModel, tape: Tape, inp: _Inputs) -> Node:
    o_hats = [tape.stop_gradient(_agent_terms(wm, tape, inp, i)[3]) for i in wm.agent_order]
    pred = wm.decode(tape, tape.concat(o_hats))
    return tape.mean(tape.sqnorm(tape.sub(inp.sr_next(), pred)))


def uncertainty_head_loss_node(wm: WorldModel, tape: Tape, inp: _Inputs) -> Node:
    terms = []
    for i in wm.agent_order:
        h = _agent_terms(wm, tape, inp, i)[0]
        mean, log_std = wm.state_head(tape, i, h)
        terms.append(tape.mean(tape.gaussian_nll(inp.sr_next(), mean, log_std)))
    return _mean_over(tape, terms)


def world_loss_nodes(wm: WorldModel, tape: Tape, batch: Mapping) -> dict[str, Node]:
    inp = _Inputs(tape, batch)
    parts = {"L_p": predictive_loss_node(wm, tape, inp),
             "L_d": deductive_loss_node(wm, tape, inp),
             "L_Rd": deduce_reg_loss_node(wm, tape, inp),
             "L_Eps": uncertainty_head_loss_node(wm, tape, inp)}
    total = parts["L_p"]
    for name in LOSS_NAMES[1:]:
        total = tape.add(total, parts[name])
    parts["L_world"] = total
    return parts


_SINGLE = {"L_p": predictive_loss_node, "L_d": deductive_loss_node,
           "L_Rd": deduce_reg_loss_node, "L_Eps": uncertainty_head_loss_node}


def loss_graph(wm: WorldModel, which: str = "L_world") -> TapeGraph:
    """TapeGraph over the world-model parameters; bindings are a batch dict."""
    if which == "L_world":
        return TapeGraph(lambda tape, b: world_loss_nodes(wm, tape, b)["L_world"], wm.params)
    fn = _SINGLE[which]
    return TapeGraph(lambda tape, b: fn(wm, tape, _Inputs(tape, b)), wm.params)


def _eval_loss(wm: WorldModel, which: str, batch: Mapping) -> float:
    tape = Tape(wm.params, record=False)
    if which == "L_world":
        return float(world_loss_nodes(wm, tape, batch)["L_world"].value)
    return float(_SINGLE[which](wm, tape, _Inputs(tape, batch)).value)


def loss_predictive(wm: WorldModel, batch: Mapping) -> float:
    return _eval_loss(wm, "L_p", batch)


def loss_deductive(wm: WorldModel, batch: Mapping) -> float:
    return _eval_loss(wm, "L_d", batch)


def loss_deduce_reg(wm: WorldModel, batch: Mapping) -> float:
    return _eval_loss(wm, "L_Rd", batch)


def loss_uncertainty_head(wm: WorldModel, batch: Mapping) -> float:
    return _eval_loss(wm, "L_Eps", batch)


def loss_world(wm: WorldModel, batch: Mapping) -> float:
    return _eval_loss(wm, "L_world", batch)


# ---------------------------------------------------------------- inference
class Prediction(NamedTuple):
    s_next: np.ndarray       # deduced state s'      (B, state_dim)
    r: np.ndarray            # deduced reward r'     (B,)
    u: np.ndarray            # ||s_hat - s'||        (B,)
    o_next: np.ndarray       # predicted joint obs   (B, n, obs_dim)
    s_aux: np.ndarray        # precision-fused E_ps state mean
    r_aux: np.ndarray


def predict_next(wm: WorldModel, obs: np.ndarray, action: np.ndarray, state: np.ndarray,
                 check_finite: bool = True) -> Prediction:
    """Mean-mode one-step prediction for a batch of joint observations/actions."""
    n, sd = wm.spec.n_agents, wm.spec.state_dim
    obs = np.asarray(obs, dtype=np.float32)
    action = np.asarray(action, dtype=np.float32)
    state = np.asarray(state, dtype=np.float32)
    if obs.ndim == 2:
        return _squeeze(predict_next(wm, obs[None], action[None], state[None], check_finite))
    if obs.shape[1:] != (n, wm.spec.obs_dim) or action.shape[1:] != (n, wm.spec.action_dim) \
            or state.shape[1:] != (sd,):
        raise ValueError(f"input shapes {obs.shape}, {action.shape}, {state.shape} do not match the EnvSpec")
    tape = Tape(wm.params, record=False, check_finite=check_finite)
    try:
        s = tape.input(state)
        o_means, aux = [], []
        for i in wm.agent_order:
            h = wm.features(tape, i, s, tape.input(obs[:, i]), tape.input(action[:, i]))
            o_means.append(wm.obs_head(tape, i, h)[0])
            mean, log_std = wm.state_head(tape, i, h)
            aux.append((mean.value, log_std.value))
        deduced = wm.decode(tape, tape.concat(o_means)).value
    except (NonFiniteError, FloatingPointError) as exc:
        raise PredictionError(f"non-finite world-model output: {exc}",
                              {"obs": obs, "action": action, "state": state}) from exc
    aux_mean = fuse_gaussians([m for m, _ in aux], [ls for _, ls in aux])
    s_prime, r_prime = deduced[:, :sd], deduced[:, sd]
    s_hat = aux_mean[:, :sd]
    u = np.linalg.norm(s_hat - s_prime, axis=1)
    o_hat = np.stack([m.value for m in o_means], axis=1)
    return Prediction(s_prime, r_prime, u, o_hat, s_hat, aux_mean[:, sd])


def fuse_gaussians(means, log_stds) -> np.ndarray:
    """Per-coordinate inverse-variance weighted mean of independent Gaussian estimates."""
    means = np.asarray(means, dtype=np.float64)
    prec = np.exp(-2.0 * np.asarray(log_stds, dtype=np.float64))
    return ((prec * means).sum(axis=0) / prec.sum(axis=0)).astype(np.float32)


def _squeeze(p: Prediction) -> Prediction:
    return Prediction(*(x[0] for x in p))


def one_step_state_mse(wm: WorldModel, ds: Dataset) -> float:
    pred = predict_next(wm, ds.obs, ds.action, ds.state)
    return float(np.mean((pred.s_next - ds.next_state) ** 2))


def clip_constant(u: np.ndarray) -> float:
    """mean(u) + 2 std(u); the clipping constant for priorities."""
    u = np.asarray(u, dtype=np.float64)
    if u.size == 0:
        raise ValueError("cannot calibrate the clipping constant on an empty validation set")
    c = float(u.mean() + 2.0 * u.std())
    if not c > 0.0:
        raise ValueError(f"calibrated clipping constant must be positive, got {c}")
    return c


# ----------------------------------------------------------------- training
@dataclass
class TrainResult:
    model: WorldModel
    log: list[dict] = field(default_factory=list)
    C: float | None = None
    val_u: np.ndarray | None = None


def train_world_model(train: Dataset, val: Dataset | None, config: WorldModelConfig,
                      spec: EnvSpec | None = None,
                      callback: Callable[[int, WorldModel], None] | None = None) -> TrainResult:
    """Adam on L_world; ``callback(step, model)`` runs after every update."""
    spec = spec or train.spec
    if val is not None and val.env_hash != train.env_hash:
        raise ValueError("train and validation datasets come from different EnvSpecs")
    wm = WorldModel(spec, config.hidden, config.seed)
    rows: list[dict] = []
    if config.steps > 0:
        opt = Adam(lr=config.lr)
        batch_rng = rng_for(config.seed, "wm-batch")
        noise_rng = rng_for(config.seed, "wm-noise")
        names = sorted(wm.params)
        B = min(config.batch_size, len(train))
        for step in range(1, config.steps + 1):
            idx = batch_rng.integers(0, len(train), B)
            batch = make_batch(train, idx)
            batch.update(draw_noise(wm, B, noise_rng))
            tape = Tape(wm.params)
            parts = world_loss_nodes(wm, tape, batch)
            row = {"step": step, **{k: float(parts[k].value) for k in LOSS_NAMES}, "val_mse": ""}
            if not float(parts["L_world"].value) < 1e6:
                rows.append(row)
                raise TrainingDivergedError(f"world-model loss diverged at step {step}", rows)
            grads = tape.backward(parts["L_world"])
            opt.lr = config.lr_at(step)
            opt.step(wm.params, grads, names)
            if val is not None and len(val) and step % config.val_every == 0:
                row["val_mse"] = one_step_state_mse(wm, val)
                log.debug("wm step %d L_world %.4f val_mse %.5f", step, float(parts["L_world"].value),
                          row["val_mse"])
            rows.append(row)
            if callback is not None:
                callback(step, wm)
    result = TrainResult(wm, rows)
    if val is not None and len(val):
        result.val_u = predict_next(wm, val.obs, val.action, val.state).u
        result.C = clip_constant(result.val_u)
    return result


def write_log_csv(rows: list[dict], path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["step", *LOSS_NAMES, "val_mse"])
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


# -------------------------------------------------------------- checkpoints
def save_model(wm: WorldModel, path: str | os.PathLike, C: float | None = None) -> None:
    meta = {"spec": wm.spec.to_dict(), "hidden": wm.hidden, "C": C}
    tensors = {"meta/" + json.dumps(meta, sort_keys=True): np.zeros((), np.float32)}
    tensors.update({k: wm.params[k] for k in sorted(wm.params)})
    container.save(path, "WMDL", tensors)


def load_model(path: str | os.PathLike) -> tuple[WorldModel, float | None]:
    _, tensors = container.load(path, expect_tag="WMDL")
    meta_key = next(k for k in tensors if k.startswith("meta/"))
    meta = json.loads(meta_key[len("meta/"):])
    params = {k: v for k, v in tensors.items() if not k.startswith("meta/")}
    return WorldModel(EnvSpec(**meta["spec"]), meta["hidden"], params=params), meta["C"]
