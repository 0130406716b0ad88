"""Independent oracles and baseline models.

* value iteration on tabular MDPs and an exact Bellman backup,
* the Q-estimation error bound check with injected state/reward/Q errors,
* a direct-state world model and a k-member ensemble of them,
* PCA by power iteration with deflation.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Adam, Node, Tape, TapeGraph
from .dataset import Dataset
from .envs import EnvSpec, TabularMDP
from .nn import MLP, gaussian_head
from .rng import rng_for
from .world_model import TrainingDivergedError, WorldModel, WorldModelConfig, predict_next


# ------------------------------------------------------------ value iteration
@dataclass
class QTable:
    Q: np.ndarray
    gamma: float
    tol: float
    iterations: int = 0

    @property
    def V(self) -> np.ndarray:
        return self.Q.max(axis=1)


def bellman_backup(mdp: TabularMDP, Q: np.ndarray) -> np.ndarray:
    return mdp.R + mdp.gamma * mdp.P @ Q.max(axis=1)


def value_iteration(mdp: TabularMDP, tol: float = 1e-10, max_iter: int = 1_000_000) -> QTable:
    """Iterate the optimal Bellman operator until the sup-norm residual drops below ``tol``."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    Q = np.zeros_like(mdp.R)
    for it in range(1, max_iter + 1):
        Q_new = bellman_backup(mdp, Q)
        residual = np.abs(Q_new - Q).max()
        Q = Q_new
        if residual * mdp.gamma < tol or mdp.gamma == 0.0:
            # residual of Q itself is at most gamma * previous step size
            break
    return QTable(Q, mdp.gamma, tol, it)


def bellman_residual(mdp: TabularMDP, Q: np.ndarray) -> float:
    return float(np.abs(bellman_backup(mdp, Q) - Q).max())


# ------------------------------------------------------- estimation error bound
@dataclass
class ErrorInjection:
    eps_s: float
    eps_r: float
    eps_Q: float
    L_r: float = 0.0
    L_Q: float = 0.0

    def __post_init__(self):
        if min(self.eps_s, self.eps_r, self.eps_Q, self.L_r, self.L_Q) < 0:
            raise ValueError("injection bounds and Lipschitz constants must be non-negative")

    def bound(self, gamma: float) -> float:
        return (self.L_r + gamma * self.L_Q) * self.eps_s + self.eps_r + gamma * self.eps_Q


@dataclass
class BoundReport:
    bound: float
    max_error: float
    errors: np.ndarray
    L_r: float
    L_Q: float

    @property
    def violations(self) -> int:
        return int(np.sum(self.errors > self.bound + 1e-9))

    @property
    def passed(self) -> bool:
        return self.violations == 0

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} q-error bound: max error {self.max_error:.6f} <= bound {self.bound:.6f} "
                f"over {len(self.errors)} trials ({self.violations} violations)")


def lipschitz_constants(mdp: TabularMDP, Q: np.ndarray) -> tuple[float, float]:
    """Max neighbour differences along the unit-spaced state line, for R and Q*."""
    if mdp.n_states < 2:
        return 0.0, 0.0
    L_r = float(np.abs(np.diff(mdp.R, axis=0)).max())
    L_Q = float(np.abs(np.diff(Q, axis=0)).max())
    return L_r, L_Q


def _interp(table: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Piecewise-linear extension of a per-state table to real positions on the state line."""
    n = table.shape[0]
    x = np.clip(x, 0.0, n - 1.0)
    lo = np.floor(x).astype(int)
    hi = np.minimum(lo + 1, n - 1)
    frac = (x - lo)[..., None]
    return table[lo] * (1.0 - frac) + table[hi] * frac


def theorem1_check(mdp: TabularMDP, inj: ErrorInjection, trials: int, seed: int = 0,
                   Q_star: np.ndarray | None = None) -> BoundReport:
    """Empirical check of the Q-estimation error bound.

    States sit at integer points of a line; R and Q* are extended piecewise
    linearly, which keeps their Lipschitz constants equal to the max neighbour
    differences. Each trial displaces every successor state by at most eps_s,
    perturbs the reward by at most eps_r and the bootstrapped Q by at most
    eps_Q, then recomputes the one-step backup of the displaced model. The
    displaced reward is the reward evaluated at a displaced state-action point,
    which is how a state error enters the estimated reward.
    """
    if Q_star is None:
        Q_star = value_iteration(mdp, tol=1e-12).Q
    L_r, L_Q = lipschitz_constants(mdp, Q_star)
    inj = ErrorInjection(inj.eps_s, inj.eps_r, inj.eps_Q, L_r, L_Q)
    S, A = mdp.R.shape
    gamma = mdp.gamma
    bound = inj.bound(gamma)
    rng = rng_for(seed, "theorem1")
    states = np.arange(S, dtype=np.float64)

    def backup(d_state, d_succ, d_r, d_Q):
        r_hat = _interp(mdp.R, states + d_state) + d_r                     # (S, A)
        q_succ = _interp(Q_star, states[None, None, :] + d_succ)            # (S, A, S, A')
        v_hat = q_succ.max(axis=-1) + d_Q
        return r_hat + gamma * np.einsum("sat,sat->sa", mdp.P, v_hat)

    zeros = np.zeros((S, A, S))
    reference = backup(np.zeros(S), zeros, np.zeros((S, A)), zeros)
    errors = np.empty(trials)
    for k in range(trials):
        d_state = rng.uniform(-inj.eps_s, inj.eps_s, size=(S,))
        d_succ = rng.uniform(-inj.eps_s, inj.eps_s, size=(S, A, S))
        d_r = rng.uniform(-inj.eps_r, inj.eps_r, size=(S, A))
        d_Q = rng.uniform(-inj.eps_Q, inj.eps_Q, size=(S, A, S))
        for arr, eps, what in ((d_state, inj.eps_s, "state"), (d_succ, inj.eps_s, "successor"),
                               (d_r, inj.eps_r, "reward"), (d_Q, inj.eps_Q, "Q")):
            if np.abs(arr).max(initial=0.0) > eps:
                raise AssertionError(f"{what} injection exceeds its bound")
        errors[k] = np.abs(backup(d_state, d_succ, d_r, d_Q) - reference).max()
    return BoundReport(bound, float(errors.max(initial=0.0)), errors, L_r, L_Q)


# ------------------------------------------------------ direct-state baseline
class DirectModel:
    """(s, joint a) -> Gaussian over s_{t+1}; state and action feature encoders feed one head."""

    def __init__(self, spec: EnvSpec, hidden: int, seed: int = 0, prefix: str = "direct"):
        self.spec = spec
        self.hidden = hidden
        sd, na = spec.state_dim, spec.n_agents * spec.action_dim
        self.hs = MLP(f"{prefix}.hs", (sd, hidden))
        self.ha = MLP(f"{prefix}.ha", (na, hidden))
        self.head = MLP(f"{prefix}.head", (2 * hidden, hidden, 2 * sd))
        rng = rng_for(seed, "direct-init")
        self.params = {}
        for net in (self.hs, self.ha, self.head):
            self.params.update(net.init(rng))

    @property
    def n_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def dist(self, tape: Tape, s: Node, a: Node) -> tuple[Node, Node]:
        h = tape.concat([tape.tanh(self.hs(tape, s)), tape.tanh(self.ha(tape, a))])
        return gaussian_head(tape, self.head(tape, h), self.spec.state_dim)

    def loss_node(self, tape: Tape, batch) -> Node:
        a = batch["action"].reshape(len(batch["action"]), -1)
        mean, log_std = self.dist(tape, tape.input(batch["state"]), tape.input(a))
        return tape.mean(tape.gaussian_nll(tape.input(batch["next_state"]), mean, log_std))

    def loss_graph(self) -> TapeGraph:
        return TapeGraph(self.loss_node, self.params)

    def predict(self, state: np.ndarray, action: np.ndarray) -> np.ndarray:
        tape = Tape(self.params, record=False)
        a = np.asarray(action, np.float32).reshape(len(action), -1)
        return self.dist(tape, tape.input(np.asarray(state, np.float32)), tape.input(a))[0].value


def matched_hidden(spec: EnvSpec, budget: int) -> int:
    """Hidden width whose DirectModel parameter count is closest to ``budget``."""
    best = min(range(4, 4096), key=lambda h: abs(_direct_count(spec, h) - budget))
    return best


def _direct_count(spec: EnvSpec, h: int) -> int:
    sd, na = spec.state_dim, spec.n_agents * spec.action_dim
    return MLP("", (sd, h)).n_params + MLP("", (na, h)).n_params + MLP("", (2 * h, h, 2 * sd)).n_params


def state_mse(model: DirectModel, ds: Dataset) -> float:
    return float(np.mean((model.predict(ds.state, ds.action) - ds.next_state) ** 2))


@dataclass
class BaselineResult:
    model: DirectModel
    mse: float
    log: list = field(default_factory=list)


def train_direct(train: Dataset, config: WorldModelConfig, hidden: int, seed: int | None = None,
                 prefix: str = "direct") -> tuple[DirectModel, list]:
    seed = config.seed if seed is None else seed
    model = DirectModel(train.spec, hidden, seed, prefix)
    rows = []
    if config.steps > 0:
        opt = Adam(lr=config.lr)
        batch_rng = rng_for(seed, "direct-batch")
        names = sorted(model.params)
        B = min(config.batch_size, len(train))
        for step in range(1, config.steps + 1):
            idx = batch_rng.integers(0, len(train), B)
            batch = {"state": train.state[idx], "action": train.action[idx],
                     "next_state": train.next_state[idx]}
            tape = Tape(model.params)
            loss = model.loss_node(tape, batch)
            if not float(loss.value) < 1e6:
                raise TrainingDivergedError(f"direct-state loss diverged at step {step}", rows)
            opt.lr = config.lr_at(step)
            opt.step(model.params, tape.backward(loss), names)
            rows.append({"step": step, "nll": float(loss.value)})
    return model, rows


def direct_state_baseline(train: Dataset, heldout: Dataset, config: WorldModelConfig,
                          budget: int | None = None) -> BaselineResult:
    """Direct-state model with (by default) the LOGO bundle's parameter budget."""
    if budget is None:
        budget = WorldModel.param_count(train.spec, config.hidden)
    model, rows = train_direct(train, config, matched_hidden(train.spec, budget))
    return BaselineResult(model, state_mse(model, heldout), rows)


class Ensemble:
    def __init__(self, members: list[DirectModel]):
        self.members = members

    def predict(self, state, action) -> tuple[np.ndarray, np.ndarray]:
        preds = np.stack([m.predict(state, action) for m in self.members]).astype(np.float64)
        return preds.mean(axis=0).astype(np.float32), preds.std(axis=0).astype(np.float32)


def ensemble_baseline(train: Dataset, config: WorldModelConfig, k: int = 5, hidden: int | None = None,
                      seeds: list[int] | None = None) -> Ensemble:
    if k < 1:
        raise ValueError("k must be >= 1")
    hidden = hidden or matched_hidden(train.spec, WorldModel.param_count(train.spec, config.hidden))
    seeds = seeds if seeds is not None else [config.seed + 1000 * j for j in range(k)]
    return Ensemble([train_direct(train, config, hidden, seed=s, prefix=f"ens{j}")[0]
                     for j, s in enumerate(seeds)])


@dataclass
class TimingReport:
    logo_seconds: float
    ensemble_seconds: float
    logo_runs: list
    ensemble_runs: list

    @property
    def ratio(self) -> float:
        return self.ensemble_seconds / self.logo_seconds


def time_rollouts(wm: WorldModel, ensemble: Ensemble, ds: Dataset, n_traj: int = 500, steps: int = 10,
                  repeats: int = 5, seed: int = 0) -> TimingReport:
    """Median wall-clock of ``n_traj`` model rollouts of ``steps`` steps, LOGO vs ensemble."""
    rng = rng_for(seed, "timing")
    idx = rng.integers(0, len(ds), n_traj)
    obs0, s0 = ds.obs[idx], ds.state[idx]
    actions = rng.uniform(-1, 1, (steps,) + ds.action[idx].shape).astype(np.float32)

    def run_logo():
        obs, s = obs0, s0
        for t in range(steps):
            p = predict_next(wm, obs, actions[t], s)
            obs, s = p.o_next, p.s_next

    def run_ensemble():
        s = s0
        for t in range(steps):
            s, _ = ensemble.predict(s, actions[t])

    run_logo(), run_ensemble()          # warm-up
    logo_runs, ens_runs = [], []
    for _ in range(repeats):
        t0 = time.perf_counter()
        run_logo()
        logo_runs.append(time.perf_counter() - t0)
        t0 = time.perf_counter()
        run_ensemble()
        ens_runs.append(time.perf_counter() - t0)
    return TimingReport(float(np.median(logo_runs)), float(np.median(ens_runs)), logo_runs, ens_runs)


# ------------------------------------------------------------------------ PCA
@dataclass
class PCAResult:
    projected: np.ndarray
    components: np.ndarray          # (k, dim) orthonormal rows
    explained_variance_ratio: np.ndarray
    mean: np.ndarray
    rank_deficient: bool = False


def pca_project(points, k: int = 2, tol: float = 1e-9, max_iter: int = 10_000, seed: int = 0) -> PCAResult:
    """Top-k principal directions by power iteration with deflation."""
    X = np.asarray(points, dtype=np.float64)
    n, dim = X.shape
    if n < k + 1 or k > dim:
        raise ValueError(f"need at least k+1 points and k <= dim (got {n} points, dim {dim}, k={k})")
    mean = X.mean(axis=0)
    Xc = X - mean
    cov = Xc.T @ Xc / (n - 1)
    total = float(np.trace(cov))
    rng = rng_for(seed, "pca")
    A = cov.copy()
    comps, eigvals = [], []
    scale = max(total, 1e-300)
    for _ in range(k):
        v = rng.standard_normal(dim)
        for c in comps:
            v -= (v @ c) * c
        v /= np.linalg.norm(v)
        lam = 0.0
        for _ in range(max_iter):
            w = A @ v
            for c in comps:
                w -= (w @ c) * c
            norm = np.linalg.norm(w)
            if norm <= 1e-12 * scale:
                break
            w /= norm
            lam = float(w @ A @ w)
            converged = min(np.linalg.norm(w - v), np.linalg.norm(w + v)) < tol
            v = w
            if converged:
                break
        if lam <= 1e-12 * scale:
            break
        comps.append(v)
        eigvals.append(lam)
        A = A - lam * np.outer(v, v)
    components = np.array(comps).reshape(len(comps), dim)
    ratios = np.array(eigvals) / total if total > 0 else np.zeros(len(comps))
    return PCAResult(Xc @ components.T, components, ratios, mean, rank_deficient=len(comps) < k)
