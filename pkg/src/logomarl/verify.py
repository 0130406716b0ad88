"""Self-checks run by ``logo verify``: gradients, the Q-error bound, sampling frequencies."""
from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from .autodiff import finite_diff_check
from .dataset import collect
from .envs import EnvSpec, random_mdp
from .oracles import ErrorInjection, theorem1_check
from .policy import (PolicyBundle, bellman_target, mpc_select_action, policy_loss_graph, q_loss_graph)
from .rng import rng_for
from .synth import RolloutConfig, SyntheticBuffer, generate_rollouts, mixed_minibatch
from .world_model import WorldModel, draw_noise, loss_graph, make_batch


@dataclass
class CheckResult:
    name: str
    value: float
    threshold: float
    seconds: float
    op: str = "<="

    @property
    def passed(self) -> bool:
        if self.op == "<":
            return self.value < self.threshold
        return self.value <= self.threshold

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: {self.value:.3g} {self.op} {self.threshold:g} ({self.seconds:.1f}s)"


WM_LOSSES = ("L_p", "L_d", "L_Rd", "L_Eps", "L_world")


def _jitter(params: dict, rng: np.random.Generator, scale: float = 0.1) -> None:
    """Move every tensor (biases included) off its initial value, so no ReLU sits exactly at a kink."""
    for v in params.values():
        v += rng.normal(0.0, scale, v.shape).astype(v.dtype)


def gradient_checks(points: int = 10, hidden: int = 6, batch: int = 4, h: float = 1e-4,
                    coords: int = 4, seed: int = 0) -> list[CheckResult]:
    """Finite differences vs reverse mode for every training loss, at ``points`` random inits/batches."""
    spec = EnvSpec()
    data = collect(spec, "medium", 2, seed)
    worst = {name: 0.0 for name in WM_LOSSES + ("cql_q_loss", "policy_loss", "mpc_policy_loss")}
    elapsed = dict.fromkeys(worst, 0.0)
    for k in range(points):
        rng = rng_for(seed, "gradcheck", k)
        wm = WorldModel(spec, hidden, seed=1000 + k)
        _jitter(wm.params, rng)
        idx = rng.integers(0, len(data), batch)
        b = make_batch(data, idx)
        b.update(draw_noise(wm, batch, rng))
        for name in WM_LOSSES:
            t0 = time.perf_counter()
            err = finite_diff_check(loss_graph(wm, name), b, h=h, coords_per_param=coords, rng=rng)
            worst[name] = max(worst[name], err)
            elapsed[name] += time.perf_counter() - t0

        bundle = PolicyBundle(spec, hidden=hidden, seed=1000 + k)
        for params in (bundle.q_params, bundle.target_params, bundle.pi_params):
            _jitter(params, rng)
        buf = generate_rollouts(wm, bundle.act, data, RolloutConfig(horizon=2, starts_per_refresh=8), rng, C=1.0)
        pb, _ = mixed_minibatch(data, buf, 2 * batch, rng)
        pb["pi_action"] = bundle.act(pb["obs"])
        pb["target"] = bellman_target(bundle, pb)
        pb["a_max"] = mpc_select_action(bundle, wm, pb["obs"], pb["state"], 3, rng).action
        for name, graph in (("cql_q_loss", q_loss_graph(bundle)),
                            ("policy_loss", policy_loss_graph(bundle, lam=0.7)),
                            ("mpc_policy_loss", policy_loss_graph(bundle, lam=0.7, mpc=True))):
            t0 = time.perf_counter()
            err = finite_diff_check(graph, pb, h=h, coords_per_param=coords, rng=rng)
            worst[name] = max(worst[name], err)
            elapsed[name] += time.perf_counter() - t0
    return [CheckResult(f"gradient {name}", worst[name], 1e-4, elapsed[name]) for name in worst]


def bound_check(trials: int = 1000, n_states: int = 16, n_actions: int = 4, gamma: float = 0.9,
                seed: int = 0) -> tuple[CheckResult, object]:
    t0 = time.perf_counter()
    mdp = random_mdp(n_states, n_actions, gamma, rng_for(seed, "bound-mdp"))
    report = theorem1_check(mdp, ErrorInjection(0.1, 0.05, 0.02), trials, seed)
    res = CheckResult(f"q-error bound violations ({trials} trials, max err {report.max_error:.4f} "
                      f"vs bound {report.bound:.4f})", report.violations, 0, time.perf_counter() - t0)
    return res, report


def sampling_check(draws: int = 1_000_000, n_real: int = 25, n_syn: int = 50, chunk: int = 20_000,
                   seed: int = 0) -> list[CheckResult]:
    """Empirical draw frequencies vs softmax weights (synthetic half) and uniform (real half)."""
    t0 = time.perf_counter()
    spec = EnvSpec()
    real = collect(spec, "medium", 1, seed).subset(np.arange(n_real))
    rng = rng_for(seed, "sampling-check")
    src = collect(spec, "random", 2, seed + 1).subset(np.arange(n_syn))
    syn = replace(src, priority=rng.uniform(0.0, 2.0, n_syn).astype(np.float32),
                  uncertainty=np.zeros(n_syn, np.float32))
    buffer = SyntheticBuffer(syn)
    real_counts = np.zeros(n_real)
    syn_counts = np.zeros(n_syn)
    per_batch = chunk // 2
    for _ in range(-(-draws // per_batch)):
        batch, _ = mixed_minibatch(real, buffer, chunk, rng)
        real_counts += np.bincount(batch["real_index"], minlength=n_real)
        syn_counts += np.bincount(batch["synthetic_index"], minlength=n_syn)
    l1_syn = float(np.abs(syn_counts / syn_counts.sum() - buffer.weights).sum())
    l1_real = float(np.abs(real_counts / real_counts.sum() - 1.0 / n_real).sum())
    dt = time.perf_counter() - t0
    return [CheckResult(f"synthetic draw L1 vs softmax weights ({int(syn_counts.sum())} draws)", l1_syn, 0.01, dt, "<"),
            CheckResult(f"real draw L1 vs uniform ({int(real_counts.sum())} draws)", l1_real, 0.01, dt, "<")]


def run_all(points: int = 10, trials: int = 1000, draws: int = 1_000_000, seed: int = 0) -> list[CheckResult]:
    out = gradient_checks(points=points, seed=seed)
    out.append(bound_check(trials=trials, seed=seed)[0])
    out += sampling_check(draws=draws, seed=seed)
    return out
