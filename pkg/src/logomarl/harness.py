"""Experiment orchestration shared by the command line and the acceptance suite.

One seed runs: collect -> split -> train world model (+ C) -> policy arms ->
real-environment evaluation. Arms:

* ``none``      real data only (the conservative backbone alone)
* ``weighted``  real + synthetic data, synthetic half drawn by priority
* ``penalty``   real + synthetic data with r - lambda*u, uniform synthetic draws
* ``H<k>``      ``weighted`` with rollout horizon k
* ``mpc``       real data only, actor pulled toward MPC-selected actions
"""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from .config import ExperimentConfig
from .dataset import Dataset, collect, split
from .envs import EnvSpec
from .oracles import direct_state_baseline, ensemble_baseline, pca_project, time_rollouts
from .policy import EvalResult, PolicyBundle, evaluate, expert_policy, train_policy
from .rng import rng_for
from .world_model import TrainResult, WorldModel, predict_next, train_world_model

log = logging.getLogger(__name__)


def write_csv(path: str | Path, header: list[str], rows: list) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(x) if isinstance(x, float) else x for x in row])


def read_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def eval_seed(seed: int) -> int:
    """Evaluation episodes are shared by every arm of a seed (paired comparison)."""
    return int(rng_for(seed, "final-eval").integers(2**31 - 1))


def random_policy(spec: EnvSpec, seed: int):
    rng = rng_for(seed, "random-policy")

    def act(obs):
        return rng.uniform(-1.0, 1.0, np.asarray(obs).shape[:-1] + (spec.action_dim,))
    return act


@dataclass
class References:
    random: float
    expert: float

    def normalize(self, ret: float) -> float:
        """100 * (R - R_random) / (R_expert - R_random)."""
        return 100.0 * (ret - self.random) / (self.expert - self.random)


def reference_returns(spec: EnvSpec, seed: int, episodes: int) -> References:
    es = eval_seed(seed)
    return References(evaluate(random_policy(spec, seed), spec, episodes, es).mean,
                      evaluate(expert_policy(spec), spec, episodes, es).mean)


@dataclass
class SeedData:
    seed: int
    data: Dataset
    train: Dataset
    val: Dataset


def prepare_data(cfg: ExperimentConfig, seed: int, tier: str | None = None) -> SeedData:
    ds = collect(cfg.env_spec(), tier or cfg["data.tier"], cfg["data.episodes"], seed)
    train, val = split(ds, cfg["data.val_fraction"], seed)
    return SeedData(seed, ds, train, val)


def fit_world_model(cfg: ExperimentConfig, sd: SeedData) -> TrainResult:
    res = train_world_model(sd.train, sd.val, cfg.wm_config(sd.seed), cfg.env_spec())
    if cfg["rollout.C"] > 0:
        res.C = cfg["rollout.C"]
    return res


ARM_NAMES = ("none", "weighted", "penalty", "mpc")


def arm_policy_config(cfg: ExperimentConfig, seed: int, arm: str):
    if arm == "none":
        return cfg.policy_config(seed, buffer="none", mpc=False)
    if arm == "weighted" or arm.startswith("H"):
        return cfg.policy_config(seed, buffer="weighted", mpc=False)
    if arm == "penalty":
        return cfg.policy_config(seed, buffer="penalty", mpc=False)
    if arm == "mpc":
        return cfg.policy_config(seed, buffer="none", mpc=True)
    raise ValueError(f"unknown arm {arm!r}")


@dataclass
class ArmResult:
    arm: str
    seed: int
    eval: EvalResult
    log: list
    bundle: PolicyBundle
    seconds: float


def run_arm(cfg: ExperimentConfig, sd: SeedData, arm: str, wm: WorldModel | None, C: float | None) -> ArmResult:
    spec = cfg.env_spec()
    pcfg = arm_policy_config(cfg, sd.seed, arm)
    horizon = int(arm[1:]) if arm.startswith("H") else None
    bundle = PolicyBundle(spec, hidden=pcfg.hidden, seed=sd.seed, alpha=pcfg.alpha, lam=pcfg.lam,
                          gamma=pcfg.gamma, tau=pcfg.tau)
    t0 = time.perf_counter()
    res = train_policy(bundle, sd.train, pcfg, wm, C, cfg.rollout_config(horizon))
    ev = evaluate(res.bundle.act, spec, cfg["policy.eval_episodes"], eval_seed(sd.seed))
    log.info("seed %d arm %s return %.3f", sd.seed, arm, ev.mean)
    return ArmResult(arm, sd.seed, ev, res.log, res.bundle, time.perf_counter() - t0)


@dataclass
class ModelComparison:
    logo_mse: float
    direct_mse: float
    spearman: float
    C: float
    logo_params: int
    direct_params: int
    pca: object = None
    pca_labels: list = field(default_factory=list)


def compare_models(cfg: ExperimentConfig, sd: SeedData, wm_result: TrainResult) -> ModelComparison:
    """Held-out one-step state MSE of LOGO vs the direct-state model, and u vs true error."""
    wm = wm_result.model
    held = sd.val
    base = direct_state_baseline(sd.train, held, cfg.wm_config(sd.seed))
    pred = predict_next(wm, held.obs, held.action, held.state)
    err = np.linalg.norm(pred.s_next - held.next_state, axis=1)
    rho = float(spearmanr(pred.u, err)[0])
    direct_pred = base.model.predict(held.state, held.action)
    points = np.concatenate([held.next_state, pred.s_next, direct_pred])
    labels = ["true"] * len(held) + ["logo"] * len(held) + ["direct"] * len(held)
    return ModelComparison(float(np.mean((pred.s_next - held.next_state) ** 2)), base.mse, rho, wm_result.C,
                           wm.n_params, base.model.n_params, pca_project(points, 2, seed=sd.seed), labels)


def timing(cfg: ExperimentConfig, sd: SeedData, wm: WorldModel, repeats: int = 5):
    ens = ensemble_baseline(sd.train, cfg.wm_config(sd.seed), k=cfg["ablation.ensemble_k"])
    return time_rollouts(wm, ens, sd.val, n_traj=500, steps=10, repeats=repeats, seed=sd.seed)


def run_seed(cfg: ExperimentConfig, seed: int, out: Path | None = None) -> dict:
    """Every requested ablation group for one seed; writes CSVs when ``out`` is given."""
    groups = cfg.arms
    seconds = {}
    t0 = time.perf_counter()
    sd = prepare_data(cfg, seed)
    t1 = time.perf_counter()
    wm_res = fit_world_model(cfg, sd)
    seconds["data"], seconds["wm"] = t1 - t0, time.perf_counter() - t1
    wm, C = wm_res.model, wm_res.C
    spec = cfg.env_spec()
    refs = reference_returns(spec, seed, cfg["policy.eval_episodes"])
    arms = []
    for g in ("none", "weighted", "penalty", "mpc"):
        if g in groups:
            arms.append(g)
    if "horizons" in groups:
        arms += [f"H{h}" for h in cfg.horizons if not (h == cfg["rollout.horizon"] and "weighted" in groups)]
    results = {a: run_arm(cfg, sd, a, wm, C) for a in arms}
    if "horizons" in groups and "weighted" in groups:
        results[f"H{cfg['rollout.horizon']}"] = results["weighted"]
    summary = {"seed": seed, "refs": refs, "arms": results, "C": C, "seconds": seconds}
    if "models" in groups:
        t0 = time.perf_counter()
        summary["models"] = compare_models(cfg, sd, wm_res)
        seconds["models"] = time.perf_counter() - t0
    if "timing" in groups:
        t0 = time.perf_counter()
        summary["timing"] = timing(cfg, sd, wm)
        seconds["timing"] = time.perf_counter() - t0
    if out is not None:
        write_seed_outputs(out, summary)
    return summary


def write_seed_outputs(out: Path, summary: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    refs: References = summary["refs"]
    rows = [(name, summary["seed"], r.eval.mean, r.eval.std, refs.normalize(r.eval.mean))
            for name, r in sorted(summary["arms"].items())]
    rows += [("ref-random", summary["seed"], refs.random, 0.0, 0.0),
             ("ref-expert", summary["seed"], refs.expert, 0.0, 100.0)]
    write_csv(out / "ablation.csv", ["arm", "seed", "mean_return", "std_return", "normalized"], rows)
    ep_rows = [(name, summary["seed"], e, float(x)) for name, r in sorted(summary["arms"].items())
               for e, x in enumerate(r.eval.returns)]
    write_csv(out / "ablation_episodes.csv", ["arm", "seed", "episode", "return"], ep_rows)
    m: ModelComparison | None = summary.get("models")
    if m is not None:
        write_csv(out / "models.csv", ["seed", "logo_mse", "direct_mse", "spearman_u", "C", "logo_params",
                                       "direct_params"],
                  [(summary["seed"], m.logo_mse, m.direct_mse, m.spearman, m.C, m.logo_params, m.direct_params)])
        write_pca_csv(out / "pca.csv", m.pca, m.pca_labels)
    t = summary.get("timing")
    if t is not None:
        write_csv(out / "timing.csv", ["seed", "logo_seconds", "ensemble_seconds", "ratio"],
                  [(summary["seed"], t.logo_seconds, t.ensemble_seconds, t.ratio)])


def write_pca_csv(path: Path, pca, labels: list[str]) -> None:
    rows = [(lab, i, float(p[0]), float(p[1])) for i, (lab, p) in enumerate(zip(labels, pca.projected))]
    ev = pca.explained_variance_ratio
    rows.append(("explained_variance", -1, float(ev[0]), float(ev[1]) if len(ev) > 1 else 0.0))
    write_csv(path, ["source", "index", "pc1", "pc2"], rows)
