"""Command-line entry point: ``logo <command> [--config FILE] [--section.key value ...]``.

Exit codes: 0 success, 1 a verification check failed, 2 bad configuration or
flag, 3 missing prerequisite artifact. Failures print one JSON line to stderr.
"""
from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

from . import dataset as dataset_io
from .config import SCHEMA, ConfigError, ExperimentConfig, schema_text
from .container import ContainerError
from .dataset import split
from .harness import eval_seed, fit_world_model, prepare_data, run_seed, write_csv
from .policy import PolicyBundle, evaluate, load_policy, save_policy, train_policy, write_eval_csv
from .rng import rng_for
from .synth import generate_rollouts
from .world_model import load_model, save_model, write_log_csv

COMMANDS = ("collect", "train-wm", "rollout", "train-policy", "evaluate", "ablate", "verify", "report")
ALIASES = {"seed": "seeds", "tier": "data.tier", "episodes": "data.episodes"}

DATASET, WM, SYNTH, POLICY = "dataset.logo", "wm.logo", "synthetic.logo", "policy.logo"


class UsageError(Exception):
    def __init__(self, field: str, message: str):
        super().__init__(message)
        self.field = field


class MissingArtifact(Exception):
    pass


def parse_args(argv: list[str]) -> tuple[str, ExperimentConfig, dict]:
    if not argv or argv[0] in ("-h", "--help"):
        raise UsageError("command", f"expected one of: {', '.join(COMMANDS)}")
    command, rest = argv[0], argv[1:]
    if command not in COMMANDS:
        raise UsageError("command", f"unknown command {command!r}")
    config_path, extra, overrides = None, {}, []
    i = 0
    while i < len(rest):
        tok = rest[i]
        if not tok.startswith("--"):
            raise UsageError(tok, f"unexpected argument {tok!r}")
        name, _, inline = tok[2:].partition("=")
        if inline == "" and "=" not in tok:
            if i + 1 >= len(rest):
                raise UsageError(tok, f"flag {tok} needs a value")
            value = rest[i + 1]
            i += 2
        else:
            value = inline
            i += 1
        if name == "config":
            config_path = value
        elif name == "results":
            extra["results"] = value
        elif name in ALIASES or name in SCHEMA:
            overrides.append((ALIASES.get(name, name), value))
        else:
            raise UsageError(tok, f"unknown flag {tok}")
    if config_path is not None and not Path(config_path).is_file():
        raise MissingArtifact(f"config file {config_path} not found")
    return command, ExperimentConfig.from_file(config_path, overrides), extra


def _need(path: Path, hint: str) -> Path:
    if not path.exists():
        raise MissingArtifact(f"{path} not found; run `{hint}` first")
    return path


def _run_dir(cfg: ExperimentConfig, seed: int) -> Path:
    out = cfg.run_dir(seed)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved.cfg").write_text(cfg.updated([("seeds", str(seed))]).resolved_text())
    return out


def cmd_collect(cfg: ExperimentConfig) -> int:
    for seed in cfg.seeds:
        out = _run_dir(cfg, seed)
        ds = prepare_data(cfg, seed).data
        dataset_io.save(ds, out / DATASET)
        print(f"collected {len(ds)} transitions ({cfg['data.tier']}, seed {seed}) -> {out / DATASET}")
    return 0


def _load_data(cfg: ExperimentConfig, out: Path):
    ds = dataset_io.load(_need(out / DATASET, "collect"), expect_spec=cfg.env_spec())
    return ds, *split(ds, cfg["data.val_fraction"], int(out.name))


def cmd_train_wm(cfg: ExperimentConfig) -> int:
    from .harness import SeedData, compare_models
    for seed in cfg.seeds:
        out = _run_dir(cfg, seed)
        ds, train, val = _load_data(cfg, out)
        sd = SeedData(seed, ds, train, val)
        res = fit_world_model(cfg, sd)
        save_model(res.model, out / WM, res.C)
        write_log_csv(res.log, out / "wm_log.csv")
        print(f"world model seed {seed}: C={res.C:.6f} -> {out / WM}")
        if cfg["ablation.direct_state"]:
            m = compare_models(cfg, sd, res)
            write_csv(out / "models.csv", ["seed", "logo_mse", "direct_mse", "spearman_u", "C", "logo_params",
                                           "direct_params"],
                      [(seed, m.logo_mse, m.direct_mse, m.spearman, m.C, m.logo_params, m.direct_params)])
            print(f"  held-out state MSE logo {m.logo_mse:.3e} direct {m.direct_mse:.3e}")
    return 0


def _policy_or_fresh(cfg: ExperimentConfig, out: Path, seed: int) -> PolicyBundle:
    if (out / POLICY).exists():
        return load_policy(out / POLICY)
    return PolicyBundle(cfg.env_spec(), hidden=cfg["policy.hidden"], seed=seed)


def cmd_rollout(cfg: ExperimentConfig) -> int:
    for seed in cfg.seeds:
        out = _run_dir(cfg, seed)
        _, train, _ = _load_data(cfg, out)
        wm, C = load_model(_need(out / WM, "train-wm"))
        rcfg = cfg.rollout_config()
        C = rcfg.C or C
        buf = generate_rollouts(wm, _policy_or_fresh(cfg, out, seed).act, train, rcfg,
                                rng_for(seed, "cli-rollout"), C)
        dataset_io.save(buf.data, out / SYNTH)
        print(f"generated {len(buf)} synthetic transitions (seed {seed}) -> {out / SYNTH}")
    return 0


def cmd_train_policy(cfg: ExperimentConfig) -> int:
    for seed in cfg.seeds:
        out = _run_dir(cfg, seed)
        _, train, _ = _load_data(cfg, out)
        pcfg = cfg.policy_config(seed)
        wm = C = None
        if pcfg.buffer != "none" or pcfg.mpc:
            wm, C = load_model(_need(out / WM, "train-wm"))
            C = cfg.rollout_config().C or C
        bundle = PolicyBundle(cfg.env_spec(), hidden=pcfg.hidden, seed=seed, alpha=pcfg.alpha, lam=pcfg.lam,
                              gamma=pcfg.gamma, tau=pcfg.tau)
        res = train_policy(bundle, train, pcfg, wm, C, cfg.rollout_config())
        save_policy(res.bundle, out / POLICY)
        write_csv(out / "metrics.csv", ["step", "q_loss", "policy_loss", "eval_return"],
                  [(r["step"], r["q_loss"], r["policy_loss"], r["eval_return"]) for r in res.log])
        print(f"policy seed {seed}: {pcfg.steps} steps ({pcfg.buffer}{', mpc' if pcfg.mpc else ''}) -> {out / POLICY}")
    return 0


def cmd_evaluate(cfg: ExperimentConfig) -> int:
    for seed in cfg.seeds:
        out = _run_dir(cfg, seed)
        bundle = load_policy(_need(out / POLICY, "train-policy"))
        ev = evaluate(bundle.act, cfg.env_spec(), cfg["policy.eval_episodes"], eval_seed(seed))
        seed_rows = [(seed, e, float(r)) for e, r in enumerate(ev.returns)]
        write_eval_csv(seed_rows, out / "eval.csv")
        print(f"seed {seed}: mean return {ev.mean:.3f} (std {ev.std:.3f}, {len(ev.returns)} episodes)")
    return 0


def cmd_ablate(cfg: ExperimentConfig) -> int:
    for seed in cfg.seeds:
        out = _run_dir(cfg, seed)
        summary = run_seed(cfg, seed, out)
        for name, r in sorted(summary["arms"].items()):
            print(f"seed {seed} {name}: {r.eval.mean:.3f}")
    return 0


def cmd_verify(cfg: ExperimentConfig) -> int:
    from .verify import run_all
    results = run_all(seed=cfg.seeds[0])
    for r in results:
        print(r.line())
    return 0 if all(r.passed for r in results) else 1


def cmd_report(cfg: ExperimentConfig, results: str | None) -> int:
    from .report import report
    root = Path(results) if results else cfg.root
    if not root.is_dir():
        raise MissingArtifact(f"{root} not found; run `ablate` first")
    for line in report(root):
        print(line)
    return 0


def _fail(code: int, kind: str, field: str | None, message: str) -> int:
    print(json.dumps({"error": kind, "code": code, "field": field, "message": message}), file=sys.stderr)
    return code


def run_command(argv: list[str]) -> int:
    try:
        command, cfg, extra = parse_args(argv)
    except UsageError as exc:
        return _fail(2, "usage", exc.field, str(exc))
    except ConfigError as exc:
        return _fail(2, "config", exc.field, str(exc))
    except MissingArtifact as exc:
        return _fail(3, "missing", None, str(exc))
    handlers = {"collect": cmd_collect, "train-wm": cmd_train_wm, "rollout": cmd_rollout,
                "train-policy": cmd_train_policy, "evaluate": cmd_evaluate, "ablate": cmd_ablate,
                "verify": cmd_verify}
    try:
        if command == "report":
            return cmd_report(cfg, extra.get("results"))
        return handlers[command](cfg)
    except MissingArtifact as exc:
        return _fail(3, "missing", None, str(exc))
    except ContainerError as exc:
        return _fail(3, "artifact", None, str(exc))


def main() -> None:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if len(sys.argv) > 1 and sys.argv[1] == "schema":
        sys.stdout.write(schema_text())
        sys.exit(0)
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
