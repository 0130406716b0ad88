"""Aggregate per-seed run outputs into summary tables (CSV + plain text)."""
from __future__ import annotations

import math
import shutil
from collections import defaultdict
from pathlib import Path

import numpy as np

from .harness import read_csv, write_csv


def mean_ci(values) -> tuple[float, float]:
    """Mean and 1.96 * std / sqrt(n) with the population std (ddof=0); the margin is nan for one value."""
    x = np.asarray(values, dtype=np.float64)
    if x.size == 0:
        return math.nan, math.nan
    if x.size == 1:
        return float(x[0]), math.nan
    return float(x.mean()), float(1.96 * x.std() / math.sqrt(x.size))


def _fmt(m: float, ci: float) -> str:
    if math.isnan(m):
        return "n/a"
    return f"{m:.3f}" if math.isnan(ci) else f"{m:.3f} +- {ci:.3f}"


def _read_cfg(path: Path) -> dict[str, str]:
    out = {}
    if path.exists():
        for line in path.read_text().splitlines():
            if "=" in line:
                k, v = line.split("=", 1)
                out[k.strip()] = v.strip()
    return out


def seed_dirs(root: Path) -> list[Path]:
    return sorted((p for p in Path(root).iterdir() if p.is_dir() and p.name.lstrip("-").isdigit()),
                  key=lambda p: int(p.name))


def report(results_dir: str | Path) -> list[str]:
    """Write summary.csv, summary.txt, horizon.csv, timing.csv, models.csv and pca.csv; return the text lines."""
    root = Path(results_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"no results directory {root}")
    seeds = seed_dirs(root)
    per_arm: dict[tuple, dict[int, tuple[float, float]]] = defaultdict(dict)
    models, timing = [], []
    all_seeds = []
    for d in seeds:
        seed = int(d.name)
        all_seeds.append(seed)
        cfg = _read_cfg(d / "resolved.cfg")
        env = f"particle-n{cfg.get('env.n_agents', '?')}"
        tier = cfg.get("data.tier", "?")
        if (d / "ablation.csv").exists():
            for row in read_csv(d / "ablation.csv"):
                per_arm[(env, tier, row["arm"])][seed] = (float(row["mean_return"]), float(row["normalized"]))
        if (d / "models.csv").exists():
            models += read_csv(d / "models.csv")
        if (d / "timing.csv").exists():
            timing += read_csv(d / "timing.csv")

    lines = [f"results: {root.name} ({len(all_seeds)} seed directories)"]
    rows = []
    for key in sorted(per_arm):
        got = per_arm[key]
        missing = [s for s in all_seeds if s not in got]
        m, ci = mean_ci([got[s][0] for s in sorted(got)])
        mn, cin = mean_ci([got[s][1] for s in sorted(got)])
        rows.append((*key, len(got), m, ci, mn, cin, " ".join(map(str, missing))))
        flag = f"  [missing seeds: {' '.join(map(str, missing))}]" if missing else ""
        lines.append(f"{key[0]} {key[1]} {key[2]}: return {_fmt(m, ci)}, normalized {_fmt(mn, cin)} "
                     f"(n={len(got)}){flag}")
    write_csv(root / "summary.csv", ["env", "tier", "method", "n_seeds", "mean_return", "ci95", "mean_normalized",
                                     "ci95_normalized", "missing_seeds"], rows)

    hrows = [r for r in rows if r[2].startswith("H") and r[2][1:].isdigit()]
    hrows.sort(key=lambda r: (r[0], r[1], int(r[2][1:])))
    best = max((r[6] for r in hrows), default=math.nan)
    write_csv(root / "horizon.csv", ["env", "tier", "horizon", "n_seeds", "mean_return", "ci95", "mean_normalized",
                                     "ci95_normalized", "fraction_of_best"],
              [(r[0], r[1], int(r[2][1:]), r[3], r[4], r[5], r[6], r[7], r[6] / best) for r in hrows])
    for r in hrows:
        lines.append(f"horizon {r[2][1:]}: normalized {_fmt(r[6], r[7])} ({r[6] / best:.3f} of best)")

    if models:
        cols = ["logo_mse", "direct_mse", "spearman_u"]
        vals = {c: [float(m[c]) for m in models] for c in cols}
        wins = sum(float(m["logo_mse"]) < float(m["direct_mse"]) for m in models)
        write_csv(root / "models.csv", ["quantity", "n_seeds", "mean", "ci95"],
                  [(c, len(vals[c]), *mean_ci(vals[c])) for c in cols] + [("logo_wins", len(models), float(wins), 0.0)])
        lines.append(f"one-step state MSE: logo {_fmt(*mean_ci(vals['logo_mse']))}, direct "
                     f"{_fmt(*mean_ci(vals['direct_mse']))}; logo lower in {wins}/{len(models)} seeds")
        lines.append(f"spearman(u, error): {_fmt(*mean_ci(vals['spearman_u']))}")
    if timing:
        logo = [float(t["logo_seconds"]) for t in timing]
        ens = [float(t["ensemble_seconds"]) for t in timing]
        ratio = [float(t["ratio"]) for t in timing]
        write_csv(root / "timing.csv", ["quantity", "n_seeds", "mean", "ci95"],
                  [("logo_seconds", len(logo), *mean_ci(logo)), ("ensemble_seconds", len(ens), *mean_ci(ens)),
                   ("ratio", len(ratio), *mean_ci(ratio))])
        lines.append(f"rollout timing (500 x 10): logo {np.mean(logo):.4f}s, ensemble {np.mean(ens):.4f}s, "
                     f"ratio {np.mean(ratio):.2f}")
    pca_src = next((d / "pca.csv" for d in seeds if (d / "pca.csv").exists()), None)
    if pca_src is not None:
        shutil.copyfile(pca_src, root / "pca.csv")
    (root / "summary.txt").write_text("\n".join(lines) + "\n")
    return lines
