"""Command-line front end: ``run``, ``compare`` and ``replay``.

Exit codes: 0 success, 2 bad configuration or input files, 3 training failure.
``BOED_THREADS`` caps how many (strategy, seed) cells run in parallel processes.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_config
from .engine import Strategy, TrainingError, run_campaign, stream
from .flow import ConditionalFlow, ConditionedFlow, DiagonalGaussian
from .metrics import cumulative_info_gain, predictive_kl, summarize_samples
from .models import ExperimentModel, model_from_config

log = logging.getLogger("deepboed")

EXIT_OK, EXIT_CONFIG, EXIT_TRAINING = 0, 2, 3
REPLAY_KINDS = ("eig-heatmap", "posterior-evolution", "response-band", "corner")


class InputError(ValueError):
    """Unusable input files (missing log, header or snapshot)."""


def thread_cap() -> int:
    raw = os.environ.get("BOED_THREADS", "1").strip() or "1"
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"BOED_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"BOED_THREADS must be a positive integer, got {raw!r}")
    return n


def _write_csv(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return repr(float(v))


# ---------------------------------------------------------------------------
# run directories


def read_run(run_dir: Path) -> tuple[dict, list[dict]]:
    run_dir = Path(run_dir)
    head_path, log_path = run_dir / "header.json", run_dir / "log.jsonl"
    if not head_path.exists() or not log_path.exists():
        raise InputError(f"{run_dir}: expected header.json and log.jsonl")
    header = json.loads(head_path.read_text())
    records = [json.loads(line) for line in log_path.read_text().splitlines() if line.strip()]
    return header, records


def density_at(run_dir: Path, model: ExperimentModel, step: int):
    """Prior after ``step`` measurements: the base prior at 0, else a stored snapshot."""
    if step == 0:
        return DiagonalGaussian(model.prior_mean, model.prior_std)
    stem = Path(run_dir) / "snapshots" / f"step_{step:04d}"
    if not stem.with_suffix(".bin").exists() or not stem.with_suffix(".json").exists():
        raise InputError(f"no snapshot for step {step} in {Path(run_dir) / 'snapshots'}")
    flow, head = ConditionalFlow.load(stem)
    return ConditionedFlow(flow, np.asarray(head["ctx"], dtype=np.float64))


# ---------------------------------------------------------------------------
# run / compare


def _run_cell(cfg_dict: dict, strategy: dict, seed: int, out_dir: str) -> dict:
    """One campaign; returns the cumulative-IG series and final predictive KL rows."""
    from .config import resolve

    cfg = resolve(cfg_dict)
    model = cfg.build_model()
    strat = Strategy(**strategy)
    records = run_campaign(model, strat, cfg.steps, seed, cfg.engine_config(), Path(out_dir),
                           header={"config": cfg.to_dict()})
    pred = cfg.predictive_config()
    density = density_at(Path(out_dir), model, cfg.steps)
    rng = stream(seed, cfg.steps, "eval")
    kl_rows = []
    for x in model.setting_grid(pred.grid_points):
        est = predictive_kl(density, model, model.true_lambda, float(x), rng,
                            n_mixture=pred.n_mixture, n_outer=pred.n_outer)
        kl_rows.append((float(x), est.value, est.stderr))
    return {"strategy": strat.label, "seed": seed,
            "cumulative": cumulative_info_gain(records).tolist(), "predictive_kl": kl_rows}


def _run_cells(cfg: RunConfig, cells: list[tuple[dict, int, str]]) -> list[dict]:
    cfg_dict = cfg.to_dict()
    workers = min(thread_cap(), len(cells))
    if workers <= 1:
        return [_run_cell(cfg_dict, s, seed, out) for s, seed, out in cells]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(_run_cell, cfg_dict, s, seed, out) for s, seed, out in cells]
        return [f.result() for f in futures]


def cmd_run(config: str, out: str | None) -> int:
    cfg = load_config(config)
    out_dir = Path(out or cfg.out or "runs")
    strategy = cfg.strategy
    cells = [(strategy, seed, str(out_dir / f"seed{seed}")) for seed in cfg.seeds]
    results = _run_cells(cfg, cells)
    for res in results:
        final = res["cumulative"][-1] if res["cumulative"] else 0.0
        log.info("seed %d: %d steps, cumulative IG %.4g", res["seed"], cfg.steps, final)
    return EXIT_OK


def steps_to_threshold(cumulative, threshold: float) -> int | None:
    """First 1-based step whose cumulative gain reaches ``threshold``; None if never."""
    hits = np.nonzero(np.asarray(cumulative) >= threshold)[0]
    return int(hits[0]) + 1 if len(hits) else None


def summarize_compare(results: list[dict], steps: int, threshold: float, out_dir: Path) -> dict:
    """Write the comparison CSVs; returns per-strategy summary numbers."""
    labels = list(dict.fromkeys(r["strategy"] for r in results))
    summary = {}
    ig_rows, stt_rows, stt_summary, kl_rows = [], [], [], []
    for label in labels:
        cells = sorted((r for r in results if r["strategy"] == label), key=lambda r: r["seed"])
        curves = np.array([r["cumulative"] for r in cells]).reshape(len(cells), steps)
        for n in range(steps):
            col = curves[:, n]
            se = float(np.std(col, ddof=1) / math.sqrt(len(col))) if len(col) > 1 else float("nan")
            ig_rows.append((n + 1, label, _fmt(col.mean()), _fmt(se)))
        reached = []
        for r in cells:
            k = steps_to_threshold(r["cumulative"], threshold)
            stt_rows.append((label, r["seed"], "" if k is None else k, int(k is not None)))
            # unreached runs are censored at one past the budget
            reached.append(steps + 1 if k is None else k)
        reached = np.array(reached, dtype=np.float64)
        se = float(np.std(reached, ddof=1) / math.sqrt(len(reached))) if len(reached) > 1 else float("nan")
        n_hit = sum(1 for row in stt_rows if row[0] == label and row[3])
        stt_summary.append((label, _fmt(reached.mean()), _fmt(se), n_hit, len(cells)))
        for r in cells:
            for x, v, e in r["predictive_kl"]:
                kl_rows.append((label, r["seed"], _fmt(x), _fmt(v), _fmt(e)))
        summary[label] = {"final_mean": float(curves[:, -1].mean()) if steps else 0.0,
                          "mean_steps_to_threshold": float(reached.mean())}
    _write_csv(out_dir / "cumulative_ig.csv", ("step", "strategy", "mean", "stderr"), ig_rows)
    _write_csv(out_dir / "steps_to_threshold.csv", ("strategy", "seed", "steps", "reached"), stt_rows)
    _write_csv(out_dir / "steps_to_threshold_summary.csv",
               ("strategy", "mean_steps", "stderr", "n_reached", "n_seeds"), stt_summary)
    _write_csv(out_dir / "predictive_kl.csv", ("strategy", "seed", "x", "kl", "stderr"), kl_rows)
    return summary


def cmd_compare(config: str, out: str | None) -> int:
    cfg = load_config(config)
    out_dir = Path(out or cfg.out or "compare")
    strategies = cfg.strategies or [cfg.strategy]
    cells = []
    for s in strategies:
        label = Strategy(**s).label
        for seed in cfg.seeds:
            cells.append((s, seed, str(out_dir / label / f"seed{seed}")))
    results = _run_cells(cfg, cells)
    threshold = 10.0 if cfg.ig_threshold is None else float(cfg.ig_threshold)
    pred = cfg.predictive_config()
    meta = {
        "config": cfg.to_dict(),
        "ig_threshold": threshold,
        "steps_to_threshold": "first step with cumulative IG >= threshold; unreached runs count "
                              "as steps + 1 in the summary mean",
        "predictive_kl": {"direction": "KL(posterior predictive || true likelihood)",
                          "n_mixture": pred.n_mixture, "n_outer": pred.n_outer,
                          "count_observations": "exact sum over all counts"},
        "averaging": "mean and standard error across seeds",
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "compare.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    summary = summarize_compare(results, cfg.steps, threshold, out_dir)
    for label, s in summary.items():
        log.info("%s: final cumulative IG %.4g, mean steps to %.3g: %.3g", label,
                 s["final_mean"], threshold, s["mean_steps_to_threshold"])
    return EXIT_OK


# ---------------------------------------------------------------------------
# replay


def parse_steps(text: str | None, available: list[int]) -> list[int]:
    if text is None or text.strip() in ("", "all"):
        return list(available)
    steps = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part[1:]:
            lo, hi = part.split("-", 1)
            steps.extend(range(int(lo), int(hi) + 1))
        elif part:
            steps.append(int(part))
    if any(s < 0 for s in steps):
        raise InputError("steps must be >= 0")
    return steps


def replay_eig_heatmap(records, steps, out_dir: Path) -> None:
    rows = [r for r in records if r["step"] in steps and r["eig_grid"]]
    if not rows:
        raise InputError("no EIG curves in the log for the requested steps "
                         "(only active grid-scan runs record them)")
    grid = [p[0] for p in rows[0]["eig_grid"]]
    _write_csv(out_dir / "eig_grid.csv", ("index", "x"), [(i, _fmt(x)) for i, x in enumerate(grid)])
    norm_rows, raw_rows = [], []
    for r in rows:
        vals = np.array([p[1] for p in r["eig_grid"]])
        top = vals.max()
        norm = np.clip(vals, 0, None) / top if top > 0 else np.zeros_like(vals)
        norm_rows.append([r["step"], *map(_fmt, norm)])
        raw_rows.append([r["step"], *map(_fmt, vals)])
    head = ["step", *[f"x{i}" for i in range(len(grid))]]
    _write_csv(out_dir / "eig_heatmap.csv", head, norm_rows)
    _write_csv(out_dir / "eig_heatmap_raw.csv", head, raw_rows)


def replay_posterior_evolution(header, records, steps, out_dir: Path) -> None:
    truth = header["true_lambda"]
    prior = header["prior"]
    rows = []
    entries = [(0, prior["posterior_mean"], prior["posterior_std"], prior["posterior_q05"],
                prior["posterior_q95"])]
    entries += [(r["step"], r["posterior_mean"], r["posterior_std"], r["posterior_q05"],
                 r["posterior_q95"]) for r in records]
    for step, mean, std, q05, q95 in entries:
        if step not in steps:
            continue
        for d in range(len(mean)):
            rows.append((step, d, _fmt(mean[d]), _fmt(std[d]), _fmt(q05[d]), _fmt(q95[d]),
                         _fmt(truth[d])))
    _write_csv(out_dir / "posterior_evolution.csv",
               ("step", "dim", "mean", "std", "q05", "q95", "true"), rows)


def replay_response_band(run_dir, header, model, steps, out_dir: Path, samples: int,
                         grid_points: int) -> None:
    grid = model.setting_grid(grid_points)
    truth = model.response_curve(np.asarray(header["true_lambda"])[None, :].repeat(len(grid), 0), grid)
    labels = model.response_labels
    curve_rows, band_rows = [], []
    for step in steps:
        density = density_at(run_dir, model, step)
        lam, _ = density.sample(samples, stream(header["seed"], step, "eval"))
        sim = model.bind(lam)
        curves = np.stack([sim.response_curve(np.full(samples, x)) for x in grid], axis=1)  # (M, X, C)
        for c, name in enumerate(labels):
            for i, x in enumerate(grid):
                curve_rows.append((step, -1, _fmt(x), name, _fmt(truth[i, c])))
            for m in range(samples):
                for i, x in enumerate(grid):
                    curve_rows.append((step, m, _fmt(x), name, _fmt(curves[m, i, c])))
            q05, q50, q95 = np.quantile(curves[:, :, c], [0.05, 0.5, 0.95], axis=0)
            for i, x in enumerate(grid):
                band_rows.append((step, _fmt(x), name, _fmt(q05[i]), _fmt(q50[i]), _fmt(q95[i]),
                                  _fmt(truth[i, c])))
    _write_csv(out_dir / "response_band.csv", ("step", "sample", "x", "channel", "value"), curve_rows)
    _write_csv(out_dir / "response_band_summary.csv",
               ("step", "x", "channel", "q05", "q50", "q95", "true"), band_rows)


def replay_corner(run_dir, header, model, steps, out_dir: Path, samples: int, bins: int) -> None:
    marg_rows, pair_rows = [], []
    for step in steps:
        density = density_at(run_dir, model, step)
        lam, _ = density.sample(samples, stream(header["seed"], step, "eval"))
        s = summarize_samples(lam, bins=bins)
        for d, (edges, dens) in enumerate(s.marginals):
            for b in range(len(dens)):
                marg_rows.append((step, d, b, _fmt(edges[b]), _fmt(edges[b + 1]), _fmt(dens[b])))
        for (i, j), (xe, ye, dens) in sorted(s.pairs.items()):
            for a in range(dens.shape[0]):
                for b in range(dens.shape[1]):
                    pair_rows.append((step, i, j, a, b, _fmt(xe[a]), _fmt(xe[a + 1]),
                                      _fmt(ye[b]), _fmt(ye[b + 1]), _fmt(dens[a, b])))
    _write_csv(out_dir / "corner_marginals.csv", ("step", "dim", "bin", "lo", "hi", "density"),
               marg_rows)
    _write_csv(out_dir / "corner_pairs.csv",
               ("step", "dim_i", "dim_j", "bin_i", "bin_j", "lo_i", "hi_i", "lo_j", "hi_j", "density"),
               pair_rows)


def cmd_replay(log_path: str, what: str, steps: str | None, out: str | None,
               samples: int = 32, grid_points: int = 121, bins: int = 30) -> int:
    path = Path(log_path)
    run_dir = path.parent if path.is_file() or path.suffix == ".jsonl" else path
    header, records = read_run(run_dir)
    model = model_from_config(header["model"])
    available = [0] + [r["step"] for r in records]
    chosen = parse_steps(steps, available)
    out_dir = Path(out) if out else run_dir / "replay"
    out_dir.mkdir(parents=True, exist_ok=True)
    if what == "eig-heatmap":
        replay_eig_heatmap(records, chosen, out_dir)
    elif what == "posterior-evolution":
        replay_posterior_evolution(header, records, chosen, out_dir)
    elif what == "response-band":
        replay_response_band(run_dir, header, model, chosen, out_dir, samples, grid_points)
    elif what == "corner":
        replay_corner(run_dir, header, model, chosen, out_dir, max(samples, 2000), bins)
    else:
        raise InputError(f"unknown replay kind {what!r}")
    log.info("wrote %s output to %s", what, out_dir)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="deepboed", description=__doc__.splitlines()[0])
    p.add_argument("-q", "--quiet", action="store_true", help="only log warnings")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one campaign per seed")
    run.add_argument("--config", required=True)
    run.add_argument("--out", help="output directory (default: config 'out' or ./runs)")

    cmp_ = sub.add_parser("compare", help="run every strategy x seed and aggregate")
    cmp_.add_argument("--config", required=True)
    cmp_.add_argument("--out", help="output directory (default: config 'out' or ./compare)")

    rep = sub.add_parser("replay", help="turn a run log into plot-ready CSV")
    rep.add_argument("--log", required=True, help="log.jsonl or its run directory")
    rep.add_argument("--what", required=True, choices=REPLAY_KINDS)
    rep.add_argument("--steps", help="comma list or ranges, e.g. 0,5,10-15 (default: all)")
    rep.add_argument("--out", help="output directory (default: <run>/replay)")
    rep.add_argument("--samples", type=int, default=32, help="posterior draws per step")
    rep.add_argument("--grid-points", type=int, default=121)
    rep.add_argument("--bins", type=int, default=30)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.command == "run":
            return cmd_run(args.config, args.out)
        if args.command == "compare":
            return cmd_compare(args.config, args.out)
        return cmd_replay(args.log, args.what, args.steps, args.out, args.samples,
                          args.grid_points, args.bins)
    except (ConfigError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_TRAINING


if __name__ == "__main__":
    sys.exit(main())
