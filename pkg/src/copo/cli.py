"""Command-line entry point: sample, train, eval, and sweep.

Exit codes: 0 success, 2 config error, 3 solver failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import baselines, evaluate, ipm, nlp
from .config import ConfigError, ExperimentConfig
from .model import sample_scenarios
from .policy import MlpPolicy, eval_policy, init_params, load_params, save_params

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_IO = 4


def _load_config(args) -> ExperimentConfig:
    cfg = (
        ExperimentConfig.from_file(args.config)
        if args.config
        else ExperimentConfig()
    )
    overrides = {}
    for key in (
        "noisy", "n_samples", "horizon", "train_seed", "validate_seed",
        "outdir", "max_iter", "tol", "gamma", "margin",
    ):
        val = getattr(args, key, None)
        if val is not None:
            overrides[key] = val
    if overrides:
        cfg = replace(cfg, **overrides)
    cfg.validate()
    return cfg


def _build_training_nlp(cfg: ExperimentConfig):
    problem, emb = cfg.build_problem()
    layers = cfg.layer_sizes(problem.n_x, problem.n_zeta, problem.n_u)
    pol = MlpPolicy(layers)
    scen = sample_scenarios(
        problem, emb, cfg.n_samples, cfg.horizon, cfg.train_seed,
        antithetic=cfg.antithetic,
    )
    return problem, emb, pol, nlp.SampleNlp(
        problem, emb, pol, scen, margin=cfg.margin
    )


def _initial_theta(cfg: ExperimentConfig, problem, pol, sample_nlp) -> np.ndarray:
    """Random init, imitation-refined toward the MPC baseline when available.

    The imitation targets are MPC moves along its own closed-loop
    trajectories through the training scenarios, so the warm start is
    already near-feasible; a raw random init works too but spends many
    iterations repairing constraint violations.
    """
    theta0 = init_params(pol.layer_sizes, cfg.policy_seed, cfg.init_scale)
    if not (cfg.warm_start and cfg.problem == "benchmark"):
        return theta0
    aug = baselines.benchmark_augmented_model(gamma=cfg.gamma)
    ref = baselines.make_mpc_controller(aug)
    xs, zs, tgt = baselines.rollout_imitation_points(
        ref, problem, sample_nlp.scenarios
    )
    return baselines.imitation_fit(pol, theta0, xs, zs, tgt)


def _train(cfg: ExperimentConfig, outdir: Path) -> dict:
    """Run one training cell; returns the manifest dict."""
    problem, emb, pol, sample_nlp = _build_training_nlp(cfg)
    theta0 = _initial_theta(cfg, problem, pol, sample_nlp)
    options = ipm.IpmOptions(tol=cfg.tol, mu0=cfg.mu0, max_iter=cfg.max_iter)
    t0 = time.perf_counter()
    result = ipm.ipm_solve(nlp.RolloutBlockNlp(sample_nlp), theta0, options)
    wall = time.perf_counter() - t0
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "solve.log").write_text(result.log_text())
    manifest = {
        "config_hash": cfg.config_hash(),
        "train_seed": cfg.train_seed,
        "policy_seed": cfg.policy_seed,
        "n_samples": cfg.n_samples,
        "horizon": cfg.horizon,
        "status": result.status,
        "success": result.success,
        "iterations": result.iterations,
        "kkt": result.kkt,
        "objective": result.objective,
        "wall_time_s": wall,
    }
    (outdir / "manifest.json").write_text(json.dumps(manifest, indent=2))
    # an exhausted iteration budget still yields a usable stationary-ish
    # policy (the landscape is degenerate near optima and the KKT error
    # plateaus); only a genuine solver breakdown is an error
    if result.status == "line_search_failure" or result.kkt > 1.0:
        raise ipm.SolverFailure(
            f"training failed: {result.status} "
            f"(kkt={result.kkt:.3e} after {result.iterations} iterations)"
        )
    save_params(outdir / "theta.bin", pol, result.theta)
    (outdir / "config.ini").write_text(cfg.to_ini())
    return manifest


def _validation_controllers(cfg: ExperimentConfig, problem, emb, theta_entries):
    """theta_entries: list of (name, policy, theta) plus baseline names."""
    aug = baselines.benchmark_augmented_model(gamma=cfg.gamma)
    ctrls = {}
    for name, pol, theta in theta_entries:
        ctrls[name] = evaluate.PolicyController(pol, theta)
    return ctrls, aug


def _eval(cfg: ExperimentConfig, controllers: dict, outdir: Path):
    problem, emb = cfg.build_problem()
    scen = sample_scenarios(
        problem, emb, cfg.n_validation, cfg.validation_horizon, cfg.validate_seed
    )
    result = evaluate.compare(
        controllers, problem, emb, scen, horizon=cfg.validation_horizon
    )
    outdir.mkdir(parents=True, exist_ok=True)
    result.write_csv(outdir / "metrics.csv")
    traj_dir = outdir / "trajectories"
    traj_dir.mkdir(exist_ok=True)
    for name, runs in result.runs.items():
        for run in runs:
            evaluate.write_trajectory_csv(
                run, traj_dir / f"{name}_s{run.scenario_index}.csv"
            )
    return result


def _make_baseline(cfg: ExperimentConfig, name: str):
    if cfg.problem != "benchmark":
        raise ConfigError("baseline controllers are defined for the benchmark only")
    aug = baselines.benchmark_augmented_model(gamma=cfg.gamma)
    if name == "lqr":
        return baselines.make_lqr_controller(aug)
    if name == "mpc":
        return baselines.make_mpc_controller(aug)
    raise ConfigError(f"unknown baseline '{name}' (expected lqr or mpc)")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_sample(args) -> int:
    cfg = _load_config(args)
    problem, emb = cfg.build_problem()
    scen = sample_scenarios(
        problem, emb, cfg.n_samples, cfg.horizon, cfg.train_seed,
        antithetic=cfg.antithetic,
    )
    out = Path(args.out or (Path(cfg.outdir) / "scenarios.csv"))
    out.parent.mkdir(parents=True, exist_ok=True)
    scen.write_csv(out)
    print(f"wrote {scen.n_scenarios} scenarios of length {scen.horizon + 1} to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    outdir = Path(cfg.outdir)
    manifest = _train(cfg, outdir)
    print(
        f"trained in {manifest['iterations']} iterations, "
        f"kkt={manifest['kkt']:.3e}, wall={manifest['wall_time_s']:.1f}s -> {outdir}"
    )
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    if bool(args.theta) == bool(args.baseline):
        raise ConfigError("pass exactly one of --theta or --baseline")
    if args.theta:
        pol, theta = load_params(args.theta)
        problem, _ = cfg.build_problem()
        expected = cfg.layer_sizes(problem.n_x, problem.n_zeta, problem.n_u)
        if pol.layer_sizes[0] != expected[0] or pol.layer_sizes[-1] != expected[-1]:
            raise ConfigError(
                f"policy shape {pol.layer_sizes} does not fit problem dims {expected}"
            )
        controllers = {"po": evaluate.PolicyController(pol, theta)}
    else:
        controllers = {args.baseline: _make_baseline(cfg, args.baseline)}
    outdir = Path(args.out or cfg.outdir)
    result = _eval(cfg, controllers, outdir)
    for row in result.rows:
        print(
            f"{row['controller']}: performance={row['performance']:.6g} "
            f"violations={row['violations']:.2f}"
        )
    return EXIT_OK


def _sweep_cell(cfg_ini: str, s: int, t: int, base_outdir: str):
    """One (S, T) training + evaluation cell; isolated seeds and outputs."""
    cfg = ExperimentConfig.from_ini(cfg_ini)
    cell = replace(
        cfg,
        n_samples=s,
        horizon=t,
        train_seed=cfg.train_seed + 1000 * s + t,
        outdir=str(Path(base_outdir) / f"S{s}_T{t}"),
    )
    outdir = Path(cell.outdir)
    try:
        _train(cell, outdir)
        pol, theta = load_params(outdir / "theta.bin")
        result = _eval(cell, {"po": evaluate.PolicyController(pol, theta)}, outdir)
        row = result.row("po")
        return dict(
            s=s, t=t, status="ok",
            performance=row["performance"], violations=row["violations"],
        )
    except Exception as exc:
        return dict(s=s, t=t, status="FAILED", error=str(exc))


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    s_list = [int(v) for v in args.s_list.split(",")]
    t_list = [int(v) for v in args.t_list.split(",")]
    base = Path(cfg.outdir)
    base.mkdir(parents=True, exist_ok=True)
    cfg_ini = cfg.to_ini()
    cells = [(s, t) for s in s_list for t in t_list]
    if args.workers > 1:
        with concurrent.futures.ProcessPoolExecutor(args.workers) as ex:
            results = list(
                ex.map(_sweep_cell, *zip(*[(cfg_ini, s, t, str(base)) for s, t in cells]))
            )
    else:
        results = [_sweep_cell(cfg_ini, s, t, str(base)) for s, t in cells]

    # baseline columns for the same validation set
    baseline_rows = []
    if cfg.problem == "benchmark":
        controllers = {
            "lqr": _make_baseline(cfg, "lqr"),
            "mpc": _make_baseline(cfg, "mpc"),
        }
        cmp_result = _eval(cfg, controllers, base / "baselines")
        baseline_rows = cmp_result.rows

    grid_path = base / "sweep.csv"
    with open(grid_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["controller", "S", "T", "performance", "violations", "status"])
        for r in results:
            if r["status"] == "ok":
                writer.writerow(
                    ["po", r["s"], r["t"], repr(r["performance"]),
                     repr(r["violations"]), "ok"]
                )
            else:
                writer.writerow(["po", r["s"], r["t"], "", "", "FAILED"])
        for row in baseline_rows:
            writer.writerow(
                [row["controller"], "", "", repr(row["performance"]),
                 repr(row["violations"]), "ok"]
            )
    n_failed = sum(1 for r in results if r["status"] != "ok")
    print(f"sweep finished: {len(results) - n_failed} ok, {n_failed} failed -> {grid_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="copo",
        description="Constrained policy optimization for stochastic control",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="experiment config file (INI)")
        p.add_argument("--noisy", action="store_true", default=None)
        p.add_argument("--n-samples", dest="n_samples", type=int)
        p.add_argument("--horizon", type=int)
        p.add_argument("--train-seed", dest="train_seed", type=int)
        p.add_argument("--validate-seed", dest="validate_seed", type=int)
        p.add_argument("--gamma", type=float)
        p.add_argument("--tol", type=float)
        p.add_argument("--margin", type=float)
        p.add_argument("--max-iter", dest="max_iter", type=int)
        p.add_argument("--outdir")

    p = sub.add_parser("sample", help="dump a scenario set as CSV")
    common(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("train", help="train a policy")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="closed-loop validation of a policy or baseline")
    common(p)
    p.add_argument("--theta", help="trained parameter file")
    p.add_argument("--baseline", choices=["lqr", "mpc"])
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="train/eval a grid of (S, T) cells")
    common(p)
    p.add_argument("--s-list", default="5,10,15,20")
    p.add_argument("--t-list", default="5,10,15,20")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ipm.SolverFailure as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    raise SystemExit(main())
