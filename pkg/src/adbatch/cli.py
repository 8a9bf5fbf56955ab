"""Command-line runner: ``adbatch run | report | calibrate-overhead``.

Runs write into a fresh directory (``--out``, the config's ``output.dir``,
or ``$ADBATCH_OUTPUT_ROOT/<problem>-<scheme>-<metamodel>-seed<seed>``):

``config.cfg``          resolved configuration
``rows_<run>.csv``      per-round history of macro-replication ``run``
``design_<run>.csv``    final design (inputs, counts, batch means)
``summary.json``        terminal metrics per run and their means

Option-pricing runs write ``dates_<run>.csv`` (one row per exercise date)
instead of per-round rows.  Columns whose name ends in ``_nondet`` hold
wall-clock times; every other byte is a function of config and seed.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, load_config

SCHEMA_VERSION = 1
OUTPUT_ROOT_ENV = "ADBATCH_OUTPUT_ROOT"

ROW_COLUMNS = ["n", "k", "N", "r", "action", "criterion", "gamma", "ER", "band", "x", "wall_seconds_nondet"]
SERIES = {
    "er_vs_N.csv": ["run", "N", "ER"],
    "er_vs_time.csv": ["run", "wall_seconds_nondet", "ER"],
    "k_vs_N.csv": ["run", "N", "k"],
}


# -- file helpers -----------------------------------------------------------------


def atomic_write(path: Path, text: str) -> None:
    """Write ``text`` to ``path`` through a temporary file and a rename."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (list, tuple, np.ndarray)):
        return " ".join(_fmt(u) for u in v)
    return str(v)


def csv_text(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        values = [row[c] for c in columns] if isinstance(row, dict) else row
        w.writerow([_fmt(v) for v in values])
    return buf.getvalue()


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_fmt) + "\n"


def _prepare_dir(out: Path, force: bool) -> None:
    if out.exists() and any(out.iterdir()) and not force:
        raise FileExistsError(f"output directory {out} is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)


def default_out_dir(cfg: ExperimentConfig) -> Path:
    if cfg.out_dir:
        return Path(cfg.out_dir)
    root = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
    s = cfg.settings
    return root / f"{cfg.problem}-{s.scheme}-{s.metamodel}-seed{cfg.seed}"


# -- run -------------------------------------------------------------------------------


def design_rows(design) -> tuple[list[str], list[list]]:
    d = design.dim
    cols = [f"x{j + 1}" for j in range(d)] + ["r", "ybar"]
    rows = [list(x) + [int(r), float(y)] for x, r, y in zip(design.X, design.counts, design.means)]
    return cols, rows


def _run_synthetic(cfg: ExperimentConfig, out: Path, log) -> dict:
    from .benchmarks import get_problem
    from .schemes import run_scheme

    problem = get_problem(cfg.problem)
    runs = []
    for j in range(cfg.macro_reps):
        rec = run_scheme(problem, cfg.settings, seed=cfg.seed, run=j)
        atomic_write(out / f"rows_{j:03d}.csv", csv_text(ROW_COLUMNS, rec.rows))
        cols, rows = design_rows(rec.design)
        atomic_write(out / f"design_{j:03d}.csv", csv_text(cols, rows))
        runs.append(dict(rec.summary, run=j))
        log(f"run {j}: ER={rec.summary['ER']:.4f} k_T={rec.summary['k_T']} N_T={rec.summary['N_T']}")
    return {
        "runs": runs,
        "mean": {key: float(np.mean([r[key] for r in runs])) for key in ("ER", "band", "k_T", "wall_seconds_nondet")},
    }


def optstop_objects(cfg: ExperimentConfig):
    from .optstop import BasketPut, GBMParams, MaxCall

    o = cfg.optstop
    dim = 2 if cfg.problem == "put2d" else 3
    params = GBMParams(dim=dim, rate=o["rate"], sigma=o["sigma"], dt=o["dt"], T=o["T"], z0=o["z0"], delta=o["delta"])
    payoff = BasketPut(o["K"], o["form"]) if cfg.problem == "put2d" else MaxCall(o["K"])
    return params, payoff


def _run_optstop(cfg: ExperimentConfig, out: Path, log) -> dict:
    from .optstop import fit_policy, policy_value

    params, payoff = optstop_objects(cfg)
    runs = []
    for j in range(cfg.macro_reps):
        t0 = time.perf_counter()
        policy = fit_policy(params, payoff, cfg.settings, seed=cfg.seed, run=j, scale=cfg.optstop["scale"])
        fit_seconds = time.perf_counter() - t0
        value, se = policy_value(policy, cfg.optstop["n_paths"], seed=cfg.seed * 1000 + j)
        dates = [
            {
                "date": i + 1,
                "t": (i + 1) * params.dt,
                "k_T": rec.summary["k_T"],
                "N_T": rec.summary["N_T"],
                "band": rec.summary["band"],
                "wall_seconds_nondet": rec.summary["wall_seconds_nondet"],
            }
            for i, rec in enumerate(policy.records)
        ]
        atomic_write(out / f"dates_{j:03d}.csv", csv_text(list(dates[0]), dates))
        runs.append({"run": j, "value": value, "se": se, "mean_k_T": float(np.mean([d["k_T"] for d in dates])), "fit_seconds_nondet": fit_seconds})
        log(f"run {j}: V={value:.4f} +- {se:.4f}")
    return {"runs": runs, "mean": {"value": float(np.mean([r["value"] for r in runs])), "mean_k_T": float(np.mean([r["mean_k_T"] for r in runs]))}}


def cmd_run(args, log=print) -> int:
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"output.seed={args.seed}")
    cfg = load_config(args.config, overrides)
    out = Path(args.out) if args.out else default_out_dir(cfg)
    _prepare_dir(out, args.force)
    atomic_write(out / "config.cfg", cfg.to_ini())
    body = _run_optstop(cfg, out, log) if cfg.is_optstop else _run_synthetic(cfg, out, log)
    summary = {
        "schema_version": SCHEMA_VERSION,
        "problem": cfg.problem,
        "seed": cfg.seed,
        "macro_reps": cfg.macro_reps,
        "settings": cfg.settings.snapshot(),
        "optstop": cfg.optstop,
        **body,
    }
    atomic_write(out / "summary.json", _json(summary))
    if not cfg.is_optstop:
        write_report(out)
    log(f"wrote {out}")
    return 0


# -- report -------------------------------------------------------------------------


def write_report(run_dir: Path) -> list[dict]:
    """Emit the plot-data series of a synthetic run directory.

    Returns one summary dict per macro-replication.
    """
    run_dir = Path(run_dir)
    row_files = sorted(run_dir.glob("rows_*.csv"))
    if not row_files:
        raise FileNotFoundError(f"no rows_*.csv in {run_dir}")
    series = {name: [] for name in SERIES}
    dump, dump_cols, table = [], None, []
    for f in row_files:
        run = int(f.stem.split("_")[1])
        rows = read_csv(f)
        for r in rows:
            series["er_vs_N.csv"].append([run, int(r["N"]), r["ER"]])
            series["er_vs_time.csv"].append([run, r["wall_seconds_nondet"], r["ER"]])
            series["k_vs_N.csv"].append([run, int(r["N"]), int(r["k"])])
        drows = read_csv(run_dir / f"design_{run:03d}.csv")
        dump_cols = ["run"] + list(drows[0])
        dump += [[run] + list(d.values()) for d in drows]
        last = rows[-1]
        table.append({"run": run, "ER": last["ER"], "k_T": int(last["k"]), "N_T": int(last["N"]), "wall_seconds_nondet": last["wall_seconds_nondet"]})
    for name, cols in SERIES.items():
        atomic_write(run_dir / name, csv_text(cols, series[name]))
    atomic_write(run_dir / "design_dump.csv", csv_text(dump_cols, dump))
    return table


def cmd_report(args, log=print) -> int:
    run_dir = Path(args.run_dir)
    if (run_dir / "dates_000.csv").exists():
        s = json.loads((run_dir / "summary.json").read_text())
        log(f"{'run':>4} {'value':>9} {'se':>7} {'mean k_T':>9}")
        for r in s["runs"]:
            log(f"{r['run']:>4} {r['value']:>9.4f} {r['se']:>7.4f} {r['mean_k_T']:>9.1f}")
        return 0
    table = write_report(run_dir)
    log(f"{'run':>4} {'ER':>8} {'k_T':>5} {'N_T':>6} {'seconds':>8}")
    for t in table:
        log(f"{t['run']:>4} {float(t['ER']):>8.4f} {t['k_T']:>5} {t['N_T']:>6} {float(t['wall_seconds_nondet']):>8.2f}")
    return 0


# -- calibrate-overhead ------------------------------------------------------------------


def calibrate_overhead(problem, settings, ks=(20, 40, 80, 160), reps: int = 2, seed: int = 0, sim_calls: int = 200, clock=time.perf_counter):
    """Time one refit plus one acquisition search at several design sizes.

    Returns ``(theta, r2, T_sim, points)``; all times are in seconds.
    ``T_sim`` is the mean time per simulator replicate.
    """
    from . import acquisition as acq
    from .gp import GPModel, Homoskedastic, ReplicatedDesign, fit_hyperparameters
    from .rng import stream

    ns, secs = [], []
    for k in ks:
        for rep in range(reps):
            rng = stream(seed, rep, k, "calibrate")
            X = rng.random((k, problem.dim))
            y = [problem.simulate(x, settings.r0, rng).mean() for x in X]
            design = ReplicatedDesign(X, np.full(k, settings.r0), y)
            t0 = clock()
            fit = fit_hyperparameters(design, Homoskedastic(settings.tau2), noise_mode=settings.noise_mode, n_starts=1, rng=rng)
            model = GPModel(design, fit.kernel, fit.noise)
            fh, s = model.predict(rng.random((256, problem.dim)))
            rho = acq.rho_weight(fh, s)
            acq.optimize_acquisition(lambda Z: acq.cucb(Z, model, rho), problem.dim, rng, n_candidates=settings.n_candidates, n_polish=settings.n_polish)
            ns.append(k)
            secs.append(clock() - t0)
    theta, r2 = acq.fit_overhead(ns, secs)
    rng = stream(seed, 0, 0, "calibrate-sim")
    t0 = clock()
    x = rng.random(problem.dim)
    for _ in range(sim_calls):
        problem.simulate(x, 1, rng)
    T_sim = (clock() - t0) / sim_calls
    return theta, r2, T_sim, list(zip(ns, secs))


def cmd_calibrate(args, log=print) -> int:
    from .benchmarks import get_problem

    cfg = load_config(args.config, list(args.set or []))
    if cfg.is_optstop:
        raise ConfigError("calibrate-overhead supports the synthetic problems only")
    ks = tuple(int(v) for v in args.k.split(","))
    theta, r2, T_sim, pts = calibrate_overhead(get_problem(cfg.problem), cfg.settings, ks=ks, reps=args.reps, seed=cfg.seed)
    result = {"schema_version": SCHEMA_VERSION, "units": "seconds", "theta": list(theta), "r2": r2, "T_sim": T_sim, "points_nondet": pts}
    log(_json(result).rstrip())
    if args.out:
        atomic_write(Path(args.out), _json(result))
    return 0


# -- entry point -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="adbatch", description="Level-set design experiments with adaptive replication.")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment from a config file")
    run.add_argument("--config", required=True, help="INI file or bundled name (branin2d, hartman6, put2d, call3d)")
    run.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
    run.add_argument("--seed", type=int, help="master seed (overrides output.seed)")
    run.add_argument("--out", help="output directory")
    run.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    run.set_defaults(func=cmd_run)

    rep = sub.add_parser("report", help="write plot-data CSVs for a run directory")
    rep.add_argument("run_dir")
    rep.set_defaults(func=cmd_report)

    cal = sub.add_parser("calibrate-overhead", help="fit the quadratic overhead model by timing")
    cal.add_argument("--config", required=True)
    cal.add_argument("--set", action="append", metavar="KEY=VALUE")
    cal.add_argument("--k", default="20,40,80,160", help="comma-separated design sizes")
    cal.add_argument("--reps", type=int, default=2)
    cal.add_argument("--out", help="write the JSON result here")
    cal.set_defaults(func=cmd_calibrate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FileExistsError, FileNotFoundError) as exc:
        print(f"adbatch: error: {exc}", file=sys.stderr)
        return 2
