"""Command-line interface: ``densityfilter <subcommand> ...``.

Subcommands: ``simulate``, ``train``, ``filter``, ``eval-density``, ``bench``
and ``report``.  Global flags (``--seed``, ``--config``, ``--out-dir``,
``--threads``) may be given before or after the subcommand.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

log = logging.getLogger("densityfilter")


def _global_flags(parser, suppress: bool):
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--seed", type=int, default=argparse.SUPPRESS if suppress else 0, help="master seed")
    parser.add_argument("--config", default=default, help="JSON config file or checked-in config name")
    parser.add_argument("--out-dir", default=argparse.SUPPRESS if suppress else ".", help="output directory")
    parser.add_argument("--threads", type=int, default=default, help="BLAS threads")
    parser.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS if suppress else 0)


def _model_params(pairs):
    out = {}
    for p in pairs or []:
        key, _, val = p.partition("=")
        try:
            out[key] = json.loads(val)
        except json.JSONDecodeError:
            out[key] = val
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="densityfilter", description=__doc__.splitlines()[0])
    _global_flags(parser, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="simulate signal paths and observations")
    p.add_argument("--model", required=True)
    p.add_argument("--model-param", action="append", metavar="KEY=VALUE")
    p.add_argument("--T", type=float, default=1.0)
    p.add_argument("--K", type=int, default=10)
    p.add_argument("--N", type=int, default=128, help="Euler-Maruyama substeps per interval")
    p.add_argument("--n-paths", type=int, default=100)

    p = sub.add_parser("train", parents=[common], help="train a deep density filter")
    p.add_argument("--model", required=True)
    p.add_argument("--model-param", action="append", metavar="KEY=VALUE")
    p.add_argument("--method", required=True, choices=["dsf", "logdsf", "bsdef", "logbsdef"])
    p.add_argument("--T", type=float, default=None)
    p.add_argument("--K", type=int, default=None)
    p.add_argument("--out", default=None, help="checkpoint directory")

    p = sub.add_parser("filter", parents=[common], help="run a filter over a simulated dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--method", required=True, help="kf, ekf, enkf, pf or a checkpoint directory")
    p.add_argument("--particles", type=int, default=10_000)
    p.add_argument("--substeps", type=int, default=1)
    p.add_argument("--normalization", default="quad", choices=["quad", "i-ekf", "i-g"])
    p.add_argument("--samples", type=int, default=1000)

    p = sub.add_parser("eval-density", parents=[common], help="evaluate a trained filter's log-density")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--obs", required=True, help="observation CSV (sequence,k,o_1..)")
    p.add_argument("--points", required=True, help="CSV of query points (x_1..x_d)")
    p.add_argument("--k", type=int, default=None, help="observation step (default: all)")

    p = sub.add_parser("bench", parents=[common], help="run an experiment config")
    p.add_argument("--M", type=int, default=None, help="override the number of evaluation sequences")

    p = sub.add_parser("report", parents=[common], help="summarize metric CSVs and manifests")
    p.add_argument("--metrics", nargs="*", default=[])
    p.add_argument("--manifest", nargs="*", default=[])
    return parser


def _set_threads(n):
    if n:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(n)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    from .models import make_problem
    from .sim import TimeGrid, make_rng, save_dataset, simulate_pair

    problem = make_problem(args.model, **_model_params(args.model_param))
    grid = TimeGrid(args.T, args.K, args.N)
    traj, obs = simulate_pair(problem.model, problem.obs, problem.init, grid, make_rng(args.seed, "simulate"), args.n_paths)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    header_grid = grid
    save_dataset(out / "dataset.bin", problem.name, header_grid, args.seed, traj.states, obs.obs)
    (out / "problem.json").write_text(json.dumps({"name": problem.name, "params": problem.params}, indent=2))
    write_observations_csv(out / "observations.csv", obs.obs)
    write_states_csv(out / "states.csv", traj.at_obs_times())
    print(f"wrote {args.n_paths} paths to {out}")
    return 0


def write_observations_csv(path, obs) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sequence", "k"] + [f"o_{i + 1}" for i in range(obs.shape[-1])])
        for s in range(obs.shape[0]):
            for k in range(obs.shape[1]):
                w.writerow([s, k + 1] + [repr(float(v)) for v in obs[s, k]])


def write_states_csv(path, states) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sequence", "k"] + [f"x_{i + 1}" for i in range(states.shape[-1])])
        for s in range(states.shape[0]):
            for k in range(states.shape[1]):
                w.writerow([s, k + 1] + [repr(float(v)) for v in states[s, k]])


def read_observations_csv(path):
    import numpy as np

    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    body = [[float(v) for v in r] for r in rows[1:] if r]
    arr = np.array(body)
    S, K = int(arr[:, 0].max()) + 1, int(arr[:, 1].max())
    obs = np.zeros((S, K, arr.shape[1] - 2))
    obs[arr[:, 0].astype(int), arr[:, 1].astype(int) - 1] = arr[:, 2:]
    return obs


def read_points_csv(path):
    import numpy as np

    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    start = 1 if rows and not _is_number(rows[0][0]) else 0
    return np.array([[float(v) for v in r] for r in rows[start:] if r])


def _is_number(s) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False


def _load_json_config(name):
    from .bench import config_dir

    path = Path(name)
    if not path.exists():
        path = config_dir() / f"{name}.json"
    if not path.exists():
        raise SystemExit(f"config {name!r} not found")
    return json.loads(path.read_text())


def cmd_train(args) -> int:
    from .deep import DeepConfig, train_filter
    from .models import problem_from_dict
    from .sim import TimeGrid, make_rng

    raw = _load_json_config(args.config) if args.config else {}
    T, K = 1.0, 10
    problem_params = _model_params(args.model_param)
    if "methods" in raw:
        # experiment config: take the entry for this method
        entry = next((m for m in raw["methods"] if m["method"] == args.method), None)
        if entry is None:
            raise SystemExit(f"config has no {args.method} entry")
        hyper = dict(entry.get("config", {}))
        T, K = raw["grid"]["T"], raw["grid"]["K"]
        problem_params = {**raw.get("problem", {}), **problem_params}
    else:
        hyper = dict(raw.get("config", raw))
        T, K = raw.get("grid", {}).get("T", T), raw.get("grid", {}).get("K", K)
        hyper.pop("grid", None)
    T = args.T if args.T is not None else T
    K = args.K if args.K is not None else K
    hyper["method"] = args.method
    cfg = DeepConfig.from_dict(hyper)
    problem = problem_from_dict(args.model, problem_params)
    grid = TimeGrid(float(T), int(K), 1)
    progress = lambda k, h: print(f"step {k}: {json.dumps(h, default=float)}", flush=True)  # noqa: E731
    filt = train_filter(problem, grid, cfg, make_rng(args.seed, "train", args.method), progress)
    out = Path(args.out) if args.out else Path(args.out_dir) / f"{args.model}_{args.method}"
    filt.save(out)
    print(f"saved checkpoint to {out}")
    return 0


def cmd_filter(args) -> int:
    import numpy as np

    from .bench import DeepRunner, EnkfRunner, KalmanRunner, PfRunner
    from .deep import DensityFilter
    from .models import problem_from_dict
    from .normalize import UnconditionalMoments
    from .sim import TimeGrid, load_dataset, make_rng

    header, states, obs = load_dataset(args.dataset)
    meta = json.loads((Path(args.dataset).parent / "problem.json").read_text())
    problem = problem_from_dict(meta["name"], meta["params"])
    g = header["grid"]
    grid = TimeGrid(g["T"], g["K"], 1)
    if obs.ndim == 2:
        obs = obs[None]
    m = args.method
    if m in ("kf", "ekf"):
        runner = KalmanRunner(m, problem, grid, m == "ekf")
    elif m == "enkf":
        runner = EnkfRunner(m, problem, grid, args.particles, args.substeps)
    elif m == "pf":
        runner = PfRunner(m, problem, grid, args.particles, args.substeps)
    else:
        filt = DensityFilter.load(m)
        moments = UnconditionalMoments(problem.model, problem.init, grid, seed=args.seed)
        runner = DeepRunner("deep", problem, grid, {"method": filt.mode}, {"method": args.normalization, "samples": args.samples}, moments)
        runner.filter = filt
    runner.start(obs, make_rng(args.seed, "filter"))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "filter_means.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        d = problem.model.state_dim
        w.writerow(["sequence", "k"] + [f"mean_{i + 1}" for i in range(d)])
        means = [runner.step(k).mean for k in range(1, grid.K + 1)]
        for s in range(obs.shape[0]):
            for k in range(grid.K):
                w.writerow([s, k + 1] + [repr(float(v)) for v in np.atleast_1d(means[k][s])])
    print(f"wrote {path}")
    return 0


def cmd_eval_density(args) -> int:
    from .deep import DensityFilter

    filt = DensityFilter.load(args.checkpoint)
    obs = read_observations_csv(args.obs)
    pts = read_points_csv(args.points)
    ks = [args.k] if args.k else list(range(1, min(filt.K, obs.shape[1]) + 1))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "log_density.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sequence", "k", "point", "log_density"])
        for k in ks:
            lp = filt.log_density(k, pts, obs)
            for s in range(obs.shape[0]):
                for i in range(pts.shape[0]):
                    w.writerow([s, k, i, repr(float(lp[s, i]))])
    print(f"wrote {path}")
    return 0


def cmd_bench(args) -> int:
    from .bench import load_named_config, run_experiment, timing_report
    from .metrics import write_metrics_csv

    if not args.config:
        raise SystemExit("bench needs --config")
    cfg = load_named_config(args.config)
    if args.seed:
        cfg.seed = args.seed
    if args.M is not None:
        cfg.evaluation["M"] = args.M
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records, manifest = run_experiment(cfg, out_dir=out)
    write_metrics_csv(records, out / "metrics.csv")
    manifest.save(out / "manifest.json")
    timing_report([manifest], out / "timing.csv")
    if manifest.failed:
        print(f"methods that diverged: {manifest.failed}")
    print(f"wrote {len(records)} metric rows to {out / 'metrics.csv'}")
    return 0


def cmd_report(args) -> int:
    from .bench import RunManifest, summarize, timing_report
    from .metrics import read_metrics_csv

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = [r for p in args.metrics for r in read_metrics_csv(p)]
    summary = summarize(records)
    lines = ["method,metric,time_average"]
    for (method, metric), v in sorted(summary.items()):
        lines.append(f"{method},{metric},{v!r}")
    text = "\n".join(lines) + "\n"
    (out / "report.csv").write_text(text, encoding="utf-8")
    print(text, end="")
    if args.manifest:
        print(timing_report([RunManifest.load(p) for p in args.manifest], out / "timing.csv"), end="")
    return 0


COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "filter": cmd_filter,
    "eval-density": cmd_eval_density,
    "bench": cmd_bench,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _set_threads(args.threads)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    return COMMANDS[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
