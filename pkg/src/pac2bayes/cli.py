"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import statistics
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import bounds, evaluation
from . import experiment as exp
from .grad import NumericFailure
from .scenarios import SCENARIOS, UnknownScenario, generate, get_scenario, training_data
from .trainer import TrainingError

log = logging.getLogger("pac2bayes")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _dump(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# subcommands ---------------------------------------------------------------

def cmd_generate(args):
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{args.scenario}_seed{args.seed}.csv"
    generate(args.scenario, args.seed, path, args.n_train)
    print(path)


RUN_FLAGS = ("scenario", "method", "seed", "steps", "lr", "batch", "mc_pairs",
             "ensemble_size", "epsilon", "n_train", "test_size", "samples")


def _run_config(args) -> exp.RunConfig:
    base = {}
    if args.config:
        try:
            base = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as err:
            raise UsageError(f"cannot read config {args.config}: {err}") from err
    for key in RUN_FLAGS:
        val = getattr(args, key, None)
        if val is not None:
            base[key] = val
    for key in ("scenario", "method"):
        if key not in base:
            raise UsageError(f"--{key} is required (flag or config file)")
    try:
        return exp.RunConfig.from_dict(base)
    except (ValueError, TypeError, UnknownScenario) as err:
        raise UsageError(str(err)) from err


def cmd_run(args):
    cfg = _run_config(args)
    report = exp.run(cfg, args.out_dir)
    m = report["metrics"]
    print(f"{cfg.scenario} {cfg.method} seed={cfg.seed} test_ll={m['test_ll']:.4f} "
          f"vhat_h={m['vhat_h_sum']:.4f}")


def cmd_gaps(args):
    toy = bounds.DiscreteToyModel.load(args.toy) if args.toy else bounds.reference_toy()
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = toy.sample(args.n_data, np.random.default_rng(args.seed)) if args.n_data else None
    summary = bounds.gap_summary(toy, args.resolution, data=data)
    summary["toy"] = toy.to_dict()
    summary["resolution"] = args.resolution
    summary["seed"] = args.seed
    if toy.size == 2:
        (out / "gaps.csv").write_text(bounds.gap_curve_csv(bounds.gap_curve(toy, args.resolution)))
    _dump(out / "gaps.json", summary)
    g = summary["gaps"]
    print(f"kl gap {g['kl']:.4f}  jensen gap {g['jensen']:.4f}  jensen2 gap {g['jensen2']:.4f}")


def cmd_perturb(args):
    try:
        report = exp.read_report(args.report)
    except (OSError, json.JSONDecodeError) as err:
        raise UsageError(f"cannot read run report {args.report}: {err}") from err
    if "mode" not in report or "model" not in report:
        raise UsageError("run report has no parameter snapshot")
    cfg = exp.RunConfig.from_dict(report["config"]).resolved()
    sc = cfg.scenario_obj()
    x, y = training_data(sc, cfg.seed)
    model = exp.report_model(report)
    sens = evaluation.perturbation_sensitivity(np.asarray(report["mode"]), model, x, y, args.n_perturb,
                                               args.variance, np.random.default_rng(args.seed))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.report).stem
    counts, edges = sens.histogram(args.bins)
    with open(out / f"{stem}_perturb_hist.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lo", "hi", "count"])
        for lo, hi, c in zip(edges[:-1], edges[1:], counts):
            w.writerow([repr(float(lo)), repr(float(hi)), int(c)])
    info = sens.to_dict() | {"variance": args.variance, "seed": args.seed, "report": str(args.report)}
    _dump(out / f"{stem}_perturb.json", info)
    print(f"coefficient {sens.coefficient:.3f}%")


def _sweep_job(cfg_dict, out_dir):
    rep = exp.run(exp.RunConfig.from_dict(cfg_dict), out_dir)
    return rep["method"], rep["config"]["seed"], rep["metrics"]["test_ll"]


def cmd_sweep(args):
    methods = args.methods.split(",")
    seeds = [int(s) for s in args.seeds.split(",")]
    jobs = []
    for method in methods:
        for seed in seeds:
            d = {"scenario": args.scenario, "method": method, "seed": seed}
            if args.n_train:
                d["n_train"] = args.n_train
            if args.steps:
                d["steps"] = args.steps
            jobs.append(exp.RunConfig.from_dict(d).to_dict())
    with ProcessPoolExecutor(max_workers=args.jobs) as pool:
        results = list(pool.map(_sweep_job, jobs, [args.out_dir] * len(jobs)))
    table = {}
    for method, seed, ll in results:
        table.setdefault(method, {})[str(seed)] = ll
    summary = {m: {"per_seed": v, "median": statistics.median(v.values())} for m, v in table.items()}
    Path(args.out_dir).mkdir(parents=True, exist_ok=True)
    _dump(Path(args.out_dir) / f"{args.scenario}_sweep.json", summary)
    for m, v in summary.items():
        print(f"{m:10s} median test_ll {v['median']:.3f}")


# parser --------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="pac2bayes", description="Second-order PAC-Bayes learning toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    gen = sub.add_parser("generate", help="write a scenario dataset")
    gen.add_argument("--scenario", required=True, choices=sorted(SCENARIOS))
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--n-train", type=int)
    gen.add_argument("--out-dir", default=".")
    gen.set_defaults(func=cmd_generate)

    run = sub.add_parser("run", help="train and evaluate one method")
    run.add_argument("--config", help="JSON run config; flags override it")
    run.add_argument("--scenario", choices=sorted(SCENARIOS))
    run.add_argument("--method", choices=exp.METHODS)
    run.add_argument("--seed", type=int)
    run.add_argument("--steps", type=int)
    run.add_argument("--lr", type=float)
    run.add_argument("--batch", type=int)
    run.add_argument("--mc-pairs", type=int)
    run.add_argument("--ensemble-size", type=int)
    run.add_argument("--epsilon", type=float)
    run.add_argument("--n-train", type=int)
    run.add_argument("--test-size", type=int)
    run.add_argument("--samples", type=int)
    run.add_argument("--out-dir", default=".")
    run.set_defaults(func=cmd_run)

    gaps = sub.add_parser("gaps", help="exact gap analysis on a finite toy")
    gaps.add_argument("--toy", help="toy model JSON (default: built-in reference toy)")
    gaps.add_argument("--resolution", type=float, default=1e-3)
    gaps.add_argument("--n-data", type=int, default=50, help="draws for the fixed point and certificates; 0 skips")
    gaps.add_argument("--seed", type=int, default=0)
    gaps.add_argument("--out-dir", default=".")
    gaps.set_defaults(func=cmd_gaps)

    per = sub.add_parser("perturb", help="flatness of a trained solution")
    per.add_argument("--report", required=True)
    per.add_argument("--n-perturb", type=int, default=100)
    per.add_argument("--variance", type=float, default=0.01)
    per.add_argument("--bins", type=int, default=20)
    per.add_argument("--seed", type=int, default=0)
    per.add_argument("--out-dir", default=".")
    per.set_defaults(func=cmd_perturb)

    sw = sub.add_parser("sweep", help="run several methods and seeds in parallel")
    sw.add_argument("--scenario", required=True, choices=sorted(SCENARIOS))
    sw.add_argument("--methods", default="map,vi,pac2,pac2h")
    sw.add_argument("--seeds", default="0,1,2")
    sw.add_argument("--n-train", type=int)
    sw.add_argument("--steps", type=int)
    sw.add_argument("--jobs", type=int, default=None)
    sw.add_argument("--out-dir", default=".")
    sw.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except (TrainingError, NumericFailure, bounds.InfiniteCodeLength) as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return 2
    except (ValueError, UnknownScenario, bounds.UnsupportedSize) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
