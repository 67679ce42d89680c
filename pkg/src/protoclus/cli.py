"""``protoclus`` command-line entry point.

Exit codes: 0 success, 2 usage or config error, 3 data or compatibility
error, 4 numeric failure.
"""

import argparse
import csv
import datetime
import json
import os
import sys
import warnings
from dataclasses import asdict

import numpy as np

from . import datagen
from .benchmark import ABLATIONS, BENCHMARK_SPEC, CSV_FIELDS, run_ablation
from .config import CLUSTER_BRANCHES, CLUSTERING_STRATEGIES, RunConfig
from .encoder_model import load_model, save_model, train
from .errors import (ConfigError, ConvergenceWarning, EvalError, FormatError, NonFiniteError,
                     SplitError, ZeroVectorError)
from .evalkit import dump_metrics, evaluate
from .ot_assign import AssignmentProblem, solve_gcg
from .proto_bank import save_bank

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
ABLATE_FLAGS = ("no-pcl", "no-pdl", "no-clustering")


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _limit_threads():
    raw = os.environ.get("PROTOCLUS_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise CliError(f"PROTOCLUS_THREADS must be a positive integer, got {raw!r}", EXIT_USAGE)
    # the compiled Sinkhorn kernel is serial; BLAS pools are the only parallelism
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def _read_json(path, what):
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise CliError(f"cannot read {what} {path}: {exc.strerror}", EXIT_USAGE)
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}",
                       EXIT_USAGE)


def _load_config(args):
    data = _read_json(args.config, "config") if getattr(args, "config", None) else {}
    try:
        cfg = RunConfig.from_dict(data)
        changes = {}
        for name in ("epochs", "seed", "lr", "batch_size"):
            if getattr(args, name, None) is not None:
                changes[name] = getattr(args, name)
        if getattr(args, "clustering_strategy", None):
            changes["clustering_strategy"] = args.clustering_strategy
        if getattr(args, "cluster_branch", None):
            changes["cluster_branch"] = args.cluster_branch
        for flag in getattr(args, "ablate", None) or []:
            if flag == "no-pcl":
                changes["enable_pcl"] = False
            elif flag == "no-pdl":
                changes["enable_pdl"] = False
            else:
                changes.update(enable_pcl=False, enable_pdl=False, cluster_branch="none")
        if changes.get("enable_pcl") is False and changes.get("enable_pdl") is False:
            changes.setdefault("cluster_branch", "none")
        return cfg.replace(**changes) if changes else cfg
    except ConfigError as exc:
        raise CliError(f"invalid config: {exc}", EXIT_USAGE)


def _load_dataset(path):
    if not os.path.isdir(path):
        raise CliError(f"dataset directory not found: {path}", EXIT_DATA)
    return datagen.load(path)


def cmd_gen_data(args):
    raw = _read_json(args.spec, "spec file")
    try:
        spec = datagen.GenSpec.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid spec {args.spec}: {exc}", EXIT_USAGE)
    ds = datagen.generate(spec)
    datagen.save(ds, args.out)
    counts = {name: len(ds.indices(name)) for name in datagen.SPLITS}
    print(f"wrote {ds.num_samples} samples ({ds.space.num_attrs} attrs x {ds.space.num_objs} objs, "
          f"{len(ds.space.seen)} seen / {len(ds.space.unseen)} unseen pairs; "
          f"train {counts['train']}, val {counts['val']}, test {counts['test']}) to {args.out}")
    return EXIT_OK


def _val_auc(ds, cfg):
    def fn(params):
        try:
            return evaluate(params, ds, "closed", tau=cfg.tau_cls, split="val").auc
        except EvalError:
            return None
    return fn


def cmd_train(args):
    cfg = _load_config(args)
    ds = _load_dataset(args.data)
    os.makedirs(args.out, exist_ok=True)
    log_path = os.path.join(args.out, "train_log.jsonl")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        result = train(cfg, ds, eval_fn=_val_auc(ds, cfg))
    with open(log_path, "w") as fh:
        for entry in result.log:
            line = {"timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(),
                    "config_hash": cfg.config_hash(), **entry}
            fh.write(json.dumps(line, sort_keys=True) + "\n")
    save_model(result.params, os.path.join(args.out, "model.cpmd"))
    for br, bank in result.banks.items():
        save_bank(bank, os.path.join(args.out, f"bank_{br}.pbnk"))
    with open(os.path.join(args.out, "config.json"), "w") as fh:
        fh.write(cfg.canonical_json() + "\n")
    last = result.log[-1]
    print(f"trained {cfg.epochs} epochs (config {cfg.config_hash()}): "
          f"l_bas {last['l_bas']:.4f}, l_pcl {last['l_pcl']:.4f}, l_pdl {last['l_pdl']:.4f}; "
          f"checkpoint in {args.out}")
    return EXIT_OK


def cmd_eval(args):
    ckpt = args.checkpoint
    model_path = os.path.join(ckpt, "model.cpmd") if os.path.isdir(ckpt) else ckpt
    cfg_path = os.path.join(os.path.dirname(model_path), "config.json")
    if not os.path.exists(model_path):
        raise CliError(f"checkpoint not found: {model_path}", EXIT_DATA)
    params = load_model(model_path)
    cfg = _load_config(argparse.Namespace(config=cfg_path if os.path.exists(cfg_path) else None))
    ds = _load_dataset(args.data)
    want = (ds.X.shape[1], ds.space.num_attrs, ds.space.num_objs)
    have = (params.D_raw, params.M, params.N_obj)
    if want != have:
        raise CliError(f"checkpoint (D_raw, M, N_obj) = {have} does not match dataset {want}",
                       EXIT_DATA)
    worlds = ("closed", "open") if args.world == "both" else (args.world,)
    reports = []
    for world in worlds:
        m = evaluate(params, ds, world, calibration=not args.no_calibration, tau=cfg.tau_cls,
                     pooling=args.pooling)
        reports.append(json.loads(dump_metrics(m, world, cfg.config_hash())))
    out = reports[0] if len(reports) == 1 else reports
    text = json.dumps(out, sort_keys=True)
    print(text)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    return EXIT_OK


def _matrix(data, key, path):
    try:
        m = np.asarray(data[key], dtype=np.float64)
    except KeyError:
        raise CliError(f"{path}: missing key {key!r}", EXIT_USAGE)
    except (TypeError, ValueError):
        raise CliError(f"{path}: {key!r} must be a rectangular numeric matrix", EXIT_USAGE)
    if m.ndim != 2:
        raise CliError(f"{path}: {key!r} must be a 2-D matrix", EXIT_USAGE)
    return m


def cmd_solve_ot(args):
    data = _read_json(args.problem, "problem file")
    if not isinstance(data, dict):
        raise CliError(f"{args.problem}: expected a JSON object", EXIT_USAGE)
    Q = _matrix(data, "Q", args.problem)
    S = _matrix(data, "S", args.problem)
    kappa = 0.0 if args.kappa0 else float(data.get("kappa", 1.0))
    epsilon = float(data.get("epsilon", 0.05))
    try:
        prob = AssignmentProblem(Q, S, kappa=kappa, epsilon=epsilon)
    except (FormatError, ConfigError) as exc:
        raise CliError(str(exc), EXIT_USAGE)
    except ValueError as exc:
        raise CliError(f"invalid assignment problem: {exc}", EXIT_DATA)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        plan = solve_gcg(prob, max_outer=args.max_outer)
    out = {"L": plan.L.tolist(), "hard": plan.labels.tolist()}
    out["trace"] = [float(v) for v in plan.objective_trace] if args.trace else []
    text = json.dumps(out)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)
    return EXIT_OK


def cmd_ablate(args):
    base = _load_config(args)
    variants = ABLATIONS
    if args.grid:
        variants = _read_json(args.grid, "grid file")
        if not isinstance(variants, dict) or not all(isinstance(v, dict) for v in variants.values()):
            raise CliError(f"{args.grid}: expected an object mapping names to config overrides",
                           EXIT_USAGE)
        for name, ch in variants.items():
            try:
                base.replace(**ch)
            except ConfigError as exc:
                raise CliError(f"variant {name}: {exc}", EXIT_USAGE)
    spec = BENCHMARK_SPEC
    dataset = None
    if args.data:
        dataset = _load_dataset(args.data)
    elif args.spec:
        try:
            spec = datagen.GenSpec.from_dict({**asdict(BENCHMARK_SPEC), **_read_json(args.spec, "spec file")})
        except (TypeError, ValueError) as exc:
            raise CliError(f"invalid spec {args.spec}: {exc}", EXIT_USAGE)
    worlds = ("closed", "open") if args.world == "both" else (args.world,)
    rows = run_ablation(variants, range(args.seeds), spec=spec, base=base, dataset=dataset,
                        worlds=worlds)
    summary = {}
    for r in rows:
        summary.setdefault((r["variant"], r["world"]), []).append(r)
    for (name, world), rs in summary.items():
        mean = {k: float(np.mean([r[k] for r in rs]))
                for k in ("auc", "best_hm", "best_seen", "best_unseen", "solver_warnings")}
        rows.append({"variant": name, "seed": "mean", "world": world, **mean,
                     "config_hash": rs[0]["config_hash"] if len(rs) == 1 else ""})
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})
    finally:
        if fh is not sys.stdout:
            fh.close()
    return EXIT_OK


def _add_config_args(p):
    p.add_argument("--config", help="RunConfig JSON file")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--ablate", nargs="+", choices=ABLATE_FLAGS, metavar="FLAG",
                   help="disable parts of the objective: " + ", ".join(ABLATE_FLAGS))
    p.add_argument("--clustering-strategy", choices=CLUSTERING_STRATEGIES)
    p.add_argument("--cluster-branch", choices=CLUSTER_BRANCHES)


def build_parser():
    parser = argparse.ArgumentParser(prog="protoclus", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic compositional dataset")
    p.add_argument("--spec", required=True, help="GenSpec JSON file")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train an encoder with prototype clustering")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="checkpoint directory")
    _add_config_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="closed/open-world metrics for a checkpoint")
    p.add_argument("--checkpoint", required=True, help="checkpoint directory or model.cpmd file")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--world", choices=("closed", "open", "both"), default="closed")
    p.add_argument("--no-calibration", action="store_true",
                   help="skip the open-world feasibility filter")
    p.add_argument("--pooling", choices=("mean", "max"), default="mean")
    p.add_argument("--out", help="also write the metrics JSON here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("solve-ot", help="solve one prototype assignment problem")
    p.add_argument("--problem", required=True, help='JSON {"Q", "S", "kappa", "epsilon"}')
    p.add_argument("--trace", action="store_true", help="emit the outer objective trace")
    p.add_argument("--kappa0", action="store_true", help="ignore kappa and solve plain entropic OT")
    p.add_argument("--max-outer", type=int, default=10)
    p.add_argument("--out", help="write the solution here instead of stdout")
    p.set_defaults(func=cmd_solve_ot)

    p = sub.add_parser("ablate", help="run a grid of configs and emit a CSV comparison")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--data", help="fixed dataset directory (default: regenerate per seed)")
    src.add_argument("--spec", help="GenSpec overrides for the per-seed benchmark data")
    p.add_argument("--grid", help="JSON object of variant name -> config overrides")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--world", choices=("closed", "open", "both"), default="closed")
    p.add_argument("--out", help="CSV path (default stdout)")
    _add_config_args(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        limits = _limit_threads()
        try:
            return args.func(args)
        finally:
            if limits is not None:
                limits.unregister()
    except CliError as exc:
        print(f"protoclus: error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"protoclus: error: invalid config: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, SplitError, EvalError) as exc:
        print(f"protoclus: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteError, ZeroVectorError, FloatingPointError) as exc:
        print(f"protoclus: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
