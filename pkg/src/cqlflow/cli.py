"""Command-line entry point: ``cqlflow <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 runtime failure, 3 inconclusive
diagnosis.
"""

from __future__ import annotations

import argparse
import itertools
import json
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import agents, envs, nn, runstore, tabular_cql, workflow
from .mdp_env import TabularPolicy, exact_policy_return, generate_dataset, read_dataset, write_dataset
from .plotting import PlotSpec, emit_plot
from .runlog import RunLog, config_hash

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_INCONCLUSIVE = 0, 1, 2, 3
ORACLE_BANNER = ("=" * 72 + "\n"
                 "GROUND-TRUTH EVALUATION: not part of the offline workflow.\n"
                 "Uses the simulator's dynamics; for acceptance testing and analysis only.\n"
                 + "=" * 72)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True, indent=2))


def dataset_id(data) -> str:
    return f"{data.mdp_id}-n{data.n_traj}-s{data.source_seed}"


# -- subcommands -------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    mdp = envs.make_mdp(args.mdp)
    behavior = envs.make_behavior(mdp, args.policy)
    data = generate_dataset(mdp, behavior, args.n_traj, args.seed)
    write_dataset(data, args.out)
    _emit({"dataset": str(args.out), "transitions": len(data), **data.header()})
    return EXIT_OK


def train_run(data_path, cfg, out_dir, oracle=False, registry_root=None) -> dict:
    """Train one config on a dataset file into ``out_dir``; registers the run when asked."""
    data = read_dataset(data_path)
    mdp = envs.make_mdp(data.mdp_id)
    out_dir = Path(out_dir)
    reg, entry = None, None
    if registry_root is not None:
        reg = runstore.ExperimentRegistry(registry_root)
        entry = reg.register(config_hash(cfg.to_dict()), dataset_id(data), run_id=out_dir.name)
    try:
        runstore.write_config(cfg, out_dir / "config.txt")
        res = agents.train(data, cfg, mdp, run_dir=out_dir, oracle=oracle)
        res.log.meta["run_id"] = out_dir.name
        res.log.meta["dataset_id"] = dataset_id(data)
        res.log.write(out_dir / "runlog.jsonl")
    except Exception:
        if reg is not None:
            reg.update(entry.run_id, "failed")
        raise
    if reg is not None:
        reg.update(entry.run_id, "completed", {"runlog": str(out_dir / "runlog.jsonl"),
                                               "config": str(out_dir / "config.txt")})
    return {"run_dir": str(out_dir), "records": len(res.log.records),
            "diverged_at": res.log.meta.get("diverged_at"), "checkpoints": len(res.checkpoints)}


def cmd_train(args) -> int:
    cfg = runstore.read_config(args.config, args.algo)
    _emit(train_run(args.data, cfg, args.out, args.oracle, args.registry))
    return EXIT_OK


def cmd_diagnose(args) -> int:
    logs = [RunLog.read(p) for p in args.runs]
    if len(logs) == 1:
        diag = workflow.diagnose_run(logs[0], args.window, args.drop_threshold, args.sustain)
    elif len(logs) == 2:
        if args.q_range is None:
            raise UsageError("comparing two runs needs --q-range")
        diag = workflow.detect_underfitting(logs[0], logs[1], args.q_range)
    else:
        raise UsageError("diagnose takes one run (overfitting) or two runs (small, large capacity)")
    out = diag.to_dict()
    out["recommendations"] = [r.to_dict() for r in workflow.recommend(diag)]
    _emit(out)
    return EXIT_INCONCLUSIVE if diag.verdict == "inconclusive" else EXIT_OK


def cmd_select(args) -> int:
    log = RunLog.read(args.run)
    if not log.checkpoints:
        raise RuntimeError("run log lists no checkpoints")
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        ref = workflow.select_from_log(log, args.actor_delayed, window=args.window)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    _emit(ref.to_dict())
    return EXIT_OK


def cmd_probe_capacity(args) -> int:
    log = RunLog.read(args.run)
    cls = runstore.CONFIG_CLASSES[log.algo]
    base = cls.from_dict(log.meta["config"])
    out = Path(args.out)
    paths = []
    for i, cfg in enumerate(workflow.capacity_probe_plan(base, args.dr3_beta)):
        label = "base" if i == 0 else ("dr3" if cfg.dr3_beta != base.dr3_beta else cfg.critic_tier)
        paths.append(str(runstore.write_config(cfg, out / f"{label}.txt")))
    _emit({"configs": paths})
    return EXIT_OK


def _trial_from_manifest(item, base_dir: Path) -> workflow.AlphaTrial:
    if "run" in item:
        log = RunLog.read(base_dir / item["run"])
        diag = workflow.diagnose_run(log)
        alpha = item.get("alpha", log.meta["config"]["alpha"])
        reg = item.get("final_cql_reg", float(log.series("cql_reg")[-1]))
        return workflow.AlphaTrial(float(alpha), diag, tuple(item.get("corrections", ())), reg)
    return workflow.AlphaTrial.from_dict(item)


def cmd_advise_alpha(args) -> int:
    path = Path(args.manifest)
    items = json.loads(path.read_text())
    history = [_trial_from_manifest(it, path.parent) for it in items]
    _emit(workflow.advise_alpha(history, factor=args.factor).to_dict())
    return EXIT_OK


def _sweep_job(job):
    data_path, cfg_dict, algo, out_dir, oracle, registry = job
    cfg = runstore.CONFIG_CLASSES[algo].from_dict(cfg_dict)
    try:
        return {"ok": True, **train_run(data_path, cfg, out_dir, oracle, registry)}
    except Exception as e:  # reported per run
        return {"ok": False, "run_dir": str(out_dir), "error": f"{type(e).__name__}: {e}"}


def parse_grid(items, algo) -> list:
    schema = runstore.config_schema(algo)
    axes = []
    for item in items:
        if "=" not in item:
            raise UsageError(f"grid entry {item!r} must look like key=v1,v2")
        key, vals = item.split("=", 1)
        if key not in schema:
            raise UsageError(f"unknown grid key {key!r}")
        axes.append([(key, runstore._coerce(v, schema[key], key)) for v in vals.split(",")])
    return [dict(combo) for combo in itertools.product(*axes)] if axes else [{}]


def cmd_sweep(args) -> int:
    base = runstore.read_config(args.config, args.algo)
    out = Path(args.out)
    jobs = []
    for i, over in enumerate(parse_grid(args.grid, base.algo)):
        cfg = base.replace(**over)
        tag = "-".join(f"{k}{v}" for k, v in over.items()) or "base"
        jobs.append((str(args.data), cfg.to_dict(), cfg.algo, str(out / "runs" / f"{i:03d}-{tag}"),
                     args.oracle, str(out)))
    n_workers = max(1, min(args.jobs or len(jobs), len(jobs)))
    if n_workers == 1:
        results = [_sweep_job(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(_sweep_job, jobs))
    _emit({"runs": results})
    return EXIT_OK if all(r["ok"] for r in results) else EXIT_RUNTIME


def cmd_verify_theorem1(args) -> int:
    out = open(args.out, "w") if args.out else sys.stdout
    try:
        if args.suite:
            res = tabular_cql.theorem1_suite(args.suite, tuple(args.alpha), args.k, args.seed)
            out.write(json.dumps(res.to_dict(), sort_keys=True) + "\n")
            return EXIT_OK
        from .mdp_env import stationary_empirical_mdp
        mdp = envs.make_mdp(args.mdp)
        behavior = (tabular_cql.random_behavior(args.seed, mdp.n_states, mdp.n_actions)
                    if args.behavior == "random" else envs.make_behavior(mdp, args.behavior))
        emp = stationary_empirical_mdp(mdp, behavior)
        for alpha in args.alpha:
            run = tabular_cql.run_tabular_cql(emp, alpha, args.k)
            for rep in tabular_cql.check_theorem1(run, emp, alpha):
                out.write(json.dumps({"alpha": alpha, **json.loads(rep.to_json())}, sort_keys=True) + "\n")
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


def cmd_plot(args) -> int:
    logs = {}
    for p in args.runs:
        log = RunLog.read(p)
        logs[log.meta.get("run_id", Path(p).name)] = log
    series = [(rid, m) for rid in logs for m in args.metric]
    markers = [(s, f"step {s}") for s in args.marker]
    if args.mark_selected:
        for rid, log in logs.items():
            ref = workflow.select_from_log(log)
            markers.append((ref.step, f"selected {rid}"))
    spec = PlotSpec(series, y_label=", ".join(args.metric), markers=markers, title=args.title or "")
    csv_path, svg_path = emit_plot(spec, logs, args.out)
    _emit({"csv": str(csv_path), "svg": str(svg_path), "markers": [m[0] for m in markers]})
    return EXIT_OK


def cmd_eval_oracle(args) -> int:
    print(ORACLE_BANNER, file=sys.stderr)
    mdp = envs.make_mdp(args.mdp)
    net, _, step, _ = nn.load_checkpoint(args.checkpoint)
    policy = agents.policy_table(net, mdp.features)
    ret = exact_policy_return(mdp, TabularPolicy(policy.probs, "checkpoint"))
    _emit({"checkpoint": str(args.checkpoint), "step": step, "mdp": args.mdp, "oracle_return": ret,
           "offline_workflow": False})
    return EXIT_OK


# -- parser ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cqlflow", description="Offline diagnosis workflow for CQL and BRAC-v runs.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("gen-data", help="roll out a behavior policy into a dataset file")
    s.add_argument("--mdp", required=True, help="mdp id, e.g. distractor-grid-0")
    s.add_argument("--policy", default="default", help="uniform | eps:<e> | default")
    s.add_argument("--n-traj", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("train", help="train CQL or BRAC-v on a dataset")
    s.add_argument("--data", type=Path, required=True)
    s.add_argument("--config", type=Path, required=True)
    s.add_argument("--algo", choices=sorted(runstore.CONFIG_CLASSES))
    s.add_argument("--out", type=Path, required=True, help="run directory")
    s.add_argument("--registry", type=Path, help="registry root to record the run in")
    s.add_argument("--oracle", action="store_true", help="also log ground-truth returns (analysis only)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("diagnose", help="overfitting verdict (one run) or underfitting test (two runs)")
    s.add_argument("runs", nargs="+", type=Path)
    s.add_argument("--q-range", type=float, help="reward-implied Q range for the absolute error test")
    s.add_argument("--window", type=int, default=5)
    s.add_argument("--drop-threshold", type=float, default=0.1)
    s.add_argument("--sustain", type=int, default=3)
    s.set_defaults(func=cmd_diagnose)

    s = sub.add_parser("select", help="pick a policy checkpoint from a run's metrics")
    s.add_argument("run", type=Path)
    s.add_argument("--actor-delayed", action="store_true", help="take the checkpoint after the peak")
    s.add_argument("--window", type=int, default=5)
    s.set_defaults(func=cmd_select)

    s = sub.add_parser("probe-capacity", help="write configs for the capacity probe reruns")
    s.add_argument("run", type=Path)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--dr3-beta", type=float, default=0.01)
    s.set_defaults(func=cmd_probe_capacity)

    s = sub.add_parser("advise-alpha", help="alpha recommendation from a JSON history manifest")
    s.add_argument("manifest", type=Path)
    s.add_argument("--factor", type=float, default=10.0)
    s.set_defaults(func=cmd_advise_alpha)

    s = sub.add_parser("sweep", help="train a config grid in parallel worker processes")
    s.add_argument("--data", type=Path, required=True)
    s.add_argument("--config", type=Path, required=True)
    s.add_argument("--algo", choices=sorted(runstore.CONFIG_CLASSES))
    s.add_argument("--grid", nargs="*", default=[], help="key=v1,v2 ...")
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--jobs", type=int, help="worker processes (default: one per run)")
    s.add_argument("--oracle", action="store_true")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("verify-theorem1", help="tabular CQL non-decrease check, JSONL reports")
    s.add_argument("--mdp", default="random-0-s5-a3")
    s.add_argument("--behavior", default="random", help="random | uniform | eps:<e>")
    s.add_argument("--alpha", type=float, nargs="+", default=[1.0])
    s.add_argument("--k", type=int, default=50)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--suite", type=int, help="run the random-MDP suite with this many instances")
    s.add_argument("--out", type=Path)
    s.set_defaults(func=cmd_verify_theorem1)

    s = sub.add_parser("plot", help="CSV + SVG of logged metrics")
    s.add_argument("runs", nargs="+", type=Path)
    s.add_argument("--metric", nargs="+", default=["avg_dataset_q"])
    s.add_argument("--marker", type=int, nargs="*", default=[], help="extra vertical lines at these steps")
    s.add_argument("--mark-selected", action="store_true", help="mark each run's selected checkpoint")
    s.add_argument("--title")
    s.add_argument("--out", type=Path, required=True, help="output path stem")
    s.set_defaults(func=cmd_plot)

    s = sub.add_parser("eval-oracle", help="ground-truth return of a policy checkpoint (testing only)")
    s.add_argument("checkpoint", type=Path)
    s.add_argument("--mdp", required=True)
    s.set_defaults(func=cmd_eval_oracle)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "func", None):
            raise UsageError("missing subcommand; see cqlflow --help")
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (runstore.ConfigError, KeyError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())
