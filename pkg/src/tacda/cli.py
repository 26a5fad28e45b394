"""Command-line entry point: ``tacda <subcommand> ...``.

Exit codes: 0 on success, 1 on invalid input or I/O failures, 2 on usage
errors (argparse's own convention).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import gradcheck as gc
from .benchmark import VARIANTS, desk_config, run_benchmark
from .checkpoint import Checkpoint, CheckpointError, checkpoint_load, checkpoint_save
from .config import ConfigError, dump_json, load_config
from .data import Dataset, ingest
from .metrics import evaluate
from .pipeline import RunReport, adapt, predict, pretrain
from .stages import (Stage, cluster_variance, fit_health_index, hi_second_derivative, kmeans_softdtw,
                     label_source_stages, rank_stages)

log = logging.getLogger("tacda")


def _run_config(args):
    cfg = load_config(getattr(args, "config", None))
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def _artifact(run_cfg, **payload) -> dict:
    return {**payload, "config": run_cfg.resolved(), "seed": run_cfg.seed}


# ----------------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------------

def cmd_ingest(args):
    run_cfg = _run_config(args)
    sensors = args.sensors if args.sensors else run_cfg.data.sensors
    cap = args.cap if args.cap is not None else run_cfg.data.rul_cap
    window = args.window if args.window is not None else run_cfg.data.window
    stride = args.stride if args.stride is not None else run_cfg.data.stride
    ds = ingest(args.input, sensors, cap, window, stride, domain=args.domain)
    ds.manifest["config"] = run_cfg.resolved()
    ds.save(args.out)
    print(f"wrote {len(ds)} windows of shape {ds.values.shape[1:]} to {args.out}")
    return 0


def cmd_synth(args):
    run_cfg = _run_config(args)
    synth = run_cfg.synth_config()
    from .data import synth_generate

    source, target, stages = synth_generate(synth, run_cfg.adapt_config().stage_bounds)
    out = Path(args.out)
    for ds in (source, target):
        ds.manifest["config"] = run_cfg.resolved()
    source.save(out / "source")
    target.unlabeled().save(out / "target")
    target.save(out / "target_eval")
    dump_json(_artifact(run_cfg, source=stages["source"].tolist(), target=stages["target"].tolist()),
              out / "true_stages.json")
    print(f"wrote source ({len(source)}), target ({len(target)}) and target_eval to {out}")
    return 0


def cmd_stages(args):
    run_cfg = _run_config(args)
    ds = Dataset.load(args.source)
    if not ds.labeled:
        raise ValueError(f"{args.source} has no labels; stage labeling needs life fractions")
    weights, hi, est = fit_health_index(ds.values, ds.rul)
    curve = hi_second_derivative(ds.rul, hi, args.bins, args.sigma)
    assignment = label_source_stages(ds.life_fraction, run_cfg.adapt_config().stage_bounds)
    dump_json(_artifact(run_cfg, stages=assignment.stages.tolist(), counts=assignment.counts(),
                        provenance=assignment.provenance, hi_weights=weights.tolist(),
                        hi_r2=est.r2_, hi_low_r2=bool(est.low_r2_), curve=curve.to_dict()), args.out)
    print(f"stage counts {assignment.counts()}; wrote {args.out}")
    return 0


def cmd_cluster(args):
    run_cfg = _run_config(args)
    ds = Dataset.load(args.data)
    res = kmeans_softdtw(ds.values, args.k, args.gamma, args.max_iter, run_cfg.seed)
    stats = [cluster_variance(ds.values[res.assignments == c]) for c in range(res.k)]
    payload = dict(assignments=res.assignments.tolist(), k=res.k, iterations=res.iterations_run,
                   distance_evals=res.distance_evals, n_reseeds=res.n_reseeds,
                   inertia_trace=res.inertia_trace,
                   cluster_variance=[s.total_variance for s in stats],
                   sensor_variance=[s.sensor_variance.tolist() for s in stats],
                   counts=[s.count for s in stats])
    if res.k == len(Stage):
        mapping, low = rank_stages(payload["cluster_variance"])
        payload["cluster_to_stage"] = {str(c): s.name for c, s in mapping.items()}
        payload["low_confidence"] = low
    dump_json(_artifact(run_cfg, **payload), args.out)
    print(f"{res.iterations_run} iterations, {res.distance_evals} distance evaluations; wrote {args.out}")
    return 0


def cmd_pretrain(args):
    run_cfg = _run_config(args)
    cfg = run_cfg.adapt_config()
    ds = Dataset.load(args.source)
    if not ds.labeled:
        raise ValueError(f"{args.source} is unlabeled; pretraining needs RUL labels")
    bundle, trace, opts = pretrain(ds.values, ds.rul, cfg)
    meta = {"stage": "pretrain", "rul_cap": ds.manifest.get("rul_cap")}
    checkpoint_save(Checkpoint(bundle, opts, run_cfg.resolved(), cfg.pretrain_hash(), meta), args.out)
    report = RunReport(cfg.to_dict(), cfg.config_hash(), cfg.seed, pretrain=trace)
    dump_json(_artifact(run_cfg, **report.to_dict()), Path(str(args.out) + ".report.json"))
    print(f"final pretrain MSE {trace['mse'][-1]:.6f}; wrote {args.out}")
    return 0


def cmd_adapt(args):
    run_cfg = _run_config(args)
    overrides = {}
    if args.lam is not None:
        overrides["lam"] = args.lam
    if args.skip_round2:
        overrides["skip_round2"] = True
    run_cfg.adapt.update(overrides)
    cfg = run_cfg.adapt_config()
    ckpt = checkpoint_load(args.pretrained, expected_config_hash=cfg.pretrain_hash())
    source, target = Dataset.load(args.source), Dataset.load(args.target)
    if not source.labeled:
        raise ValueError(f"{args.source} is unlabeled; the second round needs source life fractions")
    result = adapt(ckpt.bundle, source.values, source.life_fraction, target.values, cfg)
    meta = {"stage": "adapt", "rul_cap": ckpt.meta.get("rul_cap")}
    checkpoint_save(Checkpoint(result.bundle, result.optimizers, run_cfg.resolved(), cfg.config_hash(),
                               meta), args.out)
    dump_json(_artifact(run_cfg, **result.report.to_dict()), Path(str(args.out) + ".report.json"))
    print(f"stage pairs {result.report.stages.get('pairs', [])}; wrote {args.out}")
    return 0


def _delta_table(a: dict, b: dict) -> str:
    lines = [f"{'metric':<8} {'this':>12} {'other':>12} {'delta':>12}"]
    for k in ("rmse", "score"):
        lines.append(f"{k:<8} {a[k]:>12.4f} {b[k]:>12.4f} {a[k] - b[k]:>+12.4f}")
    return "\n".join(lines)


def cmd_evaluate(args):
    run_cfg = _run_config(args)
    ckpt = checkpoint_load(args.model)
    ds = Dataset.load(args.data)
    if not ds.labeled:
        raise ValueError(f"{args.data} has no RUL labels to evaluate against")
    cap = ds.manifest.get("rul_cap") or ckpt.meta.get("rul_cap")
    encoder = args.encoder
    if encoder == "auto":
        encoder = "source" if ckpt.meta.get("stage") == "pretrain" else "target"
    report = evaluate(ds.rul, predict(ckpt.bundle, ds.values, encoder), cap)
    payload = _artifact(run_cfg, **report.to_dict(), encoder=encoder, model=str(args.model),
                        data=str(args.data), model_config=ckpt.config)
    dump_json(payload, args.out)
    print(f"RMSE {report.rmse:.4f}  Score {report.score:.2f}  (n={report.n}, encoder={encoder})")
    if args.compare:
        other = json.loads(Path(args.compare).read_text())
        print(_delta_table(payload, other))
    return 0


def cmd_gradcheck(args):
    results = gc.run_all(quick=args.quick)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 0 if not failed else 1


def cmd_benchmark(args):
    run_cfg = _run_config(args)
    n_seeds = args.seeds if args.seeds is not None else run_cfg.benchmark.seeds
    drop = args.drop_target_stage or run_cfg.benchmark.drop_target_stage
    cfg = desk_config(**run_cfg.adapt, seed=run_cfg.seed)
    report = run_benchmark(run_cfg.synth_config(), cfg, n_seeds, drop)
    print(report.table())
    if args.out:
        artifact = _artifact(run_cfg, benchmark=report.to_dict())
        artifact["config"]["adapt"] = cfg.to_dict()
        dump_json(artifact, args.out)
    return 0


# ----------------------------------------------------------------------------
# parser
# ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tacda", description="Cross-domain RUL adaptation toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    def add(name, fn, help_, config=True):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(func=fn)
        if config:
            sp.add_argument("--config", help="run config file (key = value with [sections])")
            sp.add_argument("--seed", type=int, help="global seed; overrides the config")
        return sp

    sp = add("ingest", cmd_ingest, "parse and window a C-MAPSS text file")
    sp.add_argument("--input", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--sensors", type=int, nargs="+", help="1-based sensor indices")
    sp.add_argument("--cap", type=float)
    sp.add_argument("--window", type=int)
    sp.add_argument("--stride", type=int)
    sp.add_argument("--domain", choices=("source", "target"), default="source")

    sp = add("synth", cmd_synth, "generate a synthetic source/target pair")
    sp.add_argument("--out", required=True)

    sp = add("stages", cmd_stages, "label source stages and compute the health-index curve")
    sp.add_argument("--source", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--bins", type=int, default=100)
    sp.add_argument("--sigma", type=float, default=2.0)

    sp = add("cluster", cmd_cluster, "soft-DTW k-means on windows")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--k", type=int, default=3)
    sp.add_argument("--gamma", type=float, default=0.1)
    sp.add_argument("--max-iter", type=int, default=50)

    sp = add("pretrain", cmd_pretrain, "train source encoder and predictor")
    sp.add_argument("--source", required=True)
    sp.add_argument("--out", required=True)

    sp = add("adapt", cmd_adapt, "run both adaptation rounds from a pretrained checkpoint")
    sp.add_argument("--source", required=True)
    sp.add_argument("--target", required=True)
    sp.add_argument("--pretrained", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--skip-round2", action="store_true")
    sp.add_argument("--lambda", dest="lam", type=float)

    sp = add("evaluate", cmd_evaluate, "RMSE and Score of a checkpoint on labeled data")
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--encoder", choices=("auto", "source", "target"), default="auto")
    sp.add_argument("--compare", help="another evaluation report to diff against")

    sp = add("gradcheck", cmd_gradcheck, "run the oracle and finite-difference suites", config=False)
    sp.add_argument("--quick", action="store_true", help="fewer random instances")

    sp = add("benchmark", cmd_benchmark, "ablation benchmark on synthetic data: " + ", ".join(VARIANTS)
             + " (desk-scale training settings; [adapt] keys override them)")
    sp.add_argument("--seeds", type=int)
    sp.add_argument("--drop-target-stage", choices=[s.name for s in Stage])
    sp.add_argument("--out")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError, CheckpointError, ConfigError, KeyError) as exc:
        print(f"tacda {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
