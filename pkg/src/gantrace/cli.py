"""Command-line front end for the training / influence / cleansing pipeline.

Exit codes: 0 on success, 1 on usage or configuration errors (including a
trace whose fingerprint does not match the config), 2 on numerical failure
(divergence or non-finite values).
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .autodiff import NonFiniteError
from .config import ExperimentConfig, load_config, synthesize_dataset, trace_fingerprint
from .datasets import dataset_checksum
from .experiments import (
    _stream,
    prepare_seed_run,
    run_data_cleansing,
    run_estimation_accuracy,
    select_harmful,
    write_accuracy_report,
    write_cleansing_curves,
    write_cleansing_report,
    write_scatter_data,
)
from .influence import infer_linear_influence, save_influence_csv, save_influence_json
from .metrics import MetricSpec, build_query_vector, metric_value
from .oracle import counterfactual_retrain
from .training import DivergenceError, load_trace, run_training, save_trace, trace_checksum


class UsageError(RuntimeError):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad flags; the pipeline reserves 2 for
    # numerical failure, so remap usage problems to exit code 1.
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="gantrace",
                     description="Replayable adversarial training with influence estimation")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="experiment config file")
        p.add_argument("--seed", type=int, default=None, help="override the training seed")

    p_train = sub.add_parser("train", help="run training and store the trace")
    common(p_train)
    p_train.add_argument("--out", required=True, help="trace output directory")

    p_infl = sub.add_parser("influence", help="estimate influence from a stored trace")
    common(p_infl)
    p_infl.add_argument("--trace", required=True)
    p_infl.add_argument("--metric", default=None, help="metric kind (default: first configured)")
    p_infl.add_argument("--k", type=int, default=None, help="epochs to trace back")
    p_infl.add_argument("--targets", type=int, default=None,
                        help="score a random target subset of this size")
    p_infl.add_argument("--out", required=True, help="output CSV path")

    p_oracle = sub.add_parser("oracle", help="counterfactual ground truth for targets")
    common(p_oracle)
    p_oracle.add_argument("--trace", required=True)
    p_oracle.add_argument("--targets", type=int, required=True)
    p_oracle.add_argument("--k", type=int, default=None)
    p_oracle.add_argument("--out", required=True, help="output CSV path")

    p_acc = sub.add_parser("accuracy", help="estimation-accuracy experiment")
    common(p_acc)
    p_acc.add_argument("--k", default=None, help="comma-separated trace-back depths")
    p_acc.add_argument("--targets", type=int, default=None)
    p_acc.add_argument("--seeds", type=int, default=1, help="number of seeds")
    p_acc.add_argument("--out", required=True, help="report output directory")

    p_cl = sub.add_parser("cleanse", help="data-cleansing experiment")
    common(p_cl)
    p_cl.add_argument("--n-harmful", default=None, help="comma-separated removal sizes")
    p_cl.add_argument("--seeds", type=int, default=None)
    p_cl.add_argument("--out", required=True)

    p_rep = sub.add_parser("report", help="emit plot-data CSVs from experiment outputs")
    common(p_rep)
    p_rep.add_argument("--from", dest="source", required=True,
                       help="directory holding experiment outputs")
    p_rep.add_argument("--out", required=True)
    return parser


def _load(args) -> ExperimentConfig:
    overrides = {}
    if args.seed is not None:
        overrides["training.seed"] = args.seed
    return load_config(args.config, overrides)


def _prepared(config: ExperimentConfig):
    problem = config.problem()
    data, _ = synthesize_dataset(config.dataset, _stream(config.training.seed, "dataset"))
    fingerprint = trace_fingerprint(config, dataset_checksum(data))
    return problem, data, fingerprint


def _cmd_train(args) -> int:
    config = _load(args)
    problem, data, fingerprint = _prepared(config)
    trace = run_training(problem, data, config.training, fingerprint=fingerprint)
    save_trace(trace, args.out)
    print(f"trace: {args.out}")
    print(f"steps: {trace.n_steps}  checksum: {trace_checksum(trace)}")
    return 0


def _load_matching_trace(args, config: ExperimentConfig):
    problem, data, fingerprint = _prepared(config)
    trace = load_trace(args.trace)
    if trace.fingerprint != fingerprint:
        raise UsageError(
            f"trace fingerprint {trace.fingerprint[:12]}... does not match the "
            f"config fingerprint {fingerprint[:12]}...; refusing to mix them")
    return problem, data, trace


def _cmd_influence(args) -> int:
    config = _load(args)
    problem, data, trace = _load_matching_trace(args, config)
    run = prepare_seed_run(config, config.training.seed)
    kind = args.metric or config.metrics[0]
    spec = MetricSpec(kind, bandwidth=config.bandwidth)
    query = build_query_vector(spec, problem, trace.final_params,
                               run.reference_latents, run.context)
    targets = None
    if args.targets is not None:
        targets = np.sort(_stream(config.training.seed, "targets").choice(
            config.dataset.n_train, size=args.targets, replace=False))
    table = infer_linear_influence(problem, trace, data, query,
                                   targets=targets, k_epochs=args.k)
    save_influence_csv(table, args.out)
    save_influence_json(table, str(Path(args.out).with_suffix(".json")))
    print(f"influence table: {args.out} ({len(table.scores)} instances, metric {kind})")
    return 0


def _cmd_oracle(args) -> int:
    config = _load(args)
    problem, data, trace = _load_matching_trace(args, config)
    run = prepare_seed_run(config, config.training.seed)
    targets = np.sort(_stream(config.training.seed, "targets").choice(
        config.dataset.n_train, size=args.targets, replace=False))
    specs = config.metric_specs()
    queries = {spec.kind: build_query_vector(spec, problem, trace.final_params,
                                             run.reference_latents, run.context)
               for spec in specs}
    baselines = {spec.kind: metric_value(spec, problem, trace.final_params,
                                         run.reference_latents, run.context)
                 for spec in specs}
    tables = {spec.kind: infer_linear_influence(problem, trace, data, queries[spec.kind],
                                                targets=targets, k_epochs=args.k)
              for spec in specs}
    with open(args.out, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["index", "metric", "true_influence", "estimated_influence"])
        for target in targets:
            result = counterfactual_retrain(problem, trace, data, int(target), k_epochs=args.k)
            for spec in specs:
                after = metric_value(spec, problem, result.params,
                                     run.reference_latents, run.context)
                writer.writerow([int(target), spec.kind,
                                 repr(after - baselines[spec.kind]),
                                 repr(tables[spec.kind].scores[int(target)])])
    print(f"oracle results: {args.out} ({len(targets)} targets)")
    return 0


def _cmd_accuracy(args) -> int:
    config = _load(args)
    if args.k is not None:
        ks = tuple(int(part) for part in str(args.k).split(",") if part.strip())
        config = _replace(config, k_epochs=ks)
    if args.targets is not None:
        config = _replace(config, n_targets=args.targets)
    seeds = list(range(config.training.seed, config.training.seed + args.seeds))
    report = run_estimation_accuracy(config, seeds=seeds)
    write_accuracy_report(report, args.out)
    for row in report.rows:
        print(f"metric={row.metric} k={row.k_epochs} seed={row.seed} "
              f"tau={row.tau:.4f} jaccard={row.jaccard:.4f} p={row.p_value:.4f}")
    return 0


def _cmd_cleanse(args) -> int:
    config = _load(args)
    if args.n_harmful is not None:
        sizes = tuple(int(part) for part in str(args.n_harmful).split(",") if part.strip())
        config = _replace(config, n_harmful=sizes)
    seeds = None
    if args.seeds is not None:
        seeds = list(range(config.training.seed, config.training.seed + args.seeds))
    report = run_data_cleansing(config, seeds=seeds)
    write_cleansing_report(report, args.out)
    write_cleansing_curves(report, Path(args.out) / "curves.csv")
    for row in report.rows:
        print(f"method={row.method} metric={row.metric} n_h={row.n_harmful} "
              f"seed={row.seed} improvement={row.improvement:+.6f}")
    return 0


def _cmd_report(args) -> int:
    config = _load(args)
    source = Path(args.source)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    emitted = []
    cleansing_json = source / "cleansing.json"
    if cleansing_json.exists():
        from .experiments import CleansingReport, CleansingRow

        payload = json.loads(cleansing_json.read_text())
        report = CleansingReport(rows=[CleansingRow(**row) for row in payload["rows"]])
        write_cleansing_curves(report, out / "cleansing_curves.csv")
        emitted.append("cleansing_curves.csv")
    if config.dataset.kind == "normal2d":
        run = prepare_seed_run(config, config.training.seed)
        problem = config.problem()
        spec = config.metric_specs()[0]
        query = build_query_vector(spec, problem, run.trace.final_params,
                                   run.reference_latents, run.context)
        table = infer_linear_influence(problem, run.trace, run.dataset, query, k_epochs=1)
        write_scatter_data(table, run.dataset, spec, out / "harmfulness_scatter.csv")
        emitted.append("harmfulness_scatter.csv")
    if not emitted:
        raise UsageError(f"nothing to report from {source}")
    print(f"report files in {out}: {', '.join(emitted)}")
    return 0


def _replace(config: ExperimentConfig, **changes) -> ExperimentConfig:
    from dataclasses import replace

    return replace(config, **changes)


_COMMANDS = {
    "train": _cmd_train,
    "influence": _cmd_influence,
    "oracle": _cmd_oracle,
    "accuracy": _cmd_accuracy,
    "cleanse": _cmd_cleanse,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DivergenceError, NonFiniteError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
