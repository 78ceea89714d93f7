"""Experiment pipelines: estimation accuracy and data cleansing.

Both experiments share the same per-seed recipe: synthesize a dataset,
train while recording the trace, build metric query vectors, estimate
per-instance influence from the trace, and compare against counterfactual
re-runs.  Accuracy is scored with rank statistics (Kendall's tau and the
Jaccard overlap of critical sets) against a permutation null; cleansing
removes the estimated harmful set, re-runs the final epoch and reads the
test metric before and after.

Randomness is threaded through named streams derived from the experiment
seed, so every report row is reproducible from (config, seed).
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .config import ExperimentConfig, synthesize_dataset, trace_fingerprint
from .datasets import dataset_checksum, make_digit_images, sample_normal2d
from .influence import InfluenceTable, infer_linear_influence
from .metrics import (
    MetricContext,
    MetricSpec,
    build_query_vector,
    metric_value,
    train_classifier,
)
from .oracle import counterfactual_retrain
from .training import TrainingTrace, run_training

_STREAMS = {"dataset": 11, "reference": 13, "targets": 17, "test": 19,
            "random_select": 23, "permutation": 29, "classifier_data": 31}


def _stream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), _STREAMS[name]]))


# -- rank statistics -----------------------------------------------------------

def kendall_tau(a, b) -> float:
    """Tie-corrected (tau-b) ordinal correlation."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) != len(b) or len(a) < 2:
        raise ValueError("need two equal-length score lists of size >= 2")
    return float(stats.kendalltau(a, b).statistic)


def critical_set(scores, m: int = 10) -> set[int]:
    """Positions of the m largest and m smallest scores, ties broken by index."""
    scores = np.asarray(scores, dtype=np.float64)
    if len(scores) < 2 * m:
        raise ValueError(f"need at least {2 * m} scored instances")
    by_descending = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    by_ascending = sorted(range(len(scores)), key=lambda i: (scores[i], i))
    return set(by_descending[:m]) | set(by_ascending[:m])


def jaccard_critical(estimated, true, m: int = 10) -> float:
    a, b = critical_set(estimated, m), critical_set(true, m)
    return len(a & b) / len(a | b)


@dataclass
class PermutationResult:
    observed: float
    threshold: float
    p_value: float
    n_permutations: int


def permutation_test_tau(estimated, true, n_permutations: int = 1000,
                         rng: np.random.Generator | None = None) -> PermutationResult:
    """One-sided permutation null for tau: shuffle the estimate order."""
    rng = rng or np.random.default_rng(0)
    estimated = np.asarray(estimated, dtype=np.float64)
    observed = kendall_tau(estimated, true)
    null = np.empty(n_permutations)
    for i in range(n_permutations):
        null[i] = kendall_tau(estimated[rng.permutation(len(estimated))], true)
    threshold = float(np.quantile(null, 0.975))
    p_value = float((np.sum(null >= observed) + 1) / (n_permutations + 1))
    return PermutationResult(observed, threshold, p_value, n_permutations)


def select_harmful(table: InfluenceTable, spec: MetricSpec, n_harmful: int) -> np.ndarray:
    """Indices of the most harmful instances under the metric's sign rule.

    Only instances qualifying as harmful by sign are returned; the set is
    truncated (with a warning) when fewer than requested qualify.
    """
    indices, scores = table.as_arrays()
    harmfulness = spec.harmful_sign * scores
    order = sorted(range(len(indices)), key=lambda i: (-harmfulness[i], indices[i]))
    qualified = [indices[i] for i in order if harmfulness[i] > 0]
    if len(qualified) < n_harmful:
        warnings.warn(
            f"only {len(qualified)} of {n_harmful} requested instances qualify as harmful",
            RuntimeWarning, stacklevel=2)
    return np.array(qualified[:n_harmful], dtype=np.int64)


def sign_test_greater(differences) -> float:
    """One-sided sign test that the paired differences are positive."""
    differences = np.asarray(differences, dtype=np.float64)
    wins = int(np.sum(differences > 0))
    decided = int(np.sum(differences != 0))
    if decided == 0:
        return 1.0
    return float(stats.binomtest(wins, decided, 0.5, alternative="greater").pvalue)


# -- shared per-seed setup -------------------------------------------------------

@dataclass
class SeedRun:
    seed: int
    dataset: np.ndarray
    labels: np.ndarray | None
    trace: TrainingTrace
    reference_latents: np.ndarray
    context: MetricContext
    fingerprint: str


def prepare_seed_run(config: ExperimentConfig, seed: int) -> SeedRun:
    """Train one trace and assemble the evaluation side for a seed."""
    problem = config.problem()
    data, labels = synthesize_dataset(config.dataset, _stream(seed, "dataset"))
    fingerprint = trace_fingerprint(config, dataset_checksum(data))
    training = _reseeded(config, seed)
    trace = run_training(problem, data, training, fingerprint=fingerprint)

    ref_rng = _stream(seed, "reference")
    reference_latents = ref_rng.standard_normal((config.n_reference, problem.latent_dim))
    reference_data, reference_labels = _reference_set(config, ref_rng)
    classifier = None
    if any(kind in ("is", "fid") for kind in config.metrics):
        if reference_labels is None:
            raise ValueError("classifier metrics need a labeled dataset kind")
        classifier = train_classifier(reference_data, reference_labels,
                                      config.classifier, seed=config.classifier_seed)
    context = MetricContext(real_data=reference_data, classifier=classifier)
    return SeedRun(seed=seed, dataset=data, labels=labels, trace=trace,
                   reference_latents=reference_latents, context=context,
                   fingerprint=fingerprint)


def _reseeded(config: ExperimentConfig, seed: int):
    training = config.training
    if training.seed == seed:
        return training
    from dataclasses import replace

    return replace(training, seed=seed)


def _reference_set(config: ExperimentConfig, rng: np.random.Generator):
    spec = config.dataset
    if spec.kind == "normal2d":
        return sample_normal2d(config.n_reference, rng), None
    if spec.kind == "digits8":
        return make_digit_images(config.n_reference, spec.n_classes, spec.noise, rng)
    data, labels = synthesize_dataset(spec, rng)
    return data[:config.n_reference], None if labels is None else labels[:config.n_reference]


# -- experiment 1: estimation accuracy -------------------------------------------

@dataclass
class AccuracyRow:
    metric: str
    k_epochs: int
    tau: float
    jaccard: float
    n_targets: int
    seed: int
    p_value: float
    threshold: float


@dataclass
class AccuracyReport:
    rows: list[AccuracyRow] = field(default_factory=list)
    fingerprints: dict[int, str] = field(default_factory=dict)

    def mean_tau(self, metric: str, k: int) -> float:
        taus = [r.tau for r in self.rows if r.metric == metric and r.k_epochs == k]
        return float(np.mean(taus))


def run_estimation_accuracy(config: ExperimentConfig, seeds=None,
                            self_test: bool = False) -> AccuracyReport:
    """Estimate influence for sampled targets and score it against the oracle.

    With ``self_test`` the oracle values stand in for the estimates, which
    must produce perfect rank agreement; it validates the scoring path.
    """
    seeds = list(seeds) if seeds is not None else [config.training.seed]
    report = AccuracyReport()
    for seed in seeds:
        run = prepare_seed_run(config, seed)
        problem = config.problem()
        targets = _stream(seed, "targets").choice(
            config.dataset.n_train, size=config.n_targets, replace=False)
        targets = np.sort(targets)
        queries = {spec.kind: build_query_vector(spec, problem, run.trace.final_params,
                                                 run.reference_latents, run.context)
                   for spec in config.metric_specs()}
        for k in config.k_epochs:
            truths = _true_metric_deltas(config, problem, run, targets, k)
            for spec in config.metric_specs():
                true_vals = truths[spec.kind]
                if self_test:
                    estimates = true_vals.copy()
                else:
                    table = infer_linear_influence(problem, run.trace, run.dataset,
                                                   queries[spec.kind], targets=targets,
                                                   k_epochs=k)
                    estimates = np.array([table.scores[int(j)] for j in targets])
                perm = permutation_test_tau(estimates, true_vals,
                                            n_permutations=config.n_permutations,
                                            rng=_stream(seed, "permutation"))
                critical_m = min(10, len(targets) // 2)
                report.rows.append(AccuracyRow(
                    metric=spec.kind, k_epochs=k, tau=perm.observed,
                    jaccard=jaccard_critical(estimates, true_vals, m=critical_m),
                    n_targets=len(targets), seed=seed,
                    p_value=perm.p_value, threshold=perm.threshold))
        report.fingerprints[seed] = run.fingerprint
    return report


def _true_metric_deltas(config: ExperimentConfig, problem, run: SeedRun,
                        targets: np.ndarray, k: int) -> dict[str, np.ndarray]:
    """Counterfactual metric changes for every target, one re-run per target."""
    specs = config.metric_specs()
    baselines = {spec.kind: metric_value(spec, problem, run.trace.final_params,
                                         run.reference_latents, run.context)
                 for spec in specs}
    deltas = {spec.kind: np.empty(len(targets)) for spec in specs}
    for position, target in enumerate(targets):
        result = counterfactual_retrain(problem, run.trace, run.dataset,
                                        int(target), k_epochs=k)
        for spec in specs:
            after = metric_value(spec, problem, result.params,
                                 run.reference_latents, run.context)
            deltas[spec.kind][position] = after - baselines[spec.kind]
    return deltas


# -- experiment 2: data cleansing --------------------------------------------------

@dataclass
class CleansingRow:
    method: str
    metric: str
    n_harmful: int
    before: float
    after: float
    improvement: float
    seed: int


@dataclass
class CleansingReport:
    rows: list[CleansingRow] = field(default_factory=list)
    fingerprints: dict[int, str] = field(default_factory=dict)

    def improvements(self, method: str, metric: str, n_harmful: int) -> np.ndarray:
        return np.array([r.improvement for r in self.rows
                         if r.method == method and r.metric == metric
                         and r.n_harmful == n_harmful])


def run_data_cleansing(config: ExperimentConfig, seeds=None) -> CleansingReport:
    """Remove estimated harmful sets, re-run the final epoch, read test metrics.

    Selection methods: ``influence`` ranks by the estimated influence on the
    target metric, ``disc_loss`` by the influence on the discriminator's
    expected loss, ``random`` draws uniformly.  A larger-is-better metric
    improves when the reading rises; the improvement column is signed so
    that positive always means better.
    """
    seeds = list(seeds) if seeds is not None else list(
        range(config.training.seed, config.training.seed + config.n_seeds))
    report = CleansingReport()
    for seed in seeds:
        run = prepare_seed_run(config, seed)
        problem = config.problem()
        test_rng = _stream(seed, "test")
        test_latents = test_rng.standard_normal((config.n_test, problem.latent_dim))
        test_data, _ = _reference_set_sized(config, test_rng, config.n_test)
        test_context = MetricContext(real_data=test_data, classifier=run.context.classifier)

        tables = {}
        for method in config.methods:
            if method == "influence":
                for spec in config.metric_specs():
                    query = build_query_vector(spec, problem, run.trace.final_params,
                                               run.reference_latents, run.context)
                    tables[spec.kind] = infer_linear_influence(
                        problem, run.trace, run.dataset, query, k_epochs=1)
            elif method == "disc_loss":
                query = build_query_vector(MetricSpec("disc_loss"), problem,
                                           run.trace.final_params,
                                           run.reference_latents, run.context)
                tables["disc_loss"] = infer_linear_influence(
                    problem, run.trace, run.dataset, query, k_epochs=1)

        for spec in config.metric_specs():
            before = metric_value(spec, problem, run.trace.final_params,
                                  test_latents, test_context)
            for n_harmful in config.n_harmful:
                for method in config.methods:
                    selected = _select_for_method(config, method, spec, tables,
                                                  seed, n_harmful)
                    result = counterfactual_retrain(problem, run.trace, run.dataset,
                                                    selected, k_epochs=1)
                    after = metric_value(spec, problem, result.params,
                                         test_latents, test_context)
                    sign = 1.0 if spec.kind != "fid" else -1.0
                    report.rows.append(CleansingRow(
                        method=method, metric=spec.kind, n_harmful=n_harmful,
                        before=before, after=after,
                        improvement=sign * (after - before), seed=seed))
        report.fingerprints[seed] = run.fingerprint
    return report


def _select_for_method(config: ExperimentConfig, method: str, spec: MetricSpec,
                       tables: dict, seed: int, n_harmful: int) -> np.ndarray:
    if method == "influence":
        return select_harmful(tables[spec.kind], spec, n_harmful)
    if method == "disc_loss":
        return select_harmful(tables["disc_loss"], MetricSpec("disc_loss"), n_harmful)
    if method == "random":
        rng = np.random.default_rng(
            np.random.SeedSequence([int(seed), _STREAMS["random_select"], int(n_harmful)]))
        return np.sort(rng.choice(config.dataset.n_train, size=n_harmful, replace=False))
    raise ValueError(f"unknown selection method {method!r}")


def _reference_set_sized(config: ExperimentConfig, rng: np.random.Generator, size: int):
    spec = config.dataset
    if spec.kind == "normal2d":
        return sample_normal2d(size, rng), None
    if spec.kind == "digits8":
        return make_digit_images(size, spec.n_classes, spec.noise, rng)
    data, labels = synthesize_dataset(spec, rng)
    return data[:size], None if labels is None else labels[:size]


# -- report emission ------------------------------------------------------------

def write_accuracy_report(report: AccuracyReport, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "accuracy.csv", "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["metric", "k_epochs", "tau", "jaccard", "n_targets",
                         "seed", "p_value", "threshold"])
        for row in report.rows:
            writer.writerow([row.metric, row.k_epochs, repr(row.tau), repr(row.jaccard),
                             row.n_targets, row.seed, repr(row.p_value), repr(row.threshold)])
    (directory / "accuracy.json").write_text(json.dumps({
        "rows": [asdict(row) for row in report.rows],
        "fingerprints": {str(k): v for k, v in report.fingerprints.items()},
    }, indent=2))


def write_cleansing_report(report: CleansingReport, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "cleansing.csv", "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["method", "metric", "n_harmful", "before", "after",
                         "improvement", "seed"])
        for row in report.rows:
            writer.writerow([row.method, row.metric, row.n_harmful, repr(row.before),
                             repr(row.after), repr(row.improvement), row.seed])
    (directory / "cleansing.json").write_text(json.dumps({
        "rows": [asdict(row) for row in report.rows],
        "fingerprints": {str(k): v for k, v in report.fingerprints.items()},
    }, indent=2))


def write_scatter_data(table: InfluenceTable, dataset: np.ndarray, spec: MetricSpec,
                       path) -> None:
    """Per-instance coordinates with scores and harmfulness ranks (2-d data only)."""
    dataset = np.asarray(dataset)
    if dataset.shape[1] != 2:
        raise ValueError("scatter data is only emitted for 2-d datasets")
    indices, scores = table.as_arrays()
    harmfulness = spec.harmful_sign * scores
    ranks = np.empty(len(indices), dtype=np.int64)
    ranks[np.argsort(-harmfulness, kind="stable")] = np.arange(len(indices))
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["index", "x0", "x1", "score", "harmfulness_rank"])
        for pos, index in enumerate(indices):
            writer.writerow([int(index), repr(dataset[index][0]), repr(dataset[index][1]),
                             repr(scores[pos]), int(ranks[pos])])


def write_cleansing_curves(report: CleansingReport, path) -> None:
    """Mean improvement per (method, metric, n_harmful) for plotting."""
    keys = sorted({(r.method, r.metric, r.n_harmful) for r in report.rows})
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["method", "metric", "n_harmful", "mean_improvement",
                         "std_improvement", "n_seeds"])
        for method, metric, n_harmful in keys:
            values = report.improvements(method, metric, n_harmful)
            writer.writerow([method, metric, n_harmful, repr(float(values.mean())),
                             repr(float(values.std(ddof=0))), len(values)])
