"""Exact ground truth by re-running the recorded schedule without an instance.

The counterfactual run starts from the snapshot at the window start and
replays every recorded step with the same batches, latents and learning
rates, dropping the excluded instances' data-term summands while keeping
the original batch normalizer.  With nothing excluded the replay reproduces
the stored final parameters bit-exactly, which anchors every comparison.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .influence import window_start
from .training import TrainingTrace, asgd_step, latents_from_seed


@dataclass
class CounterfactualResult:
    excluded: tuple[int, ...]
    k_epochs: int
    params: np.ndarray
    delta: np.ndarray
    metric_deltas: dict[str, float] = field(default_factory=dict)


def _as_exclusion_set(excluded) -> set[int]:
    if isinstance(excluded, (int, np.integer)):
        return {int(excluded)}
    return {int(j) for j in excluded}


def counterfactual_retrain(problem, trace: TrainingTrace, dataset: np.ndarray,
                           excluded, k_epochs: int | None = None) -> CounterfactualResult:
    """Re-run the last ``k_epochs`` epochs with ``excluded`` instances removed.

    ``excluded`` may be a single index or a set; exclusion drops those
    rows from every batch they appear in while the loss normalizer stays
    the full batch size.
    """
    dataset = np.asarray(dataset, dtype=np.float64)
    exclusion = _as_exclusion_set(excluded)
    start = window_start(trace, k_epochs)
    params = trace.records[start].params.copy()
    for record in trace.records[start:]:
        idx = record.batch_indices
        keep = np.fromiter((int(j) not in exclusion for j in idx), dtype=bool, count=len(idx))
        latents = latents_from_seed(record.latent_seed, len(idx), problem.latent_dim)
        params = asgd_step(problem, params, dataset[idx[keep]], latents,
                           record.lr_gen, record.lr_disc, denom=len(idx))
    k_used = trace.epochs if k_epochs is None else int(k_epochs)
    return CounterfactualResult(
        excluded=tuple(sorted(exclusion)),
        k_epochs=k_used,
        params=params,
        delta=params - trace.final_params,
    )


def true_influence_on_metric(problem, base_params: np.ndarray, cf_params: np.ndarray,
                             spec, eval_latents: np.ndarray, context) -> float:
    """Signed metric change caused by the exclusion, on shared evaluation latents.

    Evaluating both parameter vectors on the same latent set removes the
    Monte Carlo noise between the two readings.
    """
    from .metrics import metric_value

    before = metric_value(spec, problem, base_params, eval_latents, context)
    after = metric_value(spec, problem, cf_params, eval_latents, context)
    return after - before


def _oracle_task(args) -> tuple[int, CounterfactualResult]:
    problem, trace, dataset, target, k_epochs = args
    return target, counterfactual_retrain(problem, trace, dataset, target, k_epochs)


def batch_oracle(problem, trace: TrainingTrace, dataset: np.ndarray,
                 targets: Iterable[int], k_epochs: int | None = None,
                 specs=(), eval_latents: np.ndarray | None = None,
                 context=None, n_workers: int = 1) -> dict[int, CounterfactualResult]:
    """Independent counterfactual re-runs for every target.

    Re-runs over the read-only trace are embarrassingly parallel; with
    ``n_workers`` above one they fan out to a process pool and results are
    merged by target.  When metric specs are given, each result carries the
    true metric deltas; the baseline metric values are computed once.
    """
    ordered = list(dict.fromkeys(int(t) for t in targets))
    results: dict[int, CounterfactualResult] = {}
    if n_workers > 1 and len(ordered) > 1:
        tasks = [(problem, trace, dataset, target, k_epochs) for target in ordered]
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            for target, result in pool.map(_oracle_task, tasks):
                results[target] = result
    else:
        for target in ordered:
            results[target] = counterfactual_retrain(problem, trace, dataset,
                                                     target, k_epochs)
    if specs:
        from .metrics import metric_value

        baselines = {spec.kind: metric_value(spec, problem, trace.final_params,
                                             eval_latents, context)
                     for spec in specs}
        for result in results.values():
            for spec in specs:
                after = metric_value(spec, problem, result.params, eval_latents, context)
                result.metric_deltas[spec.kind] = after - baselines[spec.kind]
    return results
