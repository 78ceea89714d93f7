"""Generative-quality metrics, their sample gradients, and query vectors.

Three metrics over a generated sample set: average log-likelihood under a
Gaussian kernel density estimate of the generated set (``all``), the
classifier-based inception score (``is``), and the Frechet distance between
classifier feature distributions (``fid``).  A fourth kind, ``disc_loss``,
scores the discriminator's expected loss and serves as a baseline selector.

Each metric's gradient with respect to the generated samples is analytic at
the outer level; where samples pass through a network (classifier features
or posteriors), the pullback to the inputs runs through the autodiff graph.
Chaining those sample gradients through the generator produces the query
vector whose backward propagation estimates per-instance influence: the
discriminator block of such a query is exactly zero because real data never
passes through the generator.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import logsumexp as np_logsumexp
from scipy.special import softmax as np_softmax

from .autodiff import Tensor, backward, constant, logsumexp
from .influence import QueryVector
from .models import MlpLayout
from .training import DivergenceError

METRIC_KINDS = ("all", "is", "fid", "disc_loss")

# Sign convention for data cleansing: +1 means instances with positive
# estimated influence are harmful (their removal raises a
# larger-is-better metric); -1 the opposite.
_HARMFUL_SIGNS = {"all": 1.0, "is": 1.0, "fid": -1.0, "disc_loss": -1.0}


@dataclass(frozen=True)
class MetricSpec:
    kind: str
    bandwidth: float = 1.0

    def __post_init__(self):
        if self.kind not in METRIC_KINDS:
            raise ValueError(f"unknown metric kind {self.kind!r}")
        if self.bandwidth <= 0:
            raise ValueError("bandwidth must be positive")

    @property
    def harmful_sign(self) -> float:
        return _HARMFUL_SIGNS[self.kind]


@dataclass
class MetricContext:
    """Auxiliary data the metrics draw on: reference set and classifier."""

    real_data: np.ndarray | None = None
    classifier: "Classifier | None" = None


# -- average log-likelihood ---------------------------------------------------

def _pairwise_sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    sq = (a * a).sum(axis=1)[:, None] + (b * b).sum(axis=1)[None, :] - 2.0 * (a @ b.T)
    return np.maximum(sq, 0.0)


def average_log_likelihood(real: np.ndarray, generated: np.ndarray, bandwidth: float) -> float:
    """Mean log density of the real points under a Gaussian KDE of the generated set.

    The kernel includes the full normalizing constant; evaluation is
    log-sum-exp stabilized.
    """
    real = np.atleast_2d(np.asarray(real, dtype=np.float64))
    generated = np.atleast_2d(np.asarray(generated, dtype=np.float64))
    if real.size == 0 or generated.size == 0:
        raise ValueError("both point sets must be non-empty")
    dim = real.shape[1]
    h2 = bandwidth * bandwidth
    log_kernels = -_pairwise_sq_dists(real, generated) / (2.0 * h2)
    log_density = (np_logsumexp(log_kernels, axis=1) - np.log(generated.shape[0])
                   - 0.5 * dim * np.log(2.0 * np.pi * h2))
    return float(log_density.mean())


def _all_gradient(real: np.ndarray, generated: np.ndarray, bandwidth: float) -> np.ndarray:
    """Per-sample gradient of the KDE log-likelihood, shape (n_generated, dim)."""
    real = np.atleast_2d(np.asarray(real, dtype=np.float64))
    generated = np.atleast_2d(np.asarray(generated, dtype=np.float64))
    h2 = bandwidth * bandwidth
    weights = np_softmax(-_pairwise_sq_dists(real, generated) / (2.0 * h2), axis=1)
    pulled = weights.T @ real - weights.sum(axis=0)[:, None] * generated
    return pulled / (real.shape[0] * h2)


# -- inception score ----------------------------------------------------------

def inception_score_from_posteriors(posteriors: np.ndarray) -> float:
    """exp of the mean KL divergence from each posterior to the marginal."""
    posteriors = np.atleast_2d(np.asarray(posteriors, dtype=np.float64))
    if posteriors.size == 0:
        raise ValueError("posterior set must be non-empty")
    marginal = posteriors.mean(axis=0)
    safe_p = np.where(posteriors > 0, posteriors, 1.0)
    safe_m = np.where(marginal > 0, marginal, 1.0)
    kl = (posteriors * (np.log(safe_p) - np.log(safe_m)[None, :])).sum(axis=1)
    return float(np.exp(kl.mean()))


def inception_score(generated: np.ndarray, classifier: "Classifier") -> float:
    return inception_score_from_posteriors(classifier.posteriors(generated))


def _is_gradient(generated: np.ndarray, classifier: "Classifier") -> np.ndarray:
    """Gradient of the inception score through the classifier, per sample.

    The outer derivative with respect to the logits collapses to
    (score / n) * p * (r - <p, r>) with r the per-sample log ratio to the
    marginal; the pullback from logits to inputs runs through the graph.
    """
    generated = np.atleast_2d(np.asarray(generated, dtype=np.float64))
    posteriors = classifier.posteriors(generated)
    score = inception_score_from_posteriors(posteriors)
    marginal = posteriors.mean(axis=0)
    ratio = np.log(np.where(posteriors > 0, posteriors, 1.0)) \
        - np.log(np.where(marginal > 0, marginal, 1.0))[None, :]
    inner = (posteriors * ratio).sum(axis=1, keepdims=True)
    grad_logits = (score / len(generated)) * posteriors * (ratio - inner)
    return classifier.input_pullback(generated, grad_logits, layer="logits")


# -- Frechet distance ---------------------------------------------------------

def _psd_sqrt(matrix: np.ndarray) -> tuple[np.ndarray, float]:
    """Symmetric square root by eigendecomposition, negatives clipped at zero."""
    sym = 0.5 * (matrix + matrix.T)
    eigvals, eigvecs = np.linalg.eigh(sym)
    most_negative = float(eigvals.min())
    clipped = np.clip(eigvals, 0.0, None)
    return (eigvecs * np.sqrt(clipped)) @ eigvecs.T, most_negative


def _psd_pinv(matrix: np.ndarray) -> np.ndarray:
    sym = 0.5 * (matrix + matrix.T)
    eigvals, eigvecs = np.linalg.eigh(sym)
    cutoff = max(eigvals.max(), 0.0) * 1e-12
    inv = np.where(eigvals > cutoff, 1.0 / np.where(eigvals > cutoff, eigvals, 1.0), 0.0)
    return (eigvecs * inv) @ eigvecs.T


def fid(real_feats: np.ndarray, gen_feats: np.ndarray) -> float:
    """Frechet distance between Gaussian fits of the two feature sets.

    Covariances use the unbiased (n - 1) denominator.  The trace of the
    product square root is computed through the symmetric similarity form,
    so a single eigendecomposition of a symmetric matrix suffices.
    """
    real_feats = np.atleast_2d(np.asarray(real_feats, dtype=np.float64))
    gen_feats = np.atleast_2d(np.asarray(gen_feats, dtype=np.float64))
    if len(real_feats) < 2 or len(gen_feats) < 2:
        raise ValueError("need at least two samples per side for covariances")
    mu1, mu2 = real_feats.mean(axis=0), gen_feats.mean(axis=0)
    sigma1 = np.cov(real_feats, rowvar=False, ddof=1)
    sigma2 = np.cov(gen_feats, rowvar=False, ddof=1)
    sigma1, sigma2 = np.atleast_2d(sigma1), np.atleast_2d(sigma2)
    root1, neg1 = _psd_sqrt(sigma1)
    cross, neg_cross = _psd_sqrt(root1 @ sigma2 @ root1)
    worst = min(neg1, neg_cross)
    if worst < -1e-6:
        warnings.warn(f"clipped eigenvalue {worst:.3e} in the Frechet distance",
                      RuntimeWarning, stacklevel=2)
    diff = mu1 - mu2
    value = float(diff @ diff + np.trace(sigma1) + np.trace(sigma2) - 2.0 * np.trace(cross))
    return max(value, 0.0)


def _fid_gradient_wrt_features(real_feats: np.ndarray, gen_feats: np.ndarray) -> np.ndarray:
    """Per-sample gradient of the Frechet distance in generated feature space.

    The covariance term uses d tr((S1 S2)^(1/2)) / d S2
    = (1/2) B (B S2 B)^(-1/2) B with B the square root of S1.
    """
    real_feats = np.atleast_2d(np.asarray(real_feats, dtype=np.float64))
    gen_feats = np.atleast_2d(np.asarray(gen_feats, dtype=np.float64))
    n = len(gen_feats)
    mu1, mu2 = real_feats.mean(axis=0), gen_feats.mean(axis=0)
    sigma1 = np.atleast_2d(np.cov(real_feats, rowvar=False, ddof=1))
    sigma2 = np.atleast_2d(np.cov(gen_feats, rowvar=False, ddof=1))
    root1, _ = _psd_sqrt(sigma1)
    cross, _ = _psd_sqrt(root1 @ sigma2 @ root1)
    sigma_grad = np.eye(len(sigma2)) - root1 @ _psd_pinv(cross) @ root1
    sigma_grad = 0.5 * (sigma_grad + sigma_grad.T)
    mean_part = (2.0 / n) * (mu2 - mu1)[None, :]
    cov_part = (2.0 / (n - 1)) * (gen_feats - mu2) @ sigma_grad
    return mean_part + cov_part


def _fid_gradient(generated: np.ndarray, classifier: "Classifier",
                  real_data: np.ndarray) -> np.ndarray:
    generated = np.atleast_2d(np.asarray(generated, dtype=np.float64))
    real_feats = classifier.features(real_data)
    gen_feats = classifier.features(generated)
    feat_grad = _fid_gradient_wrt_features(real_feats, gen_feats)
    return classifier.input_pullback(generated, feat_grad, layer="features")


# -- classifier ----------------------------------------------------------------

@dataclass
class ClassifierSettings:
    hidden: tuple[int, int] = (64, 32)
    epochs: int = 30
    batch_size: int = 32
    lr: float = 0.05
    feature_layer: int = 1
    # Saturating hidden units keep the feature map smooth, so the metric
    # gradients that chain through it stay informative even for generated
    # samples far from the training manifold.
    activation: str = "tanh"


class Classifier:
    """Small dense classifier supplying posteriors and feature vectors.

    The feature layer is the post-activation output of the configured
    hidden layer; the head is linear with a softmax readout.
    """

    def __init__(self, layout: MlpLayout, params: np.ndarray, n_classes: int,
                 feature_layer: int, train_accuracy: float = float("nan")):
        self.layout = layout
        self.params = np.asarray(params, dtype=np.float64)
        self.n_classes = n_classes
        self.feature_layer = feature_layer
        self.train_accuracy = train_accuracy

    def logits(self, x: np.ndarray) -> np.ndarray:
        return self.layout.forward_np(self.params, x)

    def posteriors(self, x: np.ndarray) -> np.ndarray:
        return np_softmax(self.logits(x), axis=1)

    def features(self, x: np.ndarray) -> np.ndarray:
        return self.layout.forward_np(self.params, x, upto_layer=self.feature_layer)

    def input_pullback(self, x: np.ndarray, output_grads: np.ndarray, layer: str) -> np.ndarray:
        """Chain per-sample output gradients back to the classifier inputs."""
        leaf = Tensor(np.atleast_2d(np.asarray(x, dtype=np.float64)))
        upto = None if layer == "logits" else self.feature_layer
        out = self.layout.forward_graph(constant(self.params), 0, leaf, upto_layer=upto)
        inner = (constant(output_grads) * out).sum()
        (grad,) = backward(inner, [leaf])
        return grad.data.copy()


def train_classifier(data: np.ndarray, labels: np.ndarray,
                     settings: ClassifierSettings, seed: int = 0) -> Classifier:
    """Deterministic mini-batch SGD on the softmax cross-entropy."""
    data = np.atleast_2d(np.asarray(data, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64)
    n_classes = int(labels.max()) + 1
    if labels.min() < 0:
        raise ValueError("labels must be non-negative class indices")
    layout = MlpLayout((data.shape[1], *settings.hidden, n_classes),
                       (settings.activation,) * len(settings.hidden) + ("linear",))
    root = np.random.SeedSequence(seed)
    init_seq, shuffle_seq = root.spawn(2)
    params = layout.init_params(np.random.default_rng(init_seq))
    shuffle_rng = np.random.default_rng(shuffle_seq)

    onehot = np.eye(n_classes)[labels]
    for _ in range(settings.epochs):
        order = shuffle_rng.permutation(len(data))
        for start in range(0, len(data), settings.batch_size):
            batch = order[start:start + settings.batch_size]
            theta = Tensor(params)
            logits = layout.forward_graph(theta, 0, data[batch])
            logp = logits - logsumexp(logits, axis=1, keepdims=True)
            loss = -(constant(onehot[batch]) * logp).sum(axis=1).mean()
            (grad,) = backward(loss, [theta])
            params = params - settings.lr * grad.data
            peak = np.max(np.abs(params))
            if not np.isfinite(peak) or peak > 1e6:
                raise DivergenceError("classifier training diverged")

    clf = Classifier(layout, params, n_classes, settings.feature_layer)
    clf.train_accuracy = float((clf.logits(data).argmax(axis=1) == labels).mean())
    return clf


def save_classifier(classifier: Classifier, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "sizes": list(classifier.layout.sizes),
        "activations": list(classifier.layout.activations),
        "n_classes": classifier.n_classes,
        "feature_layer": classifier.feature_layer,
        "train_accuracy": classifier.train_accuracy,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    (directory / "params.bin").write_bytes(classifier.params.astype("<f8").tobytes())


def load_classifier(directory) -> Classifier:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    layout = MlpLayout(manifest["sizes"], manifest["activations"])
    params = np.frombuffer((directory / "params.bin").read_bytes(), dtype="<f8").astype(np.float64)
    if len(params) != layout.n_params:
        raise ValueError("classifier parameter file does not match its manifest")
    return Classifier(layout, params, manifest["n_classes"], manifest["feature_layer"],
                      manifest["train_accuracy"])


# -- metric dispatch ------------------------------------------------------------

def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ValueError(message)


def evaluate_metric(spec: MetricSpec, generated: np.ndarray, context: MetricContext) -> float:
    """Value of a generated-sample metric; ``disc_loss`` needs parameters and
    goes through ``metric_value`` instead."""
    handler = _METRIC_VALUES.get(spec.kind)
    _require(handler is not None, f"metric {spec.kind!r} is not sample-based")
    return handler(spec, generated, context)


_METRIC_VALUES = {
    "all": lambda spec, gen, ctx: average_log_likelihood(ctx.real_data, gen, spec.bandwidth),
    "is": lambda spec, gen, ctx: inception_score(gen, ctx.classifier),
    "fid": lambda spec, gen, ctx: fid(ctx.classifier.features(ctx.real_data),
                                      ctx.classifier.features(gen)),
}

_METRIC_GRADS = {
    "all": lambda spec, gen, ctx: _all_gradient(ctx.real_data, gen, spec.bandwidth),
    "is": lambda spec, gen, ctx: _is_gradient(gen, ctx.classifier),
    "fid": lambda spec, gen, ctx: _fid_gradient(gen, ctx.classifier, ctx.real_data),
}


def metric_gradient_wrt_generated(spec: MetricSpec, generated: np.ndarray,
                                  context: MetricContext, problem=None,
                                  params: np.ndarray | None = None) -> np.ndarray:
    """One gradient vector per generated sample, shape (n_generated, data_dim)."""
    if spec.kind == "disc_loss":
        _require(problem is not None and params is not None,
                 "disc_loss gradients need the problem and its parameters")
        return _disc_loss_gradient_wrt_generated(problem, params, generated)
    handler = _METRIC_GRADS[spec.kind]
    return handler(spec, np.atleast_2d(np.asarray(generated, dtype=np.float64)), context)


def _disc_loss_gradient_wrt_generated(problem, params: np.ndarray,
                                      generated: np.ndarray) -> np.ndarray:
    generated = np.atleast_2d(np.asarray(generated, dtype=np.float64))
    leaf = Tensor(generated)
    theta = constant(np.asarray(params, dtype=np.float64))
    from .models import PROB_FLOOR

    probs = problem.discriminator_graph(theta, leaf)
    loss = -(((1.0 - probs).clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)).log()).mean()
    (grad,) = backward(loss, [leaf])
    return grad.data.copy()


def expected_disc_loss(problem, params: np.ndarray, latents: np.ndarray,
                       real_data: np.ndarray) -> float:
    """Mean discriminator loss over independent latents and reference data."""
    theta = Tensor(np.asarray(params, dtype=np.float64))
    value = problem.disc_fake_terms_graph(theta, latents).mean() \
        + problem.disc_real_terms_graph(theta, real_data).mean()
    return float(value.data)


def metric_value(spec: MetricSpec, problem, params: np.ndarray,
                 eval_latents: np.ndarray, context: MetricContext) -> float:
    """Metric reading for a parameter vector on a fixed latent set."""
    if spec.kind == "disc_loss":
        return expected_disc_loss(problem, params, eval_latents, context.real_data)
    generated = problem.generator_forward(params, eval_latents)
    return evaluate_metric(spec, generated, context)


# -- query vectors ----------------------------------------------------------------

def generator_pullback(problem, params: np.ndarray, latents: np.ndarray,
                       sample_grads: np.ndarray, label: str = "") -> QueryVector:
    """Chain per-sample gradients through the generator into parameter space.

    The discriminator block of the result is exactly zero: the generated
    samples depend only on generator parameters.
    """
    theta = Tensor(np.asarray(params, dtype=np.float64))
    samples = problem.generator_graph(theta, latents)
    inner = (constant(np.asarray(sample_grads, dtype=np.float64)) * samples).sum()
    (grad,) = backward(inner, [theta])
    return QueryVector(grad.data.copy(), problem.dim_gen, label=label)


def build_query_vector(spec: MetricSpec, problem, params: np.ndarray,
                       eval_latents: np.ndarray, context: MetricContext) -> QueryVector:
    """Gradient of the metric with respect to the coupled parameters.

    For sample-based metrics this is the chain rule through the generator;
    for ``disc_loss`` it is the full gradient of the expected loss, which
    generally has both blocks nonzero.
    """
    params = np.asarray(params, dtype=np.float64)
    if spec.kind == "disc_loss":
        theta = Tensor(params)
        value = problem.disc_fake_terms_graph(theta, eval_latents).mean() \
            + problem.disc_real_terms_graph(theta, context.real_data).mean()
        (grad,) = backward(value, [theta])
        return QueryVector(grad.data.copy(), problem.dim_gen, label=spec.kind)
    generated = problem.generator_forward(params, eval_latents)
    sample_grads = metric_gradient_wrt_generated(spec, generated, context)
    return generator_pullback(problem, params, eval_latents, sample_grads, label=spec.kind)
