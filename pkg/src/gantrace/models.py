"""Fully connected generator/discriminator pair over one flat parameter vector.

The coupled parameter layout puts all generator parameters first and all
discriminator parameters second.  Losses follow the non-saturating form by
default (generator minimizes -D(G(z))), with the minimax form available as
a configuration switch.  Batch means fix the summation order so repeated
evaluation is bit-reproducible.

The module also hosts the generic gradient machinery shared by training,
counterfactual replay and influence inference: the joint two-block batch
gradient, the per-instance data-term gradient, and the batched inner
products of a query vector with every per-instance data-term gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .autodiff import Tensor, backward, concat_vec, constant

# Discriminator probabilities are clamped away from {0, 1} before any log so
# the losses and every influence quantity stay finite even when the
# discriminator saturates.
PROB_FLOOR = 1e-7

_NP_ACTS = {
    "relu": lambda x: np.maximum(x, 0.0),
    "tanh": np.tanh,
    "sigmoid": expit,
    "linear": lambda x: x,
}

_GRAPH_ACTS = {
    "relu": lambda t: t.relu(),
    "tanh": lambda t: t.tanh(),
    "sigmoid": lambda t: t.sigmoid(),
    "linear": lambda t: t,
}


class MlpLayout:
    """Index map packing the kernels and biases of a dense stack into a flat vector.

    ``pack(unpack(v))`` reproduces ``v`` bit-exactly.
    """

    def __init__(self, sizes, activations):
        if len(activations) != len(sizes) - 1:
            raise ValueError("need one activation per layer")
        unknown = set(activations) - set(_NP_ACTS)
        if unknown:
            raise ValueError(f"unknown activations: {sorted(unknown)}")
        self.sizes = tuple(int(s) for s in sizes)
        self.activations = tuple(activations)
        spans = []
        offset = 0
        for fan_in, fan_out in zip(self.sizes, self.sizes[1:]):
            spans.append((offset, (fan_in, fan_out)))
            offset += fan_in * fan_out
            spans.append((offset, (fan_out,)))
            offset += fan_out
        self.spans = tuple(spans)
        self.n_params = offset

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        """Uniform(-a, a) kernels with a = sqrt(6 / (fan_in + fan_out)), zero biases."""
        chunks = []
        for fan_in, fan_out in zip(self.sizes, self.sizes[1:]):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            chunks.append(rng.uniform(-bound, bound, fan_in * fan_out))
            chunks.append(np.zeros(fan_out))
        return np.concatenate(chunks)

    def unpack(self, flat: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        flat = np.asarray(flat)
        layers = []
        for i in range(0, len(self.spans), 2):
            k_off, k_shape = self.spans[i]
            b_off, b_shape = self.spans[i + 1]
            kernel = flat[k_off:k_off + k_shape[0] * k_shape[1]].reshape(k_shape)
            bias = flat[b_off:b_off + b_shape[0]]
            layers.append((kernel, bias))
        return layers

    def pack(self, layers) -> np.ndarray:
        return np.concatenate([np.concatenate([k.ravel(), b]) for k, b in layers])

    def forward_np(self, flat: np.ndarray, x: np.ndarray, upto_layer: int | None = None) -> np.ndarray:
        """Plain numpy forward pass; ``upto_layer`` returns that layer's activation."""
        h = np.atleast_2d(np.asarray(x, dtype=np.float64))
        for i, (kernel, bias) in enumerate(self.unpack(flat)):
            h = _NP_ACTS[self.activations[i]](h @ kernel + bias)
            if upto_layer is not None and i == upto_layer:
                return h
        return h

    def forward_graph(self, theta: Tensor, base: int, x, upto_layer: int | None = None) -> Tensor:
        h = x if isinstance(x, Tensor) else constant(np.atleast_2d(np.asarray(x, dtype=np.float64)))
        for i in range(0, len(self.spans), 2):
            k_off, k_shape = self.spans[i]
            b_off, b_shape = self.spans[i + 1]
            kernel = theta[base + k_off:base + k_off + k_shape[0] * k_shape[1]].reshape(k_shape)
            bias = theta[base + b_off:base + b_off + b_shape[0]]
            h = _GRAPH_ACTS[self.activations[i // 2]](h @ kernel + bias)
            if upto_layer is not None and i // 2 == upto_layer:
                return h
        return h

    def kernel_sq_norm_graph(self, theta: Tensor, base: int) -> Tensor:
        total = None
        for i in range(0, len(self.spans), 2):
            k_off, k_shape = self.spans[i]
            kernel = theta[base + k_off:base + k_off + k_shape[0] * k_shape[1]]
            term = kernel.square().sum()
            total = term if total is None else total + term
        return total


@dataclass(frozen=True)
class GanArchitecture:
    """Shape and objective of the fully connected adversarial pair."""

    latent_dim: int
    data_dim: int
    hidden_gen: int
    hidden_disc: int
    l2_rate: float = 0.0
    objective: str = "nonsaturating"

    def __post_init__(self):
        if min(self.latent_dim, self.data_dim, self.hidden_gen, self.hidden_disc) <= 0:
            raise ValueError("all architecture dimensions must be positive")
        if self.l2_rate < 0:
            raise ValueError("l2_rate must be non-negative")
        if self.objective not in ("nonsaturating", "minimax"):
            raise ValueError(f"unknown objective {self.objective!r}")


class FcGan:
    """Generator and discriminator as one-hidden-layer MLPs.

    Generator: latent -> relu hidden -> tanh output in (-1, 1)^data_dim.
    Discriminator: data -> relu hidden -> sigmoid scalar in (0, 1).
    The L2 penalty applies to kernels only, never to biases, and each
    network's penalty enters its own loss.
    """

    def __init__(self, arch: GanArchitecture):
        self.arch = arch
        self.gen_net = MlpLayout((arch.latent_dim, arch.hidden_gen, arch.data_dim), ("relu", "tanh"))
        self.disc_net = MlpLayout((arch.data_dim, arch.hidden_disc, 1), ("relu", "sigmoid"))
        self.dim_gen = self.gen_net.n_params
        self.dim_disc = self.disc_net.n_params
        self.dim_params = self.dim_gen + self.dim_disc
        self.latent_dim = arch.latent_dim
        self.data_dim = arch.data_dim

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        return np.concatenate([self.gen_net.init_params(rng), self.disc_net.init_params(rng)])

    def split(self, flat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return flat[:self.dim_gen], flat[self.dim_gen:]

    # -- numpy forward passes ------------------------------------------

    def generator_forward(self, params: np.ndarray, latents: np.ndarray) -> np.ndarray:
        latents = np.atleast_2d(np.asarray(latents, dtype=np.float64))
        if latents.shape[1] != self.latent_dim:
            raise ValueError(f"latent dimension mismatch: {latents.shape[1]} != {self.latent_dim}")
        if not np.all(np.isfinite(latents)):
            raise ValueError("latents must be finite")
        return self.gen_net.forward_np(params[:self.dim_gen], latents)

    def discriminator_forward(self, params: np.ndarray, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.data_dim:
            raise ValueError(f"data dimension mismatch: {x.shape[1]} != {self.data_dim}")
        return self.disc_net.forward_np(params[self.dim_gen:], x)[:, 0]

    # -- graph pieces ----------------------------------------------------

    def generator_graph(self, theta: Tensor, latents: np.ndarray) -> Tensor:
        return self.gen_net.forward_graph(theta, 0, latents)

    def discriminator_graph(self, theta: Tensor, x) -> Tensor:
        return self.disc_net.forward_graph(theta, self.dim_gen, x)

    def gen_terms_graph(self, theta: Tensor, latents: np.ndarray) -> Tensor:
        """Per-latent generator loss, shape (n_latents,)."""
        probs = self.discriminator_graph(theta, self.generator_graph(theta, latents))
        n = probs.shape[0]
        if self.arch.objective == "nonsaturating":
            terms = -probs
        else:
            terms = (1.0 - probs).clamp(PROB_FLOOR, 1.0 - PROB_FLOOR).log()
        return terms.reshape((n,))

    def disc_fake_terms_graph(self, theta: Tensor, latents: np.ndarray) -> Tensor:
        """Per-latent discriminator loss on generated samples, shape (n_latents,)."""
        probs = self.discriminator_graph(theta, self.generator_graph(theta, latents))
        n = probs.shape[0]
        return -((1.0 - probs).clamp(PROB_FLOOR, 1.0 - PROB_FLOOR).log()).reshape((n,))

    def disc_real_terms_graph(self, theta: Tensor, rows: np.ndarray) -> Tensor:
        """Per-instance discriminator loss on real data, shape (n_rows,)."""
        probs = self.discriminator_graph(theta, rows)
        n = probs.shape[0]
        return -(probs.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR).log()).reshape((n,))

    def gen_reg_graph(self, theta: Tensor) -> Tensor:
        return self.gen_net.kernel_sq_norm_graph(theta, 0) * self.arch.l2_rate

    def disc_reg_graph(self, theta: Tensor) -> Tensor:
        return self.disc_net.kernel_sq_norm_graph(theta, self.dim_gen) * self.arch.l2_rate

    # -- scalar conveniences ----------------------------------------------

    def gen_loss(self, params: np.ndarray, latent: np.ndarray) -> float:
        return float(self.gen_terms_graph(Tensor(params), np.atleast_2d(latent)).data[0])

    def disc_fake_loss(self, params: np.ndarray, latent: np.ndarray) -> float:
        return float(self.disc_fake_terms_graph(Tensor(params), np.atleast_2d(latent)).data[0])

    def disc_real_loss(self, params: np.ndarray, x: np.ndarray) -> float:
        return float(self.disc_real_terms_graph(Tensor(params), np.atleast_2d(x)).data[0])


# -- generic batch machinery over any adversarial problem -----------------
#
# A "problem" is anything exposing dim_gen / dim_disc / dim_params /
# latent_dim plus the five *_graph methods used below.  Training, replay
# and inference all go through these helpers so their arithmetic is
# identical, which is what makes bit-exact replay possible.


def gen_batch_loss_graph(problem, theta: Tensor, latents: np.ndarray) -> Tensor:
    if len(latents) == 0:
        raise ValueError("empty latent batch")
    return problem.gen_terms_graph(theta, latents).mean() + problem.gen_reg_graph(theta)


def disc_batch_loss_graph(problem, theta: Tensor, latents: np.ndarray,
                          data_rows: np.ndarray, denom: int | None = None) -> Tensor:
    """Discriminator batch loss with an explicit normalizer.

    ``denom`` defaults to the latent count.  Counterfactual replays drop
    data rows while keeping the original denominator, so removing one
    instance removes exactly one summand.
    """
    if len(latents) == 0:
        raise ValueError("empty latent batch")
    denom = int(len(latents) if denom is None else denom)
    total = problem.disc_fake_terms_graph(theta, latents).sum()
    if len(data_rows):
        total = total + problem.disc_real_terms_graph(theta, data_rows).sum()
    return total * (1.0 / denom) + problem.disc_reg_graph(theta)


def joint_gradient_graph(problem, theta: Tensor, latents: np.ndarray,
                         data_rows: np.ndarray, denom: int | None = None) -> Tensor:
    """Differentiable two-block batch gradient, shape (dim_params,).

    The top block is the gradient of the generator batch loss with respect
    to generator parameters only; the bottom block the discriminator batch
    loss gradient with respect to discriminator parameters only.
    """
    gen_loss = gen_batch_loss_graph(problem, theta, latents)
    disc_loss = disc_batch_loss_graph(problem, theta, latents, data_rows, denom)
    (gen_grad,) = backward(gen_loss, [theta])
    (disc_grad,) = backward(disc_loss, [theta])
    d = problem.dim_gen
    return concat_vec([gen_grad[:d], disc_grad[d:]])


def joint_gradient(problem, params: np.ndarray, latents: np.ndarray,
                   data_rows: np.ndarray, denom: int | None = None) -> np.ndarray:
    theta = Tensor(np.asarray(params, dtype=np.float64))
    return joint_gradient_graph(problem, theta, latents, data_rows, denom).data.copy()


def data_term_gradient(problem, params: np.ndarray, row: np.ndarray) -> np.ndarray:
    """Gradient of one instance's data-term loss, discriminator block only.

    Neither the L2 penalty nor the generated-sample terms depend on the
    instance, so this is the entire per-step effect of removing it.
    """
    theta = Tensor(np.asarray(params, dtype=np.float64))
    loss = problem.disc_real_terms_graph(theta, np.atleast_2d(row)).sum()
    (grad,) = backward(loss, [theta])
    return grad.data[problem.dim_gen:].copy()


def data_term_scores(problem, disc_query: np.ndarray, params: np.ndarray,
                     rows: np.ndarray) -> np.ndarray:
    """<query, data-term gradient> for every row, via one batched double backward.

    Weighting the per-row losses by auxiliary coefficients and
    differentiating the query inner product with respect to those
    coefficients yields all the per-row inner products at once; no per-row
    graphs are built.
    """
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    theta = Tensor(np.asarray(params, dtype=np.float64))
    weights = Tensor(np.ones(len(rows)))
    weighted = weights.dot(problem.disc_real_terms_graph(theta, rows))
    (grad,) = backward(weighted, [theta])
    inner = constant(np.asarray(disc_query, dtype=np.float64)).dot(grad[problem.dim_gen:])
    (per_row,) = backward(inner, [weights])
    return per_row.data.copy()
