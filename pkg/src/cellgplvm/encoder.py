"""Amortized variational latents: a small feed-forward encoder.

Two heads share a tanh trunk; the mean head is linear, the variance head is
pushed through softplus with a small floor so variances stay strictly
positive.  Because the weights are shared across cells, the number of
variational parameters does not grow with N.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .exceptions import DimensionMismatchError

VAR_FLOOR = 1e-6
DEFAULT_HIDDEN = (128, 32)


@dataclass
class EncoderParams:
    """Weights for the shared trunk and the two output heads.

    weights maps "w0"/"b0", "w1"/"b1", ... for the trunk layers, then
    "w_mean"/"b_mean" and "w_var"/"b_var" for the heads.
    """

    weights: dict
    hidden: tuple
    n_latent: int
    n_input: int
    append_covariates: bool = False
    layer_order: tuple = field(init=False)

    def __post_init__(self):
        trunk = []
        for i in range(len(self.hidden)):
            trunk += [f"w{i}", f"b{i}"]
        self.layer_order = tuple(trunk + ["w_mean", "b_mean", "w_var", "b_var"])

    def param_count(self):
        return sum(int(np.prod(w.shape)) for w in self.weights.values())


def init_encoder(
    n_input, n_latent, hidden=DEFAULT_HIDDEN, seed=0, append_covariates=False
) -> EncoderParams:
    """Xavier-scaled random weights, zero biases."""
    rng = np.random.default_rng([int(seed), 0xE2C0DE])
    weights = {}
    fan_in = n_input
    for i, width in enumerate(hidden):
        scale = np.sqrt(2.0 / (fan_in + width))
        weights[f"w{i}"] = rng.normal(0.0, scale, size=(fan_in, width))
        weights[f"b{i}"] = np.zeros(width)
        fan_in = width
    for head in ("mean", "var"):
        scale = np.sqrt(2.0 / (fan_in + n_latent))
        weights[f"w_{head}"] = rng.normal(0.0, scale, size=(fan_in, n_latent))
        weights[f"b_{head}"] = np.zeros(n_latent)
    return EncoderParams(
        weights=weights,
        hidden=tuple(hidden),
        n_latent=n_latent,
        n_input=n_input,
        append_covariates=append_covariates,
    )


def encode_graph(y_rows, tensors, params: EncoderParams):
    """Forward pass as autodiff tensors; y_rows is a constant (B, D_in) array.

    Returns (mean, var) tensors of shape (B, Q).
    """
    h = ad.constant(y_rows)
    for i in range(len(params.hidden)):
        h = ad.tanh(h @ tensors[f"w{i}"] + tensors[f"b{i}"])
    mean = h @ tensors["w_mean"] + tensors["b_mean"]
    var = ad.softplus(h @ tensors["w_var"] + tensors["b_var"]) + VAR_FLOOR
    return mean, var


def encode(y, params: EncoderParams):
    """Deterministic forward pass; accepts one row (D_in,) or a batch (B, D_in)."""
    y = np.asarray(y, dtype=float)
    single = y.ndim == 1
    rows = y[None, :] if single else y
    if rows.shape[1] != params.n_input:
        raise DimensionMismatchError(
            f"encoder expects {params.n_input} input features, got {rows.shape[1]}"
        )
    tensors = {k: ad.constant(v) for k, v in params.weights.items()}
    mean, var = encode_graph(rows, tensors, params)
    if single:
        return mean.value[0], var.value[0]
    return mean.value, var.value


def kl_standard_normal(mean, var):
    """Sum over cells of KL(N(mean, diag var) || N(0, I))."""
    return 0.5 * float(np.sum(mean**2 + var - 1.0 - np.log(var)))


def amortized_elbo_terms(y_b, params: EncoderParams, rng, phi_b=None):
    """Sample latents by reparameterization and return their prior KL.

    x = mean + sqrt(var) * eps with eps ~ N(0, I) drawn from `rng`; the
    returned kl is unscaled (the minibatch objective scales it by N/B).
    When the encoder was built with append_covariates, phi_b is concatenated
    onto the expression rows.
    """
    y_b = np.atleast_2d(np.asarray(y_b, dtype=float))
    if params.append_covariates:
        if phi_b is None:
            raise DimensionMismatchError("encoder expects covariates appended")
        y_b = np.hstack([y_b, np.atleast_2d(np.asarray(phi_b, dtype=float))])
    mean, var = encode(y_b, params)
    eps = rng.standard_normal(mean.shape)
    x_b = mean + np.sqrt(var) * eps
    return x_b, kl_standard_normal(mean, var)
