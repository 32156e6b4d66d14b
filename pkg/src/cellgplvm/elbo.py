"""Factorized stochastic variational lower bound.

Per row n and gene d the bound contributes

    log N(y_nd | mu_f + (Phi zeta_d)_n + k_n^T Kmm^-1 m_d, sy2)
    - q_nn / (2 sy2) - lam_n^T S_d lam_n / (2 sy2)

minus one KL(q(u_d) || p(u_d)) per gene.  The trace penalty uses the rank-one
identity Tr(S_d Lam_n) = lam_n^T S_d lam_n, so nothing bigger than M x M is
ever factored, and a single Cholesky of Kmm is shared by every term.

The whole objective is assembled as an autodiff graph; `elbo_full` and
`elbo_minibatch` run it forward, the trainer also runs it backward.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from . import autodiff as ad
from .exceptions import NonFiniteError
from .kernel import jittered_cholesky

LOG2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class ElboBreakdown:
    """The four summands; total is their stored arithmetic combination."""

    expected_loglik: float
    trace_penalty: float
    nystrom_penalty: float
    kl: float
    total: float

    @classmethod
    def from_parts(cls, expected_loglik, trace_penalty, nystrom_penalty, kl):
        for name, value in (
            ("expected_loglik", expected_loglik),
            ("trace_penalty", trace_penalty),
            ("nystrom_penalty", nystrom_penalty),
            ("kl", kl),
        ):
            if not math.isfinite(value):
                raise NonFiniteError(f"ELBO term {name} is not finite: {value}")
        return cls(
            expected_loglik=expected_loglik,
            trace_penalty=trace_penalty,
            nystrom_penalty=nystrom_penalty,
            kl=kl,
            total=expected_loglik - trace_penalty - nystrom_penalty - kl,
        )


def tensors_from_state(state):
    """Fresh parameter leaves for the graph, log-transformed where positive.

    The variational factors C_d are split into a free strictly-lower part and
    a log-diagonal so that gradient steps cannot leave the PSD cone.
    """
    spec = state.spec
    # leaves own their buffers: training must never mutate the caller's state
    tensors = {
        "x": ad.Tensor(state.x.copy()),
        "z": ad.Tensor(state.inducing.values.copy()),
        "var_means": ad.Tensor(state.var_means.T.copy()),  # (M, D)
        "vc_off": ad.Tensor(np.tril(state.var_chol, k=-1)),
        "vc_ldiag": ad.Tensor(
            np.log(np.diagonal(state.var_chol, axis1=-2, axis2=-1))
        ),
        "log_sf2": ad.Tensor(np.log(spec.signal_variance)),
        "log_ls": ad.Tensor(np.log(spec.lengthscales)),
        "log_sy2": ad.Tensor(np.log(state.sigma_y2)),
        "mu_f": ad.Tensor(np.asarray(state.mu_f, dtype=float)),
        "zeta": ad.Tensor((state.zeta[:, :1] if state.zeta_shared else state.zeta).copy()),
    }
    if spec.linear_scale > 0:
        tensors["log_nu"] = ad.Tensor(np.log(spec.linear_scale))
    if state.encoder is not None:
        for name, w in state.encoder.weights.items():
            tensors[f"enc.{name}"] = ad.Tensor(w.copy())
    return tensors


def _nonlin_cross_graph(a, b, log_ls, log_sf2, q_total):
    """Graph version of the periodic*SE-ARD cross-covariance."""
    diff1 = a[:, 0:1] - ad.swap_last(b[:, 0:1])
    inv_l1sq = ad.exp(-2.0 * log_ls[0])
    s = ad.sin(0.5 * diff1)
    per = ad.exp(-2.0 * inv_l1sq * ad.square(s))
    if q_total > 1:
        ls_r = ad.exp(log_ls[1:])
        sa = a[:, 1:] / ls_r
        sb = b[:, 1:] / ls_r
        sq = (
            ad.tsum(ad.square(sa), axis=1, keepdims=True)
            + ad.swap_last(ad.tsum(ad.square(sb), axis=1, keepdims=True))
            - 2.0 * (sa @ ad.swap_last(sb))
        )
        return ad.exp(log_sf2) * per * ad.exp(-0.5 * sq)
    return ad.exp(log_sf2) * per


def elbo_graph(y_rows, phi_rows, tensors, state, x_rows=None, scale=1.0):
    """Assemble the objective for one batch of rows.

    y_rows/phi_rows are plain (B, D)/(B, P) arrays; x_rows, when given, is a
    (B, Q) tensor overriding the stored latents (encoder mode).  `scale`
    multiplies the likelihood-side terms (N/B for minibatches); the KL is
    never scaled.  Returns (total Tensor, dict of part Tensors).
    """
    spec = state.spec
    b_rows, d_genes = y_rows.shape
    q, m = spec.q_total, state.inducing.m_inducing

    if x_rows is None:
        raise ValueError("x_rows tensor is required")
    z = tensors["z"]
    zq = z[:, :q]
    zl = z[:, q:]
    phi_c = ad.constant(phi_rows)

    knm = _nonlin_cross_graph(x_rows, zq, tensors["log_ls"], tensors["log_sf2"], q)
    kmm = _nonlin_cross_graph(zq, zq, tensors["log_ls"], tensors["log_sf2"], q)
    mask = state.inducing.nonlin_active
    if mask is not None:
        knm = knm * ad.constant(mask.astype(float)[None, :])
        kmm = kmm * ad.constant(np.outer(mask, mask).astype(float))

    sf2 = ad.exp(tensors["log_sf2"])
    if spec.p_linear > 0 and "log_nu" in tensors:
        nu = ad.exp(tensors["log_nu"])
        knm = knm + nu * (phi_c @ ad.swap_last(zl))
        kmm = kmm + nu * (zl @ ad.swap_last(zl))
        knn_diag = sf2 + nu * ad.constant(np.sum(phi_rows * phi_rows, axis=1))
    else:
        knn_diag = sf2 + ad.constant(np.zeros(b_rows))

    lower = ad.cholesky(kmm, name="kmm")
    kmn = ad.swap_last(knm)
    w = ad.tri_solve(lower, kmn)
    lam = ad.tri_solve(lower, w, trans=True)  # (M, B)

    mean = ad.swap_last(lam) @ tensors["var_means"]
    mean = mean + tensors["mu_f"] + phi_c @ tensors["zeta"]
    resid = ad.constant(y_rows) - mean
    sy2 = ad.exp(tensors["log_sy2"])
    ell = (
        -0.5 * b_rows * d_genes * LOG2PI
        - 0.5 * b_rows * d_genes * tensors["log_sy2"]
        - ad.tsum(ad.square(resid)) / (2.0 * sy2)
    )

    q_diag = knn_diag - ad.tsum(kmn * lam, axis=0)
    nystrom = d_genes * ad.tsum(q_diag) / (2.0 * sy2)

    lower_mask = np.tril(np.ones((m, m)), k=-1)
    factors = tensors["vc_off"] * ad.constant(lower_mask) + ad.diag_embed(
        ad.exp(tensors["vc_ldiag"])
    )
    w2 = ad.swap_last(factors) @ lam  # (D, M, B)
    trace_pen = ad.tsum(ad.square(w2)) / (2.0 * sy2)

    # KL(q(u_d) || N(0, kmm)) summed over genes, one shared factor of kmm
    logdet_k = 2.0 * ad.tsum(ad.log(ad.diag_part(lower)))
    logdet_s_sum = 2.0 * ad.tsum(tensors["vc_ldiag"])
    solve_m = ad.tri_solve(lower, tensors["var_means"])
    flat = ad.reshape(ad.transpose(factors, (1, 0, 2)), (m, d_genes * m))
    solve_c = ad.tri_solve(lower, flat)
    kl = 0.5 * (
        ad.tsum(ad.square(solve_c))
        + ad.tsum(ad.square(solve_m))
        - d_genes * m
        + d_genes * logdet_k
        - logdet_s_sum
    )

    parts = {
        "expected_loglik": scale * ell,
        "nystrom_penalty": scale * nystrom,
        "trace_penalty": scale * trace_pen,
        "kl": kl,
    }
    total = parts["expected_loglik"] - parts["trace_penalty"] - parts["nystrom_penalty"] - kl
    return total, parts


def _forward(y, phi, indices, state, n_total):
    y = np.asarray(y, dtype=float)
    phi = np.asarray(phi, dtype=float).reshape(y.shape[0], -1)
    indices = np.asarray(indices, dtype=np.intp)
    tensors = tensors_from_state(state)
    x_rows = tensors["x"][indices]
    scale = float(n_total) / indices.shape[0]
    total, parts = elbo_graph(
        y[indices], phi[indices], tensors, state, x_rows=x_rows, scale=scale
    )
    return total, parts


def elbo_full(y, phi, state) -> ElboBreakdown:
    """Exact bound over the whole dataset."""
    n = np.asarray(y).shape[0]
    _, parts = _forward(y, phi, np.arange(n), state, n)
    return ElboBreakdown.from_parts(
        expected_loglik=parts["expected_loglik"].item(),
        trace_penalty=parts["trace_penalty"].item(),
        nystrom_penalty=parts["nystrom_penalty"].item(),
        kl=parts["kl"].item(),
    )


def elbo_minibatch(y, phi, indices, state, n_total=None) -> ElboBreakdown:
    """Unbiased minibatch estimate: likelihood terms scaled by N/B, KL unscaled.

    `indices` selects rows of the full (y, phi); with indices = 0..N-1 this
    reproduces elbo_full exactly.
    """
    n_total = int(n_total) if n_total is not None else state.n_cells
    _, parts = _forward(y, phi, indices, state, n_total)
    return ElboBreakdown.from_parts(
        expected_loglik=parts["expected_loglik"].item(),
        trace_penalty=parts["trace_penalty"].item(),
        nystrom_penalty=parts["nystrom_penalty"].item(),
        kl=parts["kl"].item(),
    )


def kl_gaussians(m, s, k) -> float:
    """KL( N(m, s) || N(0, k) ) for M-dimensional Gaussians.

    Evaluates 0.5 [ Tr(k^-1 s) + m^T k^-1 m - M + log det k - log det s ].
    A singular s is factored with jitter and flagged through the warning
    channel rather than raising.
    """
    m = np.asarray(m, dtype=float).ravel()
    s = np.asarray(s, dtype=float)
    k = np.asarray(k, dtype=float)
    dim = m.shape[0]
    lk, _ = jittered_cholesky(k, name="prior covariance")
    ls, delta_s = jittered_cholesky(s, name="variational covariance")
    if delta_s > 0:
        warnings.warn(
            f"variational covariance needed jitter {delta_s:g} for its log-determinant",
            RuntimeWarning,
            stacklevel=2,
        )
    half = solve_triangular(lk, ls, lower=True)
    tr = float(np.sum(half * half))
    alpha = solve_triangular(lk, m, lower=True)
    quad = float(alpha @ alpha)
    logdet_k = 2.0 * float(np.sum(np.log(np.diag(lk))))
    logdet_s = 2.0 * float(np.sum(np.log(np.diag(ls))))
    return 0.5 * (tr + quad - dim + logdet_k - logdet_s)
