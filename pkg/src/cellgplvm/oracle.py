"""Exact dense reference computations, for verification only.

Everything here is deliberately independent of the main path: covariances are
assembled entry by entry from the closed-form expressions, inverses are dense,
and nothing is shared with `kernel`/`model` beyond scalar primitives.  That
independence is what makes the cross-checks meaningful.

The central identity being checked: folding the covariate random effects into
the kernel as an additive nu * Phi Phi^T term gives exactly the same marginal
likelihood as integrating the per-gene regression coefficients out of the
additive model with coefficient covariance nu * I.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .exceptions import DimensionMismatchError, IllConditionedMatrixError
from .kernel import InducingInputs, KernelSpec, kernel_eval

MAX_DENSE_N = 200


def _nonlin_scalar(xa, xb, spec: KernelSpec):
    ls = spec.lengthscales
    per = math.exp(-2.0 * math.sin(abs(xa[0] - xb[0]) / 2.0) ** 2 / ls[0] ** 2)
    ard = 1.0
    for q in range(1, spec.q_total):
        ard *= math.exp(-((xa[q] - xb[q]) ** 2) / (2.0 * ls[q] ** 2))
    return spec.signal_variance * per * ard


def dense_nonlin_gram(x, spec: KernelSpec):
    """Entry-by-entry periodic*SE-ARD Gram matrix (no linear term)."""
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    out = np.empty((n, n))
    for i in range(n):
        for j in range(i, n):
            out[i, j] = out[j, i] = _nonlin_scalar(x[i], x[j], spec)
    return out


def _logpdf(y, mean, cov):
    """Gaussian log-density via a dense Cholesky."""
    n = y.shape[0]
    try:
        lower = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as err:
        raise IllConditionedMatrixError(
            "dense covariance is singular even at test scale"
        ) from err
    alpha = np.linalg.solve(lower, y - mean)
    return float(
        -0.5 * alpha @ alpha - np.sum(np.log(np.diag(lower))) - 0.5 * n * math.log(2 * math.pi)
    )


def exact_log_marginal(y, x, phi, spec: KernelSpec, mu_f, zeta, sigma_y2):
    """Sum over genes of log N(y_d | mu_f + Phi zeta_d, K_nn + nu Phi Phi^T + sy2 I)."""
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    phi = np.asarray(phi, dtype=float)
    zeta = (
        np.asarray(zeta, dtype=float).reshape(phi.shape[1], -1)
        if phi.shape[1] > 0
        else np.zeros((0, y.shape[1]))
    )
    n = y.shape[0]
    if n > MAX_DENSE_N:
        raise DimensionMismatchError(f"dense oracle is limited to N <= {MAX_DENSE_N}")
    cov = dense_nonlin_gram(x, spec) + spec.linear_scale * phi @ phi.T + sigma_y2 * np.eye(n)
    total = 0.0
    for d in range(y.shape[1]):
        total += _logpdf(y[:, d], mu_f + phi @ zeta[:, d], cov)
    return total


def augmented_log_marginal(y, x, phi, spec: KernelSpec, mu_f, zeta, sigma_y2):
    """Same marginal, but with the covariance built through the augmented
    kernel route: pairwise kernel_eval over (x, phi) pairs plus noise."""
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    phi = np.asarray(phi, dtype=float)
    zeta = (
        np.asarray(zeta, dtype=float).reshape(phi.shape[1], -1)
        if phi.shape[1] > 0
        else np.zeros((0, y.shape[1]))
    )
    n = y.shape[0]
    cov = np.empty((n, n))
    for i in range(n):
        for j in range(i, n):
            cov[i, j] = cov[j, i] = kernel_eval(x[i], x[j], phi[i], phi[j], spec)
    cov += sigma_y2 * np.eye(n)
    total = 0.0
    for d in range(y.shape[1]):
        total += _logpdf(y[:, d], mu_f + phi @ zeta[:, d], cov)
    return total


def _aug_cross(xa, pa, xb, pb, spec, active_b=None):
    """Dense augmented cross-covariance with optional nonlinear masking of
    the second argument's rows (for block-form inducing inputs)."""
    na, nb = xa.shape[0], xb.shape[0]
    out = np.empty((na, nb))
    for i in range(na):
        for j in range(nb):
            val = spec.linear_scale * float(pa[i] @ pb[j])
            if active_b is None or active_b[j]:
                val += _nonlin_scalar(xa[i], xb[j], spec)
            out[i, j] = val
    return out


def dense_variational_predictive(x_star, phi_star, inducing: InducingInputs, m_d, s_d, spec):
    """Marginals of q(f*) by explicit dense conditioning.

    Builds the joint covariance over (test points, inducing values), applies
    the Gaussian conditioning formula with a dense inverse, then mixes over
    q(u) = N(m_d, s_d).  Returns (mean, marginal variance).
    """
    x_star = np.asarray(x_star, dtype=float)
    phi_star = np.asarray(phi_star, dtype=float)
    zq, zl = inducing.latent, inducing.linear
    active = inducing.nonlin_active
    k_sm = _aug_cross(x_star, phi_star, zq, zl, spec, active_b=active)
    both = None if active is None else np.asarray(active)
    k_mm = _aug_cross(zq, zl, zq, zl, spec, active_b=both)
    if both is not None:
        k_mm[~both, :] = spec.linear_scale * zl[~both] @ zl.T  # mask rows too
    k_ss = _aug_cross(x_star, phi_star, x_star, phi_star, spec)
    inv = np.linalg.inv(k_mm + 1e-12 * np.eye(k_mm.shape[0]))
    mean = k_sm @ inv @ np.asarray(m_d, dtype=float)
    cov = k_ss - k_sm @ inv @ k_sm.T + k_sm @ inv @ np.asarray(s_d) @ inv @ k_sm.T
    return mean, np.diag(cov).copy()


@dataclass
class EquivalenceReport:
    max_marginal_diff: float
    bound_gap: float
    passed: bool

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return (
            f"[{status}] |integrated - augmented| = {self.max_marginal_diff:.3e}, "
            f"log-marginal - elbo = {self.bound_gap:.6g}"
        )


def make_instance(seed, n=12, d_genes=2, p=2, q=2, m_inducing=5):
    """A random small problem with data drawn from the generative model."""
    rng = np.random.default_rng(seed)
    spec = KernelSpec(
        signal_variance=float(rng.uniform(0.5, 2.0)),
        lengthscales=rng.uniform(0.6, 2.0, size=q),
        linear_scale=float(rng.uniform(0.1, 1.0)),
        q_total=q,
        p_linear=p,
    )
    x = rng.normal(size=(n, q))
    phi = rng.normal(size=(n, p))
    mu_f = float(rng.normal(0.0, 0.5))
    zeta = rng.normal(0.0, 0.5, size=(p, d_genes))
    sigma_y2 = float(rng.uniform(0.05, 0.3))
    cov = dense_nonlin_gram(x, spec) + spec.linear_scale * phi @ phi.T
    lower = np.linalg.cholesky(cov + 1e-10 * np.eye(n))
    f = lower @ rng.normal(size=(n, d_genes))
    y = mu_f + phi @ zeta + f + math.sqrt(sigma_y2) * rng.normal(size=(n, d_genes))

    z = np.hstack([rng.normal(size=(m_inducing, q)), rng.normal(size=(m_inducing, p))])
    inducing = InducingInputs(values=z, q_total=q, p_linear=p)
    raw = rng.normal(size=(d_genes, m_inducing, m_inducing)) * 0.3
    var_chol = np.tril(raw, k=-1)
    idx = np.arange(m_inducing)
    var_chol[:, idx, idx] = np.exp(rng.normal(0.0, 0.3, size=(d_genes, m_inducing)))
    from .model import ModelState  # local import to keep the oracle standalone

    state = ModelState(
        x=x,
        inducing=inducing,
        var_means=rng.normal(0.0, 0.5, size=(d_genes, m_inducing)),
        var_chol=var_chol,
        spec=spec,
        mu_f=mu_f,
        zeta=zeta,
        sigma_y2=sigma_y2,
    )
    return {"y": y, "x": x, "phi": phi, "state": state, "spec": spec}


def equivalence_check(instance, tol=1e-8) -> EquivalenceReport:
    """Compare the two marginal-likelihood routes and the variational bound."""
    from .elbo import elbo_full  # local import: oracle stays import-light

    state = instance["state"]
    y, x, phi = instance["y"], instance["x"], instance["phi"]
    spec = state.spec
    lm_integrated = exact_log_marginal(y, x, phi, spec, state.mu_f, state.zeta, state.sigma_y2)
    lm_augmented = augmented_log_marginal(y, x, phi, spec, state.mu_f, state.zeta, state.sigma_y2)
    diff = abs(lm_integrated - lm_augmented)
    bound_gap = lm_integrated - elbo_full(y, phi, state).total
    passed = diff < tol and bound_gap > -1e-6
    return EquivalenceReport(max_marginal_diff=diff, bound_gap=bound_gap, passed=passed)


def make_blockform_state(seed, n=8, d_genes=2, p=2, q=2, m_nonlin=4, m_lin=None):
    """Random state whose inducing inputs are in two-block form.

    The first block carries latent coordinates with zeroed covariate columns;
    the second acts only through the linear term (nonlin_active False) and has
    at most P rows so the linear Gram block stays full rank.  The variational
    factors are block-diagonal so the two posterior parts are independent.
    """
    from .model import ModelState

    rng = np.random.default_rng(seed)
    m_lin = p if m_lin is None else m_lin
    m = m_nonlin + m_lin
    # short lengthscales + spread-out inducing rows keep the Gram blocks
    # well conditioned, so the split can be checked at tight tolerance
    spec = KernelSpec(
        signal_variance=float(rng.uniform(0.5, 2.0)),
        lengthscales=rng.uniform(0.4, 0.9, size=q),
        linear_scale=float(rng.uniform(0.2, 1.5)),
        q_total=q,
        p_linear=p,
    )
    x = rng.normal(size=(n, q))
    phi = rng.normal(size=(n, p))
    z = np.zeros((m, q + p))
    z[:m_nonlin, :q] = rng.uniform(-2.0, 2.0, size=(m_nonlin, q)) + 0.5 * rng.normal(
        size=(m_nonlin, q)
    )
    z[m_nonlin:, q:] = rng.normal(size=(m_lin, p))
    mask = np.array([True] * m_nonlin + [False] * m_lin)
    inducing = InducingInputs(values=z, q_total=q, p_linear=p, nonlin_active=mask)

    var_chol = np.zeros((d_genes, m, m))
    for d in range(d_genes):
        for lo, hi in ((0, m_nonlin), (m_nonlin, m)):
            block = rng.normal(size=(hi - lo, hi - lo)) * 0.3
            block = np.tril(block, k=-1)
            block[np.diag_indices_from(block)] = np.exp(
                rng.normal(0.0, 0.3, size=hi - lo)
            )
            var_chol[d, lo:hi, lo:hi] = block
    state = ModelState(
        x=x,
        inducing=inducing,
        var_means=rng.normal(0.0, 0.7, size=(d_genes, m)),
        var_chol=var_chol,
        spec=spec,
        mu_f=float(rng.normal()),
        zeta=rng.normal(size=(p, d_genes)),
        sigma_y2=float(rng.uniform(0.05, 0.3)),
    )
    return state, x, phi


def decomposition_check(seed, n=8, d_genes=2, p=2, q=2, m_nonlin=4):
    """Max deviation between the full sparse conditional and the sum of its
    independent linear and nonlinear parts, over genes."""
    from .kernel import gram_bundle
    from .model import (
        conditional_f_given_u,
        decompose_linear_nonlinear,
        nonlinear_part_conditional,
    )

    state, x, phi = make_blockform_state(seed, n=n, d_genes=d_genes, p=p, q=q, m_nonlin=m_nonlin)
    bundle = gram_bundle(x, phi, state.inducing, state.spec)
    worst_mean = worst_var = 0.0
    for d in range(d_genes):
        full = conditional_f_given_u(bundle, state.var_means[d], state.cov(d))
        lin = decompose_linear_nonlinear(state, phi, d)
        nonlin = nonlinear_part_conditional(state, x, d)
        worst_mean = max(worst_mean, float(np.max(np.abs(full.mean - lin.mean - nonlin.mean))))
        worst_var = max(
            worst_var,
            float(np.max(np.abs(full.variance - lin.variance - nonlin.variance))),
        )
    return worst_mean, worst_var


def finite_difference_check(
    seed, n=6, d_genes=2, p=2, q=2, m_inducing=3, h=1e-5, batch=None, encoder=False
):
    """Central finite differences against the reverse-mode gradients of the
    minibatch bound; returns {block: (worst rel err, worst abs err on
    near-zero entries)}.  With encoder=True the latents come from a small
    amortizing network (fixed reparameterization draw) so the check runs
    through its weights as well."""
    from .elbo import tensors_from_state
    from .trainer import _objective, gradients

    inst = make_instance(seed, n=n, d_genes=d_genes, p=p, q=q, m_inducing=m_inducing)
    y, phi, state = inst["y"], inst["phi"], inst["state"]
    indices = np.arange(n if batch is None else batch)
    eps = None
    if encoder:
        from .encoder import init_encoder

        state.encoder = init_encoder(d_genes, q, hidden=(3, 2), seed=seed)
        eps = np.random.default_rng(seed).standard_normal((indices.size, q))
    grads = gradients(y, phi, indices, state, eps=eps)

    tensors = tensors_from_state(state)

    def value():
        for t in tensors.values():
            t.grad = None
        total, _ = _objective(y, phi, indices, tensors, state, n, eps=eps)
        return total.item()

    report = {}
    for key, tensor in tensors.items():
        flat = tensor.value.ravel()
        grad = grads[key].ravel()
        worst_rel = worst_abs = 0.0
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            f_plus = value()
            flat[i] = keep - h
            f_minus = value()
            flat[i] = keep
            fd = (f_plus - f_minus) / (2.0 * h)
            if abs(grad[i]) < 1e-3:
                worst_abs = max(worst_abs, abs(fd - grad[i]))
            else:
                worst_rel = max(worst_rel, abs(fd - grad[i]) / abs(grad[i]))
        report[key] = (worst_rel, worst_abs)
    return report
