"""The variational bound: closed-form checks, unbiasedness, bound property."""

import math

import numpy as np
import pytest

from cellgplvm.elbo import ElboBreakdown, elbo_full, elbo_minibatch, kl_gaussians, tensors_from_state
from cellgplvm.exceptions import NonFiniteError
from cellgplvm.kernel import InducingInputs, KernelSpec, gram_bundle
from cellgplvm.model import ModelState
from cellgplvm.oracle import exact_log_marginal, make_instance
from cellgplvm.trainer import gradients, minibatch_sampler, state_from_tensors


def scalar_state():
    """N = D = M = 1, no covariates: every quantity hand-checkable."""
    spec = KernelSpec(1.3, np.array([0.9, 1.4]), 0.0, 2, 0)
    inducing = InducingInputs(np.array([[0.1, 0.5]]), 2, 0)
    state = ModelState(
        x=np.array([[0.4, -0.3]]),
        inducing=inducing,
        var_means=np.array([[0.9]]),
        var_chol=np.array([[[1.2]]]),
        spec=spec,
        mu_f=0.5,
        zeta=np.zeros((0, 1)),
        sigma_y2=0.7,
    )
    y = np.array([[1.1]])
    phi = np.zeros((1, 0))
    return y, phi, state


def scalar_oracle_terms():
    """Every bound term recomputed with plain scalar arithmetic."""
    sf2, l1, l2, sy2, mu_f, m, c, y = 1.3, 0.9, 1.4, 0.7, 0.5, 0.9, 1.2, 1.1
    x1, x2, z1, z2 = 0.4, -0.3, 0.1, 0.5
    knm = (
        sf2
        * math.exp(-2.0 * math.sin(abs(x1 - z1) / 2.0) ** 2 / l1**2)
        * math.exp(-((x2 - z2) ** 2) / (2.0 * l2**2))
    )
    kmm = sf2
    knn = sf2
    s_var = c * c
    mean = mu_f + knm / kmm * m
    q_nn = knn - knm**2 / kmm
    lam = knm / kmm
    ell = -0.5 * math.log(2 * math.pi * sy2) - (y - mean) ** 2 / (2 * sy2)
    nystrom = q_nn / (2 * sy2)
    trace = lam * s_var * lam / (2 * sy2)
    kl = 0.5 * (s_var / kmm + m * m / kmm - 1.0 + math.log(kmm) - math.log(s_var))
    return ell, trace, nystrom, kl


class TestScalarClosedForm:
    def test_all_four_terms(self):
        y, phi, state = scalar_state()
        out = elbo_full(y, phi, state)
        ell, trace, nystrom, kl = scalar_oracle_terms()
        assert out.expected_loglik == pytest.approx(ell, abs=1e-12)
        assert out.trace_penalty == pytest.approx(trace, abs=1e-12)
        assert out.nystrom_penalty == pytest.approx(nystrom, abs=1e-12)
        assert out.kl == pytest.approx(kl, abs=1e-12)
        assert out.total == pytest.approx(ell - trace - nystrom - kl, abs=1e-12)

    def test_single_row_batch_scaling(self):
        y, phi, state = scalar_state()
        # pretend the dataset has 3 rows; likelihood side scales by 3, KL not
        out = elbo_minibatch(y, phi, [0], state, n_total=3)
        ell, trace, nystrom, kl = scalar_oracle_terms()
        assert out.total == pytest.approx(3 * (ell - trace - nystrom) - kl, abs=1e-11)

    def test_covariate_terms_by_hand(self):
        # N = D = 1, M = 2, P = 1: exercises zeta, the linear kernel and the
        # 2x2 solves with explicit scalar algebra
        sf2, l1, l2, nu, sy2, mu_f, zeta, y, phi = 1.1, 0.8, 1.2, 0.5, 0.6, 0.3, -0.7, 0.9, 0.6
        x = (0.2, -0.4)
        z = [(-0.3, 0.1, 0.4), (0.5, -0.2, -0.1)]  # rows: (periodic, rbf, linear)
        m_vec = (0.4, -0.2)
        c_fac = [[0.9, 0.0], [0.3, 1.1]]  # lower Cholesky of S

        def k_nonlin(a, b):
            return (
                sf2
                * math.exp(-2.0 * math.sin(abs(a[0] - b[0]) / 2.0) ** 2 / l1**2)
                * math.exp(-((a[1] - b[1]) ** 2) / (2.0 * l2**2))
            )

        k1 = k_nonlin(x, z[0]) + nu * phi * z[0][2]
        k2 = k_nonlin(x, z[1]) + nu * phi * z[1][2]
        a11 = sf2 + nu * z[0][2] ** 2
        a22 = sf2 + nu * z[1][2] ** 2
        a12 = k_nonlin(z[0], z[1]) + nu * z[0][2] * z[1][2]
        det = a11 * a22 - a12 * a12
        inv = [[a22 / det, -a12 / det], [-a12 / det, a11 / det]]
        lam = (
            inv[0][0] * k1 + inv[0][1] * k2,
            inv[1][0] * k1 + inv[1][1] * k2,
        )
        s = [
            [c_fac[0][0] ** 2, c_fac[0][0] * c_fac[1][0]],
            [c_fac[0][0] * c_fac[1][0], c_fac[1][0] ** 2 + c_fac[1][1] ** 2],
        ]
        mean = mu_f + phi * zeta + lam[0] * m_vec[0] + lam[1] * m_vec[1]
        knn = sf2 + nu * phi**2
        q_nn = knn - (lam[0] * k1 + lam[1] * k2)
        trace_q = sum(lam[i] * s[i][j] * lam[j] for i in range(2) for j in range(2))
        quad = sum(m_vec[i] * inv[i][j] * m_vec[j] for i in range(2) for j in range(2))
        tr_kinv_s = sum(inv[i][j] * s[j][i] for i in range(2) for j in range(2))
        logdet_k = math.log(det)
        logdet_s = math.log(s[0][0] * s[1][1] - s[0][1] * s[1][0])
        ell = -0.5 * math.log(2 * math.pi * sy2) - (y - mean) ** 2 / (2 * sy2)
        expected = (
            ell
            - q_nn / (2 * sy2)
            - trace_q / (2 * sy2)
            - 0.5 * (tr_kinv_s + quad - 2.0 + logdet_k - logdet_s)
        )

        spec = KernelSpec(sf2, np.array([l1, l2]), nu, 2, 1)
        state = ModelState(
            x=np.array([x]),
            inducing=InducingInputs(np.array(z), 2, 1),
            var_means=np.array([m_vec]),
            var_chol=np.array([c_fac])[None, :, :].reshape(1, 2, 2),
            spec=spec,
            mu_f=mu_f,
            zeta=np.array([[zeta]]),
            sigma_y2=sy2,
        )
        out = elbo_full(np.array([[y]]), np.array([[phi]]), state)
        assert out.total == pytest.approx(expected, abs=1e-12)


class TestBreakdown:
    def test_identity_of_parts(self):
        out = ElboBreakdown.from_parts(1.5, 0.25, 0.125, 0.0625)
        assert out.total == 1.5 - 0.25 - 0.125 - 0.0625  # exact float arithmetic

    def test_nonfinite_named(self):
        with pytest.raises(NonFiniteError, match="trace_penalty"):
            ElboBreakdown.from_parts(1.0, float("nan"), 0.0, 0.0)


class TestKlGaussians:
    def test_identical_gaussians(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(4, 4))
        k = a @ a.T + 4 * np.eye(4)
        assert kl_gaussians(np.zeros(4), k, k) == pytest.approx(0.0, abs=1e-10)

    def test_scaled_covariance_formula(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=(2, 2))
        k = a @ a.T + 2 * np.eye(2)
        e = 1.7
        expected = e - 1.0 - math.log(e)  # (M/2)(e - 1 - ln e) with M = 2
        assert kl_gaussians(np.zeros(2), e * k, k) == pytest.approx(expected, abs=1e-10)

    def test_nonnegativity(self):
        rng = np.random.default_rng(2)
        for _ in range(25):
            a = rng.normal(size=(3, 3))
            b = rng.normal(size=(3, 3))
            s = a @ a.T + 0.5 * np.eye(3)
            k = b @ b.T + 0.5 * np.eye(3)
            m = rng.normal(size=3)
            assert kl_gaussians(m, s, k) >= -1e-10

    def test_singular_s_warns(self):
        rng = np.random.default_rng(3)
        z = rng.normal(size=(4, 2))
        k = np.eye(4)
        with pytest.warns(RuntimeWarning, match="jitter"):
            kl_gaussians(np.zeros(4), z @ z.T, k)

    def test_graph_kl_matches_per_gene_sum(self):
        inst = make_instance(4, n=6, d_genes=3, m_inducing=4)
        y, phi, state = inst["y"], inst["phi"], inst["state"]
        out = elbo_full(y, phi, state)
        bundle = gram_bundle(inst["x"], phi, state.inducing, state.spec)
        direct = sum(
            kl_gaussians(state.var_means[d], state.cov(d), bundle.kmm)
            for d in range(state.n_genes)
        )
        assert out.kl == pytest.approx(direct, rel=1e-9)


class TestMinibatch:
    def test_full_batch_equals_elbo_full_exactly(self):
        inst = make_instance(5, n=9, d_genes=2)
        y, phi, state = inst["y"], inst["phi"], inst["state"]
        full = elbo_full(y, phi, state)
        mb = elbo_minibatch(y, phi, np.arange(9), state)
        assert mb.total == full.total  # bitwise: same computation path

    @pytest.mark.parametrize("n,batch", [(12, 4), (12, 6), (10, 4), (9, 2)])
    def test_partition_average_is_unbiased(self, n, batch):
        # size-weighted average of minibatch totals (KL entering once) equals
        # the full bound; holds exactly, short final batch included
        inst = make_instance(n + batch, n=n, d_genes=1, p=2, q=2, m_inducing=4)
        y, phi, state = inst["y"], inst["phi"], inst["state"]
        batches = [np.arange(i, min(i + batch, n)) for i in range(0, n, batch)]
        weighted = sum(
            (len(b) / n) * elbo_minibatch(y, phi, b, state).total for b in batches
        )
        assert weighted == pytest.approx(elbo_full(y, phi, state).total, abs=1e-10)

    def test_sampler_partition_unbiased(self):
        inst = make_instance(99, n=10, d_genes=2, m_inducing=3)
        y, phi, state = inst["y"], inst["phi"], inst["state"]
        batches = minibatch_sampler(10, 4, seed=3, epoch=0)
        weighted = sum(
            (len(b) / 10) * elbo_minibatch(y, phi, b, state).total for b in batches
        )
        assert weighted == pytest.approx(elbo_full(y, phi, state).total, abs=1e-10)


def optimal_variational(y, phi, state):
    """Closed-form optimum of (m_d, S_d) for fixed hyperparameters."""
    bundle = gram_bundle(state.x, phi, state.inducing, state.spec)
    kmm, kmn = bundle.kmm, bundle.knm.T
    binv = np.linalg.inv(kmm + (kmn @ kmn.T) / state.sigma_y2)
    s_star = kmm @ binv @ kmm
    s_star = 0.5 * (s_star + s_star.T)
    m = kmm.shape[0]
    state.var_chol = np.tile(
        np.linalg.cholesky(s_star + 1e-12 * np.eye(m)), (state.n_genes, 1, 1)
    )
    for d in range(state.n_genes):
        resid = y[:, d] - state.mu_f - phi @ state.zeta[:, d]
        state.var_means[d] = (kmm @ binv @ kmn @ resid) / state.sigma_y2
    return state


class TestBound:
    def test_below_exact_marginal_on_random_states(self):
        for seed in range(15):
            inst = make_instance(seed, n=10, d_genes=2, p=2)
            y, phi, state = inst["y"], inst["phi"], inst["state"]
            exact = exact_log_marginal(
                y, inst["x"], phi, state.spec, state.mu_f, state.zeta, state.sigma_y2
            )
            assert elbo_full(y, phi, state).total <= exact + 1e-6

    def test_tight_with_interpolating_inducing_points(self):
        # N = 6, D = 2, M = 6 with Z = (X | Phi): optimal q closes the gap
        inst = make_instance(42, n=6, d_genes=2, p=2, q=2, m_inducing=4)
        y, phi, state = inst["y"], inst["phi"], inst["state"]
        state.inducing = InducingInputs(np.hstack([inst["x"], phi]), 2, 2)
        state.var_means = np.zeros((2, 6))
        state = optimal_variational(y, phi, state)
        exact = exact_log_marginal(
            y, inst["x"], phi, state.spec, state.mu_f, state.zeta, state.sigma_y2
        )
        gap = exact - elbo_full(y, phi, state).total
        assert -1e-9 <= gap < 1e-4


def test_monotone_full_batch_ascent():
    inst = make_instance(5, n=10, d_genes=2, p=2, q=2, m_inducing=4)
    y, phi, state = inst["y"], inst["phi"], inst["state"]
    tensors = tensors_from_state(state)
    prev = elbo_full(y, phi, state).total
    for _ in range(50):
        snapshot = state_from_tensors(tensors, state)
        grad = gradients(y, phi, np.arange(10), snapshot)
        for key, tensor in tensors.items():
            tensor.value += 1e-5 * grad[key]
        current = elbo_full(y, phi, state_from_tensors(tensors, state)).total
        assert current >= prev - 1e-7
        prev = current
