"""IO, preprocessing, design matrices and initialization."""

import numpy as np
import pytest

from cellgplvm.data import (
    CovariateTable,
    ExpressionMatrix,
    apply_design,
    build_design,
    cell_cycle_score,
    encode_severity,
    initialize,
    load_covariates,
    load_expression,
    preprocess,
    principal_components,
    write_expression,
)
from cellgplvm.exceptions import ConfigError, DataFormatError


def toy_matrix(values, processed=False):
    values = np.asarray(values, dtype=float)
    return ExpressionMatrix(
        values=values,
        cell_ids=[f"c{i}" for i in range(values.shape[0])],
        gene_ids=[f"g{j}" for j in range(values.shape[1])],
        processed=processed,
    )


class TestLoading:
    def test_dense_csv_roundtrip(self, tmp_path):
        m = toy_matrix([[1.0, 2.5, 0.0], [0.25, 7.0, 3.5]])
        path = tmp_path / "expr.csv"
        write_expression(m, path)
        back = load_expression(path)
        np.testing.assert_array_equal(back.dense(), m.dense())
        assert back.cell_ids == m.cell_ids
        assert back.gene_ids == m.gene_ids

    def test_small_dense_csv_labels(self, tmp_path):
        path = tmp_path / "tiny.csv"
        path.write_text("cell_id,gA,gB\nc1,1,2\nc2,3,4\n")
        m = load_expression(path)
        assert m.gene_ids == ["gA", "gB"]
        assert m.cell_ids == ["c1", "c2"]
        np.testing.assert_array_equal(m.dense(), [[1, 2], [3, 4]])

    def test_csv_field_count_error_carries_line(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("cell_id,gA,gB\nc1,1,2\nc2,3\n")
        with pytest.raises(DataFormatError, match="line 3"):
            load_expression(path)

    def test_matrix_market_roundtrip(self, tmp_path):
        m = toy_matrix([[0.0, 2.0], [3.0, 0.0], [0.0, 5.0]])
        mtx = tmp_path / "expr.mtx"
        cells = tmp_path / "cells.txt"
        genes = tmp_path / "genes.txt"
        write_expression(m, mtx, cells_path=cells, genes_path=genes)
        back = load_expression(mtx, cells_path=cells, genes_path=genes)
        assert back.is_sparse
        np.testing.assert_array_equal(back.dense(), m.dense())
        np.testing.assert_array_equal(back.gene_column(1), [2.0, 0.0, 5.0])

    def test_matrix_market_duplicates_summed(self, tmp_path):
        mtx = tmp_path / "dup.mtx"
        mtx.write_text(
            "%%MatrixMarket matrix coordinate real general\n"
            "2 2 3\n1 1 1.5\n1 1 2.5\n2 2 1.0\n"
        )
        (tmp_path / "cells.txt").write_text("c1\nc2\n")
        (tmp_path / "genes.txt").write_text("g1\ng2\n")
        m = load_expression(mtx, cells_path=tmp_path / "cells.txt", genes_path=tmp_path / "genes.txt")
        np.testing.assert_array_equal(m.dense(), [[4.0, 0.0], [0.0, 1.0]])

    def test_label_shape_mismatch(self, tmp_path):
        m = toy_matrix([[1.0, 2.0]])
        mtx = tmp_path / "expr.mtx"
        write_expression(m, mtx, cells_path=tmp_path / "c.txt", genes_path=tmp_path / "g.txt")
        (tmp_path / "c.txt").write_text("c1\nc2\n")
        with pytest.raises(DataFormatError, match="labels"):
            load_expression(mtx, cells_path=tmp_path / "c.txt", genes_path=tmp_path / "g.txt")


class TestPreprocess:
    def test_row_normalization_arithmetic(self):
        m = toy_matrix([[1.0, 1.0, 2.0]])
        out = preprocess(m, n_hvg=3)
        np.testing.assert_allclose(out.dense()[0], np.log1p([2500.0, 2500.0, 5000.0]))

    def test_row_sums_hit_target_before_log(self):
        rng = np.random.default_rng(0)
        counts = rng.poisson(4.0, size=(30, 20)).astype(float)
        counts[counts.sum(axis=1) == 0, 0] = 1.0
        out = preprocess(toy_matrix(counts), n_hvg=20)
        recovered = np.expm1(out.dense())
        np.testing.assert_allclose(recovered.sum(axis=1), 10_000.0, atol=1e-6)

    def test_keep_all_genes_preserves_order(self):
        rng = np.random.default_rng(1)
        m = toy_matrix(rng.poisson(3.0, size=(10, 6)).astype(float) + 1)
        out = preprocess(m, n_hvg=100)
        assert out.gene_ids == m.gene_ids

    def test_planted_high_dispersion_genes_selected(self):
        rng = np.random.default_rng(2)
        n, d = 200, 100
        # background genes with means spread over a decade of rates
        rates = np.geomspace(8.0, 120.0, d)
        counts = rng.poisson(rates, size=(n, d)).astype(float)
        # one bimodal gene per mean decile; the two modes share their
        # geometric mean with the slot's rate so log-means stay put and
        # planted genes never share a bin
        planted = rng.choice(d, size=10, replace=False)
        for k, j in enumerate(planted):
            level = rates[4 + 10 * k]
            counts[:, j] = rng.choice([level / 2.5, level * 2.5], size=n)
        m = toy_matrix(counts)
        out = preprocess(m, n_hvg=10)
        assert set(out.gene_ids) == {f"g{j}" for j in planted}

    def test_all_zero_row_dropped_with_warning(self):
        m = toy_matrix([[1.0, 1.0], [0.0, 0.0], [2.0, 0.0]])
        with pytest.warns(UserWarning, match="c1"):
            out = preprocess(m, n_hvg=2)
        assert out.cell_ids == ["c0", "c2"]

    def test_negative_counts_rejected(self):
        with pytest.raises(ConfigError):
            preprocess(toy_matrix([[1.0, -1.0]]))

    def test_sparse_input_stays_sparse_and_matches_dense(self):
        import scipy.sparse

        rng = np.random.default_rng(4)
        counts = rng.poisson(1.5, size=(40, 25)).astype(float)
        counts[counts.sum(axis=1) == 0, 0] = 1.0
        dense = toy_matrix(counts)
        sparse = ExpressionMatrix(
            values=scipy.sparse.csr_matrix(counts),
            cell_ids=dense.cell_ids,
            gene_ids=dense.gene_ids,
        )
        a = preprocess(dense, n_hvg=10)
        b = preprocess(sparse, n_hvg=10)
        assert b.is_sparse
        assert a.gene_ids == b.gene_ids
        np.testing.assert_array_equal(a.dense(), b.dense())

    def test_hvg_permutation_equivariance(self):
        rng = np.random.default_rng(3)
        counts = rng.poisson(8.0, size=(50, 30)).astype(float) + 1
        m = toy_matrix(counts)
        out = preprocess(m, n_hvg=10)
        perm = rng.permutation(30)
        m2 = ExpressionMatrix(
            values=counts[:, perm],
            cell_ids=m.cell_ids,
            gene_ids=[m.gene_ids[j] for j in perm],
        )
        out2 = preprocess(m2, n_hvg=10)
        assert set(out.gene_ids) == set(out2.gene_ids)


class TestDesign:
    def table(self):
        return CovariateTable(
            cell_ids=["c0", "c1", "c2"],
            categorical={"site": np.array(["B", "A", "B"], dtype=object)},
            continuous={"age": np.array([30.0, 40.0, 50.0])},
        )

    def test_one_hot_block(self):
        design = build_design(self.table(), ["site"])
        np.testing.assert_array_equal(design.phi, [[0, 1], [1, 0], [0, 1]])
        assert design.column_labels == ["site=A", "site=B"]
        assert design.phi.sum(axis=1).tolist() == [1.0, 1.0, 1.0]

    def test_continuous_standardized(self):
        design = build_design(self.table(), ["age"])
        col = design.phi[:, 0]
        assert col.mean() == pytest.approx(0.0, abs=1e-12)
        assert col.std() == pytest.approx(1.0)

    def test_constant_continuous_rejected(self):
        cov = CovariateTable(
            cell_ids=["a", "b"], continuous={"flat": np.array([2.0, 2.0])}
        )
        with pytest.raises(ConfigError, match="zero variance"):
            build_design(cov, ["flat"])

    def test_two_plus_eight_levels_make_ten_columns(self):
        rng = np.random.default_rng(4)
        n = 40
        cov = CovariateTable(
            cell_ids=[f"c{i}" for i in range(n)],
            categorical={
                "gender": np.array(rng.choice(["f", "m"], size=n), dtype=object),
                "ethnicity": np.array(rng.choice(list("abcdefgh"), size=n), dtype=object),
            },
        )
        design = build_design(cov, ["gender", "ethnicity"])
        assert design.phi.shape == (n, 10)

    def test_unseen_level_raises(self):
        design = build_design(self.table(), ["site"])
        new = CovariateTable(
            cell_ids=["x"], categorical={"site": np.array(["C"], dtype=object)}
        )
        with pytest.raises(ConfigError, match="'C'"):
            apply_design(new, design.schema)

    def test_schema_reapplies_first_fit_statistics(self):
        design = build_design(self.table(), ["site", "age"])
        new = CovariateTable(
            cell_ids=["x"],
            categorical={"site": np.array(["A"], dtype=object)},
            continuous={"age": np.array([40.0])},
        )
        phi = apply_design(new, design.schema)
        np.testing.assert_allclose(phi, [[1.0, 0.0, 0.0]], atol=1e-12)

    def test_missing_column(self):
        with pytest.raises(ConfigError, match="not found"):
            build_design(self.table(), ["nope"])


class TestCovariateCsv:
    def test_numeric_columns_become_continuous(self, tmp_path):
        path = tmp_path / "cov.csv"
        path.write_text("cell_id,site,age\nc0,A,30\nc1,B,40\n")
        cov = load_covariates(path)
        assert "site" in cov.categorical
        assert "age" in cov.continuous

    def test_requires_cell_id_header(self, tmp_path):
        path = tmp_path / "cov.csv"
        path.write_text("id,site\nc0,A\n")
        with pytest.raises(DataFormatError):
            load_covariates(path)


class TestSeverity:
    def test_integer_encoding_standardized(self):
        codes = encode_severity(np.array(["mild", "severe", "mild", "critical"], dtype=object),
                                ordering=["mild", "severe", "critical"])
        assert codes.mean() == pytest.approx(0.0, abs=1e-12)
        assert codes.std() == pytest.approx(1.0)
        # ordering respected: critical > severe > mild
        assert codes[3] > codes[1] > codes[0]

    def test_unknown_level(self):
        with pytest.raises(ConfigError):
            encode_severity(np.array(["x"], dtype=object), ordering=["a", "b"])


class TestInitialize:
    def test_pca_matches_eigendecomposition_up_to_sign(self):
        rng = np.random.default_rng(5)
        y = rng.normal(size=(50, 20)) @ rng.normal(size=(20, 20))
        ours = principal_components(y, 3)
        centered = y - y.mean(axis=0)
        _, vecs = np.linalg.eigh(centered.T @ centered)
        for i in range(3):
            scores = centered @ vecs[:, -1 - i]
            r = np.corrcoef(ours[:, i], scores)[0, 1]
            assert abs(r) == pytest.approx(1.0, abs=1e-8)

    def test_exact_rank_two_reconstruction(self):
        rng = np.random.default_rng(6)
        y = np.outer(rng.normal(size=30), rng.normal(size=8)) + np.outer(
            rng.normal(size=30), rng.normal(size=8)
        )
        scores = principal_components(y, 2)
        centered = y - y.mean(axis=0)
        beta, *_ = np.linalg.lstsq(scores, centered, rcond=None)
        np.testing.assert_allclose(scores @ beta, centered, atol=1e-8)

    def test_missing_markers_named(self):
        m = toy_matrix(np.ones((4, 3)), processed=True)
        with pytest.raises(ConfigError, match="gX"):
            cell_cycle_score(m, ["g0", "gX"])

    def test_initialize_layout_and_roles(self):
        rng = np.random.default_rng(7)
        m = toy_matrix(rng.normal(size=(30, 10)), processed=True)
        phi = rng.normal(size=(30, 2))
        severity = rng.integers(0, 3, size=30).astype(float)
        state = initialize(m, phi, q_total=4, m_inducing=6, cc_markers=["g0", "g1"],
                           extra_init=severity, seed=0)
        assert state.dim_roles == ["periodic", "rbf", "rbf", "severity"]
        assert state.x.shape == (30, 4)
        # severity dim standardized from the integer encoding
        assert state.x[:, -1].std() == pytest.approx(1.0)
        assert state.inducing.values.shape == (6, 6)
        assert state.var_means.shape == (10, 6)
        # variational factors start at the prior Cholesky: KL is zero
        from cellgplvm.elbo import elbo_full

        assert elbo_full(m.dense(), phi, state).kl == pytest.approx(0.0, abs=1e-8)

    def test_initialize_deterministic(self):
        rng = np.random.default_rng(8)
        m = toy_matrix(rng.normal(size=(20, 6)), processed=True)
        phi = rng.normal(size=(20, 1))
        a = initialize(m, phi, q_total=3, m_inducing=5, seed=11)
        b = initialize(m, phi, q_total=3, m_inducing=5, seed=11)
        np.testing.assert_array_equal(a.x, b.x)
        np.testing.assert_array_equal(a.inducing.values, b.inducing.values)

    def test_m_must_exceed_covariate_columns(self):
        rng = np.random.default_rng(9)
        m = toy_matrix(rng.normal(size=(10, 4)), processed=True)
        phi = rng.normal(size=(10, 5))
        with pytest.raises(ConfigError, match="hyperplane"):
            initialize(m, phi, q_total=2, m_inducing=5, seed=0)
