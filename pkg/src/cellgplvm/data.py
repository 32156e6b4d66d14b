"""Expression/covariate ingestion, preprocessing and model initialization.

Preprocessing follows the usual expression-matrix recipe: scale each cell to
10,000 total counts, log1p, then keep the most dispersed genes (variance/mean
of the log values, z-scored within 20 mean-expression bins).
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.io
import scipy.sparse

from .exceptions import ConfigError, DataFormatError, DimensionMismatchError
from .kernel import InducingInputs, KernelSpec, gram_bundle, jittered_cholesky
from .model import ModelState

TARGET_SUM = 10_000.0
HVG_BINS = 20


@dataclass
class ExpressionMatrix:
    """Cells x genes matrix with labels; values may be dense or CSR sparse."""

    values: object  # np.ndarray or scipy.sparse.csr_matrix
    cell_ids: list
    gene_ids: list
    processed: bool = False

    def __post_init__(self):
        if self.shape[0] != len(self.cell_ids) or self.shape[1] != len(self.gene_ids):
            raise DimensionMismatchError(
                f"matrix {self.shape} disagrees with labels "
                f"({len(self.cell_ids)} cells, {len(self.gene_ids)} genes)"
            )

    @property
    def shape(self):
        return self.values.shape

    @property
    def is_sparse(self):
        return scipy.sparse.issparse(self.values)

    def dense(self):
        return self.values.toarray() if self.is_sparse else np.asarray(self.values)

    def gene_column(self, j):
        """Column j as a dense vector; sparse storage densifies one gene at
        a time here rather than all at once."""
        if self.is_sparse:
            return np.asarray(self.values[:, j].todense()).ravel()
        return self.values[:, j]


@dataclass
class CovariateTable:
    """Per-cell metadata split into categorical and continuous columns."""

    cell_ids: list
    categorical: dict = field(default_factory=dict)  # name -> array of level strings
    continuous: dict = field(default_factory=dict)  # name -> float array

    def __post_init__(self):
        n = len(self.cell_ids)
        if len(set(self.cell_ids)) != n:
            raise DataFormatError("duplicate cell ids in covariate table")
        for name, col in {**self.categorical, **self.continuous}.items():
            if len(col) != n:
                raise DimensionMismatchError(f"covariate column '{name}' has wrong length")


@dataclass
class DesignMatrix:
    """One-hot categorical blocks followed by standardized continuous columns."""

    phi: np.ndarray
    column_labels: list
    schema: dict

    @property
    def shape(self):
        return self.phi.shape


# -- loading / writing --------------------------------------------------------


def load_expression(path, cells_path=None, genes_path=None) -> ExpressionMatrix:
    """Read a dense CSV (header row of gene ids, first column of cell ids) or
    a MatrixMarket coordinate file plus two label files (cells, genes)."""
    path = str(path)
    if path.endswith((".mtx", ".mtx.gz")):
        if cells_path is None or genes_path is None:
            raise ConfigError("MatrixMarket input needs cell and gene label files")
        try:
            mat = scipy.io.mmread(path)
        except Exception as err:
            raise DataFormatError(f"cannot parse MatrixMarket file {path}: {err}") from None
        values = scipy.sparse.csr_matrix(mat)  # duplicate entries are summed
        cells = _read_lines(cells_path)
        genes = _read_lines(genes_path)
        if values.shape != (len(cells), len(genes)):
            raise DataFormatError(
                f"matrix shape {values.shape} does not match labels "
                f"({len(cells)} cells, {len(genes)} genes)"
            )
        return ExpressionMatrix(values=values, cell_ids=cells, gene_ids=genes)
    return _load_dense_csv(path)


def _read_lines(path):
    with open(path) as fh:
        return [line.strip() for line in fh if line.strip()]


def _load_dense_csv(path) -> ExpressionMatrix:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError("empty CSV file", line=1) from None
        genes = header[1:]
        cells, rows = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(genes) + 1:
                raise DataFormatError(
                    f"expected {len(genes) + 1} fields, found {len(row)}", line=lineno
                )
            cells.append(row[0])
            try:
                rows.append([float(v) for v in row[1:]])
            except ValueError as err:
                raise DataFormatError(f"non-numeric value: {err}", line=lineno) from None
    return ExpressionMatrix(values=np.asarray(rows, dtype=float), cell_ids=cells, gene_ids=genes)


def write_expression(matrix: ExpressionMatrix, path, cells_path=None, genes_path=None):
    """Write back out as dense CSV or (with label paths) MatrixMarket."""
    path = str(path)
    if path.endswith(".mtx"):
        if cells_path is None or genes_path is None:
            raise ConfigError("MatrixMarket output needs cell and gene label paths")
        payload = matrix.values if matrix.is_sparse else matrix.dense()
        scipy.io.mmwrite(path, scipy.sparse.coo_matrix(payload))
        for label_path, labels in ((cells_path, matrix.cell_ids), (genes_path, matrix.gene_ids)):
            with open(label_path, "w") as fh:
                fh.write("\n".join(labels) + "\n")
        return
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cell_id"] + list(matrix.gene_ids))
        dense = matrix.dense()
        for cid, row in zip(matrix.cell_ids, dense):
            writer.writerow([cid] + [repr(float(v)) for v in row])


def load_covariates(path) -> CovariateTable:
    """CSV keyed by cell_id; numeric columns become continuous covariates."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "cell_id":
            raise DataFormatError("covariate CSV must start with a cell_id column", line=1)
        names = header[1:]
        cells = []
        columns = {name: [] for name in names}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataFormatError(
                    f"expected {len(header)} fields, found {len(row)}", line=lineno
                )
            cells.append(row[0])
            for name, value in zip(names, row[1:]):
                columns[name].append(value)
    categorical, continuous = {}, {}
    for name, col in columns.items():
        try:
            continuous[name] = np.asarray([float(v) for v in col])
        except ValueError:
            categorical[name] = np.asarray(col, dtype=object)
    return CovariateTable(cell_ids=cells, categorical=categorical, continuous=continuous)


# -- preprocessing -------------------------------------------------------------


def preprocess(matrix: ExpressionMatrix, n_hvg=5000) -> ExpressionMatrix:
    """Normalize per cell to 10,000 counts, log1p, keep the n_hvg most
    dispersed genes (original gene order preserved).

    Sparse input stays sparse throughout: row scaling and log1p preserve the
    zero pattern, and the dispersion statistics come from column moments.
    All-zero cells cannot be normalized and are dropped with a warning.
    """
    sparse_in = matrix.is_sparse
    counts = matrix.values.tocsr().astype(float) if sparse_in else matrix.dense().astype(float)
    if (counts < 0).sum() > 0:
        raise ConfigError("expression counts must be nonnegative before preprocessing")
    row_sums = np.asarray(counts.sum(axis=1)).ravel()
    keep = row_sums > 0
    if not keep.all():
        dropped = [matrix.cell_ids[i] for i in np.flatnonzero(~keep)]
        warnings.warn(f"dropping {len(dropped)} all-zero cells: {dropped}", stacklevel=2)
        counts = counts[keep]
        row_sums = row_sums[keep]
    cell_ids = [c for c, k in zip(matrix.cell_ids, keep) if k]
    if sparse_in:
        logged = scipy.sparse.csr_matrix(
            counts.multiply((TARGET_SUM / row_sums)[:, None])
        )
        logged.data = np.log1p(logged.data)
    else:
        logged = np.log1p(counts * (TARGET_SUM / row_sums[:, None]))

    if n_hvg < 1:
        raise ConfigError("n_hvg must be >= 1")
    if n_hvg >= logged.shape[1]:
        mask = np.ones(logged.shape[1], dtype=bool)
    else:
        mask = _hvg_mask(logged, matrix.gene_ids, n_hvg)
    return ExpressionMatrix(
        values=logged[:, mask],
        cell_ids=cell_ids,
        gene_ids=[g for g, m in zip(matrix.gene_ids, mask) if m],
        processed=True,
    )


def _column_moments(logged):
    if scipy.sparse.issparse(logged):
        means = np.asarray(logged.mean(axis=0)).ravel()
        second = np.asarray(logged.multiply(logged).mean(axis=0)).ravel()
        return means, second - means**2
    return logged.mean(axis=0), logged.var(axis=0)


def _hvg_mask(logged, gene_ids, n_hvg):
    """Normalized-dispersion gene selection, z-scored within equal-frequency
    mean-expression bins; ties broken by gene id."""
    means, variances = _column_moments(logged)
    with np.errstate(divide="ignore", invalid="ignore"):
        dispersion = np.where(means > 0, variances / means, 0.0)
    order = np.argsort(means, kind="stable")
    z = np.zeros_like(dispersion)
    for bin_idx in np.array_split(order, HVG_BINS):
        if bin_idx.size == 0:
            continue
        d = dispersion[bin_idx]
        spread = d.std()
        z[bin_idx] = (d - d.mean()) / spread if spread > 0 else 0.0
    ranked = sorted(range(len(gene_ids)), key=lambda j: (-z[j], gene_ids[j]))
    mask = np.zeros(len(gene_ids), dtype=bool)
    mask[ranked[:n_hvg]] = True
    return mask


# -- design matrix ---------------------------------------------------------------


def build_design(cov: CovariateTable, columns) -> DesignMatrix:
    """One-hot the named categoricals (levels lexicographic) and standardize
    the named continuous columns, in the order given."""
    blocks, labels = [], []
    schema = {"order": list(columns), "categorical": {}, "continuous": {}}
    for name in columns:
        if name in cov.categorical:
            levels = sorted(set(cov.categorical[name]))
            schema["categorical"][name] = levels
            onehot = np.zeros((len(cov.cell_ids), len(levels)))
            index = {lvl: i for i, lvl in enumerate(levels)}
            for row, lvl in enumerate(cov.categorical[name]):
                onehot[row, index[lvl]] = 1.0
            blocks.append(onehot)
            labels += [f"{name}={lvl}" for lvl in levels]
        elif name in cov.continuous:
            col = np.asarray(cov.continuous[name], dtype=float)
            std = col.std()
            if std == 0:
                raise ConfigError(f"continuous covariate '{name}' has zero variance")
            schema["continuous"][name] = (float(col.mean()), float(std))
            blocks.append(((col - col.mean()) / std)[:, None])
            labels.append(name)
        else:
            raise ConfigError(f"covariate column '{name}' not found")
    phi = np.hstack(blocks) if blocks else np.zeros((len(cov.cell_ids), 0))
    return DesignMatrix(phi=phi, column_labels=labels, schema=schema)


def apply_design(cov: CovariateTable, schema) -> np.ndarray:
    """Re-encode new cells with a previously built schema; unseen categorical
    levels are an error."""
    blocks = []
    for name in schema["order"]:
        if name in schema["categorical"]:
            levels = schema["categorical"][name]
            index = {lvl: i for i, lvl in enumerate(levels)}
            onehot = np.zeros((len(cov.cell_ids), len(levels)))
            for row, lvl in enumerate(cov.categorical[name]):
                if lvl not in index:
                    raise ConfigError(
                        f"unseen level '{lvl}' for covariate '{name}'; known: {levels}"
                    )
                onehot[row, index[lvl]] = 1.0
            blocks.append(onehot)
        else:
            mean, std = schema["continuous"][name]
            col = np.asarray(cov.continuous[name], dtype=float)
            blocks.append(((col - mean) / std)[:, None])
    return np.hstack(blocks) if blocks else np.zeros((len(cov.cell_ids), 0))


def encode_severity(levels, ordering=None):
    """Ordered categories -> integers 0..k, standardized."""
    levels = np.asarray(levels, dtype=object)
    ordering = list(ordering) if ordering is not None else sorted(set(levels))
    index = {lvl: i for i, lvl in enumerate(ordering)}
    try:
        codes = np.asarray([index[lvl] for lvl in levels], dtype=float)
    except KeyError as err:
        raise ConfigError(f"severity level {err} missing from ordering {ordering}") from None
    std = codes.std()
    return (codes - codes.mean()) / std if std > 0 else codes - codes.mean()


# -- PCA and initialization ------------------------------------------------------

EXACT_SVD_MAX_N = 20_000


def principal_components(y, n_components, seed=0):
    """Scores of the leading principal components, one standardized column
    each; exact SVD up to 20k rows, randomized range-finder above."""
    y = np.asarray(y, dtype=float)
    centered = y - y.mean(axis=0)
    if y.shape[0] <= EXACT_SVD_MAX_N:
        u, s, _ = np.linalg.svd(centered, full_matrices=False)
    else:
        u, s = _randomized_svd(centered, n_components, seed=seed)
    scores = u[:, :n_components] * s[:n_components]
    std = scores.std(axis=0)
    std[std == 0] = 1.0
    return (scores - scores.mean(axis=0)) / std


def _randomized_svd(a, rank, oversample=10, n_iter=2, seed=0):
    rng = np.random.default_rng([int(seed), 0x5FD])
    sketch = a @ rng.standard_normal((a.shape[1], rank + oversample))
    q, _ = np.linalg.qr(sketch)
    for _ in range(n_iter):
        q, _ = np.linalg.qr(a @ (a.T @ q))
    u_small, s, _ = np.linalg.svd(q.T @ a, full_matrices=False)
    return q @ u_small, s


def cell_cycle_score(matrix: ExpressionMatrix, markers):
    """Standardized mean expression of the marker genes."""
    index = {g: j for j, g in enumerate(matrix.gene_ids)}
    missing = [g for g in markers if g not in index]
    if missing:
        raise ConfigError(f"cell-cycle markers not in gene list: {missing}")
    cols = np.column_stack([matrix.gene_column(index[g]) for g in markers])
    score = cols.mean(axis=1)
    std = score.std()
    return (score - score.mean()) / std if std > 0 else score - score.mean()


def initialize(
    matrix: ExpressionMatrix,
    phi,
    q_total,
    m_inducing,
    cc_markers=None,
    extra_init=None,
    seed=0,
) -> ModelState:
    """Informative starting state.

    Latent dim 0 is the standardized marker score (or small noise when no
    markers are given); the following dims are leading principal components;
    an optional trailing dim comes from `extra_init` (e.g. encoded severity).
    Inducing inputs are a perturbed subsample of the initialized (X | Phi)
    rows, and the variational factors start at the prior Cholesky so the KL
    term starts at zero.
    """
    y = matrix.dense().astype(float)
    phi = np.asarray(phi.phi if isinstance(phi, DesignMatrix) else phi, dtype=float)
    if phi.ndim != 2 or phi.shape[0] != y.shape[0]:
        raise DimensionMismatchError("design matrix rows must match cells")
    n, p = phi.shape
    rng = np.random.default_rng([int(seed), 0x1417])

    n_extra = 1 if extra_init is not None else 0
    n_pcs = q_total - 1 - n_extra
    if n_pcs < 0:
        raise ConfigError("q_total too small for the requested latent layout")
    x = np.zeros((n, q_total))
    if cc_markers is not None:
        x[:, 0] = cell_cycle_score(matrix, cc_markers)
    else:
        x[:, 0] = rng.normal(0.0, 0.1, size=n)
    if n_pcs > 0:
        x[:, 1 : 1 + n_pcs] = principal_components(y, n_pcs, seed=seed)
    roles = ["periodic"] + ["rbf"] * n_pcs
    if extra_init is not None:
        extra = np.asarray(extra_init, dtype=float)
        if extra.shape != (n,):
            raise DimensionMismatchError("extra_init must supply one value per cell")
        std = extra.std()
        x[:, -1] = (extra - extra.mean()) / std if std > 0 else extra - extra.mean()
        roles.append("severity")

    inputs = np.hstack([x, phi])
    chosen = rng.choice(n, size=m_inducing, replace=m_inducing > n)
    z = inputs[chosen] + rng.normal(0.0, 0.1, size=(m_inducing, q_total + p))
    inducing = InducingInputs(values=z, q_total=q_total, p_linear=p)

    var_y = float(y.var())
    spec = KernelSpec(
        signal_variance=var_y / 2.0 if var_y > 0 else 1.0,
        lengthscales=np.ones(q_total),
        linear_scale=0.1,
        q_total=q_total,
        p_linear=p,
    )
    bundle = gram_bundle(x, phi, inducing, spec)
    lower, _ = jittered_cholesky(bundle.kmm, name="kmm")
    d_genes = y.shape[1]
    return ModelState(
        x=x,
        inducing=inducing,
        var_means=np.zeros((d_genes, m_inducing)),
        var_chol=np.tile(lower, (d_genes, 1, 1)),
        spec=spec,
        mu_f=float(y.mean()),
        zeta=np.zeros((p, d_genes)),
        sigma_y2=0.5 * var_y if var_y > 0 else 0.5,
        dim_roles=roles,
    )
