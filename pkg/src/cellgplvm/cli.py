"""Command-line surface: preprocess, fit, transform, sweep, eval, check.

Exit codes: 0 on success, 1 for user errors (bad paths, bad configuration,
malformed input), 2 for internal failures.  Every command writes a
`manifest.txt` (key: value lines) into its output directory at start and
finalizes it at the end; wall-clock timestamps live only there, so all other
outputs are byte-identical across reruns with the same inputs and seed.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time

from . import __version__
from .exceptions import CellGplvmError

DEFAULTS = {
    "q": 11,
    "m": 147,
    "batch": 200,
    "epochs": 100,
    "lr1": 0.01,
    "lr2": None,
    "phase1_epochs": 3,
    "seed": 0,
    "hvg": 5000,
}


def _sha256(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


class Manifest:
    """key: value run record, written atomically, finalized on completion."""

    def __init__(self, out_dir, command, args_snapshot):
        self.path = os.path.join(out_dir, "manifest.txt")
        self.entries = {
            "command": command,
            "tool_version": __version__,
            "status": "running",
            "started_unix": f"{time.time():.3f}",
        }
        for key, value in sorted(args_snapshot.items()):
            self.entries[f"arg.{key}"] = str(value)
        self._flush()

    def add_input(self, label, path):
        self.entries[f"input.{label}"] = f"{path} sha256={_sha256(path)}"
        self._flush()

    def finalize(self, status="ok"):
        self.entries["status"] = status
        self.entries["finished_unix"] = f"{time.time():.3f}"
        self.entries["elapsed_s"] = f"{float(self.entries['finished_unix']) - float(self.entries['started_unix']):.3f}"
        self._flush()

    def _flush(self):
        tmp = self.path + ".tmp"
        with open(tmp, "w") as fh:
            for key, value in self.entries.items():
                fh.write(f"{key}: {value}\n")
        os.replace(tmp, self.path)


def _merge_config(args, keys):
    """flags > config file > defaults."""
    file_values = {}
    if getattr(args, "config", None):
        with open(args.config) as fh:
            file_values = json.load(fh)
    for key in keys:
        if getattr(args, key, None) is None:
            setattr(args, key, file_values.get(key, DEFAULTS.get(key)))
    if args.lr2 is None:
        args.lr2 = args.lr1
    return args


def _load_matrix(args, labels_attr="labels"):
    from .data import load_expression

    label_spec = getattr(args, labels_attr, None)
    if label_spec:
        cells_path, genes_path = label_spec.split(",")
        return load_expression(args.matrix, cells_path=cells_path, genes_path=genes_path)
    return load_expression(args.matrix)


def _split_cols(text):
    return [c for c in (text or "").split(",") if c]


# -- commands -------------------------------------------------------------------


def cmd_preprocess(args):
    from .data import preprocess, write_expression

    os.makedirs(args.out, exist_ok=True)
    if args.hvg is not None and args.hvg < 1:
        raise CellGplvmError(f"--hvg must be >= 1, got {args.hvg}")
    manifest = Manifest(args.out, "preprocess", {"hvg": args.hvg, "in": args.matrix})
    manifest.add_input("matrix", args.matrix)
    matrix = _load_matrix(args)
    processed = preprocess(matrix, n_hvg=args.hvg if args.hvg else DEFAULTS["hvg"])
    if str(args.matrix).endswith(".mtx"):
        write_expression(
            processed,
            os.path.join(args.out, "processed.mtx"),
            cells_path=os.path.join(args.out, "cells.txt"),
            genes_path=os.path.join(args.out, "genes.txt"),
        )
    else:
        write_expression(processed, os.path.join(args.out, "processed.csv"))
    manifest.entries["n_cells"] = str(processed.shape[0])
    manifest.entries["n_genes"] = str(processed.shape[1])
    manifest.finalize()
    return 0


def _build_phi(args, matrix):
    """Design matrix + optional severity vector from the covariates CSV."""
    import numpy as np

    from .data import build_design, encode_severity, load_covariates

    if not args.covariates:
        design = None
        phi = np.zeros((matrix.shape[0], 0))
        severity = None
        return design, phi, severity
    cov = load_covariates(args.covariates)
    order = {cid: i for i, cid in enumerate(cov.cell_ids)}
    missing = [c for c in matrix.cell_ids if c not in order]
    if missing:
        raise CellGplvmError(f"covariates missing for cells: {missing[:5]}")
    sel = [order[c] for c in matrix.cell_ids]
    cov_aligned_cat = {k: v[sel] for k, v in cov.categorical.items()}
    cov_aligned_cont = {k: v[sel] for k, v in cov.continuous.items()}
    from .data import CovariateTable

    cov = CovariateTable(
        cell_ids=list(matrix.cell_ids),
        categorical=cov_aligned_cat,
        continuous=cov_aligned_cont,
    )
    columns = _split_cols(args.categorical) + _split_cols(args.continuous)
    design = build_design(cov, columns) if columns else None
    phi = design.phi if design is not None else np.zeros((matrix.shape[0], 0))
    severity = None
    if args.severity_col:
        if args.severity_col in cov.categorical:
            severity = encode_severity(cov.categorical[args.severity_col])
        elif args.severity_col in cov.continuous:
            col = cov.continuous[args.severity_col]
            severity = encode_severity(col.astype(int).astype(object))
        else:
            raise CellGplvmError(f"severity column '{args.severity_col}' not found")
    return design, phi, severity


def cmd_fit(args):
    args = _merge_config(args, ["q", "m", "batch", "epochs", "lr1", "lr2", "phase1_epochs", "seed"])
    from .data import initialize
    from .encoder import init_encoder
    from .model import save_checkpoint
    from .trainer import TrainConfig, fit

    os.makedirs(args.out, exist_ok=True)
    manifest = Manifest(
        args.out,
        "fit",
        {
            "q": args.q,
            "m": args.m,
            "batch": args.batch,
            "epochs": args.epochs,
            "lr1": args.lr1,
            "lr2": args.lr2,
            "phase1_epochs": args.phase1_epochs,
            "seed": args.seed,
            "encoder": args.encoder,
            "severity_col": args.severity_col,
        },
    )
    manifest.add_input("matrix", args.matrix)
    if args.covariates:
        manifest.add_input("covariates", args.covariates)
    matrix = _load_matrix(args)
    design, phi, severity = _build_phi(args, matrix)
    markers = None
    if args.cc_markers:
        manifest.add_input("cc_markers", args.cc_markers)
        with open(args.cc_markers) as fh:
            markers = [line.strip() for line in fh if line.strip()]

    state = initialize(
        matrix,
        phi,
        q_total=args.q,
        m_inducing=args.m,
        cc_markers=markers,
        extra_init=severity,
        seed=args.seed,
    )
    if args.encoder:
        n_input = matrix.shape[1] + (phi.shape[1] if args.encoder_covariates else 0)
        state.encoder = init_encoder(
            n_input,
            args.q,
            seed=args.seed,
            append_covariates=bool(args.encoder_covariates),
        )
    cfg = TrainConfig(
        lr_phase1=args.lr1,
        lr_phase2=args.lr2,
        phase1_epochs=min(args.phase1_epochs, args.epochs),
        total_epochs=args.epochs,
        batch_size=args.batch,
        seed=args.seed,
        checkpoint_every=args.checkpoint_every or 0,
    )
    y = matrix.dense()
    final, trace = fit(y, phi, state, cfg, checkpoint_dir=args.out)
    save_checkpoint(final, os.path.join(args.out, "model.gplvm"))
    trace.write(os.path.join(args.out, "trace.jsonl"))
    if design is not None:
        with open(os.path.join(args.out, "design.csv"), "w") as fh:
            fh.write("cell_id," + ",".join(design.column_labels) + "\n")
            for cid, row in zip(matrix.cell_ids, design.phi):
                fh.write(cid + "," + ",".join(repr(float(v)) for v in row) + "\n")
    with open(os.path.join(args.out, "cells.txt"), "w") as fh:
        fh.write("\n".join(matrix.cell_ids) + "\n")
    with open(os.path.join(args.out, "genes.txt"), "w") as fh:
        fh.write("\n".join(matrix.gene_ids) + "\n")
    manifest.entries["final_minibatch_elbo"] = (
        repr(trace.steps[-1]["minibatch_elbo"]) if trace.steps else "nan"
    )
    manifest.entries["wall_time_s"] = f"{trace.wall_time:.3f}"
    manifest.finalize()
    return 0


def cmd_transform(args):
    import numpy as np

    from .encoder import encode
    from .evaluation import rank_dimensions
    from .exceptions import UnsupportedOperationError
    from .model import load_checkpoint

    os.makedirs(args.out, exist_ok=True)
    manifest = Manifest(args.out, "transform", {"checkpoint": args.checkpoint})
    manifest.add_input("checkpoint", args.checkpoint)
    state = load_checkpoint(args.checkpoint)
    if args.matrix:
        if state.encoder is None:
            raise UnsupportedOperationError(
                "this checkpoint stores point-estimate latents; transforming "
                "unseen cells requires a model fit with --encoder"
            )
        matrix = _load_matrix(args)
        enc_in = matrix.dense()
        if state.encoder.append_covariates:
            _, phi, _ = _build_phi(args, matrix)
            enc_in = np.hstack([enc_in, phi])
        latents, _ = encode(enc_in, state.encoder)
        cell_ids = matrix.cell_ids
    else:
        latents = state.x
        cell_ids = [f"cell{i}" for i in range(latents.shape[0])]
        cells_file = os.path.join(os.path.dirname(args.checkpoint), "cells.txt")
        if os.path.exists(cells_file):
            with open(cells_file) as fh:
                cell_ids = [line.strip() for line in fh if line.strip()]

    header = ["cell_id"] + [
        f"lv{q}:{role}" for q, role in enumerate(state.dim_roles)
    ]
    with open(os.path.join(args.out, "latents.csv"), "w") as fh:
        fh.write(",".join(header) + "\n")
        for cid, row in zip(cell_ids, latents):
            fh.write(cid + "," + ",".join(repr(float(v)) for v in row) + "\n")
    ranking = rank_dimensions(state.spec)
    with open(os.path.join(args.out, "dimensions.csv"), "w") as fh:
        fh.write("rank,dimension,role,lengthscale,inverse_lengthscale\n")
        for rank, dim in enumerate(ranking):
            ls = state.spec.lengthscales[dim]
            fh.write(f"{rank},{dim},{state.dim_roles[dim]},{float(ls)!r},{float(1.0 / ls)!r}\n")
    manifest.finalize()
    return 0


def _modal_row(design_path):
    import numpy as np

    with open(design_path) as fh:
        header = fh.readline()
        rows = [line.strip().split(",")[1:] for line in fh if line.strip()]
    phi = np.asarray(rows, dtype=float)
    uniq, counts = np.unique(phi, axis=0, return_counts=True)
    return uniq[np.argmax(counts)]


def cmd_sweep(args):
    import numpy as np

    from .evaluation import severity_sweep
    from .model import load_checkpoint

    os.makedirs(args.out, exist_ok=True)
    manifest = Manifest(args.out, "sweep", {"checkpoint": args.checkpoint, "dim": args.dim})
    manifest.add_input("checkpoint", args.checkpoint)
    state = load_checkpoint(args.checkpoint)
    if args.dim.isdigit():
        dim = int(args.dim)
    else:
        if args.dim not in state.dim_roles:
            raise CellGplvmError(f"no latent dimension with role '{args.dim}'")
        dim = state.dim_roles.index(args.dim)
    lo, hi, num = (float(x) for x in args.grid.split(":"))
    grid = np.linspace(lo, hi, int(num))
    baseline_x = np.median(state.x, axis=0)
    baseline_phi = (
        _modal_row(args.design) if args.design else np.zeros(state.spec.p_linear)
    )
    result = severity_sweep(state, dim, grid, baseline_x, baseline_phi, top_k=args.top_k)
    gene_ids = [f"gene{j}" for j in range(state.n_genes)]
    genes_file = os.path.join(os.path.dirname(args.checkpoint), "genes.txt")
    if os.path.exists(genes_file):
        with open(genes_file) as fh:
            gene_ids = [line.strip() for line in fh if line.strip()]
    ckpt_hash = _sha256(args.checkpoint)
    with open(os.path.join(args.out, "sweep_curves.csv"), "w") as fh:
        fh.write(f"# checkpoint_sha256: {ckpt_hash}\n")
        fh.write(
            "gene,gene_index,rank,range," + ",".join(f"grid_{float(v)!r}" for v in grid) + "\n"
        )
        for rank, g in enumerate(result.gene_indices):
            curve = ",".join(repr(float(v)) for v in result.curves[:, g])
            fh.write(f"{gene_ids[g]},{g},{rank},{float(result.ranges[g])!r},{curve}\n")
    manifest.finalize()
    return 0


def cmd_eval(args):
    from .data import load_covariates
    from .evaluation import knn_purity, lv_signature_correlation, signature_score
    from .model import load_checkpoint

    os.makedirs(args.out, exist_ok=True)
    manifest = Manifest(args.out, "eval", {"checkpoint": args.checkpoint, "k": args.k})
    manifest.add_input("checkpoint", args.checkpoint)
    state = load_checkpoint(args.checkpoint)
    ckpt_hash = _sha256(args.checkpoint)
    cov = load_covariates(args.labels)
    if args.label_col not in cov.categorical:
        raise CellGplvmError(f"label column '{args.label_col}' not found or not categorical")
    labels = cov.categorical[args.label_col]
    if len(labels) != state.n_cells:
        raise CellGplvmError(
            f"{len(labels)} labels for {state.n_cells} cells in the checkpoint"
        )
    purity = knn_purity(state.x, labels, k=args.k)
    with open(os.path.join(args.out, "purity.csv"), "w") as fh:
        fh.write(f"# checkpoint_sha256: {ckpt_hash}\n")
        fh.write("cell_id,purity\n")
        for cid, value in zip(cov.cell_ids, purity):
            fh.write(f"{cid},{float(value)!r}\n")
    if args.signature and args.matrix:
        matrix = _load_matrix(args, labels_attr="matrix_labels")
        with open(args.signature) as fh:
            genes = [line.strip() for line in fh if line.strip()]
        score = signature_score(matrix, genes, seed=args.seed or 0)
        corr = lv_signature_correlation(state.x, score)
        with open(os.path.join(args.out, "signature_correlation.csv"), "w") as fh:
            fh.write(f"# checkpoint_sha256: {ckpt_hash}\n")
            fh.write("dimension,role,pearson_r\n")
            for q, r in enumerate(corr):
                fh.write(f"{q},{state.dim_roles[q]},{float(r)!r}\n")
    manifest.finalize()
    return 0


def cmd_check(args):
    from .oracle import (
        decomposition_check,
        equivalence_check,
        finite_difference_check,
        make_instance,
    )

    seed = args.seed
    failures = 0
    print(f"self-check with base seed {seed}")
    for i in range(args.instances):
        inst = make_instance(seed + i, n=10 + (i % 3) * 4)
        report = equivalence_check(inst)
        if args.inject_fault and i == 0:
            report.max_marginal_diff += 1e-3
            report.passed = False
        print(f"  marginal equivalence / bound #{i}: {report}")
        failures += 0 if report.passed else 1
    for i in range(3):
        mean_diff, var_diff = decomposition_check(seed + 100 + i)
        ok = mean_diff < 1e-8 and var_diff < 1e-8
        print(
            f"  [{'PASS' if ok else 'FAIL'}] linear/nonlinear split #{i}: "
            f"mean diff {mean_diff:.3e}, var diff {var_diff:.3e}"
        )
        failures += 0 if ok else 1
    for i in range(2):
        worst = finite_difference_check(seed + 200 + i)
        ok = all(r < 1e-4 or a < 1e-6 for r, a in worst.values())
        print(f"  [{'PASS' if ok else 'FAIL'}] gradient check #{i}: worst rel/abs per block")
        for key, (rel, aerr) in sorted(worst.items()):
            print(f"      {key:12s} rel {rel:.3e} abs {aerr:.3e}")
        failures += 0 if ok else 1
    print("all checks passed" if failures == 0 else f"{failures} check(s) FAILED")
    return 0 if failures == 0 else 1


# -- parser -----------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="cellgplvm",
        description="Sparse-variational GPLVM for expression matrices with "
        "covariate random effects in the kernel.",
    )
    parser.add_argument("--threads", type=int, default=None, help="cap BLAS worker threads")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="normalize, log1p and select variable genes")
    p.add_argument("--in", dest="matrix", required=True)
    p.add_argument("--labels", help="cells.txt,genes.txt for MatrixMarket input")
    p.add_argument("--hvg", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("fit", help="train a model")
    p.add_argument("--matrix", required=True, help="processed matrix (csv or mtx)")
    p.add_argument("--labels")
    p.add_argument("--covariates")
    p.add_argument("--categorical", help="comma-separated categorical covariate columns")
    p.add_argument("--continuous", help="comma-separated continuous covariate columns")
    p.add_argument("--severity-col", dest="severity_col")
    p.add_argument("--cc-markers", dest="cc_markers")
    p.add_argument("--config", help="JSON file with defaults (flags win)")
    p.add_argument("--q", type=int, default=None)
    p.add_argument("--m", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr1", type=float, default=None)
    p.add_argument("--lr2", type=float, default=None)
    p.add_argument("--phase1-epochs", dest="phase1_epochs", type=int, default=None)
    p.add_argument("--encoder", action="store_true")
    p.add_argument("--encoder-covariates", dest="encoder_covariates", action="store_true")
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int, default=0)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("transform", help="export latents from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--matrix", help="unseen cells (encoder checkpoints only)")
    p.add_argument("--labels")
    p.add_argument("--covariates")
    p.add_argument("--categorical")
    p.add_argument("--continuous")
    p.add_argument("--severity-col", dest="severity_col")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_transform)

    p = sub.add_parser("sweep", help="perturb one latent dimension and rank genes")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dim", default="severity", help="dimension index or role name")
    p.add_argument("--grid", default="-2:2:9", help="lo:hi:num")
    p.add_argument("--top-k", dest="top_k", type=int, default=20)
    p.add_argument("--design", help="design.csv from fit, for the modal covariate row")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("eval", help="neighborhood purity and signature correlations")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--labels", required=True, help="covariates csv with the label column")
    p.add_argument("--label-col", dest="label_col", required=True)
    p.add_argument("--k", type=int, default=100)
    p.add_argument("--signature", help="file with one gene id per line")
    p.add_argument("--matrix", help="expression matrix for signature scoring")
    p.add_argument("--matrix-labels", dest="matrix_labels", help="cells.txt,genes.txt for mtx")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("check", help="run the built-in verification suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=10)
    p.add_argument("--inject-fault", dest="inject_fault", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_check)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, str(args.threads))
        try:  # caps pools that were already initialized
            import threadpoolctl

            threadpoolctl.threadpool_limits(args.threads)
        except ImportError:
            pass
    try:
        return args.func(args)
    except (CellGplvmError, FileNotFoundError, json.JSONDecodeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except Exception as err:  # internal failure contract: exit code 2
        print(f"internal error: {type(err).__name__}: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
