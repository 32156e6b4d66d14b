"""End-to-end runs of every subcommand against tiny synthetic inputs."""

import csv

import numpy as np
import pytest

from cellgplvm.cli import main
from cellgplvm.model import load_checkpoint


@pytest.fixture()
def workdir(tmp_path):
    """Raw counts CSV + covariates CSV + marker list for 40 cells, 12 genes."""
    rng = np.random.default_rng(0)
    n, d = 40, 12
    counts = rng.poisson(6.0, size=(n, d)).astype(float) + 1.0
    gene_ids = [f"g{j}" for j in range(d)]
    cell_ids = [f"cell{i}" for i in range(n)]
    with open(tmp_path / "counts.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cell_id"] + gene_ids)
        for cid, row in zip(cell_ids, counts):
            writer.writerow([cid] + [repr(float(v)) for v in row])
    sites = rng.choice(["siteA", "siteB"], size=n)
    severities = rng.choice(["mild", "moderate", "severe"], size=n)
    with open(tmp_path / "covariates.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cell_id", "site", "severity"])
        for cid, s, sev in zip(cell_ids, sites, severities):
            writer.writerow([cid, s, sev])
    (tmp_path / "markers.txt").write_text("g0\ng1\n")
    return tmp_path


def run(*args):
    return main([str(a) for a in args])


class TestPreprocess:
    def test_writes_processed_matrix(self, workdir):
        out = workdir / "proc"
        code = run("preprocess", "--in", workdir / "counts.csv", "--hvg", "8", "--out", out)
        assert code == 0
        assert (out / "processed.csv").exists()
        manifest = (out / "manifest.txt").read_text()
        assert "status: ok" in manifest
        assert "sha256=" in manifest

    def test_missing_input_is_user_error(self, workdir, capsys):
        code = run("preprocess", "--in", workdir / "absent.csv", "--out", workdir / "o")
        assert code == 1
        assert "absent.csv" in capsys.readouterr().err

    def test_hvg_zero_rejected(self, workdir):
        code = run("preprocess", "--in", workdir / "counts.csv", "--hvg", "0", "--out", workdir / "o")
        assert code == 1


def fit_args(workdir, out, *extra):
    return (
        "fit",
        "--matrix", workdir / "proc" / "processed.csv",
        "--covariates", workdir / "covariates.csv",
        "--categorical", "site",
        "--cc-markers", workdir / "markers.txt",
        "--q", 3, "--m", 6, "--batch", 16, "--epochs", 3,
        "--lr1", 0.02, "--phase1-epochs", 1, "--seed", 3,
        "--out", out, *extra,
    )


@pytest.fixture()
def fitted(workdir):
    assert run("preprocess", "--in", workdir / "counts.csv", "--hvg", 10, "--out", workdir / "proc") == 0
    out = workdir / "run"
    assert run(*fit_args(workdir, out)) == 0
    return out


class TestFit:
    def test_produces_checkpoint_and_trace(self, fitted):
        assert (fitted / "model.gplvm").exists()
        trace = (fitted / "trace.jsonl").read_text().splitlines()
        assert len(trace) == 1 + 3 * 3  # header + epochs * ceil(40/16)
        assert (fitted / "design.csv").exists()

    def test_epochs_zero_checkpoint_equals_init(self, workdir):
        assert run("preprocess", "--in", workdir / "counts.csv", "--hvg", 10, "--out", workdir / "proc") == 0
        out_a = workdir / "zero_a"
        out_b = workdir / "zero_b"
        base = fit_args(workdir, out_a)
        args = [str(a) for a in base]
        args[args.index("3", args.index("--epochs"))] = "0"  # epochs 0
        assert main(args) == 0
        args[args.index(str(out_a))] = str(out_b)
        assert main(args) == 0
        bytes_a = (out_a / "model.gplvm").read_bytes()
        bytes_b = (out_b / "model.gplvm").read_bytes()
        assert bytes_a == bytes_b

    def test_byte_identical_reruns(self, workdir):
        assert run("preprocess", "--in", workdir / "counts.csv", "--hvg", 10, "--out", workdir / "proc") == 0
        out_a, out_b = workdir / "runA", workdir / "runB"
        assert run(*fit_args(workdir, out_a)) == 0
        assert run(*fit_args(workdir, out_b)) == 0
        assert (out_a / "model.gplvm").read_bytes() == (out_b / "model.gplvm").read_bytes()
        assert (out_a / "trace.jsonl").read_bytes() == (out_b / "trace.jsonl").read_bytes()

    def test_severity_column_adds_dimension(self, workdir):
        assert run("preprocess", "--in", workdir / "counts.csv", "--hvg", 10, "--out", workdir / "proc") == 0
        out = workdir / "sev"
        assert run(*fit_args(workdir, out, "--severity-col", "severity")) == 0
        state = load_checkpoint(out / "model.gplvm")
        assert state.dim_roles[-1] == "severity"

    def test_fit_without_covariates(self, workdir):
        assert run("preprocess", "--in", workdir / "counts.csv", "--hvg", 10, "--out", workdir / "proc") == 0
        out = workdir / "nocov"
        code = run(
            "fit", "--matrix", workdir / "proc" / "processed.csv",
            "--q", 2, "--m", 5, "--batch", 16, "--epochs", 2,
            "--lr1", 0.02, "--phase1-epochs", 1, "--seed", 0, "--out", out,
        )
        assert code == 0
        state = load_checkpoint(out / "model.gplvm")
        assert state.spec.p_linear == 0

    def test_m_not_exceeding_covariates_is_user_error(self, workdir, capsys):
        assert run("preprocess", "--in", workdir / "counts.csv", "--hvg", 10, "--out", workdir / "proc") == 0
        args = [str(a) for a in fit_args(workdir, workdir / "bad")]
        args[args.index("6", args.index("--m"))] = "2"
        code = main(args)
        assert code == 1
        assert "hyperplane" in capsys.readouterr().err


class TestTransform:
    def test_point_mode_exports_stored_latents(self, fitted, workdir):
        out = workdir / "latents"
        assert run("transform", "--checkpoint", fitted / "model.gplvm", "--out", out) == 0
        lines = (out / "latents.csv").read_text().splitlines()
        header = lines[0].split(",")
        assert header[0] == "cell_id"
        assert header[1] == "lv0:periodic"
        assert header[2] == "lv1:rbf"
        state = load_checkpoint(fitted / "model.gplvm")
        first = np.array([float(v) for v in lines[1].split(",")[1:]])
        np.testing.assert_allclose(first, state.x[0], atol=0)
        ranked = (out / "dimensions.csv").read_text().splitlines()
        assert ranked[0] == "rank,dimension,role,lengthscale,inverse_lengthscale"

    def test_point_mode_rejects_unseen_cells(self, fitted, workdir, capsys):
        code = run(
            "transform", "--checkpoint", fitted / "model.gplvm",
            "--matrix", workdir / "proc" / "processed.csv", "--out", workdir / "t2",
        )
        assert code == 1
        assert "encoder" in capsys.readouterr().err


class TestSweepEval:
    def test_sweep_emits_ranked_curves(self, fitted, workdir):
        out = workdir / "sweep"
        code = run(
            "sweep", "--checkpoint", fitted / "model.gplvm", "--dim", "1",
            "--grid=-1:1:5", "--top-k", "4", "--out", out,
        )
        assert code == 0
        lines = (out / "sweep_curves.csv").read_text().splitlines()
        assert lines[0].startswith("# checkpoint_sha256: ")
        assert len(lines) == 2 + 4  # hash, header, top-k rows

    def test_eval_purity_and_signature(self, fitted, workdir):
        out = workdir / "eval"
        (workdir / "signature.txt").write_text("g2\ng3\n")
        # 10 genes spread over the default 25 bins: every background set is
        # its own gene, so the score degenerates to zero (flagged, not fatal)
        with pytest.warns(UserWarning, match="signature score"):
            code = run(
                "eval", "--checkpoint", fitted / "model.gplvm",
                "--labels", workdir / "covariates.csv", "--label-col", "site",
                "--k", "5", "--signature", workdir / "signature.txt",
                "--matrix", workdir / "proc" / "processed.csv", "--out", out,
            )
        assert code == 0
        purity = (out / "purity.csv").read_text().splitlines()
        assert purity[0].startswith("# checkpoint_sha256: ")
        assert len(purity) == 2 + 40
        values = [float(line.split(",")[1]) for line in purity[2:]]
        assert all(0.0 <= v <= 1.0 for v in values)
        assert (out / "signature_correlation.csv").exists()


class TestEncoderMode:
    def test_fit_and_transform_unseen_cells(self, workdir):
        assert run("preprocess", "--in", workdir / "counts.csv", "--hvg", 10, "--out", workdir / "proc") == 0
        out = workdir / "enc"
        assert run(*fit_args(workdir, out, "--encoder")) == 0
        state = load_checkpoint(out / "model.gplvm")
        assert state.encoder is not None
        t1, t2 = workdir / "enc_t1", workdir / "enc_t2"
        for t in (t1, t2):
            code = run(
                "transform", "--checkpoint", out / "model.gplvm",
                "--matrix", workdir / "proc" / "processed.csv", "--out", t,
            )
            assert code == 0
        assert (t1 / "latents.csv").read_bytes() == (t2 / "latents.csv").read_bytes()


class TestCheck:
    def test_default_run_passes(self, capsys):
        assert run("check", "--seed", "7", "--instances", "3") == 0
        out = capsys.readouterr().out
        assert "all checks passed" in out

    def test_seeded_report_reproducible(self, capsys):
        run("check", "--seed", "7", "--instances", "2")
        first = capsys.readouterr().out
        run("check", "--seed", "7", "--instances", "2")
        second = capsys.readouterr().out
        assert first == second

    def test_injected_fault_reported(self, capsys):
        assert run("check", "--seed", "7", "--instances", "2", "--inject-fault") == 1
        assert "FAIL" in capsys.readouterr().out
