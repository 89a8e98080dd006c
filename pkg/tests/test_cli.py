import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from gendenoise.cli import main
from gendenoise.core import rng_stream
from gendenoise.datasets import smooth_images
from gendenoise.pgm import load_pgm, save_pgm
from gendenoise.verification import posterior_test_prior


def tree_bytes(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "clean").mkdir()
    for i, img in enumerate(smooth_images(4, 16, rng_stream(5))):
        save_pgm(img, root / "clean" / f"img{i}.pgm")
    (root / "prior").mkdir()
    for i, atom in enumerate(posterior_test_prior().atoms):
        save_pgm(atom, root / "prior" / f"atom{i}.pgm")
    return root


def run(*argv):
    return main([str(a) for a in argv])


def test_corrupt_writes_images_and_provenance(work):
    out = work / "noisy"
    assert run("corrupt", "--input", work / "clean", "--out", out, "--seed", 3) == 0
    assert len(list(out.glob("*_t20.pgm"))) == 4
    prov = (out / "provenance.txt").read_text()
    for key in ("family=gaussian", "param=25.0", "N=20", "t=20", "seed=3"):
        assert key in prov
    first = tree_bytes(out)
    assert run("corrupt", "--input", work / "clean", "--out", work / "noisy2", "--seed", 3) == 0
    assert tree_bytes(work / "noisy2") == first


def test_corrupt_rejects_bad_t(work, capsys):
    assert run("corrupt", "--input", work / "clean", "--out", work / "bad", "--t", 21) == 1
    assert "1..20" in capsys.readouterr().err


def test_corrupt_poisson_grid(work):
    out = work / "pois"
    assert run("corrupt", "--input", work / "clean" / "img0.pgm", "--out", out,
               "--family", "poisson", "--param", 1.0, "--N", 4, "--t", 4) == 0
    img = load_pgm(out / "img0_t4.pgm")
    assert np.all(img == np.round(img))


def test_missing_input_and_bad_format(work, tmp_path):
    assert run("corrupt", "--input", tmp_path / "nope.pgm", "--out", tmp_path / "o") == 2
    bad = tmp_path / "bad.pgm"
    bad.write_bytes(b"P5\n2 2\n65535\n" + bytes(8))
    assert run("corrupt", "--input", bad, "--out", tmp_path / "o") == 2


def test_train_zero_steps(work):
    out = work / "m0"
    assert run("train", "--data", work / "clean", "--out", out, "--steps", 0, "--width", 8) == 0
    lines = (out / "loss.csv").read_text().splitlines()
    assert lines[0] == "step,loss" and lines[1].startswith("# version=") and len(lines) == 2


def test_train_deterministic_and_loss_drops(work):
    args = ("train", "--data", work / "clean", "--steps", 150, "--width", 32, "--N", 10)
    assert run(*args, "--out", work / "ma") == 0
    assert run(*args, "--out", work / "mb") == 0
    assert tree_bytes(work / "ma") == tree_bytes(work / "mb")
    losses = [float(line.split(",")[1]) for line in
              (work / "ma" / "loss.csv").read_text().splitlines()[1:-1]]
    assert len(losses) == 150 and np.mean(losses[-20:]) < losses[0]


def test_train_rejects_mixed_dimensions(tmp_path):
    save_pgm(np.zeros((4, 4)), tmp_path / "a.pgm")
    save_pgm(np.zeros((4, 5)), tmp_path / "b.pgm")
    assert run("train", "--data", tmp_path, "--out", tmp_path / "m") == 2


def test_train_divergence_exit_code(work):
    with np.errstate(all="ignore"):
        code = run("train", "--data", work / "clean", "--out", work / "mdiv", "--steps", 20,
                   "--width", 8, "--lr", 1e200)
    assert code == 1


def test_sample_with_model(work):
    assert run("train", "--data", work / "clean", "--out", work / "mm", "--steps", 20,
               "--width", 16, "--N", 6) == 0
    assert run("corrupt", "--input", work / "clean" / "img1.pgm", "--out", work / "n6",
               "--N", 6) == 0
    args = ("sample", "--input", work / "n6" / "img1_t6.pgm", "--model", work / "mm" / "model.gdnz",
            "--n", 3, "--mean", "--trajectory")
    assert run(*args, "--out", work / "sa") == 0
    names = {p.name for p in (work / "sa").iterdir()}
    assert {"sample_0000.pgm", "sample_0002.pgm", "mean.pgm", "provenance.txt"} <= names
    assert len(list((work / "sa" / "trajectory").glob("t_*.pgm"))) == 6
    assert run(*args, "--out", work / "sb") == 0
    assert tree_bytes(work / "sa") == tree_bytes(work / "sb")


def test_sample_family_mismatch(work):
    if not (work / "mm" / "model.gdnz").exists():
        pytest.skip("needs the trained model from test_sample_with_model")
    assert run("sample", "--input", work / "n6" / "img1_t6.pgm", "--model",
               work / "mm" / "model.gdnz", "--family", "gamma", "--out", work / "sx") == 1


def test_sample_oracle_single_and_mean_default(work):
    atoms = posterior_test_prior().atoms
    assert run("corrupt", "--input", work / "prior" / "atom0.pgm", "--out", work / "pn",
               "--family", "poisson", "--N", 10) == 0
    x_N = work / "pn" / "atom0_t10.pgm"
    base = ("sample", "--input", x_N, "--oracle", work / "prior", "--family", "poisson", "--N", 10)
    assert run(*base, "--out", work / "o1") == 0
    assert [p.name for p in sorted((work / "o1").glob("*.pgm"))] == ["sample_0000.pgm"]
    out = load_pgm(work / "o1" / "sample_0000.pgm")
    assert min(np.abs(out - np.round(a)).max() for a in atoms) <= 1
    assert run(*base, "--mean", "--out", work / "o100") == 0
    assert len(list((work / "o100").glob("sample_*.pgm"))) == 100
    assert (work / "o100" / "mean.pgm").exists()


def test_sample_needs_one_denoiser(work):
    assert run("sample", "--input", work / "clean" / "img0.pgm", "--out", work / "z") == 1


def test_evaluate(work):
    out = work / "ev"
    assert run("evaluate", "--reference", work / "clean", "--candidate", work / "clean",
               "--out", out) == 0
    lines = (out / "metrics.csv").read_text().splitlines()
    assert lines[0] == "image,psnr_db,ssim"
    assert [line.split(",")[0] for line in lines[1:5]] == [f"img{i}.pgm" for i in range(4)]
    assert all(line.endswith(",inf,1.0") for line in lines[1:6])


def test_evaluate_aggregate_is_mean(work, tmp_path):
    cand = tmp_path / "cand"
    cand.mkdir()
    for p in sorted((work / "clean").glob("*.pgm")):
        save_pgm(np.clip(load_pgm(p) + rng_stream(1).normal(0, 5, (16, 16)), 0, 255), cand / p.name)
    assert run("evaluate", "--reference", work / "clean", "--candidate", cand, "--out", tmp_path / "e") == 0
    rows = [line.split(",") for line in (tmp_path / "e" / "metrics.csv").read_text().splitlines()[1:-1]]
    per = np.array([[float(r[1]), float(r[2])] for r in rows[:-1]])
    assert rows[-1][0] == "mean"
    np.testing.assert_allclose([float(rows[-1][1]), float(rows[-1][2])], per.mean(axis=0), rtol=1e-12)


def test_evaluate_unmatched_names(work, tmp_path, capsys):
    save_pgm(np.zeros((16, 16)), tmp_path / "other.pgm")
    assert run("evaluate", "--reference", work / "clean", "--candidate", tmp_path,
               "--out", tmp_path / "e") == 2
    assert "other.pgm" in capsys.readouterr().err


def test_config_file_defaults_and_override(work, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("family=gamma\nN=5\nt=2\n")
    assert run("corrupt", "--config", cfg, "--input", work / "clean" / "img0.pgm",
               "--out", tmp_path / "c1") == 0
    prov = (tmp_path / "c1" / "provenance.txt").read_text()
    assert "family=gamma" in prov and "N=5" in prov and "t=2" in prov
    assert run("corrupt", "--config", cfg, "--input", work / "clean" / "img0.pgm",
               "--t", 4, "--out", tmp_path / "c2") == 0
    assert "t=4" in (tmp_path / "c2" / "provenance.txt").read_text()
    cfg.write_text("colour=red\n")
    assert run("corrupt", "--config", cfg, "--input", work / "clean", "--out", tmp_path / "c3") == 1


def test_verify_fault_injection_exit_code(tmp_path):
    assert run("verify", "--out", tmp_path, "--fault-inject", "--n-samples", 2000) == 3
    text = (tmp_path / "verification.csv").read_text()
    assert "schedule_invariants_gaussian" in text and ",fail," in text


def test_verify_is_byte_identical(tmp_path):
    run("verify", "--out", tmp_path / "a", "--seed", 3)
    run("verify", "--out", tmp_path / "b", "--seed", 3)
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")


def test_usage_error_and_console_script(tmp_path):
    assert run("bogus") == 1
    proc = subprocess.run([sys.executable, "-m", "gendenoise.cli", "--version"],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.strip()
