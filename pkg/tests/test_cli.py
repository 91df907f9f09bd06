import json
import os

import numpy as np
import pytest

from fop.cli import main
from fop.imagecore import GrayImage
from fop.model import FoPModel, model_load, model_save
from fop.netpbm import read_netpbm, write_pbm, write_pgm, write_probability_pgm
from fop.pipeline import load_manifest


def run(*argv):
    return main([str(a) for a in argv])


def files(d):
    return {f: open(os.path.join(d, f), "rb").read() for f in sorted(os.listdir(d)) if f != "metadata.json"}


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("ds")
    assert run("synth", "--count", 3, "--size", 12, "--seed", 4, "--out-dir", d) == 0
    return d


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    d = tmp_path_factory.mktemp("tiny")
    assert run("synth", "--count", 2, "--size", 4, "--gray-levels", 8, "--mu0", 6, "--mu1", 2,
               "--sigma", 1.5, "--seed", 1, "--out-dir", d) == 0
    return d / "manifest.txt"


class TestCoarsen:
    def test_sizes(self, tmp_path):
        write_pbm(tmp_path / "a.pbm", np.eye(8, dtype=np.uint8))
        assert run("coarsen", tmp_path / "a.pbm", "-K", 4, "--out-dir", tmp_path / "o") == 0
        shapes = [read_netpbm(tmp_path / "o" / f"a_level{k}.pbm").shape for k in range(4)]
        assert shapes == [(8, 8), (4, 4), (2, 2), (1, 1)]
        assert os.path.exists(tmp_path / "o" / "metadata.json")

    def test_identity(self, tmp_path):
        write_pbm(tmp_path / "a.pbm", np.eye(5, dtype=np.uint8))
        assert run("coarsen", tmp_path / "a.pbm", "-K", 1, "--out-dir", tmp_path / "o") == 0
        assert (tmp_path / "o" / "a_level0.pbm").read_bytes() == (tmp_path / "a.pbm").read_bytes()

    def test_gray_uses_average(self, tmp_path):
        write_pgm(tmp_path / "g.pgm", GrayImage(np.array([[0, 2], [4, 6]]), 8))
        assert run("coarsen", tmp_path / "g.pgm", "-K", 2, "--out-dir", tmp_path / "o") == 0
        assert read_netpbm(tmp_path / "o" / "g_level1.pgm").pixels.tolist() == [[3]]
        meta = json.loads((tmp_path / "o" / "metadata.json").read_text())
        assert meta["coarsening"] == "gray-average"

    def test_errors(self, tmp_path):
        write_pbm(tmp_path / "a.pbm", np.eye(4, dtype=np.uint8))
        assert run("coarsen", tmp_path / "a.pbm", "-K", 9, "--out-dir", tmp_path / "o") == 2
        assert run("coarsen", tmp_path / "missing.pbm", "-K", 2, "--out-dir", tmp_path / "o") == 3
        (tmp_path / "bad.pbm").write_bytes(b"P4\n8 8\n")
        assert run("coarsen", tmp_path / "bad.pbm", "-K", 2, "--out-dir", tmp_path / "o") == 3


class TestSynth:
    def test_reproducible(self, tmp_path, dataset):
        assert run("synth", "--count", 3, "--size", 12, "--seed", 4, "--out-dir", tmp_path) == 0
        assert files(tmp_path) == files(dataset)

    def test_env_seed(self, tmp_path, monkeypatch):
        monkeypatch.setenv("FOP_SEED", "4")
        assert run("synth", "--count", 3, "--size", 12, "--out-dir", tmp_path / "a") == 0
        assert run("synth", "--count", 3, "--size", 12, "--seed", 5, "--out-dir", tmp_path / "b") == 0
        meta = json.loads((tmp_path / "a" / "metadata.json").read_text())
        assert meta["seed"] == 4
        assert json.loads((tmp_path / "b" / "metadata.json").read_text())["seed"] == 5
        assert files(tmp_path / "a") != files(tmp_path / "b")

    def test_zero_noise_and_preset(self, tmp_path):
        assert run("synth", "--preset", "leaf", "--kind", "blobs", "--sigma", 0, "--count", 2, "--size", 10,
                   "--out-dir", tmp_path) == 0
        ds = load_manifest(tmp_path / "manifest.txt")
        for x, y in ds.pairs():
            np.testing.assert_array_equal(y.pixels, np.where(x == 1, 100, 150))
        meta = json.loads((tmp_path / "metadata.json").read_text())
        assert meta["observation_model"] == {"mu0": 150.0, "mu1": 100.0, "sigma": 0.0}
        assert meta["rng_algorithm"].startswith("numpy.random.PCG64")

    def test_bad_params(self, tmp_path):
        assert run("synth", "--sigma", -1, "--out-dir", tmp_path) == 2
        assert run("synth", "--kind", "stars", "--out-dir", tmp_path) == 2


class TestTrain:
    def test_staged_and_reproducible(self, tmp_path, dataset):
        m = dataset / "manifest.txt"
        common = ["--steps", 3, "--eta", 0.05, "--precondition", "--jobs", 1]
        assert run("train", "--manifest", m, *common, "--out-dir", tmp_path / "m1") == 0
        assert run("train", "--manifest", m, "-K", 3, *common, "--proposal-model", tmp_path / "m1" / "model.txt",
                   "--out-dir", tmp_path / "m3") == 0
        m3 = model_load(tmp_path / "m3" / "model.txt")
        assert m3.K == 3
        assert run("train", "--manifest", m, "-K", 3, *common, "--proposal-model", tmp_path / "m1" / "model.txt",
                   "--out-dir", tmp_path / "again", "--jobs", 2) == 0
        assert (tmp_path / "m3" / "model.txt").read_bytes() == (tmp_path / "again" / "model.txt").read_bytes()
        trace = (tmp_path / "m3" / "trace.csv").read_text().splitlines()
        assert trace[0] == "step,obj_estimate,grad_norm,accept_rate,wall_ms" and len(trace) == 4
        meta = json.loads((tmp_path / "m3" / "metadata.json").read_text())
        assert meta["model_hash"] and meta["proposal_model_hash"]

    def test_resume_identical(self, tmp_path, dataset, monkeypatch):
        m = dataset / "manifest.txt"
        common = ["--manifest", m, "-K", 2, "--eta", 0.02, "--precondition", "--polyak", "--seed", 9, "--steps", 6]
        assert run("train", *common, "--out-dir", tmp_path / "full") == 0
        # interrupt a second run right after its step-4 checkpoint
        import fop.cli

        real = fop.cli.save_checkpoint

        def crash(ts, path, cfg=None):
            real(ts, path, cfg)
            if ts.step == 4:
                raise KeyboardInterrupt

        monkeypatch.setattr(fop.cli, "save_checkpoint", crash)
        with pytest.raises(KeyboardInterrupt):
            run("train", *common, "--checkpoint-every", 2, "--out-dir", tmp_path / "part")
        monkeypatch.setattr(fop.cli, "save_checkpoint", real)
        assert not os.path.exists(tmp_path / "part" / "model.txt")
        assert run("train", *common, "--resume", tmp_path / "part" / "checkpoint.npz",
                   "--out-dir", tmp_path / "resumed") == 0
        assert (tmp_path / "full" / "model.txt").read_bytes() == (tmp_path / "resumed" / "model.txt").read_bytes()
        assert run("train", *common, "--lam", 0.5, "--resume", tmp_path / "part" / "checkpoint.npz",
                   "--out-dir", tmp_path / "x") == 2

    def test_exact_mode(self, tmp_path, tiny):
        assert run("train", "--manifest", tiny, "--exact", "--lam", 0.5, "--out-dir", tmp_path) == 0
        meta = json.loads((tmp_path / "metadata.json").read_text())
        assert meta["mode"] == "exact" and meta["final_grad_norm"] < 1e-5

    def test_errors(self, tmp_path, dataset):
        m = dataset / "manifest.txt"
        assert run("train", "--manifest", tmp_path / "none.txt", "--out-dir", tmp_path / "a") == 3
        model_save(FoPModel.zeros(2, 256), tmp_path / "q.txt")
        assert run("train", "--manifest", m, "-K", 2, "--proposal-model", tmp_path / "q.txt",
                   "--out-dir", tmp_path / "b") == 3
        assert run("train", "--manifest", m, "--eta", 0, "--out-dir", tmp_path / "c") == 2
        assert run("train", "--manifest", m, "--eta", 1e308, "--steps", 2, "--out-dir", tmp_path / "d") == 4


class TestInferEval:
    def test_grid_test(self, tmp_path, tiny, capsys):
        rng = np.random.default_rng(0)
        model_save(FoPModel(rng.normal(scale=0.5, size=(2, 102)), rng.normal(scale=0.5, size=(2, 8))),
                   tmp_path / "m.txt")
        assert run("infer", "--model", tmp_path / "m.txt", "--manifest", tiny, "--h", 2, "--burn-in", 10,
                   "--sweeps", 20000, "--grid-test", "--out-dir", tmp_path / "post", "--csv") == 0
        meta = json.loads((tmp_path / "post" / "metadata.json").read_text())
        assert max(meta["grid_test_max_abs_error"]) < 0.02
        assert "grid-test" in capsys.readouterr().out
        assert os.path.exists(tmp_path / "post" / "img000.csv")

    def test_zero_model_and_seed(self, tmp_path, dataset):
        model_save(FoPModel.zeros(1, 256), tmp_path / "z.txt")
        args = ["infer", "--model", tmp_path / "z.txt", "--image", dataset / "img001_obs.pgm",
                "--sweeps", 50, "--burn-in", 1, "--seed", 3]
        assert run(*args, "--out-dir", tmp_path / "a") == 0
        assert run(*args, "--out-dir", tmp_path / "b") == 0
        assert files(tmp_path / "a") == files(tmp_path / "b")
        p = read_netpbm(tmp_path / "a" / "img001_obs.pgm").pixels / 65535
        assert abs(p.mean() - 0.5) < 0.05

    def test_level_mismatch(self, tmp_path, dataset):
        model_save(FoPModel.zeros(1, 8), tmp_path / "m.txt")
        assert run("infer", "--model", tmp_path / "m.txt", "--manifest", dataset / "manifest.txt",
                   "--out-dir", tmp_path / "o") == 3

    def test_eval_perfect_and_multi(self, tmp_path, dataset, capsys):
        ds = load_manifest(dataset / "manifest.txt")
        for d, noise in (("truth", 0.0), ("noisy", 0.6)):
            rng = np.random.default_rng(1)
            for name, x in zip(ds.names, ds.masks):
                p = np.clip(x + noise * rng.normal(size=x.shape), 0, 1)
                os.makedirs(tmp_path / d, exist_ok=True)
                write_probability_pgm(tmp_path / d / f"{name}.pgm", p)
        assert run("eval", "--manifest", dataset / "manifest.txt", "--posteriors", tmp_path / "truth",
                   "--out", tmp_path / "pr.csv") == 0
        lines = (tmp_path / "pr.csv").read_text().splitlines()
        assert lines[-1] == "AP,1.0" and len(lines) == 1 + 101 + 1
        assert run("eval", "--manifest", dataset / "manifest.txt", "--posteriors", tmp_path / "truth",
                   tmp_path / "noisy", "--raw", "--thresholds", 11, "--out-dir", tmp_path / "cmp") == 0
        assert sorted(os.listdir(tmp_path / "cmp")) == ["metadata.json", "noisy.csv", "raw.csv", "truth.csv"]
        ap = json.loads((tmp_path / "cmp" / "metadata.json").read_text())["ap"]
        assert ap["truth"] == 1.0 > ap["noisy"]
        assert run("eval", "--manifest", dataset / "manifest.txt", "--posteriors", tmp_path / "nowhere",
                   "--out", tmp_path / "x.csv") == 3


class TestSamplePrior:
    def test_zero_model(self, tmp_path):
        model_save(FoPModel.zeros(2, 8), tmp_path / "z.txt")
        args = ["sample-prior", "--model", tmp_path / "z.txt", "--size", 32, "--sweeps", 3, "--seed", 2]
        assert run(*args, "--out-dir", tmp_path / "a") == 0
        assert run(*args, "--out-dir", tmp_path / "b") == 0
        assert files(tmp_path / "a") == files(tmp_path / "b")
        x = read_netpbm(tmp_path / "a" / "sample.pbm")
        assert x.shape == (32, 32) and abs(x.mean() - 0.5) < 3 * 0.5 / 32

    def test_too_small(self, tmp_path):
        model_save(FoPModel.zeros(4, 8), tmp_path / "z.txt")
        assert run("sample-prior", "--model", tmp_path / "z.txt", "--size", 2, "--out-dir", tmp_path / "a") == 2


def test_help_lists_defaults(capsys):
    assert run("train", "--help") == 0
    out = capsys.readouterr().out
    assert "default: 0.0001" in out and "--grid-test" not in out
    assert run("infer", "--help") == 0
    assert "--grid-test" not in capsys.readouterr().out


def test_metadata_singleton(tmp_path, dataset):
    assert run("synth", "--count", 1, "--size", 8, "--out-dir", tmp_path) == 0
    assert run("synth", "--count", 1, "--size", 8, "--out-dir", tmp_path) == 0
    assert [f for f in os.listdir(tmp_path) if f.endswith(".json")] == ["metadata.json"]
