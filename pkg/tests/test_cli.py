"""End-to-end CLI tests driving the real pipeline in temporary directories."""

import json
import os

import numpy as np
import pytest

from toepnmf import hrir_io, seminmf
from toepnmf.cli import main

from conftest import damped_responses


@pytest.fixture
def workspace(tmp_path):
    """CSV inputs, a preprocessed bundle, and a probe signal."""
    X = damped_responses(32, 6, seed=5)
    matrix = tmp_path / "m.csv"
    np.savetxt(matrix, X.T, delimiter=",")
    dirs = tmp_path / "d.csv"
    with open(dirs, "w") as fh:
        fh.write("az_deg,el_deg\n")
        for j in range(6):
            fh.write("%g,%g\n" % (j * 10.0 - 30.0, 0.0))
    sig = tmp_path / "sig.wav"
    hrir_io.write_signal(
        hrir_io.Signal(np.random.default_rng(0).standard_normal(400), 44100), str(sig)
    )
    bundle = tmp_path / "bundle"
    assert main([
        "preprocess", "--matrix-csv", str(matrix), "--directions-csv", str(dirs),
        "--rate", "44100", "--out", str(bundle),
    ]) == 0
    return tmp_path


def make_model(workspace, name="model.json", iters="15"):
    path = workspace / name
    assert main([
        "factorize", str(workspace / "bundle"), "--K", "6",
        "--iters", iters, "--out", str(path),
    ]) == 0
    return path


class TestPreprocess:
    def test_bundle_written_with_flags(self, workspace):
        manifest = json.loads((workspace / "bundle" / "manifest.json").read_text())
        assert manifest["flags"] == {
            "minphase": True, "delay_removed": True, "normalized": True,
        }
        assert manifest["num_directions"] == 6
        run = json.loads((workspace / "bundle" / "run.json").read_text())
        assert run["subcommand"] == "preprocess"
        assert run["config"]["rate"] == 44100.0

    def test_no_minphase_flag_recorded(self, workspace):
        out = workspace / "bundle2"
        assert main([
            "preprocess", "--bundle", str(workspace / "bundle"),
            "--no-minphase", "--out", str(out),
        ]) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        # The input bundle already carries the flag; disabling the step must
        # not un-set it, it just does no new work.
        assert manifest["flags"]["minphase"] is True

    def test_no_minphase_from_raw_csv(self, tmp_path):
        X = damped_responses(16, 2, seed=6)
        np.savetxt(tmp_path / "m.csv", X.T, delimiter=",")
        (tmp_path / "d.csv").write_text("0,0\n10,0\n")
        out = tmp_path / "b"
        assert main([
            "preprocess", "--matrix-csv", str(tmp_path / "m.csv"),
            "--directions-csv", str(tmp_path / "d.csv"), "--rate", "48000",
            "--no-minphase", "--out", str(out),
        ]) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["flags"]["minphase"] is False
        assert manifest["flags"]["normalized"] is True

    def test_missing_input_no_partial_output(self, tmp_path):
        out = tmp_path / "never"
        rc = main([
            "preprocess", "--matrix-csv", str(tmp_path / "ghost.csv"),
            "--directions-csv", str(tmp_path / "ghost2.csv"),
            "--rate", "44100", "--out", str(out),
        ])
        assert rc == 3
        assert not out.exists()

    def test_csv_without_rate_is_usage_error(self, tmp_path):
        with pytest.raises(SystemExit) as err:
            main(["preprocess", "--matrix-csv", "m.csv", "--out", "b"])
        assert err.value.code == 2


class TestFactorize:
    def test_model_written(self, workspace):
        path = make_model(workspace)
        model = seminmf.load_model(str(path))
        assert model.reflection_length == 6
        assert len(model.rmse_history) == 15
        assert np.all(np.diff(model.rmse_history) <= 1e-9)
        run = json.loads((workspace / "run.json").read_text())
        assert run["subcommand"] == "factorize"
        assert run["final_rmse"] == model.rmse_history[-1]

    def test_reproducible(self, workspace):
        a = make_model(workspace, "a.json")
        b = make_model(workspace, "b.json")
        assert a.read_bytes() == b.read_bytes()

    def test_overlong_reflection_is_usage_error(self, workspace):
        with pytest.raises(SystemExit) as err:
            main([
                "factorize", str(workspace / "bundle"), "--K", "999",
                "--out", str(workspace / "x.json"),
            ])
        assert err.value.code == 2

    def test_missing_bundle(self, tmp_path):
        rc = main(["factorize", str(tmp_path / "nope"), "--out", str(tmp_path / "m.json")])
        assert rc == 3

    def test_degenerate_direction_is_numerical_failure(self, tmp_path):
        rng = np.random.default_rng(3)
        f0 = rng.uniform(0.5, 1.5, 20)
        G0 = rng.uniform(0.1, 1.0, (6, 5))
        X = np.column_stack([np.convolve(f0, G0[j]) for j in range(6)])
        X[:, 2] = 0.0
        bundle = hrir_io.HrirBundle(X, 44100.0, [(0.0, 0.0)] * 6)
        hrir_io.save_bundle(bundle, str(tmp_path / "bad"))
        with pytest.warns(UserWarning):
            rc = main([
                "factorize", str(tmp_path / "bad"), "--K", "5",
                "--out", str(tmp_path / "m.json"),
            ])
        assert rc == 4


class TestSparsify:
    def test_sparse_model_written(self, workspace):
        model = make_model(workspace)
        out = workspace / "sparse.json"
        assert main([
            "sparsify", str(model), str(workspace / "bundle"),
            "--lambda", "1e-3", "--out", str(out),
        ]) == 0
        sparse = seminmf.load_model(str(out))
        assert sparse.is_sparse
        assert sparse.sparsify_info["lambda"] == 1e-3
        run = json.loads((workspace / "run.json").read_text())
        assert run["mean_nnze"] == np.mean(
            [sparse.nnze(j) for j in range(sparse.num_directions)]
        )

    def test_zero_penalty_zero_prune_bounded_by_length(self, workspace):
        model = make_model(workspace)
        out = workspace / "sparse0.json"
        assert main([
            "sparsify", str(model), str(workspace / "bundle"),
            "--lambda", "0", "--prune", "0", "--out", str(out),
        ]) == 0
        sparse = seminmf.load_model(str(out))
        assert all(sparse.nnze(j) <= 6 for j in range(sparse.num_directions))

    def test_window_requires_sigma(self, workspace):
        model = make_model(workspace)
        with pytest.raises(SystemExit) as err:
            main([
                "sparsify", str(model), str(workspace / "bundle"),
                "--transform", "window", "--out", str(workspace / "s.json"),
            ])
        assert err.value.code == 2

    def test_window_with_sigma(self, workspace):
        model = make_model(workspace)
        out = workspace / "sw.json"
        assert main([
            "sparsify", str(model), str(workspace / "bundle"),
            "--transform", "window", "--sigma", "40", "--out", str(out),
        ]) == 0
        sparse = seminmf.load_model(str(out))
        assert sparse.sparsify_info["transform"] == {"kind": "window", "sigma": 40.0}


class TestReconstructRenderMetrics:
    def test_reconstruct_round_trip(self, workspace):
        model_path = make_model(workspace)
        out = workspace / "recon"
        assert main(["reconstruct", str(model_path), "--out", str(out)]) == 0
        recon = hrir_io.load_bundle(str(out))
        model = seminmf.load_model(str(model_path))
        np.testing.assert_allclose(
            recon.impulse_responses,
            model.reconstruct().astype(np.float32).astype(np.float64),
            atol=1e-7,
        )

    def test_render_matches_direct_convolution(self, workspace):
        model_path = make_model(workspace)
        out = workspace / "out.wav"
        assert main([
            "render", str(model_path), str(workspace / "sig.wav"),
            "--direction", "2", "--out", str(out),
        ]) == 0
        rendered = hrir_io.read_signal(str(out))
        model = seminmf.load_model(str(model_path))
        probe = hrir_io.read_signal(str(workspace / "sig.wav"))
        expected = np.convolve(probe.samples, model.reconstruct()[:, 2])
        got = rendered.samples
        assert got.size == expected.size
        # Output went through float32 once.
        assert np.max(np.abs(got - expected)) < 1e-5 * np.max(np.abs(expected))

    def test_render_headerless_needs_rate(self, workspace):
        model_path = make_model(workspace)
        raw = workspace / "sig.f32"
        np.zeros(16, dtype="<f4").tofile(raw)
        with pytest.raises(SystemExit) as err:
            main([
                "render", str(model_path), str(raw),
                "--direction", "0", "--out", str(workspace / "o.f32"),
            ])
        assert err.value.code == 2

    def test_render_headerless_with_rate(self, workspace):
        model_path = make_model(workspace)
        raw = workspace / "sig.f32"
        np.random.default_rng(1).standard_normal(64).astype("<f4").tofile(raw)
        out = workspace / "o.f32"
        assert main([
            "render", str(model_path), str(raw), "--rate", "8000",
            "--direction", "0", "--out", str(out),
        ]) == 0
        assert out.exists()

    def test_metrics_report(self, workspace, capsys):
        model_path = make_model(workspace)
        out = workspace / "report.csv"
        assert main([
            "metrics", str(model_path), str(workspace / "bundle"), "--out", str(out),
        ]) == 0
        lines = out.read_text().splitlines()
        assert lines[0] == "direction_index,az_deg,el_deg,rmse,sd_db,nnze"
        assert len(lines) == 7
        summary = json.loads(capsys.readouterr().out)
        assert "mean_sd_db" in summary["aggregates"]
        run = json.loads((workspace / "run.json").read_text())
        assert run["aggregates"] == summary["aggregates"]

    def test_metrics_perfect_fixture_all_zero_sd(self, tmp_path):
        """A bundle built from a model's own reconstruction scores zero."""
        rng = np.random.default_rng(2)
        f0 = rng.standard_normal(11)
        G0 = rng.uniform(0.1, 1.0, (3, 6))
        model = seminmf.FactorizedModel(f0, G0, sample_rate_hz=8000.0)
        model_path = tmp_path / "m.json"
        seminmf.save_model(model, str(model_path))
        X32 = model.reconstruct().astype(np.float32).astype(np.float64)
        hrir_io.save_bundle(
            hrir_io.HrirBundle(X32, 8000.0, [(0.0, 0.0)] * 3), str(tmp_path / "b")
        )
        out = tmp_path / "report.csv"
        assert main([
            "metrics", str(model_path), str(tmp_path / "b"), "--out", str(out),
        ]) == 0
        for line in out.read_text().splitlines()[1:]:
            sd_db = float(line.split(",")[4])
            assert sd_db < 1e-4  # float32 storage noise only


class TestTuneSigma:
    def test_json_result(self, workspace, capsys):
        model_path = make_model(workspace)
        out = workspace / "tuned.json"
        assert main([
            "tune-sigma", str(model_path), str(workspace / "bundle"),
            "--direction", "0", "--grid", "20,40,1e9", "--out", str(out),
        ]) == 0
        result = json.loads(out.read_text())
        assert result["sigma"] in (20.0, 40.0, 1e9)
        assert result["sd_db"] is None or result["sd_db"] >= 0.0
        printed = json.loads(capsys.readouterr().out)
        assert printed == result

    def test_bad_grid(self, workspace):
        model_path = make_model(workspace)
        rc = main([
            "tune-sigma", str(model_path), str(workspace / "bundle"),
            "--direction", "0", "--grid", "a,b",
        ])
        assert rc == 3


class TestBench:
    def test_csv_written(self, workspace):
        out = workspace / "bench.csv"
        assert main([
            "bench", "--signal-len", "256", "--nnze", "2,8",
            "--repeats", "3", "--out", str(out),
        ]) == 0
        lines = out.read_text().splitlines()
        assert lines[0] == "mode,signal_len,nnze,block_size,ns_per_sample_median,flops_model"
        assert len(lines) == 1 + 2 * 3
        run = json.loads((workspace / "run.json").read_text())
        assert run["latency"]["direct_latency_samples"] == 0

    def test_compare_backends_column(self, workspace):
        out = workspace / "bench2.csv"
        assert main([
            "bench", "--signal-len", "128", "--nnze", "4",
            "--repeats", "3", "--compare-backends", "--out", str(out),
        ]) == 0
        lines = out.read_text().splitlines()
        assert lines[0].endswith(",backend")


def test_no_command_prints_help(capsys):
    assert main([]) == 2
    assert "usage:" in capsys.readouterr().out


def test_missing_model_is_data_error(tmp_path):
    rc = main(["reconstruct", str(tmp_path / "ghost.json"), "--out", str(tmp_path / "o")])
    assert rc == 3
