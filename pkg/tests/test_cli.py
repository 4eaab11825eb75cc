"""End-to-end checks for the command line front end.

Everything goes through run(argv) in-process; no subprocesses. The
contract under test: exit codes (0 ok / 1 usage / 2 data), machine
output lands in files, diagnostics on stderr, and failed runs leave no
output behind.
"""

import json
import os
from types import SimpleNamespace

import numpy as np
import pytest

from pgpc.cli import run
from pgpc.geometry import Mesh, PointCloud, read_ply, write_ply
from pgpc.network import NetworkConfig, init_weights, save_weights
from pgpc.prior import read_params_text, write_params_text
from pgpc.template import build_toy_template
from pgpc.training import make_toy_sample


@pytest.fixture(scope="module")
def env(tmp_path_factory):
    """Shared scratch area: a small model, a voxelized body, its params."""
    root = tmp_path_factory.mktemp("cli")
    config = NetworkConfig(
        levels=2,
        enc_channels=(4, 8),
        dec_channels=(8, 4),
        latent_channels=4,
        vrn_branch_a=(3, 3),
        vrn_branch_b=(1, 3, 1),
    )
    model = root / "toy.pgw"
    save_weights(init_weights(config, seed=5), model)

    template = build_toy_template()
    sample = make_toy_sample(template, 5, seed=11, surface_points=1500)
    ref = root / "ref.ply"
    write_ply(sample.cloud, ref)
    params = root / "ref.params"
    write_params_text(sample.params, params)
    return SimpleNamespace(
        root=root,
        model=str(model),
        ref=str(ref),
        params=str(params),
        n_points=len(sample.cloud),
    )


def encode_args(env, out, extra=()):
    return ["encode", env.ref, str(out), "--model", env.model,
            "--params", env.params, "--seed", "9", *extra]


class TestExitCodes:
    def test_no_command_is_usage_error(self, capsys):
        assert run([]) == 1
        assert capsys.readouterr().out == ""

    def test_unknown_subcommand(self, capsys):
        assert run(["frobnicate"]) == 1
        assert "usage" in capsys.readouterr().err

    def test_unknown_flag(self, capsys):
        assert run(["report", "x.bin", "--bogus"]) == 1
        err = capsys.readouterr().err
        assert "usage" in err

    def test_missing_input_is_data_error(self, env, tmp_path):
        rc = run(["report", str(tmp_path / "absent.bin")])
        assert rc == 2

    def test_bad_json_config_is_data_error(self, env, tmp_path):
        cfg = tmp_path / "broken.json"
        cfg.write_text("{not json")
        assert run(["train", str(cfg), "--out", str(tmp_path / "out")]) == 2

    def test_bad_eval_pair_is_usage_error(self, env, capsys):
        assert run(["eval", "no-equals-sign", "--model", env.model]) == 1
        assert "reference.ply=stream.bin" in capsys.readouterr().err


class TestEncodeDecode:
    def test_pipeline_and_bpp_identity(self, env, tmp_path, capsys):
        stream = tmp_path / "ref.bin"
        assert run(encode_args(env, stream)) == 0
        assert stream.exists()
        capsys.readouterr()

        out_ply = tmp_path / "back.ply"
        assert run(["decode", str(stream), str(out_ply),
                    "--model", env.model]) == 0
        decoded = read_ply(out_ply)
        assert len(decoded.points) == env.n_points

        csv_path = tmp_path / "rd.csv"
        assert run(["eval", f"{env.ref}={stream}", "--model", env.model,
                    "--csv", str(csv_path), "--lambda", "0.5",
                    "--sequence", "toy"]) == 0
        lines = csv_path.read_text().strip().splitlines()
        assert lines[0] == "sequence, lambda, bpp, d1_psnr, d2_psnr"
        seq, lam, bpp, d1, d2 = [c.strip() for c in lines[1].split(",")]
        assert seq == "toy" and float(lam) == 0.5
        # reported rate is exactly file size * 8 / original point count
        want = 8.0 * os.path.getsize(stream) / env.n_points
        assert float(bpp) == pytest.approx(want, abs=5e-7)
        assert np.isfinite(float(d1)) and np.isfinite(float(d2))

    def test_encode_reruns_identically(self, env, tmp_path, capsys):
        a, b = tmp_path / "a.bin", tmp_path / "b.bin"
        assert run(encode_args(env, a)) == 0
        assert run(encode_args(env, b)) == 0
        assert a.read_bytes() == b.read_bytes()
        capsys.readouterr()

    def test_decode_reruns_identically(self, env, tmp_path, capsys):
        stream = tmp_path / "s.bin"
        run(encode_args(env, stream))
        p1, p2 = tmp_path / "d1.ply", tmp_path / "d2.ply"
        assert run(["decode", str(stream), str(p1), "--model", env.model]) == 0
        assert run(["decode", str(stream), str(p2), "--model", env.model]) == 0
        assert p1.read_bytes() == p2.read_bytes()
        capsys.readouterr()

    def test_float_input_needs_precision_flag(self, env, tmp_path, capsys):
        rng = np.random.default_rng(0)
        fuzzy = tmp_path / "float.ply"
        write_ply(PointCloud(rng.uniform(0.0, 10.0, (300, 3))), fuzzy)
        out = tmp_path / "f.bin"
        rc = run(["encode", str(fuzzy), str(out), "--model", env.model,
                  "--no-prior"])
        assert rc == 2
        assert "--precision" in capsys.readouterr().err
        assert not out.exists()

        assert run(["encode", str(fuzzy), str(out), "--model", env.model,
                    "--no-prior", "--precision", "4"]) == 0
        assert out.exists()

    def test_failed_decode_leaves_nothing(self, env, tmp_path, capsys):
        stream = tmp_path / "s.bin"
        run(encode_args(env, stream))
        broken = tmp_path / "broken.bin"
        broken.write_bytes(stream.read_bytes()[: stream.stat().st_size // 2])
        out = tmp_path / "never.ply"
        assert run(["decode", str(broken), str(out), "--model", env.model]) == 2
        assert not out.exists()
        leftovers = [p for p in tmp_path.iterdir() if p.name.startswith(".pgpc-tmp")]
        assert leftovers == []
        capsys.readouterr()


class TestReport:
    def test_no_prior_report_zero_parameter_share(self, env, tmp_path, capsys):
        stream = tmp_path / "np.bin"
        assert run(["encode", env.ref, str(stream), "--model", env.model,
                    "--no-prior", "--seed", "9"]) == 0
        capsys.readouterr()
        assert run(["report", str(stream)]) == 0
        captured = capsys.readouterr()
        line = next(l for l in captured.out.splitlines() if "parameters" in l)
        assert " 0 bits" in line and "0.00%" in line
        # machine-ish summary goes to stdout, nothing of it to stderr
        assert "parameters" not in captured.err

    def test_report_accounts_every_bit(self, env, tmp_path, capsys):
        stream = tmp_path / "p.bin"
        run(encode_args(env, stream))
        capsys.readouterr()
        assert run(["report", str(stream)]) == 0
        head = capsys.readouterr().out.splitlines()[0]
        assert f"{8 * os.path.getsize(stream)} bits" in head


class TestEval:
    def test_thread_fanout_matches_serial(self, env, tmp_path, capsys, monkeypatch):
        s1, s2 = tmp_path / "s1.bin", tmp_path / "s2.bin"
        run(encode_args(env, s1))
        run(encode_args(env, s2, extra=["--ratio", "0.5"]))
        pairs = [f"{env.ref}={s1}", f"{env.ref}={s2}"]

        rows = {}
        for name, workers in (("serial", "1"), ("pool", "2")):
            csv_file = tmp_path / f"{name}.csv"
            monkeypatch.setenv("PGPC_THREADS", workers)
            assert run(["eval", *pairs, "--model", env.model,
                        "--csv", str(csv_file)]) == 0
            rows[name] = csv_file.read_text()
        assert rows["serial"] == rows["pool"]
        capsys.readouterr()

    def test_csv_appends_without_repeating_header(self, env, tmp_path, capsys):
        stream = tmp_path / "s.bin"
        run(encode_args(env, stream))
        csv_path = tmp_path / "acc.csv"
        for _ in range(2):
            assert run(["eval", f"{env.ref}={stream}", "--model", env.model,
                        "--csv", str(csv_path)]) == 0
        lines = csv_path.read_text().strip().splitlines()
        assert len(lines) == 3
        assert sum(l.startswith("sequence") for l in lines) == 1
        capsys.readouterr()


class TestTrainFitSample:
    def test_train_from_json_config(self, env, tmp_path, capsys):
        cfg = tmp_path / "train.json"
        cfg.write_text(json.dumps({
            "lambdas": [0.5],
            "epochs": 1,
            "seed": 0,
            "count": 4,
            "precision": 5,
            "surface_points": 800,
        }))
        out = tmp_path / "ckpt"
        assert run(["train", str(cfg), "--out", str(out)]) == 0
        assert (out / "model_lambda_0.5.pgw").exists()
        assert (out / "train_lambda_0.5.csv").exists()
        capsys.readouterr()

    def test_fit_writes_readable_params(self, env, tmp_path, capsys):
        out = tmp_path / "fitted.params"
        assert run(["fit", env.ref, str(out), "--steps", "4",
                    "--seed", "2"]) == 0
        fitted = read_params_text(out)
        assert fitted.scale > 0
        capsys.readouterr()

    def test_sample_mesh_to_cloud(self, env, tmp_path, capsys):
        v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0],
                      [0, 0, 1], [1, 0, 1], [0, 1, 1], [1, 1, 1]], float)
        f = np.array([[0, 1, 2], [1, 3, 2], [4, 6, 5], [5, 6, 7],
                      [0, 4, 1], [1, 4, 5], [2, 3, 6], [3, 7, 6],
                      [0, 2, 4], [2, 6, 4], [1, 5, 3], [3, 5, 7]])
        mesh_path = tmp_path / "cube.ply"
        write_ply(Mesh(v, f), mesh_path)

        out1, out2 = tmp_path / "c1.ply", tmp_path / "c2.ply"
        argv = ["sample", str(mesh_path), "--count", "400", "--seed", "3"]
        assert run([*argv[:2], str(out1), *argv[2:]]) == 0
        assert run([*argv[:2], str(out2), *argv[2:]]) == 0
        cloud = read_ply(out1)
        assert len(cloud.points) == 400
        assert out1.read_bytes() == out2.read_bytes()
        capsys.readouterr()

    def test_sample_rejects_plain_cloud(self, env, tmp_path, capsys):
        rc = run(["sample", env.ref, str(tmp_path / "x.ply")])
        assert rc == 2
        assert "faces" in capsys.readouterr().err
