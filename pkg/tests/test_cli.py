import csv
import json
import math

import pytest

from surt import cli, dualpath


def run(argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def sim_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "t1"
    assert run(["simulate", "--tier", "t1", "--sessions", "6", "--seed", "3",
                "--out", out, "--vocab", "4"]) == 0
    return out


class TestSimulate:
    def test_deterministic_across_runs(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert run(["simulate", "--tier", "t2", "--sessions", "4", "--seed", "11",
                        "--out", out]) == 0
        assert (a / "manifest.jsonl").read_bytes() == (b / "manifest.jsonl").read_bytes()
        for f in sorted((a / "feats").iterdir()):
            assert f.read_bytes() == (b / "feats" / f.name).read_bytes()

    def test_delay_tier_needs_delay(self, tmp_path, capsys):
        assert run(["simulate", "--tier", "delay", "--sessions", "2",
                    "--out", tmp_path / "d"]) == 1
        assert "delay" in capsys.readouterr().err


class TestPipeline:
    def test_train_decode_score_roundtrip(self, sim_dir, tmp_path):
        cfg = {
            "model": {"encoder": "lstm", "feat_dim": 8, "model_dim": 12, "enc_layers": 1,
                      "enc_hidden": 12, "pred_embed": 6, "pred_hidden": 8,
                      "joint_dim": 8, "vocab": 4, "chunk_width": 8},
            "schedule": {"warmup_steps": 2, "peak_lr": 3e-3, "total_steps": 8},
            "curriculum": {"single_turn_steps": 8, "total_steps": 8, "batch_size": 2,
                           "eval_every": 8, "seed": 0},
            "data": {"single_turn": str(sim_dir / "manifest.jsonl"),
                     "dev": str(sim_dir / "manifest.jsonl")},
        }
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(cfg))
        train_dir = tmp_path / "run"
        assert run(["train", "--config", cfg_path, "--out", train_dir,
                    "--loss", "heat", "--seed", "0"]) == 0

        hyps = tmp_path / "decoded.jsonl"
        assert run(["decode", "--ckpt", train_dir / "ckpt-last",
                    "--manifest", sim_dir / "manifest.jsonl",
                    "--out", hyps, "--beam", "1", "--chunk-width", "8"]) == 0
        lines = [json.loads(l) for l in hyps.read_text().splitlines()]
        assert len(lines) == 6
        assert set(lines[0]) == {"id", "channels"}

        report = tmp_path / "score.csv"
        assert run(["score", "--manifest", sim_dir / "manifest.jsonl",
                    "--hyps", hyps, "--out", report]) == 0
        rows = list(csv.reader(report.open()))
        assert rows[0] == ["tier", "sessions", "wer", "leakage_insertions", "omitted_utterances"]
        assert rows[1][0] == "t1" and rows[1][1] == "6"

    def test_decode_idempotent(self, sim_dir, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps({
            "model": {"encoder": "lstm", "feat_dim": 8, "model_dim": 8, "enc_hidden": 8,
                      "pred_embed": 4, "pred_hidden": 6, "joint_dim": 6, "vocab": 4},
            "schedule": {"warmup_steps": 1, "peak_lr": 1e-3, "total_steps": 3},
            "curriculum": {"single_turn_steps": 3, "total_steps": 3, "batch_size": 2,
                           "eval_every": 3, "seed": 0},
            "data": {"single_turn": str(sim_dir / "manifest.jsonl")},
        }))
        train_dir = tmp_path / "run"
        assert run(["train", "--config", cfg_path, "--out", train_dir, "--seed", "1"]) == 0
        outs = []
        for name in ("h1.jsonl", "h2.jsonl"):
            out = tmp_path / name
            assert run(["decode", "--ckpt", train_dir / "ckpt-last",
                        "--manifest", sim_dir / "manifest.jsonl", "--out", out,
                        "--beam", "2", "--chunk-width", "8"]) == 0
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]


class TestDiagnostics:
    def test_gradcheck_exit_zero(self, tmp_path):
        assert run(["gradcheck", "--which", "lattice", "--instances", "3", "--seed", "5"]) == 0

    def test_mask_bench_counts_match_library(self, tmp_path):
        out = tmp_path / "bench.csv"
        assert run(["mask-bench", "--lengths", "16,64", "--patterns", "dualpath,strided",
                    "--out", out]) == 0
        rows = {(r["pattern"], int(r["l"])): r for r in csv.DictReader(out.open())}
        for l in (16, 64):
            w = math.isqrt(l - 1) + 1
            intra = dualpath.build_mask("dualpath-intra", l, w)
            inter = dualpath.build_mask("dualpath-inter", l, w)
            expected = intra.nonzeros + inter.nonzeros
            assert int(rows[("dualpath-offline", l)]["nonzeros"]) == expected
            assert rows[("dualpath-offline", l)]["reach2"] == "1"

    def test_usage_error_exit_two(self):
        with pytest.raises(SystemExit) as exc:
            cli.main(["decode"])  # missing required flags
        assert exc.value.code == 2
