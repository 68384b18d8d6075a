import json

import pytest

from geomae.cli import build_parser, run
from geomae.region_store import read_shard, shard_paths


def test_synth_example(tmp_path, capsys):
    out = tmp_path / "d"
    assert run(["synth", "--regions", "4", "--seed", "7", "--profile", "sentinel2", "--revisits", "1",
                "--out", str(out)]) == 0
    paths = shard_paths(out)
    assert len(paths) == 1 and len(read_shard(paths[0])) == 4
    assert json.loads(capsys.readouterr().out)["regions"] == 4


def test_synth_is_reproducible(tmp_path):
    for d in ("a", "b"):
        run(["-q", "synth", "--regions", "2", "--seed", "3", "--profile", "neon-elev", "--out", str(tmp_path / d)])
    assert (tmp_path / "a" / "shard-00000.evsh").read_bytes() == (tmp_path / "b" / "shard-00000.evsh").read_bytes()


def test_mask_demo_example(capsys):
    assert run(["mask-demo", "--scheme", "tube", "--ratio", "0.75", "--p", "196"]) == 0
    assert "masked per slice: 147" in capsys.readouterr().out.splitlines()


def test_mask_demo_combined(capsys):
    assert run(["-q", "mask-demo", "--scheme", "combined", "--ratio", "0.75", "--t", "2", "--s", "2"]) == 0
    assert "masked per slice: 159" in capsys.readouterr().out


@pytest.mark.parametrize("argv", [
    ["pretrain", "--mask", "wave", "--data", "x", "--out", "y"],
    ["mask-demo", "--ratio", "1.5"],
    ["mask-demo", "--bogus"],
    ["synth", "--regions", "0", "--profile", "sentinel2", "--out", "x"],
    ["synth", "--regions", "2", "--profile", "landsat", "--out", "x"],
    ["gradcheck", "--eps", "0"],
    [],
])
def test_usage_errors_exit_1(argv, capsys):
    assert run(argv) == 1
    assert "usage" in capsys.readouterr().err


def test_data_errors_exit_2(tmp_path, capsys):
    assert run(["stats", "--data", str(tmp_path / "missing")]) == 2
    bad = tmp_path / "bad"
    bad.mkdir()
    (bad / "shard-00000.evsh").write_bytes(b"XVSH" + bytes(8))
    assert run(["stats", "--data", str(bad)]) == 2
    assert "bad magic" in capsys.readouterr().err


@pytest.mark.parametrize("command", ["synth", "stats", "curate", "mask-demo", "pretrain", "gradcheck", "reconstruct"])
def test_help_documents_every_flag(command, capsys):
    assert run([command, "--help"]) == 0
    text = capsys.readouterr().out
    sub = build_parser()._subparsers._group_actions[0].choices[command]
    for action in sub._actions:
        for flag in action.option_strings:
            assert flag in text
        if action.option_strings and action.dest != "help":
            assert action.help


def test_stats_and_curate(tmp_path, capsys):
    run(["-q", "synth", "--regions", "2", "--profile", "sentinel2-scl", "--out", str(tmp_path)])
    capsys.readouterr()
    assert run(["-q", "stats", "--data", str(tmp_path)]) == 0
    stats = json.loads(capsys.readouterr().out)
    assert len(stats["sentinel2-scl"]["mean"]) == 15
    assert run(["-q", "curate", "--input", str(tmp_path), "--top-k", "2", "--cloud-max", "0.9"]) == 0
    rows = [json.loads(line) for line in capsys.readouterr().out.splitlines()]
    assert rows and all(r["cloud_fraction"] < 0.9 for r in rows)
    per_capture = {}
    for r in rows:
        per_capture.setdefault((r["region_id"], r["timestep"]), []).append(r["scl_entropy"])
    assert all(len(v) <= 2 and v == sorted(v, reverse=True) for v in per_capture.values())


def test_pretrain_then_reconstruct(tmp_path, capsys):
    data, out, rec = tmp_path / "d", tmp_path / "o", tmp_path / "r"
    run(["-q", "synth", "--regions", "2", "--profile", "sentinel1", "--revisits", "3", "--out", str(data)])
    assert run(["-q", "pretrain", "--data", str(data), "--out", str(out), "--batch", "2", "--steps", "2",
                "--warmup-steps", "1", "--max-timesteps", "2"]) == 0
    assert len((out / "metrics.jsonl").read_text().splitlines()) == 2
    assert run(["-q", "reconstruct", "--ckpt", str(out / "checkpoint.emck"), "--data", str(data),
                "--out", str(rec)]) == 0
    panels = sorted(p.name for p in rec.iterdir())
    assert len(panels) == 2 * 3
    head = (rec / panels[0]).read_bytes()[:15]
    assert head.startswith(b"P6\n224 224\n255\n")
    assert run(["-q", "pretrain", "--data", str(data), "--out", str(out), "--tasks", "sentinel2"]) == 1


def test_gradcheck_command(capsys):
    assert run(["-q", "gradcheck", "--seed", "1", "--params", "50"]) == 0
    result = json.loads(capsys.readouterr().out)
    assert result["pass"] and result["max_rel_error"] < 1e-4
