import json
import subprocess
import sys

import numpy as np
import pytest

from gtexplore import bench, cli, learn, world


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_mapgen_round_trip(tmp_path):
    out = tmp_path / "m.txt"
    assert run("mapgen", "--seed", 1, "--out", out) == 0
    loaded = world.load_map(out)
    assert np.array_equal(loaded.cells, world.generate_dungeon(1).cells)
    assert loaded.cell_size == 0.4


def test_eval_writes_report(tmp_path, capsys):
    seeds = tmp_path / "s.txt"
    seeds.write_text("0\n1\n2\n")
    cfg = tmp_path / "c.txt"
    cfg.write_text("map_width = 32\nmap_height = 32\n")
    out = tmp_path / "r.csv"
    assert run("eval", "--planner", "nearest", "--seeds", seeds, "--out", out, "--config", cfg) == 0
    lines = out.read_text().splitlines()
    assert lines[0].startswith("# gtexplore eval report")
    assert lines[1].split(",") == bench.CSV_FIELDS
    assert [int(l.split(",")[0]) for l in lines[2:]] == [0, 1, 2]
    assert "nearest:" in capsys.readouterr().out


def test_eval_grate_without_checkpoint_fails(tmp_path, capsys):
    seeds = tmp_path / "s.txt"
    seeds.write_text("0\n")
    assert run("eval", "--planner", "grate-raw", "--seeds", seeds, "--out", tmp_path / "r.csv") == 1
    assert "checkpoint" in capsys.readouterr().err


def test_unknown_flag_and_subcommand_exit_nonzero(capsys):
    with pytest.raises(SystemExit) as e:
        run("mapgen", "--seed", 1, "--out", "x", "--bogus")
    assert e.value.code != 0
    with pytest.raises(SystemExit) as e:
        run("fly")
    assert e.value.code != 0
    assert "usage" in capsys.readouterr().err


def test_bad_config_key_named(tmp_path, capsys):
    cfg = tmp_path / "c.txt"
    cfg.write_text("episodes = 3\nlearning_rate = 0.1\n")
    assert run("train", "--config", cfg, "--out", tmp_path / "run") == 2
    assert "learning_rate" in capsys.readouterr().err


def test_train_then_rollout(tmp_path, capsys):
    cfg = tmp_path / "c.txt"
    cfg.write_text("env = corridor\nsensor_range = 3\nresolution = 1\nk = 2\ncell_size = 1\n"
                   "d = 8\nheads = 2\nlayers = 1\nepisodes = 2\ncollectors = 1\nmin_buffer = 10\nbatch_size = 4\n"
                   "iterations = 1\n")
    run_dir = tmp_path / "run"
    assert run("train", "--config", cfg, "--out", run_dir) == 0
    ckpt = learn.latest_checkpoint(run_dir)
    assert ckpt is not None
    trace = tmp_path / "t.jsonl"
    assert run("rollout", "--seed", 0, "--planner", "grate-smoothed", "--trace", trace,
               "--checkpoint", ckpt, "--config", cfg) == 0
    recs = [json.loads(l) for l in trace.read_text().splitlines()]
    assert "summary" in recs[-1]
    assert all("graph" in r and "smoother" in r for r in recs[:-1])
    assert run("train", "--config", cfg, "--out", run_dir, "--resume") == 0
    assert "episode 2" in capsys.readouterr().out


def test_gradcheck_subcommand():
    proc = subprocess.run([sys.executable, "-m", "gtexplore.cli", "gradcheck"], capture_output=True, text=True, timeout=300)
    assert proc.returncode == 0, proc.stdout + proc.stderr
    assert "PASS" in proc.stdout
    reported = [float(l.split()[-1]) for l in proc.stdout.splitlines() if "max rel err" in l]
    assert reported and max(reported) <= 1e-4
