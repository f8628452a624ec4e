import json
import subprocess
import sys
from pathlib import Path

import pytest

from idstream.cli import main
from idstream.memory import FrameArchive, greedy_retrieve

DATA = Path(__file__).parent / "data"


@pytest.fixture
def small_config(tmp_path):
    cfg = {
        "seed": 3,
        "schedule": [
            {"prompt": "A woman walks.", "chunks": 2, "entities": ["woman"]},
            {"prompt": "A man waits.", "chunks": 2, "entities": ["man"]},
            {"prompt": "The woman greets the man.", "chunks": 2, "entities": ["woman", "man"]},
        ],
    }
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path


def test_simulate_is_byte_deterministic(tmp_path, small_config):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    assert main(["simulate", "--config", str(small_config), "--out", str(a)]) == 0
    assert main(["simulate", "--config", str(small_config), "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    doc = json.loads(a.read_text())
    assert doc["seed"] == 3 and len(doc["chunks"]) == 6 and doc["config"]["schedule"][0]["chunks"] == 2


def test_simulate_seed_override_and_dumps(tmp_path, small_config):
    out = tmp_path / "r.json"
    args = ["simulate", "--config", str(small_config), "--seed", "9", "--out", str(out),
            "--dump-registry", str(tmp_path / "reg.json"), "--dump-archive", str(tmp_path / "arc.json")]
    assert main(args) == 0
    assert json.loads(out.read_text())["seed"] == 9
    assert list(json.loads((tmp_path / "reg.json").read_text())["entries"]) == ["1", "2"]
    assert len(FrameArchive.load(tmp_path / "arc.json")) == 6


def test_retrieve_matches_library(tmp_path, small_config, capsys):
    main(["simulate", "--config", str(small_config), "--out", str(tmp_path / "r.json"), "--dump-archive", str(tmp_path / "arc.json")])
    capsys.readouterr()
    assert main(["retrieve", "--archive", str(tmp_path / "arc.json"), "--ids", "1,2"]) == 0
    text = capsys.readouterr().out
    expected = greedy_retrieve(FrameArchive.load(tmp_path / "arc.json"), [1, 2], 4)
    assert f"selected frames: {expected.frame_ids}" in text
    assert "covered: [1, 2]" in text


def test_retrieve_unknown_id_warns(tmp_path, small_config, caplog):
    main(["simulate", "--config", str(small_config), "--out", str(tmp_path / "r.json"), "--dump-archive", str(tmp_path / "arc.json")])
    assert main(["retrieve", "--archive", str(tmp_path / "arc.json"), "--ids", "7"]) == 0
    assert "id 7 appears in no archived frame" in caplog.text


def test_score_golden(tmp_path, capsys):
    out = tmp_path / "report.json"
    assert main(["score", "--bundle", str(DATA / "golden_bundle.json"), "--out", str(out)]) == 0
    got = json.loads(out.read_text())
    golden = json.loads((DATA / "golden_report.json").read_text())
    assert got["overall"] == pytest.approx(golden["overall"], abs=1e-9)
    assert "overall" in capsys.readouterr().out


def test_score_malformed_planner_notes(tmp_path, capsys):
    doc = json.loads((DATA / "golden_bundle.json").read_text())
    doc["planner_raw"] = []
    path = tmp_path / "b.json"
    path.write_text(json.dumps(doc))
    (tmp_path / "golden_bundle.bin").write_bytes((DATA / "golden_bundle.bin").read_bytes())
    assert main(["score", "--bundle", str(path), "--out", str(tmp_path / "r.json")]) == 0
    assert "uniform weights" in capsys.readouterr().out


def test_bench(tmp_path, small_config):
    out = tmp_path / "bench.json"
    assert main(["bench", "--config", str(small_config), "--repeat", "2", "--out", str(out)]) == 0
    summary = json.loads(out.read_text())
    assert summary["repeat"] == 2 and summary["fps_mean"] == pytest.approx(24.0)


@pytest.mark.parametrize(
    "argv",
    [
        ["simulate", "--config", "/nonexistent.json", "--out", "x.json"],
        ["score", "--bundle", "/nonexistent.json", "--out", "x.json"],
        ["retrieve", "--archive", "/nonexistent.json", "--ids", "1"],
        ["retrieve", "--archive", "/nonexistent.json", "--ids", "a,b"],
        ["bench", "--repeat", "0"],
    ],
)
def test_usage_errors_exit_2(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == 2


def test_unknown_subcommand_exits_2():
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2


def test_unknown_config_key_exit_2(tmp_path, capsys):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"session": {"memroy_enabled": False}}))
    assert main(["simulate", "--config", str(path), "--out", str(tmp_path / "o.json")]) == 2
    assert "memroy_enabled" in capsys.readouterr().err


def test_runtime_failure_exit_3(tmp_path, small_config):
    assert main(["simulate", "--config", str(small_config), "--out", str(tmp_path / "missing" / "o.json")]) == 3


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "idstream.cli", "score", "--bundle", str(DATA / "golden_bundle.json"),
                           "--out", str(tmp_path / "r.json")], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
