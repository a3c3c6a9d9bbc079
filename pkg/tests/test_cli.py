import json

import pytest

from comerge import fileio
from comerge.cli import main

CONFIG_TEXT = """
ratio = 0.0
ratio = 0.5
group = 4
frames = 1
patches = 64
special = 0
channels = 8
layers = 1
repetitions = 3
seed = 3
"""


def test_sweep_writes_outputs(tmp_path, capsys):
    config = tmp_path / "sweep.cfg"
    config.write_text(CONFIG_TEXT)
    out_dir = tmp_path / "out"
    main(["sweep", "--config", str(config), "--out", str(out_dir)])
    records = json.loads((out_dir / "records.json").read_text())
    assert len(records) == 2
    assert records[0]["ratio"] == 0.0
    csv_lines = (out_dir / "records.csv").read_text().splitlines()
    assert len(csv_lines) == 3
    assert "speedup" in csv_lines[0]
    assert "retained_l1" in capsys.readouterr().out


def test_come_seed_env_overrides(tmp_path, monkeypatch):
    config = tmp_path / "sweep.cfg"
    config.write_text(CONFIG_TEXT)
    out_a = tmp_path / "a"
    out_b = tmp_path / "b"
    main(["sweep", "--config", str(config), "--out", str(out_a)])
    monkeypatch.setenv("COME_SEED", "99")
    main(["sweep", "--config", str(config), "--out", str(out_b)])
    rec_a = json.loads((out_a / "records.json").read_text())[1]
    rec_b = json.loads((out_b / "records.json").read_text())[1]
    assert rec_a["retained_l1"] != rec_b["retained_l1"]


def test_tradeoff_prints_csv(tmp_path, capsys):
    main([
        "tradeoff", "--strategies", "confidence,drop-all", "--ratios", "0.5",
        "--frames", "1", "--patches", "64", "--special", "0",
        "--channels", "8", "--layers", "1", "--repetitions", "3",
        "--out", str(tmp_path),
    ])
    out = capsys.readouterr().out
    assert "strategy,ratio" in out
    saved = (tmp_path / "tradeoff.csv").read_text()
    assert "confidence" in saved and "drop-all" in saved


def test_breakdown_reports_shares(tmp_path, capsys):
    main([
        "breakdown", "--tokens", "64", "--ratio", "0.5", "--group", "4",
        "--channels", "8", "--repetitions", "2",
        "--dump-activations", str(tmp_path / "dump"),
    ])
    out = capsys.readouterr().out
    assert "attention" in out and "overhead" in out
    pre = fileio.read_tensor(tmp_path / "dump" / "pre_merge.come")
    assert pre.shape == (1, 64, 8)


def test_unknown_command_exits():
    with pytest.raises(SystemExit):
        main(["polish"])
