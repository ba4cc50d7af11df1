import json

import pytest

from nlsrace.cli import main, parse_strategy, InputError
from nlsrace.config import format_config, load_flat
from nlsrace.fitting import FittedParams, generate_synthetic


def files_under(root):
    return sorted(str(p.relative_to(root)) for p in root.rglob("*") if p.is_file())


def test_usage_errors_exit_1(capsys):
    assert main([]) == 1
    assert main(["race"]) == 1
    assert main(["bogus"]) == 1
    assert main(["eval", "--ckpt", "x.json", "--races", "0"]) == 1


def test_missing_input_exit_2(tmp_path, capsys):
    missing = tmp_path / "nope.csv"
    assert main(["fit", "--data", str(missing), "--out", str(tmp_path / "o")]) == 2
    assert str(missing) in capsys.readouterr().err


def test_bad_config_exit_2(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("race.laps = 10\nnot a line\n")
    assert main(["race", "--track", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "bad.cfg:2" in capsys.readouterr().err


def test_oracle_and_race(tmp_path, capsys):
    out = tmp_path / "oracle"
    assert main(["oracle", "--out", str(out)]) == 0
    doc = json.loads((out / "oracle.json").read_text())
    assert doc["stop_laps"][0] == 8 and len(doc["actions"]) == 25
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "oracle" and manifest["tool_version"]

    race = tmp_path / "race"
    assert main(["race", "--strategy", str(out / "oracle.json"), "--seed", "3", "--out", str(race)]) == 0
    assert set(files_under(race)) == {"events.csv", "lap_chart.csv", "manifest.json", "standings.json"}
    standings = json.loads((race / "standings.json").read_text())
    assert standings["seed"] == 3 and len(standings["standings"]) == 16


def test_race_is_reproducible(tmp_path):
    strat = tmp_path / "s.txt"
    strat.write_text("# lap,action\n8,3\n16,2\n22,1\n")
    for name in ("a", "b"):
        assert main(["race", "--strategy", str(strat), "--seed", "5", "--out", str(tmp_path / name)]) == 0
    for f in ("events.csv", "standings.json", "lap_chart.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_parse_strategy_forms():
    assert parse_strategy('{"actions": [0, 1]}', 4) == [0, 1, 0, 0]
    assert parse_strategy("2,3\n", 3) == [0, 3, 0]
    with pytest.raises(InputError):
        parse_strategy("2;3\n", 3)
    with pytest.raises(InputError):
        parse_strategy("9,1\n", 3)
    with pytest.raises(InputError):
        parse_strategy('{"actions": [5]}', 3)


def test_fit_writes_beside_json(tmp_path, default_cfg):
    data = tmp_path / "timing.csv"
    generate_synthetic(FittedParams.from_config(default_cfg), 3, seed=1).to_csv(data)
    out = tmp_path / "fit" / "p.json"
    assert main(["fit", "--data", str(data), "--out", str(out)]) == 0
    assert files_under(tmp_path / "fit") == ["p.json", "p.manifest.json", "p.report.txt"]
    assert FittedParams.from_json(out.read_text()).c60_duration_laps >= 1
    race = tmp_path / "race"
    assert main(["race", "--params", str(out), "--out", str(race)]) == 0


def test_train_eval_and_mismatch(tmp_path, capsys):
    train_cfg = tmp_path / "train.cfg"
    train_cfg.write_text("train.episodes = 30\ntrain.learning_rate = 0.1\n")
    out = tmp_path / "q"
    assert main(["train", "--agent", "q", "--config", str(train_cfg), "--eval-races", "2", "--out", str(out)]) == 0
    assert {"checkpoint.json", "metrics.csv", "summary.json", "manifest.json"} <= set(files_under(out))
    summary = json.loads((out / "summary.json").read_text())
    assert summary["episodes"] == 30 and summary["train_config"]["learning_rate"] == 0.1
    capsys.readouterr()
    assert main(["eval", "--ckpt", str(out / "checkpoint.json"), "--races", "2"]) == 0
    assert json.loads(capsys.readouterr().out)["n_races"] == 2

    small = tmp_path / "small.cfg"
    flat = dict(load_flat(profile="reduced"))
    flat["race.n_opponents"] = 5
    flat["race.agent_grid_slot"] = 3
    small.write_text(format_config(flat))
    assert main(["eval", "--ckpt", str(out / "checkpoint.json"), "--track", str(small), "--races", "1"]) == 2
    assert "does not match" in capsys.readouterr().err


def test_unknown_train_key_exit_2(tmp_path):
    cfg = tmp_path / "t.cfg"
    cfg.write_text("train.bogus = 1\n")
    assert main(["train", "--agent", "dqn", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2


def test_outputs_stay_under_out(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(["oracle", "--out", "o1"]) == 0
    assert main(["race", "--out", "o2", "--seed", "2"]) == 0
    assert sorted(p.name for p in tmp_path.iterdir()) == ["o1", "o2"]


def test_race_oracle_deterministic_p1(tmp_path, capsys):
    out = tmp_path / "r"
    assert main(["race", "--profile", "deterministic", "--strategy", "oracle", "--out", str(out)]) == 0
    standings = json.loads((out / "standings.json").read_text())["standings"]
    assert standings[0]["car_id"] == "agent"


def test_race_pitting_every_lap_loses(tmp_path):
    strat = tmp_path / "every.json"
    strat.write_text(json.dumps({"actions": [1] * 25}))
    out = tmp_path / "r"
    assert main(["race", "--strategy", str(strat), "--out", str(out)]) == 0
    agent = next(r for r in json.loads((out / "standings.json").read_text())["standings"] if r["car_id"] == "agent")
    assert agent["retired"] or agent["position"] == 16


def test_fit_without_start_data_flags_fallback(tmp_path, default_cfg):
    ds = generate_synthetic(FittedParams.from_config(default_cfg), 3, seed=4)
    text = ds.to_csv().splitlines()
    body = [row for row in text[1:] if row.split(",")[4] != "1"]
    data = tmp_path / "nostart.csv"
    data.write_text("\n".join([text[0]] + body) + "\n")
    out = tmp_path / "fit"
    assert main(["fit", "--data", str(data), "--out", str(out)]) == 0
    report = (out / "params.report.txt").read_text()
    assert "start" in report.split("fallbacks")[1]


@pytest.mark.slow
def test_train_smoke_dqn(tmp_path):
    import time
    t0 = time.perf_counter()
    out = tmp_path / "smoke"
    assert main(["train", "--agent", "dqn", "--preset", "smoke", "--eval-races", "5", "--out", str(out)]) == 0
    assert {"checkpoint.json", "metrics.csv", "loss.csv", "summary.json", "manifest.json"} <= set(files_under(out))
    assert len((out / "metrics.csv").read_text().splitlines()) == 501
    assert time.perf_counter() - t0 < 60
