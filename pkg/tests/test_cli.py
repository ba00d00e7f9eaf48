import json
import shutil
import subprocess

import pytest

from flashrec.cli import main


def write(tmp_path, name, **overrides):
    doc = {
        "scenario_id": "cli", "seed": 3, "topo": {"dp": 4}, "n_nodes": 4, "horizon_steps": 8,
        "param_len": 16, "faults": [{"at_step": 4, "phase": "ForwardBackward", "target_node": "node-2"}],
        "timings": {"container_start_mean": 2, "container_start_sd": 0, "hang_timeout": 10},
    }
    doc.update(overrides)
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return str(path)


def test_run_writes_csv(tmp_path, capsys):
    cfg = write(tmp_path, "s.json")
    out = tmp_path / "o.csv"
    assert main(["run", "--config", cfg, "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0].startswith("scenario_id,n_devices")
    assert lines[1].split(",")[3] == "forward_backward"
    assert main(["run", "--config", cfg]) == 0
    assert capsys.readouterr().out == out.read_text()


def test_run_overrides_mode_and_seed(tmp_path, capsys):
    cfg = write(tmp_path, "s.json", checkpoint_interval_t=2)
    assert main(["run", "--config", cfg, "--mode", "checkpoint", "--seed", "11"]) == 0
    rows = capsys.readouterr().out.splitlines()[1:]
    assert all(r.split(",")[9] == "checkpoint" for r in rows)


def test_config_errors_exit_1(tmp_path, capsys):
    assert main(["run", "--config", str(tmp_path / "missing.json")]) == 1
    assert main(["run", "--config", write(tmp_path, "b.json", n_nodes=3)]) == 1
    assert main(["run", "--config", write(tmp_path, "c.json"), "--mode", "checkpoint"]) == 1
    assert "config error" in capsys.readouterr().err


def test_unrecoverable_exit_2(tmp_path):
    cfg = write(tmp_path, "u.json", topo={"dp": 2}, n_nodes=1, devices_per_node=2,
                faults=[{"at_step": 3, "target_node": "node-0"}])
    assert main(["run", "--config", cfg, "--out", str(tmp_path / "u.csv")]) == 2


def test_analyze(capsys):
    assert main(["analyze", "--d", "100", "--m", "2", "--s0", "0", "--k0", "4", "--step-time", "1"]) == 0
    out = capsys.readouterr().out
    assert "t_star_seconds=20.000000" in out and "f_min=40.000000" in out
    assert main(["analyze", "--d", "100", "--m", "0", "--s0", "0", "--k0", "4"]) == 1


def test_sweep_and_plot_data(tmp_path):
    cfg = write(tmp_path, "sw.json", topo={"dp": 8}, n_nodes=2, devices_per_node=4,
                faults=[{"at_step": 3, "target_node": "node-0"}])
    out, plot = tmp_path / "sw.csv", tmp_path / "plot.csv"
    assert main(["sweep", "--config", cfg, "--sizes", "8,16", "--out", str(out), "--emit-plot-data", str(plot)]) == 0
    series = plot.read_text().splitlines()
    assert series[0] == "n_devices,checkpoint_restart_ticks,flash_restart_ticks"
    assert [s.split(",")[0] for s in series[1:]] == ["8", "16"]
    assert len(out.read_text().splitlines()) == 1 + 2 * 2 * 2
    assert main(["sweep", "--config", cfg, "--sizes", "8", "--out", str(out)]) == 1


@pytest.mark.parametrize("argv", [["run"], ["sweep", "--config", "x", "--sizes", "a,b"], ["bogus"]])
def test_usage_errors_exit_1(argv):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == 1


@pytest.mark.skipif(shutil.which("flashrec") is None, reason="console script not installed")
def test_console_script(tmp_path):
    proc = subprocess.run(["flashrec", "analyze", "--d", "100", "--m", "2", "--s0", "0", "--k0", "4"],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0 and "brute_force_steps=20" in proc.stdout
