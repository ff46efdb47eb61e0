import json
import subprocess
import sys

import pytest
import yaml

from neuromas.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main
from neuromas.policy import PolicySet

TINY = {
    "seed": 0,
    "topology": "1-1",
    "task": {"stages": ["add-1"], "length": 2, "base": 2},
    "model": {"rank": 1},
    "trainer": {"steps": 2, "batch_size": 2, "checkpoint_interval": 1, "dev_size": 1},
}


def write_cfg(tmp_path, data=TINY, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(data))
    return str(path)


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_forward_prints_answer_then_trace(capsys):
    code, out, _ = run(capsys, "forward", "--topology", "1-1", "--input", "0 1", "--mode", "greedy")
    lines = out.splitlines()
    assert code == EXIT_OK and len(lines) == 2
    trace = json.loads(lines[1])
    assert trace["answer_raw"] == lines[0]
    assert [r["node"] for r in trace["records"]] == ["L1P1", "L2P1", "OUT"]


def test_forward_trace_out(tmp_path, capsys):
    path = tmp_path / "t.jsonl"
    code, out, _ = run(capsys, "forward", "--topology", "2", "--input", "1", "--trace-out", str(path))
    assert code == EXIT_OK and len(out.splitlines()) == 1
    assert json.loads(path.read_text())["meta"]["calls"] == 3


def test_forward_is_seeded(capsys):
    args = ("forward", "--topology", "1-1", "--input", "0 1", "--seed", "4")
    assert run(capsys, *args)[1] == run(capsys, *args)[1]


def test_verify_passes(capsys):
    code, out, _ = run(capsys, "verify")
    assert code == EXIT_OK
    assert out.splitlines()[-1].endswith("properties passed")
    assert "FAIL" not in out


def test_train_grow_eval(tmp_path, capsys):
    cfg = write_cfg(tmp_path)
    code, out, _ = run(capsys, "train", "--config", cfg, "--output-dir", str(tmp_path / "a"))
    assert code == EXIT_OK
    summary = json.loads(out)
    assert summary["topology"] == "1-1"
    assert (tmp_path / "a" / "metrics.csv").read_text().startswith("step,mean_reward")

    code, out, _ = run(capsys, "grow", "--config", cfg, "--from-checkpoint", str(tmp_path / "a" / "best.json"),
                       "--target-topology", "2-2", "--output-dir", str(tmp_path / "b"))
    assert code == EXIT_OK
    assert json.loads(out)["fresh"] == ["L1P2", "L2P2"]
    assert PolicySet.load(tmp_path / "b" / "best.json").topology.layers == (2, 2)

    tasks = tmp_path / "tasks.jsonl"
    tasks.write_text('{"id": "a", "input": "0 1", "gold": "10"}\n{"id": "b", "input": "1 1", "gold": "00"}\n')
    code, out, _ = run(capsys, "eval", "--checkpoint", str(tmp_path / "b" / "best.json"), "--tasks", str(tasks))
    result = json.loads(out)
    assert code == EXIT_OK and result["n"] == 2 and 0.0 <= result["accuracy"] <= 1.0


def test_grow_rejects_contraction(tmp_path, capsys):
    cfg = write_cfg(tmp_path, {**TINY, "topology": "2-2", "trainer": {**TINY["trainer"], "steps": 0}})
    run(capsys, "train", "--config", cfg, "--output-dir", str(tmp_path / "a"))
    code, _, err = run(capsys, "grow", "--from-checkpoint", str(tmp_path / "a" / "best.json"),
                       "--target-topology", "1-1", "--output-dir", str(tmp_path / "b"))
    assert code == EXIT_RUNTIME and "error" in err


def test_schedule_and_sweep_print_tables(tmp_path, capsys):
    data = {**TINY, "schedule": {"topologies": ["1-1", "2-2"], "seeds": [0]},
            "sweep": {"budgets": [1, 2, 3]}}
    cfg = write_cfg(tmp_path, data)
    code, out, _ = run(capsys, "schedule", "--config", cfg, "--output-dir", str(tmp_path / "s"))
    assert code == EXIT_OK
    assert out.splitlines()[0].startswith("seed=0 stage=1 topology=1-1 from_scratch=")
    assert (tmp_path / "s" / "comparison.csv").exists()
    # budgets of 1..3 parameters are unreachable by any rank
    code, _, err = run(capsys, "sweep", "--config", cfg, "--output-dir", str(tmp_path / "w"))
    assert code == EXIT_RUNTIME and "nearest achievable" in err


@pytest.mark.parametrize("argv", [["bogus"], [], ["forward"], ["train"], ["forward", "--input", "x", "--mode", "beam"]])
def test_usage_errors_exit_one(capsys, argv):
    code, _, err = run(capsys, *argv)
    assert code == EXIT_USAGE and err.startswith("error:")


def test_json_error_report(capsys):
    code, _, err = run(capsys, "--json", "bogus")
    doc = json.loads(err)
    assert code == EXIT_USAGE and doc["error"] == "usage" and doc["exit_code"] == 1


def test_missing_config_is_runtime_error(tmp_path, capsys):
    code, _, err = run(capsys, "--json", "train", "--config", str(tmp_path / "nope.yaml"))
    assert code == EXIT_RUNTIME and json.loads(err)["error"] == "ConfigError"


def test_remote_needs_endpoint(capsys):
    code, _, err = run(capsys, "forward", "--remote", "--input", "q")
    assert code == EXIT_USAGE and "endpoint" in err


def test_remote_forward_against_mock(tmp_path, capsys, mock_endpoint):
    cfg = write_cfg(tmp_path, {"topology": "2-2", "endpoint": {"base_url": mock_endpoint.url, "model": "m", "backoff": 0}})
    code, out, _ = run(capsys, "forward", "--config", cfg, "--remote", "--input", "What is 2+2?")
    assert code == EXIT_OK and len(mock_endpoint.requests) == 5
    assert out.splitlines()[0] == "TO #1: x"


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "neuromas.cli", "nonsense"], capture_output=True, text=True)
    assert proc.returncode == EXIT_USAGE
