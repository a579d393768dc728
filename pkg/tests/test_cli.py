import json
import os
import stat

import numpy as np
import pytest

from quantlab import cli
from quantlab.tensor import ActivationTensor, save_dump

FAST_STACK = {"depth": 3, "width": 32, "n_dominant": 2, "samples": 256}
FAST_COLLAPSE = {"depth": 3, "width": 32, "samples": 512}


def write_config(tmp_path, **kw):
    doc = {
        "stack": FAST_STACK,
        "collapse_stack": FAST_COLLAPSE,
        "microbench_iterations": 100,
        "microbench_warmup": 1,
        "out": str(tmp_path / "out"),
    }
    doc.update(kw)
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(doc))
    return str(p)


def make_dumps(tmp_path, names):
    rng = np.random.default_rng(0)
    paths = []
    for i, name in enumerate(names):
        p = tmp_path / f"{name}.qlt"
        save_dump(ActivationTensor(rng.standard_normal((16, 24)) * (1 + i)), p)
        paths.append(str(p))
    return paths


def test_stats_one_dump(tmp_path, capsys):
    dumps = make_dumps(tmp_path, ["emb"])
    out = tmp_path / "o"
    assert cli.main(["stats", "--dumps", *dumps, "--out", str(out)]) == 0
    lines = (out / "outlier_stats.csv").read_text().splitlines()
    assert len(lines) == 2 and lines[1].startswith("emb,")


def test_stats_thirteen_dumps_in_order(tmp_path):
    names = [f"layer{i:02d}" for i in range(12)] + ["pooler"]
    dumps = make_dumps(tmp_path, names)
    out = tmp_path / "o"
    assert cli.main(["stats", "--dumps", *dumps, "--out", str(out)]) == 0
    rows = (out / "outlier_stats.csv").read_text().splitlines()[1:]
    assert [r.split(",")[0] for r in rows] == names


def test_stats_missing_file(tmp_path):
    dumps = make_dumps(tmp_path, ["a"])
    out = tmp_path / "o"
    assert cli.main(["stats", "--dumps", dumps[0], str(tmp_path / "nope.qlt"), "--out", str(out)]) == 2
    assert not (out / "outlier_stats.csv").exists()


def test_stats_malformed_dump(tmp_path):
    bad = tmp_path / "bad.qlt"
    bad.write_bytes(b"XXXX" + bytes(17))
    assert cli.main(["stats", "--dumps", str(bad), "--out", str(tmp_path / "o")]) == 3


def test_stats_requires_dumps(tmp_path):
    assert cli.main(["stats", "--out", str(tmp_path / "o")]) == 1


def test_stats_sample_slice(tmp_path):
    dumps = make_dumps(tmp_path, ["a"])
    cfg = write_config(tmp_path, stats_samples=2, stats_seq_len=2)
    assert cli.main(["stats", "--config", cfg, "--dumps", *dumps]) == 0


def test_simulate_default_like_config(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert cli.main(["simulate", "--config", cfg]) == 0
    text = capsys.readouterr().out
    assert "variance check: ok" in text
    rows = (tmp_path / "out" / "propagation.csv").read_text().splitlines()
    assert len(rows) == 1 + FAST_STACK["depth"]


def test_simulate_single_layer(tmp_path):
    cfg = write_config(tmp_path, stack=dict(FAST_STACK, depth=1))
    assert cli.main(["simulate", "--config", cfg]) == 0
    assert len((tmp_path / "out" / "propagation.csv").read_text().splitlines()) == 2


def test_simulate_bad_policy_length(tmp_path):
    cfg = write_config(tmp_path, policy=["minmax", "retain"])
    assert cli.main(["simulate", "--config", cfg]) == 1


def test_simulate_ratio_violation_exit_4(tmp_path, monkeypatch):
    monkeypatch.setattr(cli, "RATIO_TOLERANCE", (2.0, 3.0))
    assert cli.main(["simulate", "--config", write_config(tmp_path)]) == 4


def test_experiment_writes_metrics(tmp_path, capsys):
    assert cli.main(["experiment", "--config", write_config(tmp_path)]) == 0
    lines = (tmp_path / "out" / "method_metrics.csv").read_text().splitlines()
    assert lines[0] == "method,accuracy,delta_vs_ref"
    assert lines[1].startswith("fp32,") and lines[1].endswith(",0.000000")
    assert len(lines) == 1 + 3 + 4 + 3
    assert "method ordering verdict" in capsys.readouterr().out


def test_microbench_command(tmp_path):
    assert cli.main(["microbench", "--config", write_config(tmp_path)]) == 0
    assert (tmp_path / "out" / "microbench.csv").exists()


def test_run_all_writes_every_csv(tmp_path):
    assert cli.main(["run-all", "--config", write_config(tmp_path)]) == 0
    names = sorted(os.listdir(tmp_path / "out"))
    assert names == ["method_metrics.csv", "microbench.csv", "outlier_stats.csv", "propagation.csv"]


def test_run_all_uses_dumps(tmp_path):
    dumps = make_dumps(tmp_path, ["x", "y"])
    assert cli.main(["run-all", "--config", write_config(tmp_path), "--dumps", *dumps]) == 0
    rows = (tmp_path / "out" / "outlier_stats.csv").read_text().splitlines()
    assert [r.split(",")[0] for r in rows[1:]] == ["x", "y"]


@pytest.mark.skipif(os.geteuid() == 0, reason="root ignores directory permissions")
def test_run_all_unwritable_out_dir_permissions(tmp_path):
    locked = tmp_path / "locked"
    locked.mkdir()
    locked.chmod(stat.S_IRUSR | stat.S_IXUSR)
    assert cli.main(["run-all", "--config", write_config(tmp_path), "--out", str(locked)]) == 2


def test_run_all_unwritable_out_dir(tmp_path, monkeypatch):
    blocker = tmp_path / "file"
    blocker.write_text("")
    calls = []
    monkeypatch.setattr(cli, "synthetic_profile", lambda cfg: calls.append(cfg))
    assert cli.main(["run-all", "--config", write_config(tmp_path), "--out", str(blocker / "sub")]) == 2
    assert calls == []


def test_flags_override_config(tmp_path):
    args = cli.build_parser().parse_args(["experiment", "--config", write_config(tmp_path, seed=5, bits=6), "--seed", "9"])
    cfg = cli.resolve_config(args)
    assert cfg.seed == 9 and cfg.bits == 6
    assert cfg.collapse_config().seed == 9


@pytest.mark.parametrize(
    "argv",
    [
        [],
        ["bogus"],
        ["stats", "--bits"],
        ["simulate", "--bits", "1"],
        ["simulate", "--seed", "-3"],
    ],
)
def test_usage_errors(argv):
    assert cli.main(argv) == 1


@pytest.mark.parametrize(
    "doc",
    [
        {"unknown": 1},
        {"percentiles": []},
        {"k_grid": [0]},
        {"stack": {"seed": 3}},
        {"stack": {"depthh": 3}},
        {"stack": {"depth": 0}},
        {"percentiles": "99"},
    ],
)
def test_config_errors(tmp_path, doc):
    p = tmp_path / "c.json"
    p.write_text(json.dumps(doc))
    assert cli.main(["simulate", "--config", str(p), "--out", str(tmp_path / "o")]) == 1


def test_config_not_json(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{")
    assert cli.main(["simulate", "--config", str(p)]) == 1


def test_config_missing(tmp_path):
    assert cli.main(["simulate", "--config", str(tmp_path / "none.json")]) == 2


def test_ordering_checks():
    acc = {"fp32": 0.9, "mixed": 0.9, "minmax": 0.5, "percentile_99": 0.49, "percentile_99.9": 0.5,
           "peg_k2": 0.5, "peg_k4": 0.88}
    checks = dict(cli.ordering_checks(acc, (99.0, 99.9), (2, 4)))
    assert all(checks.values()) and len(checks) == 7
    acc["peg_k4"] = 0.6
    assert not all(dict(cli.ordering_checks(acc, (99.0, 99.9), (2, 4))).values())


def test_module_entry_point(tmp_path):
    import subprocess
    import sys

    r = subprocess.run([sys.executable, "-m", "quantlab", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "run-all" in r.stdout
