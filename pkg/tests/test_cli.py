import json
import shutil

import pytest

from adaptive_depth import cli
from adaptive_depth.checkpoint import MANIFEST


def last_json(out: str) -> dict:
    return json.loads(out.strip().splitlines()[-1])


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = {"epochs": 3, "batch_size": 32,
           "backbone": {"num_layers": 3, "d_model": 16, "num_heads": 2},
           "predictor": {"n_trees": 10}}
    (d / "cfg.json").write_text(json.dumps(cfg))
    assert cli.main(["gen-data", "--out", str(d / "data.jsonl"), "--n", "300", "--seed", "4"]) == 0
    assert cli.main(["train", "--data", str(d / "data.jsonl"), "--config", str(d / "cfg.json"),
                     "--out", str(d / "run"), "--seed", "1"]) == 0
    return d


def test_gen_data_counts(tmp_path, capsys):
    assert cli.main(["gen-data", "--out", str(tmp_path / "d.jsonl"), "--n", "200", "--seed", "0"]) == 0
    rec = last_json(capsys.readouterr().out)
    assert rec["counts"] == {"easy": 120, "medium": 40, "hard": 40}


def test_simulate_bound_perfect_predictor(capsys):
    assert cli.main(["simulate-bound", "--alpha", "1", "--epsilon", "0", "--trials", "2000"]) == 0
    rec = last_json(capsys.readouterr().out)
    assert rec["mean"] == rec["bound_tight"] == rec["bound_loose"] == 6.0
    assert rec["satisfied"]


def test_train_outputs(workdir):
    run = workdir / "run"
    for name in (cli.RUN_META, cli.TRAIN_REPORT, cli.DEPTHS_FILE):
        assert (run / name).exists()
    assert (run / cli.CHECKPOINT_DIR / MANIFEST).exists()
    report = (run / cli.TRAIN_REPORT).read_text().splitlines()
    assert len(report) == 3


def test_eval_prints_ratio(workdir, capsys):
    assert cli.main(["eval", "--checkpoint", str(workdir / "run" / cli.CHECKPOINT_DIR),
                     "--data", str(workdir / "data.jsonl")]) == 0
    out = capsys.readouterr().out
    assert "of full depth" in out
    rec = last_json(out)
    assert 0.0 < rec["flops_ratio"] <= 1.0
    assert rec["peak_bytes"] > 0


def test_report_sums_match_buckets(workdir, capsys):
    assert cli.main(["report", "--run-dir", str(workdir / "run")]) == 0
    rec = last_json(capsys.readouterr().out)
    rows = [json.loads(line) for line in (workdir / "run" / cli.DEPTHS_FILE).read_text().splitlines()]
    for bucket, hist in rec["histograms"].items():
        assert sum(hist.values()) == sum(r["difficulty"] == bucket for r in rows)
    assert set(rec["modal_depth"]) == set(rec["histograms"])


def test_bench_engine(workdir, capsys):
    assert cli.main(["bench-engine", "--checkpoint", str(workdir / "run" / cli.CHECKPOINT_DIR),
                     "--executions", "300", "--equivalence-inputs", "5"]) == 0
    rec = last_json(capsys.readouterr().out)
    assert rec["equivalence_max_abs"] <= 1e-6
    assert 0.0 <= rec["pool_hit_rate"] <= 1.0


def test_missing_file_exit_code(tmp_path, capsys):
    assert cli.main(["eval", "--checkpoint", str(tmp_path / "none"), "--data", str(tmp_path / "x")]) == 2
    assert capsys.readouterr().err.startswith("error:")


def test_version_mismatch_exit_code(workdir, tmp_path, capsys):
    ck = tmp_path / "ck"
    shutil.copytree(workdir / "run" / cli.CHECKPOINT_DIR, ck)
    text = (ck / MANIFEST).read_text().replace("format-version 1", "format-version 99", 1)
    (ck / MANIFEST).write_text(text)
    assert cli.main(["eval", "--checkpoint", str(ck), "--data", str(workdir / "data.jsonl")]) == 1
    assert "VersionError" in capsys.readouterr().err


def test_modal_depth_prefers_shallower_on_tie():
    from collections import Counter
    assert cli.modal_depth(Counter({3: 5, 1: 5, 2: 1})) == 1
