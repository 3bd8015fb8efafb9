import json

import numpy as np
import pytest

from specmerge import (
    LoraFactorPair,
    load_checkpoint,
    save_checkpoint,
    save_lora_adapter,
)
from specmerge.cli import main
from specmerge.verify import CheckResult


@pytest.fixture
def workspace(make_map, tmp_path):
    paths = {"pretrained": tmp_path / "pre.st", "out": tmp_path / "merged.st"}
    save_checkpoint(make_map(seed=100, model_id="base", role="pretrained"), paths["pretrained"])
    for i, seed in enumerate((101, 102)):
        path = tmp_path / f"ft{i}.st"
        save_checkpoint(make_map(seed=seed, model_id=f"ft{i}"), path)
        paths[f"ft{i}"] = path
    paths["dir"] = tmp_path
    return paths


def run(*argv):
    return main([str(a) for a in argv])


def test_merge_star_smoke(workspace, capsys):
    code = run(
        "merge", "--method", "star", "--eta", "40",
        "--pretrained", workspace["pretrained"],
        "--model", workspace["ft0"], "--model", workspace["ft1"],
        "--out", workspace["out"],
    )
    assert code == 0
    merged = load_checkpoint(workspace["out"])
    assert merged.role == "merged"
    assert merged.keys() == load_checkpoint(workspace["pretrained"]).keys()
    report = json.loads((workspace["dir"] / "merged.st.diagnostics.json").read_text())
    assert report["config"]["method"] == "star"
    assert set(report["per_layer_ranks"]) == {"decoder.weight", "encoder.weight"}
    assert len(report["per_layer_ranks"]["decoder.weight"]) == 2


def test_merge_out_of_scope_method(workspace, capsys):
    code = run(
        "merge", "--method", "metagpt",
        "--pretrained", workspace["pretrained"],
        "--model", workspace["ft0"],
        "--out", workspace["out"],
    )
    assert code == 1
    assert "out of scope" in capsys.readouterr().err


def test_merge_ta_requires_alpha(workspace, capsys):
    code = run(
        "merge", "--method", "ta",
        "--pretrained", workspace["pretrained"],
        "--model", workspace["ft0"],
        "--out", workspace["out"],
    )
    assert code == 1
    assert "alpha" in capsys.readouterr().err


def test_merge_missing_file_is_validation_error(workspace, capsys):
    code = run(
        "merge", "--method", "star",
        "--pretrained", workspace["dir"] / "nope.st",
        "--model", workspace["ft0"],
        "--out", workspace["out"],
    )
    assert code == 1


def test_merge_corrupt_file_is_validation_error(workspace, capsys):
    bad = workspace["dir"] / "corrupt.st"
    bad.write_bytes(b"\xff" * 32)
    code = run(
        "merge", "--method", "star",
        "--pretrained", bad,
        "--model", workspace["ft0"],
        "--out", workspace["out"],
    )
    assert code == 1


def test_merge_unknown_flag_exits_one(workspace, capsys):
    assert run("merge", "--bogus") == 1


def test_merge_with_scores_reports_evaluation(workspace, capsys):
    scores = workspace["dir"] / "scores.csv"
    scores.write_text(
        "task_name,metric_kind,merged,finetuned,pretrained\n"
        "a,accuracy,40.0,100.0,80.0\n"
    )
    report_path = workspace["dir"] / "diag.json"
    code = run(
        "merge", "--method", "average",
        "--pretrained", workspace["pretrained"],
        "--model", workspace["ft0"], "--model", workspace["ft1"],
        "--out", workspace["out"],
        "--scores", scores, "--report", report_path,
    )
    assert code == 0
    err = capsys.readouterr().err
    assert "loses its purpose" in err
    evaluation = json.loads(report_path.read_text())["evaluation"]
    assert evaluation["normalized_average"] == 40.0
    assert evaluation["pretrained_baseline"] == 80.0
    assert evaluation["merged_beats_pretrained"] is False


def test_merge_lora_inputs(workspace, rng):
    pre = load_checkpoint(workspace["pretrained"])
    adapter_paths = []
    for i in range(2):
        pairs = []
        for target in ("encoder.weight", "decoder.weight"):
            m, n = pre[target].shape
            pairs.append(
                LoraFactorPair(
                    a_factor=rng.standard_normal((2, n)),
                    b_factor=rng.standard_normal((m, 2)),
                    rank=2,
                    alpha=4.0,
                    target_name=target,
                )
            )
        path = workspace["dir"] / f"adapter{i}.st"
        save_lora_adapter(pairs, path, model_id=f"lora{i}")
        adapter_paths.append(path)
    code = run(
        "merge", "--method", "star", "--lora",
        "--pretrained", workspace["pretrained"],
        "--model", adapter_paths[0], "--model", adapter_paths[1],
        "--out", workspace["out"],
    )
    assert code == 0
    merged = load_checkpoint(workspace["out"])
    np.testing.assert_array_equal(merged["norm.bias"], pre["norm.bias"])


def test_inspect_profile_csv(workspace, capsys):
    code = run(
        "inspect", "--model", workspace["ft0"],
        "--pretrained", workspace["pretrained"], "--eta", "40",
    )
    assert code == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "layer_name,rank"
    assert len(lines) == 3  # two 2-D layers


def test_sweep_has_seven_rows_and_is_byte_identical(workspace):
    report = workspace["dir"] / "sweep.csv"
    args = (
        "sweep",
        "--pretrained", workspace["pretrained"],
        "--model", workspace["ft0"], "--model", workspace["ft1"],
        "--report", report,
    )
    assert run(*args) == 0
    first = report.read_bytes()
    lines = first.decode().strip().splitlines()
    assert lines[0].startswith("eta,")
    assert len(lines) == 8  # header + one row per grid point
    assert [row.split(",")[0] for row in lines[1:]] == ["10", "20", "30", "40", "50", "60", "70"]
    assert run(*args) == 0
    assert report.read_bytes() == first


def test_synth_decay_csv(tmp_path):
    report = tmp_path / "decay.csv"
    code = run(
        "synth", "--tasks", "3", "--rows", "16", "--cols", "16",
        "--rank", "2", "--noise", "0.05", "--seed", "3", "--report", report,
    )
    assert code == 0
    lines = report.read_text().strip().splitlines()
    assert lines[0] == "method,num_models,value"
    assert len(lines) == 1 + 2 * 3
    for row in lines[1:]:
        method, count, value = row.split(",")
        assert method in {"star(eta=40)", "simple_average"}
        assert 1 <= int(count) <= 3
        float(value)


def test_verify_reports_and_exit_codes(monkeypatch, capsys):
    results = [CheckResult("alpha", True, "ok"), CheckResult("beta", True, "ok")]
    monkeypatch.setattr("specmerge.cli.run_all", lambda: results)
    assert run("verify") == 0
    out = capsys.readouterr().out
    assert "PASS alpha" in out and "PASS beta" in out

    results[1] = CheckResult("beta", False, "broke")
    assert run("verify") == 2
    captured = capsys.readouterr()
    assert "FAIL beta" in captured.out
    assert "1/2" in captured.err


def test_merged_checkpoint_byte_identical_across_runs(workspace):
    args = (
        "merge", "--method", "ties", "--k", "20", "--dare-p", "0.3", "--seed", "11",
        "--pretrained", workspace["pretrained"],
        "--model", workspace["ft0"], "--model", workspace["ft1"],
        "--out", workspace["out"],
    )
    assert run(*args) == 0
    first = workspace["out"].read_bytes()
    assert run(*args) == 0
    assert workspace["out"].read_bytes() == first
