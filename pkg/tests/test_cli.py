import pytest

import main as cli
from main import build_parser, collect_overrides, main
from data.manifest import load_manifest, save_manifest
from data.models import DatasetManifest
from metrics.evaluator import save_predictions
from tests.helpers import distribution_manifest, labeled_records, predictions_from_labels


def read_summary(out):
    lines = (out / "summary").read_text(encoding="utf-8").splitlines()
    return dict(line.split("=", 1) for line in lines)


def write_config(path, lines):
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return str(path)


def test_evaluate_perfect_predictions(tmp_path, capsys):
    manifest = DatasetManifest(records=labeled_records(70), root=str(tmp_path))
    labels = save_manifest(manifest, tmp_path / "labels.csv")
    predictions = save_predictions(predictions_from_labels(manifest), tmp_path / "predictions.csv")
    out = tmp_path / "eval"

    code = main([
        "evaluate", "--labels", str(labels), "--predictions", str(predictions), "--out", str(out),
    ])
    assert code == 0
    summary = read_summary(out)
    assert summary["status"] == "ok"
    assert abs(float(summary["s_expr"]) - 1.0) < 1e-12
    assert abs(float(summary["s_au"]) - 1.0) < 1e-12
    assert (out / "report.kv").is_file()
    assert (out / "resolved_config.env").is_file()
    assert "S_EXPR" in capsys.readouterr().out


def test_unknown_config_key(tmp_path, capsys):
    config = write_config(tmp_path / "run.env", ["SEED=1", "MODEL__DEPTH=5"])
    code = main(["gen-synthetic", "--config", config, "--out", str(tmp_path / "out")])
    assert code == 2
    assert "MODEL__DEPTH" in capsys.readouterr().out
    assert not (tmp_path / "out").exists()


def test_missing_required_path(tmp_path):
    out = tmp_path / "out"
    assert main(["evaluate", "--out", str(out)]) == 2
    summary = read_summary(out)
    assert summary["status"] == "error"
    assert summary["category"] == "config"


def test_gen_synthetic_then_expression_distribution(tmp_path):
    config = write_config(tmp_path / "run.env", [
        "SEED=3",
        "SYNTHETIC__NUM_SAMPLES=14",
        "SYNTHETIC__VAL_SAMPLES=7",
        "SYNTHETIC__IMAGE_SIZE=16",
    ])
    data = tmp_path / "data"
    assert main(["gen-synthetic", "--config", config, "--out", str(data)]) == 0
    summary = read_summary(data)
    assert summary["train_samples"] == "14"
    assert summary["seed"] == "3"
    assert len(load_manifest(data / "train.csv")) == 14

    dist = tmp_path / "dist"
    code = main(["expr-dist", "--inputs", str(data / "train.csv"), str(data / "val.csv"), "--out", str(dist)])
    assert code == 0
    assert read_summary(dist)["train.counts"] == "2,2,2,2,2,2,2"
    assert (dist / "expr_distribution.png").stat().st_size > 0


def test_merge_command(tmp_path):
    first = save_manifest(distribution_manifest([1, 0, 0, 0, 0, 0, 1]), tmp_path / "a.csv")
    second = save_manifest(distribution_manifest([0, 3, 0, 0, 0, 0, 0]), tmp_path / "b.csv")
    out = tmp_path / "merged"
    assert main(["merge", "--inputs", str(first), str(second), "--out", str(out)]) == 0
    summary = read_summary(out)
    assert summary["samples"] == "5"
    assert summary["coverage_expr"] == "5"
    assert summary["coverage_va"] == "0"
    assert len(load_manifest(out / "merged.csv")) == 5


def test_merge_conflict_exit_code(tmp_path):
    first = save_manifest(distribution_manifest([1, 0, 0, 0, 0, 0, 0]), tmp_path / "a.csv")
    out = tmp_path / "merged"
    assert main(["merge", "--inputs", str(first), str(first), "--out", str(out)]) == 4
    assert read_summary(out)["category"] == "merge"


def test_overrides_from_arguments():
    args = build_parser().parse_args([
        "merge", "--seed", "7", "--inputs", "a.csv", "b.csv", "--val-manifest", "v.csv",
    ])
    overrides = collect_overrides(args)
    assert overrides == {"SEED": "7", "DATA__VAL_MANIFEST": "v.csv", "DATA__MERGE_INPUTS": "a.csv,b.csv"}


def invalid_targets():
    from losses.models import TargetSet

    TargetSet(va=(3.0, 0.0))


def unwritable_file():
    open("/nonexistent/dir/file.csv", "w", encoding="utf-8")


def torch_failure():
    raise RuntimeError("CUDA error: out of memory")


@pytest.mark.parametrize("failure, exit_code, category", [
    (invalid_targets, 3, "validation"),
    (unwritable_file, 8, "io"),
    (torch_failure, 1, "internal"),
])
def test_unexpected_errors_are_categorized(tmp_path, monkeypatch, failure, exit_code, category):
    def broken_command(args, config, out):
        failure()

    monkeypatch.setitem(cli.COMMANDS, "merge", broken_command)
    out = tmp_path / "out"
    assert main(["merge", "--inputs", "a.csv", "b.csv", "--out", str(out)]) == exit_code
    summary = read_summary(out)
    assert summary["status"] == "error"
    assert summary["category"] == category
    assert summary["exit_code"] == str(exit_code)
