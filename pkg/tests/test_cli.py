import json
import shutil

import pytest
import yaml

from gazevit.cli import main
from gazevit.harness import DATA_ROOT_ENV, load_records, read_tsv
from gazevit.report import NO_RUNS_BANNER, accuracy_rows, read_report_data, render_report

TINY = ["--set", "depth=1", "--set", "embed_dim=16", "--set", "max_epochs=2", "--set", "patience=2",
        "--set", "optimizer=adam", "--set", "batch_size=16"]


def outputs(run_dir):
    return json.loads((run_dir / "outputs.json").read_text())


@pytest.fixture(scope="module")
def cli_root(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    root = base / "data"
    assert main(["synth", "--root", str(root), "--set", "n_samples=60", "--seed", "1",
                 "--run-dir", str(base / "r-synth")]) == 0
    assert main(["preprocess", "--root", str(root), "--run-dir", str(base / "r-pre")]) == 0
    return base, root


@pytest.fixture(scope="module")
def cli_runs(cli_root):
    base, root = cli_root
    for lam in ("0", "0.5"):
        extra = [] if lam == "0" else ["--set", "loss=fax", "--set", f"lam={lam}"]
        code = main(["train", "--root", str(root), "--run-dir", str(base / f"r-train{lam}"),
                     "--set", "seeds=[0, 1]", *TINY, *extra])
        assert code == 0
    return base, root


def test_synth_and_preprocess_manifests(cli_root):
    base, root = cli_root
    synth = outputs(base / "r-synth")
    assert synth["command"] == "synth"
    assert any(f["path"].endswith("dataset.json") for f in synth["files"])
    assert all(len(f["sha256"]) == 64 for f in synth["files"])
    pre = {f["path"] for f in outputs(base / "r-pre")["files"]}
    assert str(root / "manifest.jsonl") in pre and str(root / "events.jsonl") in pre


def test_stepwise_commands(cli_root, tmp_path, capsys):
    _, root = cli_root
    work = tmp_path / "data"
    shutil.copytree(root, work)
    assert main(["detect-turns", "--root", str(work), "--run-dir", str(tmp_path / "a")]) == 0
    assert main(["build-fixmaps", "--root", str(work), "--run-dir", str(tmp_path / "b")]) == 0
    assert "60 fixation maps" in capsys.readouterr().out
    assert main(["split", "--root", str(work), "--seed", "2", "--run-dir", str(tmp_path / "c")]) == 0
    assert capsys.readouterr().out.strip() == "train=39 valid=9 test=12"
    assert {f["path"] for f in outputs(tmp_path / "c")["files"]} == {"train.jsonl", "valid.jsonl", "test.jsonl"}


def test_dataset_root_from_environment(cli_root, tmp_path, monkeypatch, capsys):
    _, root = cli_root
    monkeypatch.setenv(DATA_ROOT_ENV, str(root))
    assert main(["split", "--run-dir", str(tmp_path)]) == 0
    monkeypatch.delenv(DATA_ROOT_ENV)
    assert main(["split", "--run-dir", str(tmp_path / "x")]) == 3
    assert "GAZEVIT_DATA_ROOT" in capsys.readouterr().err


def test_yaml_config_with_override(cli_root, tmp_path, capsys):
    _, root = cli_root
    cfg = tmp_path / "c.yaml"
    cfg.write_text(yaml.safe_dump({"split_ratios": [0.5, 0.25, 0.25]}))
    assert main(["split", "--root", str(root), "--config", str(cfg), "--run-dir", str(tmp_path / "a")]) == 0
    assert capsys.readouterr().out.strip() == "train=30 valid=15 test=15"
    code = main(["split", "--root", str(root), "--config", str(cfg), "--set", "split_ratios=[0.6, 0.2, 0.2]",
                 "--run-dir", str(tmp_path / "b")])
    assert code == 0 and capsys.readouterr().out.strip() == "train=36 valid=12 test=12"


@pytest.mark.parametrize(
    "argv,code",
    [
        (["split", "--set", "nonsense"], 2),
        (["split", "--set", "split_ratios=[0.5, 0.5, 0.5]"], 2),
        (["split", "--set", "mystery_key=1"], 2),
        (["split", "--config", "/nonexistent.yaml"], 3),
        (["evaluate", "--checkpoint", "/nonexistent.npz", "--manifest", "/nonexistent.jsonl"], 3),
    ],
)
def test_exit_codes(cli_root, tmp_path, argv, code):
    _, root = cli_root
    assert main([*argv, "--root", str(root), "--run-dir", str(tmp_path)]) == code
    assert not (tmp_path / "outputs.json").exists()


def test_degenerate_uncertainty_exit_code(cli_root, tmp_path):
    _, root = cli_root
    work = tmp_path / "data"
    shutil.copytree(root, work)
    trials = [json.loads(l) for l in (work / "trials.jsonl").read_text().splitlines()]
    (work / "trials.jsonl").write_text("".join(json.dumps({**t, "opacity": 0.3}) + "\n" for t in trials))
    code = main(["preprocess", "--root", str(work), "--set", "uncertainty_source=opacity",
                 "--run-dir", str(tmp_path / "r")])
    assert code == 4


def test_train_writes_runs(cli_runs):
    base, _ = cli_runs
    records = load_records(base / "r-train0.5")
    assert [r.seed for r in records] == [0, 1] and records[0].model == "1-FAX(lam=0.5)"
    paths = {f["path"] for f in outputs(base / "r-train0.5")["files"]}
    assert {"seed0/metrics.json", "seed1/run_record.json", "seed0/checkpoint.npz"} <= paths


def test_evaluate_command(cli_runs, tmp_path):
    base, root = cli_runs
    run = base / "r-train0" / "seed0"
    code = main(["evaluate", "--root", str(root), "--checkpoint", str(run / "checkpoint.npz"),
                 "--manifest", str(run / "splits" / "test.jsonl"), "--run-dir", str(tmp_path)])
    assert code == 0
    metrics = json.loads((tmp_path / "metrics.json").read_text())
    assert metrics == load_records(run / "run_record.json")[0].metrics


def test_compare_command(cli_runs, tmp_path):
    base, _ = cli_runs
    code = main(["compare", "--model", f"bce={base / 'r-train0'}", "--model", f"fax={base / 'r-train0.5'}",
                 "--run-dir", str(tmp_path)])
    assert code == 0
    rows = read_tsv(tmp_path / "comparison.tsv")
    assert [r["metric"] for r in rows] == ["total", "high"]
    assert list(rows[0]) == ["model_a", "model_b", "metric", "n_a", "n_b", "u", "p_value", "reject"]
    assert main(["compare", "--model", str(base / "r-train0"), "--run-dir", str(tmp_path / "x")]) == 2


def test_sweep_command(cli_root, tmp_path, capsys):
    _, root = cli_root
    code = main(["sweep", "--root", str(root), "--grid", "0,1", "--seeds", "0", *TINY, "--run-dir", str(tmp_path)])
    assert code == 0
    assert (tmp_path / "lam0" / "seed0" / "metrics.json").exists()
    assert (tmp_path / "lam1" / "seed0" / "metrics.json").exists()
    assert len(read_tsv(tmp_path / "sweep.tsv")) == 2


def test_report_command(cli_runs, tmp_path):
    base, _ = cli_runs
    code = main(["report", "--runs", str(base / "r-train0"), "--runs", str(base / "r-train0.5"),
                 "--run-dir", str(tmp_path)])
    assert code == 0
    names = {f["path"] for f in outputs(tmp_path)["files"]}
    assert {"report.md", "accuracy.tsv", "similarity.tsv", "accuracy_boxplot.png",
            "similarity_vs_layer.png", "attention_grid.png"} <= names


def test_report_without_runs(tmp_path):
    assert main(["report", "--run-dir", str(tmp_path)]) == 0
    assert NO_RUNS_BANNER in (tmp_path / "report.md").read_text()


def test_report_data_matches_records(cli_runs, tmp_path):
    base, _ = cli_runs
    records = load_records(base / "r-train0.5")
    render_report(records, tmp_path)
    accuracy, similarity = read_report_data(tmp_path)
    assert accuracy == accuracy_rows(records)
    assert len(similarity) == 2 and {r["layer"] for r in similarity} == {1}
    text = (tmp_path / "report.md").read_text()
    assert "1-FAX(lam=0.5)" in text and NO_RUNS_BANNER not in text
