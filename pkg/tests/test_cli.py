"""CLI tests: subcommand round trip, exit codes, flag plumbing."""

import json

import pytest
import torch

from tubegrounder import cli
from tubegrounder.errors import NumericError
from tubegrounder.pipeline import RunConfig, load_checkpoint
from tubegrounder.synthdata import read_dataset

SMALL_MODEL = {
    "dim": 12,
    "n_layers": 2,
    "n_heads": 2,
    "grid": [8, 8],
    "feature_dim": 32,
    "bridge_queries": 3,
    "encoder_layers": 2,
    "decoder_layers": 1,
    "top_k": 2,
    "dn_groups": 2,
}


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "ds"
    rc = cli.main(
        [
            "gen",
            "--out",
            str(path),
            "--count",
            "2",
            "--seed",
            "9",
            "--duration-min",
            "5.0",
            "--duration-max",
            "5.0",
        ]
    )
    assert rc == 0
    return path


def write_config(tmp_path, **overrides):
    config = {"model": SMALL_MODEL, "n_positive": 2, "n_negative": 1, "steps": 2}
    config.update(overrides)
    path = tmp_path / "run.json"
    path.write_text(json.dumps(config))
    return path


def test_gen_writes_a_loadable_dataset(dataset):
    assert (dataset / "index.jsonl").exists()
    assert (dataset / "features.bin").exists()
    samples = read_dataset(dataset)
    assert len(samples) == 2
    assert all(s.duration == 5.0 for s in samples)


def test_gen_rejects_bad_count(tmp_path, capsys):
    rc = cli.main(["gen", "--out", str(tmp_path / "x"), "--count", "0", "--seed", "1"])
    assert rc == 2
    assert "data error" in capsys.readouterr().err


def test_train_eval_report_round_trip(dataset, tmp_path):
    config = write_config(tmp_path)
    run_dir = tmp_path / "run"
    rc = cli.main(
        [
            "train",
            "--config",
            str(config),
            "--dataset",
            str(dataset),
            "--out",
            str(run_dir),
            "--seed",
            "3",
        ]
    )
    assert rc == 0
    assert (run_dir / "checkpoint.pt").exists()
    history = [
        json.loads(line)
        for line in (run_dir / "history.jsonl").read_text().splitlines()
    ]
    assert len(history) == 2
    saved = RunConfig.from_json(run_dir / "run_config.json")
    assert saved.steps == 2 and saved.seed == 3
    run_log = json.loads((run_dir / "run_log.json").read_text())
    assert run_log["n_samples"] == 2
    assert "batch_size=1" in run_log["deviations"]

    eval_dir = tmp_path / "eval"
    rc = cli.main(
        [
            "eval",
            "--checkpoint",
            str(run_dir / "checkpoint.pt"),
            "--dataset",
            str(dataset),
            "--out",
            str(eval_dir),
            "--mode",
            "predicted",
        ]
    )
    assert rc == 0
    report = json.loads((eval_dir / "report.json").read_text())
    assert report["mode"] == "predicted"
    assert report["n_samples"] == 2
    assert isinstance(report["m_tiou"], float)
    assert len(report["tiou_bins"]) == 4
    assert (eval_dir / "report.txt").exists()
    assert (eval_dir / "tubes.jsonl").exists()

    report_dir = tmp_path / "figs"
    rc = cli.main(
        [
            "report",
            "--eval-json",
            str(eval_dir / "report.json"),
            "--dataset",
            str(dataset),
            "--out",
            str(report_dir),
        ]
    )
    assert rc == 0
    for name in ("bins.txt", "bins.png", "noise_study.txt", "noise_study.png"):
        assert (report_dir / name).exists(), name


def test_oracle_eval_omits_temporal_metrics(dataset, tmp_path):
    config = write_config(tmp_path)
    run_dir = tmp_path / "run"
    assert (
        cli.main(
            [
                "train",
                "--config",
                str(config),
                "--dataset",
                str(dataset),
                "--out",
                str(run_dir),
                "--seed",
                "3",
            ]
        )
        == 0
    )
    eval_dir = tmp_path / "eval_oracle"
    rc = cli.main(
        [
            "eval",
            "--checkpoint",
            str(run_dir / "checkpoint.pt"),
            "--dataset",
            str(dataset),
            "--out",
            str(eval_dir),
            "--mode",
            "oracle",
        ]
    )
    assert rc == 0
    report = json.loads((eval_dir / "report.json").read_text())
    assert report["m_tiou"] is None
    assert "tiou_bins" not in report
    table = (eval_dir / "report.txt").read_text()
    assert "---" in table


def test_cli_training_is_reproducible(dataset, tmp_path):
    config = write_config(tmp_path)
    dirs = [tmp_path / "a", tmp_path / "b"]
    for out in dirs:
        rc = cli.main(
            [
                "train",
                "--config",
                str(config),
                "--dataset",
                str(dataset),
                "--out",
                str(out),
                "--seed",
                "11",
            ]
        )
        assert rc == 0
    model_a, _ = load_checkpoint(dirs[0] / "checkpoint.pt")
    model_b, _ = load_checkpoint(dirs[1] / "checkpoint.pt")
    for (name, a), (_, b) in zip(
        model_a.state_dict().items(), model_b.state_dict().items()
    ):
        assert torch.equal(a, b), name
    history_a = (dirs[0] / "history.jsonl").read_text()
    history_b = (dirs[1] / "history.jsonl").read_text()
    assert history_a == history_b


def test_ablation_flags_reach_the_run_config(dataset, tmp_path):
    config = write_config(tmp_path)
    run_dir = tmp_path / "ablated"
    rc = cli.main(
        [
            "train",
            "--config",
            str(config),
            "--dataset",
            str(dataset),
            "--out",
            str(run_dir),
            "--seed",
            "2",
            "--eta-mode",
            "off",
            "--no-stsb",
            "--single-layer-select",
            "--pn-ratio",
            "10:0",
            "--lambda-token",
            "1.0",
            "--lambda-spatial",
            "1.0",
            "--steps",
            "1",
        ]
    )
    assert rc == 0
    saved = RunConfig.from_json(run_dir / "run_config.json")
    assert saved.eta_mode == "off"
    assert saved.no_stsb and saved.single_layer_select
    assert (saved.n_positive, saved.n_negative) == (10, 0)
    assert saved.weights.token == saved.weights.spatial == 1.0
    assert saved.steps == 1


def test_missing_seed_is_a_usage_error(dataset, tmp_path):
    with pytest.raises(SystemExit) as exc:
        cli.main(["train", "--dataset", str(dataset), "--out", str(tmp_path / "x")])
    assert exc.value.code == 1


def test_unknown_subcommand_is_a_usage_error():
    with pytest.raises(SystemExit) as exc:
        cli.main(["polish"])
    assert exc.value.code == 1


def test_missing_paths_are_data_errors(dataset, tmp_path, capsys):
    rc = cli.main(
        [
            "eval",
            "--checkpoint",
            str(tmp_path / "nope.pt"),
            "--dataset",
            str(dataset),
            "--out",
            str(tmp_path / "e"),
        ]
    )
    assert rc == 2
    rc = cli.main(
        ["train", "--dataset", str(tmp_path / "missing"), "--out", str(tmp_path / "t"), "--seed", "1"]
    )
    assert rc == 2
    rc = cli.main(["report", "--out", str(tmp_path / "r")])
    assert rc == 2


def test_numeric_failure_maps_to_exit_3(dataset, tmp_path, monkeypatch):
    def exploding_train(config, samples):
        raise NumericError("non-finite loss at step 0")

    monkeypatch.setattr(cli, "train", exploding_train)
    rc = cli.main(
        [
            "train",
            "--dataset",
            str(dataset),
            "--out",
            str(tmp_path / "boom"),
            "--seed",
            "4",
        ]
    )
    assert rc == 3
