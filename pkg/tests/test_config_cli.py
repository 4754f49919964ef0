"""Configuration parsing and the command-line surface."""

import csv
import json
import os

import numpy as np
import pytest

from tokenprune.checkpoint import load_checkpoint
from tokenprune.cli import main
from tokenprune.config import (
    build_configs,
    parse_kv_text,
    resolved_config_text,
)
from tokenprune.errors import UsageError
from tokenprune.synthetic import load_dataset


class TestConfigText:
    def test_parse_rejects_unknown_keys(self):
        with pytest.raises(UsageError):
            build_configs({"mystery": "1"})

    def test_parse_rejects_duplicates(self):
        with pytest.raises(UsageError):
            parse_kv_text("epochs=1\nepochs=2\n")

    def test_parse_rejects_bare_lines(self):
        with pytest.raises(UsageError):
            parse_kv_text("not a pair\n")

    def test_comments_and_blanks_ignored(self):
        kv = parse_kv_text("# comment\n\nepochs=3\n")
        assert kv == {"epochs": "3"}

    def test_round_trip(self):
        text = resolved_config_text(
            *build_configs({"num_layers": "4", "epochs": "2", "penalty": "0.01"})[:2]
        )
        kv = parse_kv_text(text)
        model_cfg, train_cfg, _ = build_configs(kv)
        assert model_cfg.num_layers == 4
        assert train_cfg.epochs == 2
        assert train_cfg.penalty == 0.01


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    rc = main(
        [
            "generate",
            "--task",
            "keyword",
            "--out",
            str(out),
            "--n-train",
            "24",
            "--n-dev",
            "12",
            "--seq-len",
            "12",
            "--seed",
            "7",
        ]
    )
    assert rc == 0
    return out


@pytest.fixture(scope="module")
def trained_dir(tmp_path_factory, dataset_dir):
    out = tmp_path_factory.mktemp("run")
    config = out / "exp.txt"
    config.write_text(
        "num_layers=2\nhidden=8\nheads=2\nffn_inner=12\nmax_len=16\n"
        "reduction_positions=1\nepochs=1\nbatch_size=8\n"
    )
    rc = main(
        [
            "train",
            "--train",
            str(dataset_dir / "train.jsonl"),
            "--dev",
            str(dataset_dir / "dev.jsonl"),
            "--out",
            str(out),
            "--config",
            str(config),
            "--lambda",
            "0.005",
            "--seed",
            "3",
        ]
    )
    assert rc == 0
    return out


class TestGenerate:
    def test_deterministic_files(self, tmp_path):
        args = [
            "generate",
            "--task",
            "keyword",
            "--out",
            None,
            "--n-train",
            "10",
            "--n-dev",
            "5",
            "--seq-len",
            "10",
            "--seed",
            "9",
        ]
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            args[4] = str(out)
            assert main(list(args)) == 0
        assert (a / "train.jsonl").read_bytes() == (b / "train.jsonl").read_bytes()
        assert (a / "dev.jsonl").read_bytes() == (b / "dev.jsonl").read_bytes()

    def test_round_trips_through_loader(self, dataset_dir):
        examples, meta = load_dataset(dataset_dir / "train.jsonl")
        assert len(examples) == 24
        assert meta["task"] == "keyword"

    def test_missing_required_flag_is_usage_error(self, capsys):
        assert main(["generate", "--task", "keyword"]) == 1
        assert "usage error" in capsys.readouterr().err

    def test_unknown_command_is_usage_error(self):
        assert main(["frobnicate"]) == 1

    def test_span_generation(self, tmp_path):
        out = tmp_path / "span"
        rc = main(
            [
                "generate", "--task", "span", "--out", str(out),
                "--n-train", "6", "--n-dev", "3", "--seq-len", "16", "--seed", "1",
            ]
        )
        assert rc == 0
        examples, _ = load_dataset(out / "train.jsonl")
        assert isinstance(examples[0].label, tuple)

    def test_out_root_env_redirects_relative_paths(self, tmp_path, monkeypatch):
        monkeypatch.setenv("TOKENPRUNE_OUT", str(tmp_path))
        rc = main(
            [
                "generate", "--task", "keyword", "--out", "nested/run",
                "--n-train", "4", "--n-dev", "2", "--seq-len", "10", "--seed", "0",
            ]
        )
        assert rc == 0
        assert (tmp_path / "nested" / "run" / "train.jsonl").exists()


class TestTrain:
    def test_outputs_exist(self, trained_dir):
        for name in (
            "model.tprn",
            "model.stage1.tprn",
            "model.stage2.tprn",
            "model.stage3.tprn",
            "history.jsonl",
            "config.txt",
        ):
            assert (trained_dir / name).exists(), name

    def test_history_is_json_lines(self, trained_dir):
        rows = [json.loads(l) for l in (trained_dir / "history.jsonl").read_text().splitlines()]
        assert [r["stage"] for r in rows] == [1, 2, 3]

    def test_resolved_config_parses_back(self, trained_dir):
        kv = parse_kv_text((trained_dir / "config.txt").read_text())
        model_cfg, train_cfg, paths = build_configs(kv)
        assert train_cfg.penalty == 0.005
        assert model_cfg.num_layers == 2
        assert paths["out_dir"]

    def test_stage2_rerun_keeps_non_policy_hash(self, trained_dir, dataset_dir, tmp_path):
        out = tmp_path / "stage2"
        rc = main(
            [
                "train",
                "--train", str(dataset_dir / "train.jsonl"),
                "--dev", str(dataset_dir / "dev.jsonl"),
                "--out", str(out),
                "--stage", "2",
                "--init-from", str(trained_dir / "model.stage1.tprn"),
                "--epochs", "1",
                "--batch-size", "8",
                "--lambda", "0.005",
                "--seed", "3",
            ]
        )
        assert rc == 0
        stage1 = load_checkpoint(trained_dir / "model.stage1.tprn")
        stage2 = load_checkpoint(out / "model.stage2.tprn")
        assert stage2.digest(include_policy=False) == stage1.digest(include_policy=False)
        assert stage2.digest(only_policy=True) != stage1.digest(only_policy=True)

    def test_resume_reuses_stage_checkpoints_identically(self, trained_dir, dataset_dir, tmp_path):
        out = tmp_path / "resume"
        out.mkdir()
        # seed the output directory with the finished stage-1/2 checkpoints
        for name in ("model.stage1.tprn", "model.stage2.tprn"):
            (out / name).write_bytes((trained_dir / name).read_bytes())
        config = trained_dir / "config.txt"
        rc = main(
            [
                "train",
                "--train", str(dataset_dir / "train.jsonl"),
                "--dev", str(dataset_dir / "dev.jsonl"),
                "--out", str(out),
                "--config", str(config),
                "--resume",
                "--seed", "3",
            ]
        )
        assert rc == 0
        a = load_checkpoint(trained_dir / "model.tprn")
        b = load_checkpoint(out / "model.tprn")
        assert a.digest() == b.digest()

    def test_stage_without_prior_checkpoint_is_usage_error(self, dataset_dir, tmp_path):
        rc = main(
            [
                "train",
                "--train", str(dataset_dir / "train.jsonl"),
                "--dev", str(dataset_dir / "dev.jsonl"),
                "--out", str(tmp_path / "nothing"),
                "--stage", "3",
            ]
        )
        assert rc == 1

    def test_missing_dataset_is_data_error(self, tmp_path):
        rc = main(
            [
                "train",
                "--train", str(tmp_path / "none.jsonl"),
                "--dev", str(tmp_path / "none.jsonl"),
                "--out", str(tmp_path / "out"),
            ]
        )
        assert rc == 2


class TestEval:
    def test_full_mode_reports_unit_speedup(self, trained_dir, dataset_dir, tmp_path, capsys):
        out = tmp_path / "eval_full"
        rc = main(
            [
                "eval",
                "--checkpoint", str(trained_dir / "model.tprn"),
                "--data", str(dataset_dir / "dev.jsonl"),
                "--out", str(out),
                "--mode", "full",
            ]
        )
        assert rc == 0
        printed = capsys.readouterr().out
        assert "mean_speedup=1.0000" in printed
        assert (out / "flops.csv").exists()
        assert (out / "eval.png").exists()

    def test_csv_rows_match_totals(self, trained_dir, dataset_dir, tmp_path, capsys):
        out = tmp_path / "eval_greedy"
        rc = main(
            [
                "eval",
                "--checkpoint", str(trained_dir / "model.tprn"),
                "--data", str(dataset_dir / "dev.jsonl"),
                "--out", str(out),
                "--mode", "greedy",
            ]
        )
        assert rc == 0
        printed = capsys.readouterr().out
        reported = float(printed.split("mean_speedup=")[1].split()[0])
        with open(out / "flops.csv") as fh:
            rows = list(csv.DictReader(fh))
        mean_speedup = np.mean([float(r["speedup"]) for r in rows])
        assert reported == pytest.approx(mean_speedup, abs=5e-5)

    def test_greedy_metric_matches_final_history_row(self, trained_dir, dataset_dir, tmp_path, capsys):
        rows = [json.loads(l) for l in (trained_dir / "history.jsonl").read_text().splitlines()]
        rc = main(
            [
                "eval",
                "--checkpoint", str(trained_dir / "model.tprn"),
                "--data", str(dataset_dir / "dev.jsonl"),
                "--out", str(tmp_path / "eval_hist"),
                "--mode", "greedy",
            ]
        )
        assert rc == 0
        printed = capsys.readouterr().out
        metric = float(printed.split("metric=")[1].split()[0])
        assert metric == pytest.approx(rows[-1]["dev_metric"], abs=5e-5)

    def test_missing_checkpoint_is_data_error(self, dataset_dir, tmp_path):
        rc = main(
            [
                "eval",
                "--checkpoint", str(tmp_path / "nope.tprn"),
                "--data", str(dataset_dir / "dev.jsonl"),
                "--out", str(tmp_path / "out"),
            ]
        )
        assert rc == 2


class TestSweep:
    def test_lambda_mode_trains_and_writes_curve(self, dataset_dir, tmp_path):
        out = tmp_path / "lam"
        config = tmp_path / "sweep.cfg"
        config.write_text(
            "num_layers=2\nhidden=8\nheads=2\nffn_inner=12\nmax_len=16\n"
            "reduction_positions=1\nepochs=1\nbatch_size=8\n"
        )
        rc = main(
            [
                "sweep",
                "--train", str(dataset_dir / "train.jsonl"),
                "--dev", str(dataset_dir / "dev.jsonl"),
                "--out", str(out),
                "--config", str(config),
                "--lambdas", "0,0.01",
                "--seeds", "5",
            ]
        )
        assert rc == 0
        with open(out / "sweep.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 2
        assert {r["lambda"] for r in rows} == {"0.0", "0.01"}
        assert (out / "tradeoff.png").exists()
        assert (out / "seed5" / "model.stage1.tprn").exists()
        run_dir = out / "lam0.01-seed5"
        assert (run_dir / "model.tprn").exists()
        assert (run_dir / "config.txt").exists()
        # the shared base model makes each run reproduce train + eval outputs
        stage1 = load_checkpoint(out / "seed5" / "model.stage1.tprn")
        final = load_checkpoint(run_dir / "model.tprn")
        assert final.digest(include_policy=False) != "" and stage1.config == final.config

    def test_strategy_mode_emits_curve_csv(self, trained_dir, dataset_dir, tmp_path):
        out = tmp_path / "curves"
        rc = main(
            [
                "sweep",
                "--mode", "strategy",
                "--checkpoint", str(trained_dir / "model.stage1.tprn"),
                "--data", str(dataset_dir / "dev.jsonl"),
                "--out", str(out),
                "--keep-ratios", "0.5,1.0",
            ]
        )
        assert rc == 0
        with open(out / "strategies.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert {r["strategy"] for r in rows} == {"random", "attention", "residual"}
        assert (out / "strategies.png").exists()

    def test_lambda_mode_needs_datasets(self, tmp_path):
        rc = main(["sweep", "--out", str(tmp_path / "s")])
        assert rc == 1


class TestCaseStudy:
    def test_tags_cover_every_token(self, trained_dir, dataset_dir, tmp_path, capsys):
        rc = main(
            [
                "case-study",
                "--checkpoint", str(trained_dir / "model.tprn"),
                "--data", str(dataset_dir / "dev.jsonl"),
                "--index", "0",
                "--json", str(tmp_path / "trace.json"),
            ]
        )
        assert rc == 0
        printed = capsys.readouterr().out
        examples, _ = load_dataset(dataset_dir / "dev.jsonl")
        assert printed.count("tok=") == examples[0].n
        trace = json.loads((tmp_path / "trace.json").read_text())
        assert len(trace["termination_layer"]) == examples[0].n

    def test_tag_counts_match_survivor_differences(self, trained_dir, dataset_dir, capsys):
        rc = main(
            [
                "case-study",
                "--checkpoint", str(trained_dir / "model.tprn"),
                "--data", str(dataset_dir / "dev.jsonl"),
                "--index", "1",
            ]
        )
        assert rc == 0
        printed = capsys.readouterr().out
        counts_line = [l for l in printed.splitlines() if l.startswith("tag counts:")][0]
        counts = dict(
            (int(part.split(":")[0]), int(part.split(":")[1]))
            for part in counts_line.replace("tag counts: ", "").split(", ")
        )
        examples, _ = load_dataset(dataset_dir / "dev.jsonl")
        assert sum(counts.values()) == examples[1].n

    def test_bad_index_is_data_error(self, trained_dir, dataset_dir):
        rc = main(
            [
                "case-study",
                "--checkpoint", str(trained_dir / "model.tprn"),
                "--data", str(dataset_dir / "dev.jsonl"),
                "--index", "999",
            ]
        )
        assert rc == 2
