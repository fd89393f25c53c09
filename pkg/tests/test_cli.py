"""Tests for the refusion command line."""
from __future__ import annotations

from pathlib import Path

import pytest

from refusion_desk.cli import build_parser, main, overrides_from_args
from refusion_desk.config import ExperimentConfig, load
from refusion_desk.const import EXIT_CONFIG_ERROR, EXIT_OK, EXIT_PARTIAL_FAILURE

from .conftest import fast_experiment


@pytest.fixture
def config_file(tmp_path: Path) -> Path:
    path = tmp_path / "fast.conf"
    fast_experiment(tmp_path).save(path)
    return path


def _overrides(*argv: str) -> dict[str, str]:
    args = build_parser().parse_args(["train", *argv])
    return overrides_from_args(args, ExperimentConfig())


class TestOverrides:
    """Flags map onto dotted config keys."""

    def test_mode_selects_variant(self):
        assert _overrides("--mode", "None") == {"experiment.variant": "baseline"}
        assert _overrides("--mode", "Concat") == {"experiment.variant": "concat"}
        assert _overrides("--mode", "Fusion") == {}

    def test_variant_wins_over_mode(self):
        assert _overrides("--mode", "Fusion", "--variant", "reranker")["experiment.variant"] == "reranker"

    def test_common_flags(self):
        overrides = _overrides("--seed", "3", "--seed", "4", "--k", "6", "--out", "x", "--set", "train.steps=9")
        assert overrides == {
            "experiment.seeds": "3,4",
            "retrieval.k": "6",
            "experiment.output_dir": "x",
            "train.steps": "9",
        }


class TestExitCodes:
    """0 on success, 1 on configuration errors, 2 on seed failures."""

    def test_train(self, config_file: Path, tmp_path: Path, capsys):
        print("\n\n=== Testing train verb ===")
        out = tmp_path / "train-out"
        code = main(["train", "--config", str(config_file), "--seed", "5", "--out", str(out)])
        assert code == EXIT_OK
        assert (out / "results.json").exists()
        assert load(out / "config.conf").experiment.seeds == (5,)
        assert "seed 5: ok" in capsys.readouterr().out
        print("[OK] train exited cleanly")

    def test_gen_task_and_build_store(self, tmp_path: Path):
        out = tmp_path / "gen"
        assert main(["gen-task", "--seed", "3", "--out", str(out)]) == EXIT_OK
        assert (out / "seed-3" / "task.json").exists()
        assert main(["build-store", "--seed", "3", "--out", str(out)]) == EXIT_OK
        assert (out / "seed-3" / "store.rfvs").exists()

    def test_flops_report(self, tmp_path: Path, capsys):
        code = main(["flops-report", "--out", str(tmp_path), "--k-values", "0,1,16"])
        assert code == EXIT_OK
        assert (tmp_path / "flops.csv").exists()
        assert capsys.readouterr().out.count("k=") == 3

    def test_flops_report_bad_k(self, tmp_path: Path):
        assert main(["flops-report", "--out", str(tmp_path), "--k-values", "one"]) == EXIT_CONFIG_ERROR

    def test_missing_config_file(self, tmp_path: Path):
        assert main(["train", "--config", str(tmp_path / "absent.conf")]) == EXIT_CONFIG_ERROR

    @pytest.mark.parametrize("item", ["model.hiden=8", "model.hidden", "train.steps=many"])
    def test_bad_set(self, config_file: Path, item: str):
        assert main(["train", "--config", str(config_file), "--set", item]) == EXIT_CONFIG_ERROR

    def test_eval_without_checkpoint(self, config_file: Path, tmp_path: Path, capsys):
        code = main(["eval", "--config", str(config_file), "--out", str(tmp_path / "empty")])
        assert code == EXIT_PARTIAL_FAILURE
        assert "FAILED" in capsys.readouterr().out

    def test_search_on_fixed_variant(self, config_file: Path):
        assert main(["search", "--config", str(config_file), "--variant", "baseline"]) == EXIT_PARTIAL_FAILURE

    def test_sweep(self, config_file: Path, tmp_path: Path, capsys):
        out = tmp_path / "sweep"
        argv = ["sweep", "--config", str(config_file), "--seed", "5", "--out", str(out)]
        argv += ["--axis", "k", "--values", "1,2"]
        assert main(argv) == EXIT_OK
        assert (out / "sweep.csv").exists()
        printed = capsys.readouterr().out
        assert "k=1:" in printed
        assert "k=2:" in printed

    def test_sweep_by_variant_then_report(self, config_file: Path, tmp_path: Path, capsys):
        print("\n\n=== Testing variant-split sweep and report ===")
        out = tmp_path / "by-variant"
        argv = ["sweep", "--config", str(config_file), "--seed", "5", "--out", str(out)]
        argv += ["--axis", "k", "--values", "1", "--variants", "concat,rf-add"]
        assert main(argv) == EXIT_OK
        printed = capsys.readouterr().out
        assert "concat k=1:" in printed
        assert "rf-add k=1:" in printed
        argv = ["flops-report", "--config", str(config_file), "--out", str(out), "--k-values", "1,2"]
        assert main(argv) == EXIT_OK
        lines = capsys.readouterr().out.splitlines()
        assert "accuracy rc=" in lines[0]
        assert "rf=-" not in lines[0]
        assert "accuracy" not in lines[1]
        print("[OK] both accuracy columns reported")

    def test_unknown_verb(self):
        with pytest.raises(SystemExit):
            main(["deploy"])
