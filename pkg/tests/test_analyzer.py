"""Tests for FLOPs accounting and latency breakdowns."""
from __future__ import annotations

import csv
import json

import pytest

from refusion_desk.analyzer import (
    FLOPS_CSV_COLUMNS,
    FlopsReport,
    InferencePipeline,
    count_encoder_flops,
    flops_encoder,
    flops_rc,
    flops_rf,
    flops_rows,
    fusion_overhead,
    measure_latency,
    plot_data,
    write_flops_csv,
    write_json,
)
from refusion_desk.exceptions import ParameterError
from refusion_desk.fusion import FusionScheme
from refusion_desk.model import AugmentationMode, EncoderModel, ModelConfig
from refusion_desk.retriever import Metric, QueryMode
from refusion_desk.task import DataConfig, build_task_store, generate_task, make_retriever

from .conftest import tiny_model_config

# prompt and retrieval lengths of the default synthetic task
PROMPT_LEN = DataConfig().prompt_len
RETRIEVAL_LEN = DataConfig().body_len
DEFAULT = ModelConfig()
DEFAULT_SITES = DEFAULT.num_layers * len(DEFAULT.fusion_roles)


class TestAnalyticFlops:
    """Closed-form counts against the instrumented forward pass."""

    @pytest.mark.parametrize(
        "config",
        [
            tiny_model_config(AugmentationMode.NONE),
            tiny_model_config(AugmentationMode.NONE, num_layers=2, hidden=12, heads=3, ffn_mult=3),
            ModelConfig(),
        ],
        ids=["tiny", "odd-widths", "default"],
    )
    @pytest.mark.parametrize("seq_len", [2, 7, 24])
    def test_matches_instrumented_counter(self, config: ModelConfig, seq_len: int):
        analytic = flops_encoder(config, seq_len).total
        counted = count_encoder_flops(EncoderModel(config), seq_len)
        assert abs(analytic - counted) <= 0.02 * counted
        assert analytic == counted

    def test_components_sum_to_total(self):
        report = flops_encoder(DEFAULT, 10)
        assert sum(report.components().values()) == report.total
        assert report.to_dict()["total"] == report.total
        assert "multiply_add" in report.to_dict()["cost_table"]

    def test_seq_len_range(self):
        with pytest.raises(ParameterError):
            flops_encoder(DEFAULT, 0)
        with pytest.raises(ParameterError):
            flops_encoder(DEFAULT, DEFAULT.max_len + 1)

    def test_counter_needs_plain_model(self):
        with pytest.raises(ParameterError):
            count_encoder_flops(EncoderModel(tiny_model_config()), 5)


class TestConcatVersusFusion:
    """Growth of concatenation cost against the flat fusion cost."""

    def test_k_zero(self):
        plain = flops_encoder(DEFAULT, PROMPT_LEN).total
        assert flops_rc(DEFAULT, PROMPT_LEN, 0, RETRIEVAL_LEN).total == plain
        assert flops_rf(DEFAULT, PROMPT_LEN, 0, DEFAULT_SITES).total == plain
        assert flops_rf(DEFAULT, PROMPT_LEN, 8, 0).total == plain

    def test_rc_clamps_and_plateaus(self):
        totals = [flops_rc(DEFAULT, PROMPT_LEN, k, RETRIEVAL_LEN) for k in range(0, 21)]
        assert all(a.total <= b.total for a, b in zip(totals, totals[1:]))
        clamped = [report for report in totals if report.clamped]
        assert clamped
        assert {report.seq_len for report in clamped} == {DEFAULT.max_len}
        assert len({report.total for report in clamped}) == 1
        assert clamped[0].total == flops_encoder(DEFAULT, DEFAULT.max_len).total

    def test_rf_only_overhead_changes(self):
        one = flops_rf(DEFAULT, PROMPT_LEN, 1, DEFAULT_SITES)
        sixteen = flops_rf(DEFAULT, PROMPT_LEN, 16, DEFAULT_SITES)
        for name in FlopsReport.COMPONENTS:
            if name != "fusion_overhead":
                assert getattr(one, name) == getattr(sixteen, name)
        assert sixteen.fusion_overhead > one.fusion_overhead

    @pytest.mark.parametrize("scheme", [FusionScheme.RERANKER, FusionScheme.ORDERED_MASK])
    def test_overhead_linear_in_k(self, scheme: FusionScheme):
        assert fusion_overhead(DEFAULT, 8, scheme) == 2 * fusion_overhead(DEFAULT, 4, scheme)
        assert fusion_overhead(DEFAULT, 8, FusionScheme.NO_FUSION) == 0

    def test_overhead_is_small(self):
        report = flops_rf(DEFAULT, PROMPT_LEN, 16, DEFAULT_SITES)
        assert report.fusion_overhead < 0.01 * (report.total - report.fusion_overhead)

    def test_growth_ratios(self):
        """Concatenation grows at least 5x from k=1 to k=16; fusion stays within 5%."""
        print("\n\n=== Testing FLOPs growth ===")

        def rc_total(k: int) -> int:
            return flops_rc(DEFAULT, PROMPT_LEN, k, RETRIEVAL_LEN).total

        def rf_total(k: int) -> int:
            return flops_rf(DEFAULT, PROMPT_LEN, k, DEFAULT_SITES).total

        rc, rf = rc_total(16) / rc_total(1), rf_total(16) / rf_total(1)
        print(f"  rc ratio {rc:.2f}, rf ratio {rf:.4f}")
        assert rc >= 5.0
        assert rf <= 1.05
        print("[OK] growth ratios hold")


class TestEmitters:
    """CSV and plot-data files."""

    def test_rows_and_files(self, tmp_path):
        accuracy = {("Concat", 4): 0.5, ("Fusion", 4): 0.75}
        rows = flops_rows(DEFAULT, [0, 1, 4, 16], PROMPT_LEN, RETRIEVAL_LEN, DEFAULT_SITES, accuracy)
        assert rows[0]["rc_flops"] == rows[0]["rf_flops"]
        assert rows[-1]["rc_seq_len"] == DEFAULT.max_len
        assert rows[2]["rf_accuracy"] == 0.75
        assert rows[1]["rc_accuracy"] == ""

        write_flops_csv(rows, tmp_path / "flops.csv")
        with (tmp_path / "flops.csv").open(newline="") as handle:
            reader = csv.DictReader(handle)
            assert tuple(reader.fieldnames) == FLOPS_CSV_COLUMNS
            assert [int(row["k"]) for row in reader] == [0, 1, 4, 16]

        data = plot_data(rows)
        assert data["curves"]["rc"]["k"] == [0, 1, 4, 16]
        assert data["ratio_max_k_over_k1"]["rc"] >= 5.0
        assert data["ratio_max_k_over_k1"]["rf"] <= 1.05
        write_json(data, tmp_path / "plot.json")
        assert json.loads((tmp_path / "plot.json").read_text()) == json.loads(json.dumps(data))


class TestLatency:
    """Median per-phase timings."""

    @pytest.fixture
    def pipeline(self) -> InferencePipeline:
        data = DataConfig(num_classes=2, shots=4, val_shots=2, test_per_class=2, body_len=4, cluster_size=3)
        task, splits = generate_task(data, vocab_size=16, hidden=8, seed=0)
        store = build_task_store(task, splits)
        retriever = make_retriever(task, splits, store, 2, Metric.L2, QueryMode.INPUT_TEXT)
        model = EncoderModel(tiny_model_config(candidates=(FusionScheme.RERANKER,), num_labels=2, num_layers=2))
        return InferencePipeline(model, retriever, splits.test)

    def test_no_retrieval_has_zero_retrieve_time(self, pipeline: InferencePipeline):
        breakdown = measure_latency(pipeline, AugmentationMode.NONE, samples=5, warmup=1)
        assert breakdown.retrieve_ms == 0.0
        assert breakdown.samples == 5
        assert breakdown.total_ms >= breakdown.forward_ms

    def test_hidden_state_retrieves_per_site(self, pipeline: InferencePipeline):
        """Per-site searches cost at least as much retrieval time as one text search."""
        text = measure_latency(pipeline, AugmentationMode.FUSION, QueryMode.INPUT_TEXT)
        hidden = measure_latency(pipeline, AugmentationMode.FUSION, QueryMode.HIDDEN_STATE)
        assert text.samples == hidden.samples == 30
        assert hidden.retrieve_ms + hidden.slack_ms >= text.retrieve_ms
        assert hidden.to_dict()["query_mode"] == "HiddenState"

    def test_rejects_bad_input(self, pipeline: InferencePipeline):
        with pytest.raises(ParameterError):
            measure_latency(pipeline, AugmentationMode.NONE, samples=0)
        with pytest.raises(ParameterError):
            InferencePipeline(pipeline.model, None, [])
