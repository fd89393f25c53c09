"""Tests for the encoder model."""
from __future__ import annotations

import numpy as np
import pytest

from refusion_desk import autodiff as ad
from refusion_desk.autodiff import DiffArray, RngStream, Tape
from refusion_desk.const import DEFAULT_INIT_STD
from refusion_desk.exceptions import ConfigError, DimensionError, ModelError
from refusion_desk.fusion import FusionScheme
from refusion_desk.integrator import FusionSite, IntegratorModule, SiteRole
from refusion_desk.model import AugmentationMode, EncoderModel, Example, ModelConfig, build_concat_tokens
from refusion_desk.retriever import RetrievalContext

from .conftest import tiny_model_config

EXAMPLE = Example(0, (0, 7, 8, 9, 2, 1), 1)


def _hits(k: int = 2, dim: int = 8, seed: int = 3) -> np.ndarray:
    return np.random.default_rng(seed).normal(size=(k, dim))


class TestConfig:
    """Shape validation."""

    def test_heads_must_divide_hidden(self):
        with pytest.raises(ConfigError):
            tiny_model_config(hidden=10, heads=3)

    def test_labels_must_fit_vocabulary(self):
        with pytest.raises(ConfigError):
            tiny_model_config(vocab_size=5, num_labels=3)

    def test_fusion_layers_checked(self):
        with pytest.raises(ConfigError):
            tiny_model_config(fusion_layers=(1,))

    def test_sites_only_under_fusion(self):
        assert tiny_model_config(AugmentationMode.NONE).fusion_sites == ()
        assert tiny_model_config().fusion_sites == (FusionSite(0, SiteRole.KEY), FusionSite(0, SiteRole.VALUE))
        assert tiny_model_config().searched
        assert not tiny_model_config(candidates=(FusionScheme.RERANKER,)).searched


class TestForward:
    """Forward pass shapes and input checks."""

    def test_logit_shapes(self, fusion_config: ModelConfig):
        model = EncoderModel(fusion_config, seed=1)
        assert model.forward(EXAMPLE, _hits()).shape == (3,)
        batch = np.array([EXAMPLE.tokens, EXAMPLE.tokens])
        hits = np.stack([_hits(), _hits(seed=4)])
        assert model.forward_batch(batch, RetrievalContext.static(hits)).shape == (2, 3)

    def test_fusion_needs_hits(self, fusion_config: ModelConfig):
        model = EncoderModel(fusion_config, seed=1)
        with pytest.raises(ModelError):
            model.forward(EXAMPLE)

    def test_hits_batch_must_match(self, fusion_config: ModelConfig):
        model = EncoderModel(fusion_config, seed=1)
        batch = np.array([EXAMPLE.tokens, EXAMPLE.tokens])
        with pytest.raises(DimensionError):
            model.forward_batch(batch, RetrievalContext.static(_hits()[None]))

    @pytest.mark.parametrize(
        "tokens",
        [[[0, 7, 8, 2]], [[0, 1, 1, 2]], [[0, 1, 99, 2]], [[0] * 30 + [1]]],
        ids=["no-mask", "two-masks", "out-of-vocab", "too-long"],
    )
    def test_invalid_tokens(self, tokens):
        model = EncoderModel(tiny_model_config(AugmentationMode.NONE))
        with pytest.raises(ModelError):
            model.forward_batch(tokens)

    def test_example_needs_one_mask(self):
        with pytest.raises(ModelError):
            Example(0, (0, 7, 2), 0)
        assert EXAMPLE.mask_position == 5
        assert EXAMPLE.body == (7, 8, 9)

    def test_same_seed_same_logits(self, fusion_config: ModelConfig):
        first = EncoderModel(fusion_config, seed=5).forward(EXAMPLE, _hits()).values
        second = EncoderModel(fusion_config, seed=5).forward(EXAMPLE, _hits()).values
        assert first.tobytes() == second.tobytes()

    def test_zero_retrievals_match_plain_encoder(self):
        plain = EncoderModel(tiny_model_config(AugmentationMode.NONE), seed=2).forward(EXAMPLE).values
        fused = EncoderModel(tiny_model_config(), seed=2).forward(EXAMPLE, np.zeros((2, 8))).values
        np.testing.assert_allclose(fused, plain, atol=1e-12)

    def test_attention_capture(self):
        model = EncoderModel(tiny_model_config(AugmentationMode.NONE, num_layers=2))
        model.capture_attention = True
        model.forward(EXAMPLE)
        assert len(model.attention_maps) == 2
        assert model.attention_maps[0].shape == (1, 2, 6, 6)
        np.testing.assert_allclose(model.attention_maps[1].sum(axis=-1), 1.0)

    def test_predict_without_examples(self):
        model = EncoderModel(tiny_model_config(AugmentationMode.NONE))
        assert model.predict([]).shape == (0, 3)

    @pytest.mark.unit
    def test_full_model_gradients(self, fusion_config: ModelConfig):
        """Every weight and architecture logit of the one-layer model passes finite differences."""
        print("\n\n=== Testing full-model gradients ===")
        model = EncoderModel(fusion_config, seed=11)
        hits = _hits()

        def loss(tape: Tape | None) -> DiffArray:
            logits = model.forward(EXAMPLE, hits, tape, RngStream(5), noise_free=False)
            return ad.cross_entropy(logits, EXAMPLE.label)

        errors = ad.gradient_check_parameters(loss, model.weight_parameters() + model.arch_parameters())
        worst = max(errors, key=errors.get)
        assert errors[worst] < 1e-4, f"{worst}: {errors[worst]:.2e}"
        print(f"[OK] {len(errors)} parameters, worst {worst} at {errors[worst]:.2e}")


class TestLoss:
    """Cross-entropy of freshly initialised models."""

    @pytest.mark.unit
    def test_initial_loss_near_uniform(self):
        """With small init the four label logits start nearly equal, so the loss sits near ln 4."""
        print("\n\n=== Testing loss at initialisation ===")
        batch = [Example(i, (0, 7 + i, 8, 9 + i, 2, 1), i) for i in range(4)]
        losses = []
        for seed in range(20):
            model = EncoderModel(tiny_model_config(num_labels=4, init_std=DEFAULT_INIT_STD), seed=seed)
            hits = _hits(seed=seed)
            per_example = [ad.cross_entropy(model.forward(ex, hits), ex.label).item() for ex in batch]
            losses.append(float(np.mean(per_example)))
        assert all(abs(loss - np.log(4.0)) <= 0.5 for loss in losses), losses
        print(f"[OK] losses in [{min(losses):.4f}, {max(losses):.4f}], ln 4 = {np.log(4.0):.4f}")

    def test_single_label_loss_is_zero(self):
        model = EncoderModel(tiny_model_config(num_labels=1), seed=3)
        example = Example(0, (0, 7, 8, 9, 2, 1), 0)
        logits = model.forward(example, _hits())
        assert logits.shape == (1,)
        assert ad.cross_entropy(logits, 0).item() == 0.0


class TestConcat:
    """Retrieval-concatenation token streams."""

    def test_layout(self):
        tokens = build_concat_tokens((0, 7, 1), [(8, 9), (10, 11)], max_len=24)
        assert tokens == (0, 8, 9, 2, 10, 11, 2, 7, 1)

    def test_truncates_retrieval_block(self):
        assert build_concat_tokens((0, 7, 1), [(8, 9), (10, 11)], max_len=6) == (0, 8, 9, 2, 7, 1)

    def test_prompt_too_long(self):
        with pytest.raises(ModelError):
            build_concat_tokens((0, 7, 8, 1), [(9,)], max_len=3)

    def test_no_documents_keeps_prompt(self):
        assert build_concat_tokens((0, 7, 1), [], max_len=24) == (0, 7, 1)

    def test_k_zero_equals_plain_forward(self):
        model = EncoderModel(tiny_model_config(AugmentationMode.CONCAT), seed=4)
        plain = model.forward(EXAMPLE).values
        assert model.forward_concat(EXAMPLE, [(8, 9)], k=0).values.tobytes() == plain.tobytes()
        assert model.forward_concat(EXAMPLE, [(8, 9)], k=1).shape == (3,)

    def test_batch_needs_retriever(self):
        model = EncoderModel(tiny_model_config(AugmentationMode.CONCAT))
        with pytest.raises(ModelError):
            model.batch_logits([EXAMPLE])


class TestArchitecture:
    """Mixtures, discretization and fixed schemes."""

    def test_searched_model_has_mixtures(self, fusion_config: ModelConfig):
        model = EncoderModel(fusion_config)
        assert model.architecture() is None
        assert all(isinstance(m, IntegratorModule) for m in model.site_modules().values())
        assert [p.name for p in model.arch_parameters()] == ["arch.layers.0.key", "arch.layers.0.value"]
        assert not any(p.name.startswith("arch.") for p in model.weight_parameters())

    def test_discretize(self, fusion_config: ModelConfig):
        model = EncoderModel(fusion_config)
        key, value = FusionSite(0, SiteRole.KEY), FusionSite(0, SiteRole.VALUE)
        chosen = model.discretize({key: 1, value: 2})
        assert chosen == {key: FusionScheme.RERANKER, value: FusionScheme.ORDERED_MASK}
        assert model.arch_parameters() == []
        assert "arch.layers.0.key" not in model.named_parameters()
        assert model.forward(EXAMPLE, _hits()).shape == (3,)

    def test_discretize_needs_every_site(self, fusion_config: ModelConfig):
        model = EncoderModel(fusion_config)
        with pytest.raises(ModelError):
            model.discretize({FusionSite(0, SiteRole.KEY): 0})

    def test_apply_architecture_checks_candidates(self):
        model = EncoderModel(tiny_model_config(candidates=(FusionScheme.NO_FUSION, FusionScheme.RERANKER)))
        with pytest.raises(ModelError):
            model.apply_architecture({FusionSite(0, SiteRole.KEY): FusionScheme.ORDERED_MASK})

    def test_fixed_scheme_model(self):
        model = EncoderModel(tiny_model_config(candidates=(FusionScheme.ORDERED_MASK,)))
        assert model.arch is None
        assert set(model.architecture().values()) == {FusionScheme.ORDERED_MASK}
        model.set_tau(0.5)
        assert model.site_modules()[FusionSite(0, SiteRole.KEY)].scheme.tau == 0.5

    def test_fixed_weight_fusion_has_no_ranking_parameters(self):
        config = tiny_model_config(candidates=(FusionScheme.RERANKER,), learned_ranking=False)
        model = EncoderModel(config)
        assert not any(name.endswith(".reranker") for name in model.named_parameters())
        assert model.needs_hits
        plain = EncoderModel(tiny_model_config(AugmentationMode.NONE))
        fused = model.forward(EXAMPLE, _hits()).values
        assert not np.allclose(fused, plain.forward(EXAMPLE).values)

    def test_plain_model_architecture_is_empty(self):
        assert EncoderModel(tiny_model_config(AugmentationMode.NONE)).architecture() == {}
