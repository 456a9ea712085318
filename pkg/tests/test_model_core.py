import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from samedoct.errors import ConfigurationError, ValidationError
from samedoct.lora import inject_lora
from samedoct.model import (
    ModelConfig,
    PromptPoint,
    PromptSet,
    build_model,
    decode_masks,
    encode_image,
    encode_prompts,
    predict,
)

from conftest import TINY, random_image


class TestModelConfig:
    def test_defaults_valid(self):
        cfg = ModelConfig()
        assert cfg.token_grid == 16 and cfg.logit_size == 64 and cfg.upsample_factor == 4

    def test_indivisible_patch_rejected(self):
        with pytest.raises(ConfigurationError):
            ModelConfig(input_size=250)

    def test_head_divisibility_rejected(self):
        with pytest.raises(ConfigurationError):
            ModelConfig(embed_dim=30, num_heads=4)

    def test_unknown_field_rejected(self):
        with pytest.raises(ConfigurationError):
            ModelConfig.from_dict({"widht": 3})

    @settings(max_examples=25, deadline=None)
    @given(st.sampled_from([2, 3, 4]), st.sampled_from([8, 16]), st.sampled_from([1, 2]),
           st.sampled_from([8, 16]), st.sampled_from([1, 2, 4]), st.sampled_from([1, 2, 3]))
    def test_shape_algebra_random_configs(self, grid, patch, blocks, dim, down, classes):
        # every config satisfying the invariants must produce contract shapes
        if patch % down != 0:
            return
        cfg = ModelConfig(input_size=patch * grid, patch_size=patch,
                          embed_dim=dim, num_blocks=blocks, num_heads=2, mlp_ratio=1.0,
                          decoder_dim=dim, num_classes=classes, logit_downsample=down)
        model = build_model(cfg, seed=0)
        img = np.zeros((cfg.input_size, cfg.input_size), np.float32)
        emb = encode_image(model, img)
        assert tuple(emb.tensor.shape) == (cfg.decoder_dim, cfg.token_grid, cfg.token_grid)
        sparse, dense = encode_prompts(model, None)
        logits = decode_masks(model, emb, sparse, dense)
        assert tuple(logits.tensor.shape) == (cfg.num_classes + 1, cfg.logit_size, cfg.logit_size)
        assert torch.isfinite(logits.tensor).all()


class TestEncodeImage:
    def test_shape_and_finite(self, tiny_model, tiny_config, rng):
        emb = encode_image(tiny_model, np.zeros((32, 32), np.float32))
        g = tiny_config.token_grid
        assert tuple(emb.tensor.shape) == (tiny_config.decoder_dim, g, g)
        assert torch.isfinite(emb.tensor).all()

    def test_default_config_shape(self):
        model = build_model(ModelConfig(), seed=1)
        emb = encode_image(model, np.zeros((256, 256), np.float32))
        assert tuple(emb.tensor.shape) == (64, 16, 16)

    def test_zero_lora_is_noop(self, tiny_model, rng):
        lora = inject_lora(tiny_model, rank=4, seed=3)
        img = random_image(rng, 32)
        base = encode_image(tiny_model, img).tensor
        adapted = encode_image(tiny_model, img, lora).tensor
        assert torch.equal(base, adapted)

    def test_single_pixel_sensitivity(self, tiny_model, rng):
        img = random_image(rng, 32)
        other = img.copy()
        other[5, 5] += 0.25
        a = encode_image(tiny_model, img).tensor
        b = encode_image(tiny_model, other).tensor
        assert not torch.equal(a, b)

    def test_shape_mismatch_is_config_error(self, tiny_model):
        with pytest.raises(ConfigurationError):
            encode_image(tiny_model, np.zeros((16, 16), np.float32))

    def test_nonfinite_rejected(self, tiny_model):
        img = np.zeros((32, 32), np.float32)
        img[0, 0] = np.nan
        with pytest.raises(ValidationError):
            encode_image(tiny_model, img)

    def test_repeated_calls_bit_identical(self, tiny_model, rng):
        img = random_image(rng, 32)
        assert torch.equal(encode_image(tiny_model, img).tensor,
                           encode_image(tiny_model, img).tensor)


class TestEncodePrompts:
    def test_empty_returns_trainable_defaults(self, tiny_model):
        sparse, dense = encode_prompts(tiny_model, PromptSet())
        pe = tiny_model.prompt_encoder
        assert torch.equal(sparse, pe.default_sparse_token.detach())
        assert torch.equal(dense, pe.default_dense_embedding.detach())
        assert sparse.shape[0] == 1

    def test_point_label_changes_only_label_component(self, tiny_model):
        center = 16.0
        pos, _ = encode_prompts(tiny_model, PromptSet([PromptPoint(center, center, "positive")]))
        neg, _ = encode_prompts(tiny_model, PromptSet([PromptPoint(center, center, "negative")]))
        emb = tiny_model.prompt_encoder.label_embed.weight
        expected = (emb[1] - emb[0]).detach()
        assert torch.allclose(pos[0] - neg[0], expected, atol=1e-6)

    def test_box_yields_two_tokens(self, tiny_model):
        sparse, _ = encode_prompts(tiny_model, PromptSet(box=(10, 10, 20, 20)))
        assert sparse.shape[0] == 2

    def test_points_and_box_token_count(self, tiny_model):
        ps = PromptSet([PromptPoint(3, 4), PromptPoint(8, 9, "negative")], box=(1, 1, 30, 30))
        sparse, _ = encode_prompts(tiny_model, ps)
        assert sparse.shape[0] == 4

    def test_out_of_range_coordinate_rejected(self, tiny_model):
        with pytest.raises(ValidationError):
            encode_prompts(tiny_model, PromptSet([PromptPoint(40.0, 2.0)]))

    def test_unordered_box_rejected(self, tiny_model):
        with pytest.raises(ValidationError):
            encode_prompts(tiny_model, PromptSet(box=(20, 10, 10, 20)))


class TestDecodeMasks:
    def test_logit_shape_c3(self):
        cfg = ModelConfig(**{**TINY, "num_classes": 3})
        model = build_model(cfg, seed=0)
        emb = encode_image(model, np.zeros((32, 32), np.float32))
        sparse, dense = encode_prompts(model, None)
        logits = decode_masks(model, emb, sparse, dense)
        assert tuple(logits.tensor.shape) == (4, 8, 8)

    def test_determinism_bit_identical(self, tiny_model, rng):
        emb = encode_image(tiny_model, random_image(rng, 32))
        sparse, dense = encode_prompts(tiny_model, PromptSet([PromptPoint(5, 5)]))
        a = decode_masks(tiny_model, emb, sparse, dense).tensor
        b = decode_masks(tiny_model, emb, sparse, dense).tensor
        assert torch.equal(a, b)

    def test_sparse_token_permutation_equivariance(self, tiny_model, rng):
        emb = encode_image(tiny_model, random_image(rng, 32))
        p1, p2 = PromptPoint(4, 4), PromptPoint(20, 25, "negative")
        s12, dense = encode_prompts(tiny_model, PromptSet([p1, p2]))
        s21, _ = encode_prompts(tiny_model, PromptSet([p2, p1]))
        assert torch.equal(s12[0], s21[1]) and torch.equal(s12[1], s21[0])
        a = decode_masks(tiny_model, emb, s12, dense).tensor
        b = decode_masks(tiny_model, emb, s21, dense).tensor
        assert torch.allclose(a, b, atol=1e-5)

    def test_dimension_mismatch_rejected(self, tiny_model, rng):
        emb = encode_image(tiny_model, random_image(rng, 32))
        bad = torch.zeros(3, 7)
        with pytest.raises(ConfigurationError):
            decode_masks(tiny_model, emb, bad, tiny_model.prompt_encoder.default_dense_embedding)


class TestPredict:
    def test_codomain(self, tiny_model, tiny_config):
        labels = predict(tiny_model, np.zeros((32, 32), np.float32))
        assert labels.shape == (32, 32)
        assert labels.max() <= tiny_config.num_classes

    def test_argmax_tie_breaks_low_index(self):
        from samedoct.model.core import ClassLogits, logits_to_labels

        logits = torch.zeros(3, 2, 2)  # all channels tie everywhere
        labels = logits_to_labels(ClassLogits(logits), upsample=2)
        assert labels.shape == (4, 4)
        assert (labels == 0).all()

    def test_background_dominant_logits_give_background(self):
        from samedoct.model.core import ClassLogits, logits_to_labels

        logits = torch.randn(4, 4, 4)
        logits[0] = 10.0
        labels = logits_to_labels(ClassLogits(logits), upsample=4)
        assert (labels == 0).all()
        assert labels.shape == (16, 16)

    def test_prediction_deterministic(self, tiny_model, rng):
        img = random_image(rng, 32)
        ps = PromptSet([PromptPoint(10, 10)])
        assert np.array_equal(predict(tiny_model, img, ps), predict(tiny_model, img, ps))
