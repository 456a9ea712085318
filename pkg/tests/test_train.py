import math

import numpy as np
import pytest
import torch

from samedoct.errors import ConfigurationError, ValidationError
from samedoct.lora import Regimen, inject_lora, trainable_parameters
from samedoct.model import ModelConfig, build_model
from samedoct.train import (
    TrainConfig,
    combined_loss,
    dice_loss,
    downsample_labels,
    load_yaml_config,
    lr_at,
    slices_from_volumes,
    train,
)

from conftest import TINY


def make_config(**kw):
    base = dict(base_lr=5e-3, warmup_steps=250, decay_gamma=0.9999, max_steps=2000)
    base.update(kw)
    return TrainConfig(**base)


class TestTrainConfig:
    def test_lambda_sum_enforced(self):
        with pytest.raises(ConfigurationError):
            make_config(lambda_ce=0.5, lambda_dice=0.6)

    def test_gamma_range(self):
        with pytest.raises(ConfigurationError):
            make_config(decay_gamma=1.01)

    def test_warmup_below_max_steps(self):
        with pytest.raises(ConfigurationError):
            make_config(warmup_steps=100, max_steps=100)

    def test_yaml_roundtrip(self, tmp_path):
        path = tmp_path / "cfg.yaml"
        path.write_text(
            "train:\n  base_lr: 0.001\n  warmup_steps: 10\n  max_steps: 50\n"
            "model:\n  input_size: 32\n  patch_size: 16\n  embed_dim: 16\n"
            "  num_heads: 2\n  decoder_dim: 16\n  num_blocks: 1\n")
        train_cfg, model_cfg, _ = load_yaml_config(str(path))
        assert train_cfg.base_lr == 0.001 and train_cfg.warmup_steps == 10
        assert model_cfg.input_size == 32 and model_cfg.num_blocks == 1


class TestDownsampleLabels:
    def test_constant_map(self):
        m = np.full((8, 8), 2, np.uint8)
        assert (downsample_labels(m, 4) == 2).all()

    def test_top_left_sampling_rule(self):
        m = np.arange(16).reshape(4, 4).astype(np.uint8)
        out = downsample_labels(m, 2)
        assert out.tolist() == [[m[0, 0], m[0, 2]], [m[2, 0], m[2, 2]]]

    def test_every_output_from_sampled_position(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            m = rng.integers(0, 4, (16, 16)).astype(np.uint8)
            out = downsample_labels(m, 4)
            for r in range(4):
                for c in range(4):
                    assert out[r, c] == m[4 * r, 4 * c]

    def test_majority_mode(self):
        m = np.zeros((4, 4), np.uint8)
        m[0:2, 0:2] = [[1, 1], [1, 0]]
        out = downsample_labels(m, 2, mode="majority")
        assert out[0, 0] == 1 and out[1, 1] == 0

    def test_indivisible_rejected(self):
        with pytest.raises(ConfigurationError):
            downsample_labels(np.zeros((9, 9), np.uint8), 4)


class TestDiceLoss:
    def test_perfect_prediction_near_zero(self):
        target = torch.randint(0, 3, (64, 64))
        probs = torch.nn.functional.one_hot(target, 3).permute(2, 0, 1).float()
        # exact one-hot is a valid softmax limit
        loss = dice_loss(probs, target, eps=1e-5)
        assert loss < 1e-4

    def test_uniform_probs_hand_value(self):
        # C=1, uniform probs 0.5, all-background 2x2: loss = ((1-4/6) + (1-0/2)) / 2
        probs = torch.full((2, 2, 2), 0.5)
        target = torch.zeros(2, 2, dtype=torch.long)
        loss = dice_loss(probs, target, eps=1e-9)
        assert float(loss) == pytest.approx((1 - 4 / 6 + 1.0) / 2, abs=1e-6)
        assert float(loss) == pytest.approx(0.6667, abs=1e-4)

    def test_class_permutation_symmetry(self):
        rng = torch.Generator().manual_seed(0)
        logits = torch.randn(3, 4, 4, generator=rng)
        probs = torch.softmax(logits, 0)
        target = torch.randint(0, 3, (4, 4), generator=rng)
        perm = [2, 0, 1]
        permuted_probs = probs[perm]
        lut = torch.empty(3, dtype=torch.long)
        for new, old in enumerate(perm):
            lut[old] = new
        permuted_target = lut[target]
        assert float(dice_loss(probs, target)) == pytest.approx(
            float(dice_loss(permuted_probs, permuted_target)), abs=1e-6)

    def test_range_zero_one(self):
        rng = torch.Generator().manual_seed(4)
        for _ in range(10):
            probs = torch.softmax(torch.randn(4, 8, 8, generator=rng), 0)
            target = torch.randint(0, 4, (8, 8), generator=rng)
            loss = float(dice_loss(probs, target))
            assert 0.0 <= loss <= 1.0

    def test_unnormalized_rejected(self):
        with pytest.raises(ValidationError):
            dice_loss(torch.full((2, 2, 2), 0.9), torch.zeros(2, 2, dtype=torch.long))


class TestCombinedLoss:
    def test_pure_ce_matches_scalar_oracle(self):
        logits = torch.tensor([[[1.0, -0.5], [0.2, 2.0]],
                               [[0.0, 1.5], [-1.0, 0.3]]])  # [2, 2, 2]
        target = torch.tensor([[0, 1], [1, 0]])
        got = float(combined_loss(logits, target, lambda_ce=1.0, lambda_dice=0.0))
        # independent scalar computation
        total = 0.0
        for r in range(2):
            for c in range(2):
                z = [float(logits[k, r, c]) for k in range(2)]
                log_norm = math.log(sum(math.exp(v) for v in z))
                total += -(z[int(target[r, c])] - log_norm)
        assert got == pytest.approx(total / 4, rel=1e-6)

    def test_peaked_logits_small_loss(self):
        target = torch.randint(0, 3, (8, 8))
        logits = torch.nn.functional.one_hot(target, 3).permute(2, 0, 1).float() * 20
        assert float(combined_loss(logits, target)) < 1e-3

    def test_finite_for_uniform_targets(self):
        logits = torch.randn(3, 8, 8)
        assert math.isfinite(float(combined_loss(logits, torch.zeros(8, 8, dtype=torch.long))))
        assert math.isfinite(float(combined_loss(logits, torch.full((8, 8), 2, dtype=torch.long))))

    def test_nonnegative(self):
        rng = torch.Generator().manual_seed(1)
        for _ in range(5):
            logits = torch.randn(4, 8, 8, generator=rng) * 3
            target = torch.randint(0, 4, (8, 8), generator=rng)
            assert float(combined_loss(logits, target)) >= 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ValidationError):
            combined_loss(torch.randn(3, 8, 8), torch.zeros(4, 4, dtype=torch.long))


class TestLrSchedule:
    def test_warmup_endpoint_equals_base(self):
        cfg = make_config()
        assert lr_at(cfg.warmup_steps - 1, cfg) == cfg.base_lr
        assert lr_at(cfg.warmup_steps, cfg) == cfg.base_lr

    def test_linear_warmup(self):
        cfg = make_config(base_lr=1.0, warmup_steps=4, max_steps=10)
        assert [lr_at(t, cfg) for t in range(4)] == [0.25, 0.5, 0.75, 1.0]

    def test_decay_value_frozen_oracle(self):
        cfg = make_config(base_lr=5e-3, decay_gamma=0.9999, warmup_steps=250, max_steps=20000)
        got = lr_at(cfg.warmup_steps + 10000, cfg)
        assert got == pytest.approx(5e-3 * 0.9999 ** 10000)
        assert got == pytest.approx(1.8393e-3, rel=1e-4)

    def test_out_of_range_rejected(self):
        cfg = make_config(max_steps=100, warmup_steps=10)
        with pytest.raises(ValidationError):
            lr_at(-1, cfg)
        with pytest.raises(ValidationError):
            lr_at(100, cfg)


def tiny_blob_dataset(n_slices=6, size=32, classes=3, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_slices):
        img = rng.uniform(0.4, 0.6, (size, size)).astype(np.float32)
        lab = np.zeros((size, size), np.uint8)
        for class_id in range(1, classes + 1):
            r, c = rng.integers(4, size - 12, 2)
            lab[r:r + 8, c:c + 8] = class_id
            img[r:r + 8, c:c + 8] = 0.1
        out.append((img, lab))
    return out


class TestTrainLoop:
    def test_zero_shot_refused(self, tiny_config):
        model = build_model(tiny_config, seed=0)
        cfg = make_config(max_steps=4, warmup_steps=1, batch_size=2)
        with pytest.raises(ConfigurationError, match="no trainable parameters"):
            train(tiny_blob_dataset(2), model, Regimen.ZERO_SHOT, cfg)

    def test_empty_dataset_refused(self, tiny_config):
        model = build_model(tiny_config, seed=0)
        cfg = make_config(max_steps=4, warmup_steps=1, batch_size=2)
        with pytest.raises(ConfigurationError, match="empty"):
            train([], model, Regimen.DECODER_ONLY, cfg)

    def test_lr_trace_matches_lr_at_exactly(self, tiny_config):
        model = build_model(tiny_config, seed=0)
        cfg = make_config(max_steps=12, warmup_steps=5, batch_size=2, seed=1)
        _, history = train(tiny_blob_dataset(4), model, Regimen.DECODER_ONLY, cfg)
        assert len(history.steps) == 12
        for row in history.steps:
            assert row["lr"] == lr_at(row["step"], cfg)

    def test_frozen_encoder_bit_identical(self, tiny_config):
        model = build_model(tiny_config, seed=0)
        lora = inject_lora(model, rank=2, seed=0)
        before = {n: p.clone() for n, p in model.image_encoder.named_parameters()}
        cfg = make_config(max_steps=10, warmup_steps=2, batch_size=2, seed=2)
        train(tiny_blob_dataset(4), model, Regimen.LORA_SAMED, cfg, lora_state=lora)
        for n, p in model.image_encoder.named_parameters():
            assert torch.equal(p, before[n]), n

    def test_trainable_set_changes_under_training(self, tiny_config):
        model = build_model(tiny_config, seed=0)
        lora = inject_lora(model, rank=2, seed=0)
        named = trainable_parameters(model, lora, Regimen.LORA_SAMED)
        before = {n: p.clone() for n, p in named}
        cfg = make_config(max_steps=10, warmup_steps=2, batch_size=2, seed=3)
        train(tiny_blob_dataset(4), model, Regimen.LORA_SAMED, cfg, lora_state=lora)
        changed = [n for n, p in named if not torch.equal(p, before[n])]
        assert any(n.startswith("lora.") and n.endswith(".B") for n in changed)
        assert any(n.startswith("mask_decoder.") for n in changed)

    def test_determinism_under_seed(self, tiny_config):
        histories = []
        for _ in range(2):
            model = build_model(tiny_config, seed=0)
            cfg = make_config(max_steps=6, warmup_steps=2, batch_size=2, seed=7)
            _, h = train(tiny_blob_dataset(4), model, Regimen.DECODER_ONLY, cfg)
            histories.append([row["loss"] for row in h.steps])
        assert histories[0] == histories[1]

    def test_loss_decreases_on_overfit_slice(self, tiny_config):
        model = build_model(tiny_config, seed=0)
        cfg = make_config(max_steps=60, warmup_steps=5, batch_size=4, seed=4, base_lr=2e-3)
        _, history = train(tiny_blob_dataset(4), model, Regimen.DECODER_ONLY, cfg)
        losses = [row["loss"] for row in history.steps]
        assert np.median(losses[-6:]) < np.median(losses[:6])

    def test_out_dir_artifacts(self, tiny_config, tmp_path):
        model = build_model(tiny_config, seed=0)
        cfg = make_config(max_steps=4, warmup_steps=1, batch_size=2)
        path, history = train(tiny_blob_dataset(2), model, Regimen.DECODER_ONLY, cfg,
                              out_dir=str(tmp_path))
        assert path and (tmp_path / "checkpoint.zip").exists()
        assert (tmp_path / "history.csv").read_text().startswith("step,lr,loss,ce,dice")
        assert history.final_checkpoint == path
