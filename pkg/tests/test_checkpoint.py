import json
import zipfile

import numpy as np
import pytest
import torch

from samedoct.checkpoint import (
    load_checkpoint,
    load_lora_checkpoint,
    model_version,
    save_checkpoint,
    save_lora_checkpoint,
)
from samedoct.errors import FormatError
from samedoct.lora import inject_lora, trainable_parameters
from samedoct.model import ModelConfig, build_model, encode_image

from conftest import TINY, random_image


class TestModelCheckpoint:
    def test_roundtrip_reproduces_forward(self, tiny_config, tmp_path, rng):
        model = build_model(tiny_config, seed=3)
        path = save_checkpoint(str(tmp_path / "m.zip"), model, regimen="decoder_only", step=17)
        loaded, lora, manifest = load_checkpoint(path)
        assert lora is None
        assert manifest["regimen"] == "decoder_only" and manifest["step"] == 17
        img = random_image(rng, tiny_config.input_size)
        assert torch.equal(encode_image(model, img).tensor, encode_image(loaded, img).tensor)

    def test_roundtrip_with_lora(self, tiny_config, tmp_path, rng):
        model = build_model(tiny_config, seed=4)
        state = inject_lora(model, rank=2, seed=1)
        with torch.no_grad():
            for _, (a, b) in state.tensors.items():
                b.normal_(0, 0.1)
        path = save_checkpoint(str(tmp_path / "m.zip"), model, state, regimen="lora_samed")
        loaded, loaded_state, _ = load_checkpoint(path)
        assert loaded_state is not None
        assert loaded_state.rank == 2 and loaded_state.registry == state.registry
        img = random_image(rng, tiny_config.input_size)
        assert torch.allclose(encode_image(model, img, state).tensor,
                              encode_image(loaded, img, loaded_state).tensor, atol=1e-6)

    def test_tensor_names_match_audit(self, tiny_config, tmp_path):
        model = build_model(tiny_config, seed=0)
        state = inject_lora(model, rank=2, seed=0)
        path = save_checkpoint(str(tmp_path / "m.zip"), model, state)
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
        stored = set(manifest["tensors"])
        audit = {n for n, _ in trainable_parameters(model, state, "lora_samed")}
        assert audit <= stored

    def test_corrupt_tensor_size_rejected(self, tiny_config, tmp_path):
        model = build_model(tiny_config, seed=0)
        path = save_checkpoint(str(tmp_path / "m.zip"), model)
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            items = {n: zf.read(n) for n in zf.namelist() if n != "manifest.json"}
        name = next(iter(manifest["tensors"]))
        items[f"tensors/{name}"] = items[f"tensors/{name}"][:-4]
        bad = str(tmp_path / "bad.zip")
        with zipfile.ZipFile(bad, "w") as zf:
            zf.writestr("manifest.json", json.dumps(manifest))
            for n, payload in items.items():
                zf.writestr(n, payload)
        with pytest.raises(FormatError, match="bytes"):
            load_checkpoint(bad)

    def test_not_a_zip(self, tmp_path):
        path = tmp_path / "junk.zip"
        path.write_bytes(b"not an archive")
        with pytest.raises(FormatError):
            load_checkpoint(str(path))

    def test_version_digest_changes_with_content(self, tiny_config, tmp_path):
        m1 = build_model(tiny_config, seed=0)
        m2 = build_model(tiny_config, seed=1)
        p1 = save_checkpoint(str(tmp_path / "a.zip"), m1)
        p2 = save_checkpoint(str(tmp_path / "b.zip"), m2)
        assert model_version(p1) != model_version(p2)
        assert len(model_version(p1)) == 12


class TestLoraCheckpoint:
    def test_adapter_only_roundtrip(self, tiny_config, tmp_path, rng):
        model = build_model(tiny_config, seed=5)
        state = inject_lora(model, rank=3, seed=2)
        with torch.no_grad():
            for _, (a, b) in state.tensors.items():
                b.normal_(0, 0.2)
        path = save_lora_checkpoint(str(tmp_path / "l.zip"), state, tiny_config,
                                    regimen="lora_samed", step=9)
        loaded = load_lora_checkpoint(path, model)
        img = random_image(rng, tiny_config.input_size)
        assert torch.allclose(encode_image(model, img, state).tensor,
                              encode_image(model, img, loaded).tensor, atol=1e-6)

    def test_config_mismatch_rejected(self, tiny_config, tmp_path):
        model = build_model(tiny_config, seed=0)
        state = inject_lora(model, rank=2, seed=0)
        path = save_lora_checkpoint(str(tmp_path / "l.zip"), state, tiny_config)
        other = build_model(ModelConfig(**{**TINY, "num_blocks": 1}), seed=0)
        with pytest.raises(FormatError, match="different model config"):
            load_lora_checkpoint(path, other)

    def test_kind_mismatch(self, tiny_config, tmp_path):
        model = build_model(tiny_config, seed=0)
        path = save_checkpoint(str(tmp_path / "m.zip"), model)
        with pytest.raises(FormatError, match="kind"):
            load_lora_checkpoint(path, model)
