"""Checkpoint container tests: bitwise round trips, fingerprint gating,
corruption detection, extractor-only loading."""

from __future__ import annotations

import dataclasses

import pytest
import torch

from trivol.backbone import init_model, parameter_checksum
from trivol.checkpoint import ModelWeights, load_weights, save_weights
from trivol.config import desk_config
from trivol.errors import IncompatibilityError, IntegrityError


@pytest.fixture(scope="module")
def cfg():
    return dataclasses.replace(desk_config(), input_shape=(16, 16, 16), latent_dim=16,
                               projection_dim=32, base_channels=2)


def test_round_trip_bitwise(cfg, tmp_path):
    extractor, head = init_model(cfg, "ssl", seed=3)
    weights = ModelWeights.from_model(extractor, head, stage="theta_prime", config=cfg, seed=3)
    path = save_weights(weights, tmp_path / "w.ckpt")
    loaded = load_weights(path, cfg)
    assert loaded.checksum() == weights.checksum()
    assert loaded.stage == "theta_prime"
    assert loaded.seed == 3
    assert loaded.head_kind == "ssl"

    fresh_ext, fresh_head = init_model(cfg, "ssl", seed=99)
    assert parameter_checksum(fresh_ext) != parameter_checksum(extractor)
    loaded.apply_to(fresh_ext, fresh_head)
    assert parameter_checksum(fresh_ext, fresh_head) == parameter_checksum(extractor, head)
    x = torch.rand(2, 16, 16, 16)
    extractor.eval(), fresh_ext.eval()
    with torch.inference_mode():
        assert torch.equal(extractor(x), fresh_ext(x))


def test_fingerprint_mismatch_rejected(cfg, tmp_path):
    extractor, head = init_model(cfg, "ssl", seed=0)
    path = save_weights(ModelWeights.from_model(extractor, head, "theta_prime", cfg, 0),
                        tmp_path / "w.ckpt")
    other = dataclasses.replace(cfg, latent_dim=8)
    with pytest.raises(IncompatibilityError):
        load_weights(path, other)


def test_ssl_checkpoint_loads_as_teacher_extractor(cfg, tmp_path):
    extractor, ssl_head = init_model(cfg, "ssl", seed=0)
    path = save_weights(ModelWeights.from_model(extractor, ssl_head, "theta_prime", cfg, 0),
                        tmp_path / "w.ckpt")
    loaded = load_weights(path, cfg)
    target, cls_head = init_model(cfg, "cls", seed=1)
    loaded.apply_to(target, head=None)  # extractor only; the cls head keeps its init
    assert parameter_checksum(target) == parameter_checksum(extractor)
    with pytest.raises(IncompatibilityError):
        loaded.apply_to(target, head=cls_head)  # ssl head weights cannot fill a cls head


def test_corrupt_payload_detected(cfg, tmp_path):
    extractor, head = init_model(cfg, "ssl", seed=0)
    path = save_weights(ModelWeights.from_model(extractor, head, "theta_prime", cfg, 0),
                        tmp_path / "w.ckpt")
    blob = bytearray(path.read_bytes())
    blob[-5] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(IntegrityError, match="checksum"):
        load_weights(path, cfg)


def test_bad_magic_detected(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"not a checkpoint at all")
    with pytest.raises(IntegrityError, match="magic"):
        load_weights(path)


def test_truncated_file_detected(cfg, tmp_path):
    extractor, head = init_model(cfg, "ssl", seed=0)
    path = save_weights(ModelWeights.from_model(extractor, head, "theta_prime", cfg, 0),
                        tmp_path / "w.ckpt")
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(IntegrityError):
        load_weights(path, cfg)


def test_missing_file(tmp_path):
    with pytest.raises(IntegrityError):
        load_weights(tmp_path / "absent.ckpt")


def test_extras_round_trip(cfg, tmp_path):
    extractor, head = init_model(cfg, "cls", seed=0)
    weights = ModelWeights.from_model(extractor, head, "psi_prime", cfg, 0,
                                      extras={"iteration": 42, "note": "x"})
    loaded = load_weights(save_weights(weights, tmp_path / "w.ckpt"), cfg)
    assert loaded.extras == {"iteration": 42, "note": "x"}
