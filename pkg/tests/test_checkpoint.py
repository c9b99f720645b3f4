import numpy as np
import pytest

from ulcerforge.autodiff import AdamHyper, AdamState
from ulcerforge.checkpoint import (deserialize_checkpoint, load_checkpoint,
                                   save_checkpoint, serialize_checkpoint)
from ulcerforge.errors import DataError
from ulcerforge.rng import stream
from ulcerforge.schedule import build_linear_schedule
from ulcerforge.training import TrainConfig, read_checkpoint, write_checkpoint
from ulcerforge.unet import UNetConfig, init_denoiser


def _tensors():
    rng = stream(0, "ckpt")
    return {
        "a.weight": rng.standard_normal((3, 4)).astype(np.float32),
        "b.bias": rng.standard_normal(5).astype(np.float32),
        "scalarish": np.array(2.5, dtype=np.float32),
    }


META = {"schedule": {"steps": 1000, "beta_start": 1e-4, "beta_end": 0.02},
        "note": "unit"}


class TestFormat:
    def test_magic_and_version(self):
        payload = serialize_checkpoint(_tensors(), META)
        assert payload[:4] == b"DFUD"
        assert int.from_bytes(payload[4:8], "little") == 1

    def test_round_trip_values(self, tmp_path):
        path = tmp_path / "c.dfud"
        tensors = _tensors()
        save_checkpoint(path, tensors, META)
        back, meta = load_checkpoint(path)
        assert list(back) == list(tensors)
        for name in tensors:
            np.testing.assert_array_equal(back[name], tensors[name])
        assert meta == META

    def test_save_load_save_byte_identical(self, tmp_path):
        p1 = tmp_path / "one.dfud"
        p2 = tmp_path / "two.dfud"
        save_checkpoint(p1, _tensors(), META)
        tensors, meta = load_checkpoint(p1)
        save_checkpoint(p2, tensors, meta)
        assert p1.read_bytes() == p2.read_bytes()

    def test_checksum_detects_corruption(self, tmp_path):
        path = tmp_path / "c.dfud"
        save_checkpoint(path, _tensors(), META)
        raw = bytearray(path.read_bytes())
        raw[20] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(DataError, match="checksum"):
            load_checkpoint(path)

    def test_bad_magic_rejected(self):
        with pytest.raises(DataError, match="magic"):
            deserialize_checkpoint(b"NOPE" + b"\x00" * 32)

    def test_little_endian_layout(self):
        # name length of the first tensor sits right after magic+version
        payload = serialize_checkpoint({"w": np.zeros(2, dtype=np.float32)}, {})
        assert int.from_bytes(payload[8:12], "little") == 1
        assert payload[12:13] == b"w"
        assert int.from_bytes(payload[13:17], "little") == 1  # rank
        assert int.from_bytes(payload[17:21], "little") == 2  # dim


class TestTrainingCheckpoints:
    def test_params_and_optimizer_round_trip(self, tmp_path):
        cfg = UNetConfig(in_channels=1, base_channels=8, channel_multipliers=(1,),
                         attention_levels=frozenset(), time_embed_dim=8,
                         groups_for_norm=4)
        params = init_denoiser(cfg, 5)
        opt = AdamState.initial(params.tensors, AdamHyper(learning_rate=3e-4))
        opt.step_count = 17
        rng = stream(1, "moments")
        for name in opt.first_moment:
            opt.first_moment[name][...] = rng.standard_normal(
                opt.first_moment[name].shape).astype(np.float32)
        schedule = build_linear_schedule(100, 1e-4, 0.02)
        train_cfg = TrainConfig(batch_size=8, epochs=3, seed=5, checkpoint_every=10)
        path = tmp_path / "train.dfud"
        write_checkpoint(path, params, opt, train_cfg, schedule, step=23)
        params2, opt2, cfg2, meta = read_checkpoint(path)
        assert params2.config == cfg
        assert cfg2 == train_cfg
        assert opt2.step_count == 17
        assert meta["progress"]["step"] == 23
        for name in params.tensors:
            np.testing.assert_array_equal(params.tensors[name].data,
                                          params2.tensors[name].data)
            np.testing.assert_array_equal(opt.first_moment[name],
                                          opt2.first_moment[name])
