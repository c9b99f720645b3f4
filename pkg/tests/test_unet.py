import numpy as np
import pytest

from ulcerforge import autodiff as ad
from ulcerforge.autodiff import AdamHyper, AdamState, Tensor, adam_step
from ulcerforge.errors import ConfigError
from ulcerforge.gradcheck import denoiser_gradient_check
from ulcerforge.rng import stream
from ulcerforge.unet import (DenoiserParams, UNetConfig, init_denoiser,
                             parameter_shapes, predict_noise)

TOY = UNetConfig(in_channels=1, base_channels=8, channel_multipliers=(1, 2),
                 attention_levels=frozenset({1}), time_embed_dim=16, groups_for_norm=4)


class TestConfig:
    def test_invalid_channels(self):
        with pytest.raises(ConfigError):
            UNetConfig(in_channels=2)

    def test_groups_must_divide_base(self):
        with pytest.raises(ConfigError):
            UNetConfig(base_channels=10, groups_for_norm=4)

    def test_odd_time_dim(self):
        with pytest.raises(ConfigError):
            UNetConfig(time_embed_dim=15)

    def test_attention_level_bounds(self):
        with pytest.raises(ConfigError):
            UNetConfig(channel_multipliers=(1, 2), attention_levels=frozenset({2}))

    def test_spatial_divisibility(self):
        cfg = UNetConfig(channel_multipliers=(1, 2, 4), base_channels=8, groups_for_norm=4,
                         attention_levels=frozenset())
        cfg.check_spatial(8, 8)
        with pytest.raises(ConfigError):
            cfg.check_spatial(6, 8)


class TestInit:
    def test_seeded_determinism(self):
        a = init_denoiser(TOY, 42)
        b = init_denoiser(TOY, 42)
        assert list(a.tensors) == list(b.tensors)
        for name in a.tensors:
            np.testing.assert_array_equal(a.tensors[name].data, b.tensors[name].data)

    def test_different_seeds_differ(self):
        a = init_denoiser(TOY, 1)
        b = init_denoiser(TOY, 2)
        assert any(not np.array_equal(a.tensors[n].data, b.tensors[n].data)
                   for n in a.tensors)

    def test_output_conv_zero(self):
        params = init_denoiser(TOY, 0)
        np.testing.assert_array_equal(params.tensors["out.conv.weight"].data, 0.0)
        np.testing.assert_array_equal(params.tensors["out.conv.bias"].data, 0.0)

    def test_name_set_is_pure_function_of_config(self):
        assert list(parameter_shapes(TOY)) == list(init_denoiser(TOY, 7).tensors)

    def test_toy_parameter_count_matches_architecture_table(self):
        # Independently summed from the layer table in the README
        # (2-level toy config: in 1, base 8, multipliers [1, 2],
        # attention at level 1, time dim 16, groups 4).
        def conv(cout, cin, k):
            return cout * cin * k * k + cout

        def res_block(cin, cout, d=16):
            total = 2 * cin            # gn1
            total += conv(cout, cin, 3)  # conv1
            total += d * cout + cout   # temb projection
            total += 2 * cout          # gn2
            total += conv(cout, cout, 3)  # conv2
            if cin != cout:
                total += conv(cout, cin, 1)  # 1x1 skip
            return total

        def attn(c):
            return 2 * c + 4 * c * c

        expected = (
            2 * (16 * 16 + 16)            # time MLP (two 16x16 linears)
            + conv(8, 1, 3)               # stem
            + res_block(8, 8) + res_block(8, 8)        # down.0 blocks
            + conv(8, 8, 3)               # down.0 downsample
            + res_block(8, 16) + res_block(16, 16)     # down.1 blocks
            + attn(16)                    # down.1 attention
            + conv(8, 16, 3)              # up.0 upsample conv
            + res_block(16, 8) + res_block(8, 8)       # up.0 blocks
            + 2 * 8                       # out group norm
            + conv(1, 8, 3)               # zero-initialized output conv
        )
        assert expected == 18513
        assert init_denoiser(TOY, 0).parameter_count() == expected

    def test_invalid_config_rejected_at_init(self):
        with pytest.raises(ConfigError):
            init_denoiser(UNetConfig(base_channels=6, groups_for_norm=4), 0)


class TestPredictNoise:
    def test_fresh_params_predict_zero(self):
        params = init_denoiser(TOY, 3)
        x = stream(3, "x").standard_normal((2, 1, 8, 8)).astype(np.float32)
        out = predict_noise(params, x, 17)
        np.testing.assert_array_equal(out.data, np.zeros_like(x))

    @pytest.mark.parametrize("cfg,size", [
        (TOY, 8),
        (UNetConfig(in_channels=3, base_channels=8, channel_multipliers=(1,),
                    attention_levels=frozenset({0}), time_embed_dim=8,
                    groups_for_norm=2), 5),
        (UNetConfig(in_channels=1, base_channels=8, channel_multipliers=(1, 1, 2),
                    attention_levels=frozenset(), time_embed_dim=8,
                    groups_for_norm=4), 12),
        (UNetConfig(in_channels=1, base_channels=8, channel_multipliers=(1, 2),
                    attention_levels=frozenset({1}), attention_heads=2,
                    time_embed_dim=8, groups_for_norm=4), 8),
    ])
    def test_output_shape_equals_input_shape(self, cfg, size):
        params = init_denoiser(cfg, 0)
        x = stream(5, "x").standard_normal((2, cfg.in_channels, size, size)).astype(np.float32)
        assert predict_noise(params, x, 1).shape == x.shape

    def test_indivisible_spatial_size_rejected(self):
        params = init_denoiser(TOY, 0)
        x = np.zeros((1, 1, 7, 7), dtype=np.float32)
        with pytest.raises(ConfigError):
            predict_noise(params, x, 1)

    def test_purity_no_hidden_state(self):
        params = init_denoiser(TOY, 1)
        rng = stream(6, "x")
        for name in ("up.0.block1.conv1.weight",):
            params.tensors[name].data += 0.05  # make output nonzero
        params.tensors["out.conv.weight"].data += 0.01
        x = rng.standard_normal((1, 1, 8, 8)).astype(np.float32)
        a = predict_noise(params, x, 9).data
        b = predict_noise(params, x, 9).data
        np.testing.assert_array_equal(a, b)

    def test_per_sample_timesteps_differ(self):
        params = init_denoiser(TOY, 1)
        params.tensors["out.conv.weight"].data[:] = 0.01
        x = np.tile(stream(7, "x").standard_normal((1, 1, 8, 8)).astype(np.float32), (2, 1, 1, 1))
        out = predict_noise(params, x, [1, 900]).data
        assert not np.array_equal(out[0], out[1])


def _training_probe(params: DenoiserParams, seed: int) -> float:
    rng = stream(seed, "probe")
    x = Tensor(rng.standard_normal((2, 1, 8, 8)).astype(np.float32))
    target = Tensor(rng.standard_normal((2, 1, 8, 8)).astype(np.float32))
    d = ad.sub(predict_noise(params, x, 5), target)
    loss = ad.reduce_mean(ad.mul(d, d))
    params.zero_grads()
    loss.backward()
    return loss.item()


class TestGradients:
    def test_every_parameter_receives_gradient(self):
        params = init_denoiser(TOY, 2)
        _training_probe(params, 0)
        missing = [n for n, t in params.tensors.items() if t.grad is None]
        assert missing == []

    def test_one_step_makes_final_conv_nonzero(self):
        params = init_denoiser(TOY, 2)
        _training_probe(params, 1)
        state = AdamState.initial(params.tensors, AdamHyper(learning_rate=1e-3))
        adam_step(params.tensors, params.grads(), state)
        assert np.any(params.tensors["out.conv.weight"].data != 0.0) or \
            np.any(params.tensors["out.conv.bias"].data != 0.0)

    @pytest.mark.parametrize("seed", range(0, 20, 4))
    def test_end_to_end_finite_differences(self, seed):
        assert denoiser_gradient_check(seed, fraction=0.003) <= 1e-2
