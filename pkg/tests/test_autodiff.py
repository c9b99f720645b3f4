import numpy as np
import pytest

from ulcerforge import autodiff as ad
from ulcerforge.autodiff import AdamHyper, AdamState, Tensor, adam_step
from ulcerforge.errors import ConfigError, ShapeError, UsageError
from ulcerforge.gradcheck import OP_TOLERANCE, finite_difference_check, op_gradient_checks
from ulcerforge.rng import stream


class TestConv2d:
    def test_scalar_kernel_scales(self):
        x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]], dtype=np.float32))
        k = Tensor(np.array([[[[2.0]]]], dtype=np.float32))
        out = ad.conv2d(x, k, None, stride=1, padding=0)
        np.testing.assert_array_equal(out.data, [[[[2.0, 4.0], [6.0, 8.0]]]])

    def test_ones_kernel_sums_window(self):
        # hand convolution: every 2x2 window of a 3x3 ones image sums to 4
        x = Tensor(np.ones((1, 1, 3, 3), dtype=np.float32))
        k = Tensor(np.ones((1, 1, 2, 2), dtype=np.float32))
        out = ad.conv2d(x, k, None, stride=1, padding=0)
        assert out.shape == (1, 1, 2, 2)
        np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 4.0))

    def test_output_size_formula(self):
        x = Tensor(np.zeros((1, 2, 9, 7), dtype=np.float32))
        k = Tensor(np.zeros((3, 2, 3, 3), dtype=np.float32))
        out = ad.conv2d(x, k, None, stride=2, padding=1)
        assert out.shape == (1, 3, (9 + 2 - 3) // 2 + 1, (7 + 2 - 3) // 2 + 1)

    def test_channel_mismatch_names_axis(self):
        x = Tensor(np.zeros((1, 3, 4, 4), dtype=np.float32))
        k = Tensor(np.zeros((2, 4, 3, 3), dtype=np.float32))
        with pytest.raises(ShapeError) as exc:
            ad.conv2d(x, k, None)
        assert exc.value.axis == "channels"

    def test_oversized_kernel_rejected(self):
        x = Tensor(np.zeros((1, 1, 4, 4), dtype=np.float32))
        k = Tensor(np.zeros((1, 1, 5, 3), dtype=np.float32))
        with pytest.raises(ShapeError) as exc:
            ad.conv2d(x, k, None)
        assert exc.value.axis == "height"

    def test_grad_matches_finite_differences(self):
        rng = stream(3, "conv-fd")
        x = Tensor(rng.standard_normal((2, 3, 5, 5)), requires_grad=True)
        k = Tensor(rng.standard_normal((4, 3, 3, 3)), requires_grad=True)
        b = Tensor(rng.standard_normal(4), requires_grad=True)
        err = finite_difference_check(
            lambda *a: ad.conv2d(*a, stride=1, padding=1), [x, k, b], rng)
        assert err <= 1e-3


class TestSelfAttention:
    def _proj(self, c, rng):
        return [Tensor(rng.standard_normal((c, c)), requires_grad=True) for _ in range(4)]

    def test_single_position_is_value_then_output_projection(self):
        rng = stream(0, "attn")
        x = Tensor(rng.standard_normal((1, 4, 1, 1)).astype(np.float32))
        wq, wk, wv, wo = self._proj(4, rng)
        out = ad.self_attention(x, wq, wk, wv, wo)
        expected = x.data.reshape(1, 4) @ wv.data @ wo.data
        np.testing.assert_allclose(out.data.reshape(1, 4), expected, rtol=1e-5)

    def test_identical_positions_give_identical_outputs(self):
        rng = stream(1, "attn")
        row = rng.standard_normal((1, 4, 1, 1)).astype(np.float32)
        x = Tensor(np.tile(row, (1, 1, 2, 3)))
        wq, wk, wv, wo = self._proj(4, rng)
        out = ad.self_attention(x, wq, wk, wv, wo).data
        flat = out.reshape(1, 4, -1)
        np.testing.assert_allclose(flat, np.broadcast_to(flat[:, :, :1], flat.shape),
                                   rtol=1e-5, atol=1e-6)

    def test_permutation_equivariance(self):
        # no positional encoding: permuting positions permutes outputs identically
        rng = stream(2, "attn")
        x = rng.standard_normal((1, 4, 2, 3)).astype(np.float32)
        wq, wk, wv, wo = self._proj(4, rng)
        out = ad.self_attention(Tensor(x), wq, wk, wv, wo).data.reshape(1, 4, 6)
        perm = rng.permutation(6)
        xp = x.reshape(1, 4, 6)[:, :, perm].reshape(1, 4, 2, 3)
        out_p = ad.self_attention(Tensor(xp), wq, wk, wv, wo).data.reshape(1, 4, 6)
        np.testing.assert_allclose(out_p, out[:, :, perm], rtol=1e-5, atol=1e-6)

    def test_indivisible_heads_rejected(self):
        rng = stream(3, "attn")
        x = Tensor(rng.standard_normal((1, 6, 2, 2)).astype(np.float32))
        wq, wk, wv, wo = self._proj(6, rng)
        with pytest.raises(ConfigError):
            ad.self_attention(x, wq, wk, wv, wo, heads=4)


class TestGroupNorm:
    def test_constant_input_maps_to_zero(self):
        x = Tensor(np.full((2, 4, 3, 3), 5.0, dtype=np.float32))
        gamma = Tensor(np.ones(4, dtype=np.float32))
        beta = Tensor(np.zeros(4, dtype=np.float32))
        out = ad.group_norm(x, 2, gamma, beta, eps=1e-5)
        np.testing.assert_allclose(out.data, 0.0, atol=1e-6)

    def test_standardizes_per_group(self):
        rng = stream(4, "gn")
        x = Tensor(rng.standard_normal((3, 6, 4, 4)).astype(np.float32) * 3 + 1)
        gamma = Tensor(np.ones(6, dtype=np.float32))
        beta = Tensor(np.zeros(6, dtype=np.float32))
        out = ad.group_norm(x, 3, gamma, beta, eps=1e-6).data
        grouped = out.reshape(3, 3, -1)
        np.testing.assert_allclose(grouped.mean(axis=2), 0.0, atol=1e-5)
        np.testing.assert_allclose(grouped.var(axis=2), 1.0, atol=1e-3)

    def test_two_point_standardization(self):
        # [1, 3] in one group standardizes to [-1, 1] as eps -> 0
        x = Tensor(np.array([1.0, 3.0], dtype=np.float64).reshape(1, 1, 1, 2))
        gamma = Tensor(np.ones(1))
        beta = Tensor(np.zeros(1))
        out = ad.group_norm(x, 1, gamma, beta, eps=1e-12).data
        np.testing.assert_allclose(out.reshape(2), [-1.0, 1.0], atol=1e-5)

    def test_indivisible_groups_rejected(self):
        x = Tensor(np.zeros((1, 6, 2, 2), dtype=np.float32))
        with pytest.raises(ConfigError):
            ad.group_norm(x, 4, Tensor(np.ones(6)), Tensor(np.zeros(6)))


class TestTimeEmbedding:
    def test_t_zero(self):
        out = ad.time_embedding(0, 4).data
        np.testing.assert_allclose(out, [0.0, 0.0, 1.0, 1.0], atol=1e-7)

    def test_t_one_dim_two(self):
        out = ad.time_embedding(1, 2).data
        np.testing.assert_allclose(out, [np.sin(1.0), np.cos(1.0)], rtol=1e-6)

    def test_unit_range(self):
        out = ad.time_embedding(np.arange(0, 1001), 32).data
        assert out.min() >= -1.0 and out.max() <= 1.0

    def test_pairwise_distinct_over_full_range(self):
        # brute force: all 1001 timesteps embed to distinct vectors
        out = ad.time_embedding(np.arange(0, 1001), 2).data
        assert np.unique(out, axis=0).shape[0] == 1001

    def test_odd_dim_rejected(self):
        with pytest.raises(ConfigError):
            ad.time_embedding(3, 5)


class TestBackward:
    def test_quadratic(self):
        x = Tensor(np.array([1.0, -2.0, 3.0], dtype=np.float32), requires_grad=True)
        loss = ad.reduce_sum(ad.mul(x, x))
        loss.backward()
        np.testing.assert_allclose(x.grad, 2 * x.data, rtol=1e-6)

    def test_mse_derivative(self):
        a = Tensor(np.array([1.0, 2.0, 3.0, 4.0], dtype=np.float32), requires_grad=True)
        b = Tensor(np.array([0.0, 1.0, 1.0, 1.0], dtype=np.float32))
        d = ad.sub(a, b)
        loss = ad.reduce_mean(ad.mul(d, d))
        loss.backward()
        np.testing.assert_allclose(a.grad, 2 * (a.data - b.data) / 4, rtol=1e-6)

    def test_non_scalar_rejected(self):
        x = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
        with pytest.raises(UsageError):
            x.backward()

    def test_repeat_backward_accumulates(self):
        x = Tensor(np.array([2.0], dtype=np.float32), requires_grad=True)
        loss = ad.reduce_sum(ad.mul(x, x))
        loss.backward()
        loss.backward()
        np.testing.assert_allclose(x.grad, [8.0])  # twice 2x

    def test_composite_pipeline_matches_finite_differences(self):
        rng = stream(9, "pipeline")
        x = Tensor(rng.standard_normal((1, 2, 4, 4)), requires_grad=True)
        k = Tensor(rng.standard_normal((4, 2, 3, 3)), requires_grad=True)
        b = Tensor(rng.standard_normal(4), requires_grad=True)
        gamma = Tensor(np.ones(4), requires_grad=True)
        beta = Tensor(np.zeros(4), requires_grad=True)

        def pipeline(x, k, b, gamma, beta):
            h = ad.conv2d(x, k, b, stride=1, padding=1)
            h = ad.group_norm(h, 2, gamma, beta)
            return ad.reduce_mean(ad.silu(h))

        err = finite_difference_check(pipeline, [x, k, b, gamma, beta], rng)
        assert err <= 1e-3


class TestEngineInvariants:
    @pytest.mark.parametrize("seed", range(20))
    def test_every_op_passes_gradient_checks(self, seed):
        results = op_gradient_checks(seed)
        failing = {k: v for k, v in results.items() if v > OP_TOLERANCE}
        assert not failing

    def test_forward_determinism(self):
        rng = stream(11, "det")
        x = rng.standard_normal((2, 3, 6, 6)).astype(np.float32)
        k = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
        outs = [ad.conv2d(Tensor(x), Tensor(k), None, 1, 1).data for _ in range(2)]
        assert np.array_equal(outs[0], outs[1])

    def test_finite_outputs_from_finite_inputs(self):
        rng = stream(12, "finite")
        x = Tensor((rng.standard_normal((2, 4, 4, 4)) * 50).astype(np.float32))
        gamma = Tensor(np.ones(4, dtype=np.float32))
        beta = Tensor(np.zeros(4, dtype=np.float32))
        for out in (
            ad.silu(x), ad.sigmoid(x), ad.softmax(x, axis=-1),
            ad.group_norm(x, 2, gamma, beta),
        ):
            assert np.all(np.isfinite(out.data))


class TestAdam:
    def _scalar_params(self, value=1.0):
        return {"w": Tensor(np.array([value], dtype=np.float32), requires_grad=True)}

    def test_zero_gradient_keeps_params(self):
        params = self._scalar_params()
        state = AdamState.initial(params)
        adam_step(params, {"w": np.zeros(1, dtype=np.float32)}, state)
        np.testing.assert_array_equal(params["w"].data, [1.0])
        assert state.step_count == 1

    def test_first_step_magnitude(self):
        # bias correction at t=1: delta = -lr * g / (sqrt(g^2) + eps)
        params = self._scalar_params(0.0)
        state = AdamState.initial(params, AdamHyper(learning_rate=1e-4))
        adam_step(params, {"w": np.array([0.5], dtype=np.float32)}, state)
        np.testing.assert_allclose(params["w"].data, [-1e-4], rtol=1e-4)

    def test_constant_gradient_moves_monotonically(self):
        params = self._scalar_params(0.0)
        state = AdamState.initial(params, AdamHyper(learning_rate=1e-3))
        g = {"w": np.array([0.7], dtype=np.float32)}
        values = [float(params["w"].data[0])]
        for _ in range(3):
            adam_step(params, g, state)
            values.append(float(params["w"].data[0]))
        assert values[0] > values[1] > values[2] > values[3]
        assert np.all(state.second_moment["w"] >= 0)

    def test_shape_mismatch_rejected(self):
        params = self._scalar_params()
        state = AdamState.initial(params)
        with pytest.raises(ShapeError):
            adam_step(params, {"w": np.zeros(2, dtype=np.float32)}, state)

    def test_step_count_increments_by_one(self):
        params = self._scalar_params()
        state = AdamState.initial(params)
        for expected in (1, 2, 3):
            adam_step(params, {"w": np.array([0.1], dtype=np.float32)}, state)
            assert state.step_count == expected
