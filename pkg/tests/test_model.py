import numpy as np
import pytest

from memetector import autograd as ag
from memetector import model as vm
from memetector.autograd import Tensor
from memetector.model import REFERENCE_CONFIG, TOY_CONFIG, ViTaConfig, ViTaParams

from conftest import central_difference, relative_error


def zero_params(config, dtype=np.float64):
    params = ViTaParams.init(config, seed=0, dtype=dtype)
    for t in params:
        t.data[...] = 0
    return params


class TestConfig:
    def test_reference_config(self):
        assert REFERENCE_CONFIG.num_patches == 100
        assert REFERENCE_CONFIG.context_dim == 256

    def test_indivisible(self):
        with pytest.raises(vm.ConfigError):
            ViTaConfig(height=11, width=10, patch=5)
        with pytest.raises(vm.ConfigError):
            ViTaConfig(dim=10, heads=4)


class TestPatchify:
    def test_reference_shape(self):
        assert vm.patchify(np.zeros((250, 250, 3)), 25).shape == (100, 1875)

    def test_unit_patches(self):
        out = vm.patchify(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(2, 2, 1), 1)
        np.testing.assert_array_equal(out.data, [[1], [2], [3], [4]])

    def test_row_major_within_patch(self):
        x = np.arange(4 * 4 * 2, dtype=float).reshape(4, 4, 2)
        out = vm.patchify(x, 2).data
        np.testing.assert_array_equal(out[1], x[0:2, 2:4].reshape(-1))
        np.testing.assert_array_equal(out[2], x[2:4, 0:2].reshape(-1))

    def test_constant_image(self):
        out = vm.patchify(np.full((10, 10, 3), 0.3), 5).data
        assert np.all(out == out[0])

    def test_indivisible(self):
        with pytest.raises(vm.ConfigError):
            vm.patchify(np.zeros((7, 10, 3)), 5)


class TestEmbed:
    def test_zero_projection(self):
        params = zero_params(TOY_CONFIG)
        params["cls_token"].data[:] = np.arange(8)
        z = vm.embed(params, Tensor(np.random.default_rng(0).standard_normal((2, 4, 75)))).data
        np.testing.assert_array_equal(z[:, 1:], 0)
        np.testing.assert_array_equal(z[:, 0], np.tile(np.arange(8.0), (2, 1)))

    def test_reference_shape(self):
        params = ViTaParams.init(REFERENCE_CONFIG, seed=0)
        assert vm.embed(params, Tensor(np.zeros((1, 100, 1875)))).shape == (1, 101, 64)

    def test_position_embedding_is_additive(self, rng):
        params = ViTaParams.init(TOY_CONFIG, seed=0, dtype=np.float64)
        patches = Tensor(rng.standard_normal((1, 4, 75)), dtype=np.float64)
        with_pos = vm.embed(params, patches).data
        pos = params["pos_embed"].data.copy()
        params["pos_embed"].data[...] = 0
        np.testing.assert_allclose(with_pos - vm.embed(params, patches).data, pos[None])


class TestEncoder:
    def test_zero_weights_fixed_point(self, rng):
        params = zero_params(TOY_CONFIG)
        z = Tensor(rng.standard_normal((2, 5, 8)), dtype=np.float64)
        mid, out = vm.encoder_layer(params, z, 1)
        np.testing.assert_array_equal(out.data, z.data)
        assert out.shape == z.shape == mid.shape

    def test_multi_head_block_diagonal_equivalence(self, rng):
        d, h = 3, 2
        single = ViTaParams.init(ViTaConfig(height=2, width=2, channels=1, patch=1, dim=d, depth=1, heads=1),
                                 seed=1, dtype=np.float64)
        multi = ViTaParams.init(ViTaConfig(height=2, width=2, channels=1, patch=1, dim=d * h, depth=1, heads=h),
                                seed=2, dtype=np.float64)
        for proj in ("query", "key", "value", "out"):
            w = single[f"layer1.attn.{proj}.weight"].data
            b = single[f"layer1.attn.{proj}.bias"].data
            multi[f"layer1.attn.{proj}.weight"].data[...] = np.kron(np.eye(h), w)
            multi[f"layer1.attn.{proj}.bias"].data[...] = np.tile(b, h)
        x = rng.standard_normal((2, 5, d))
        one = vm.multi_head_attention(Tensor(x, dtype=np.float64), single, "layer1.attn.", 1).data
        many = vm.multi_head_attention(Tensor(np.tile(x, h), dtype=np.float64), multi, "layer1.attn.", h).data
        np.testing.assert_allclose(many, np.tile(one, h), atol=1e-5)


class TestSummary:
    def test_constant_class_token(self):
        params = ViTaParams.init(TOY_CONFIG, seed=0, dtype=np.float64)
        z = np.zeros((1, 5, 8))
        z[:, 0] = 2.0
        np.testing.assert_allclose(vm.summary(params, Tensor(z, dtype=np.float64)).data, 0, atol=1e-6)

    def test_gain_zero_gives_bias(self, rng):
        params = ViTaParams.init(TOY_CONFIG, seed=0, dtype=np.float64)
        params["final_ln.gain"].data[...] = 0
        params["final_ln.bias"].data[...] = np.arange(8)
        y = vm.summary(params, Tensor(rng.standard_normal((3, 5, 8)), dtype=np.float64)).data
        np.testing.assert_array_equal(y, np.tile(np.arange(8.0), (3, 1)))

    def test_reference_shape(self, rng):
        params = ViTaParams.init(REFERENCE_CONFIG, seed=0)
        assert vm.summary(params, Tensor(rng.standard_normal((1, 101, 64)))).shape == (1, 64)


@pytest.mark.parametrize("depth,expected", [(8, [1, 3, 5, 7]), (3, [1, 3]), (1, [1]), (2, [1]), (7, [1, 3, 5, 7])])
def test_attended_layers(depth, expected):
    assert vm.attended_layers(depth) == expected


class TestAttentionContext:
    def test_zero_v_is_uniform_average(self, rng):
        z = {1: Tensor(rng.standard_normal((2, 6, 4))), 3: Tensor(rng.standard_normal((2, 6, 4)))}
        ctx = vm.attention_context(Tensor(rng.standard_normal((2, 4))), z, Tensor(np.zeros(8)))
        for l in (1, 3):
            np.testing.assert_allclose(ctx.weights[l].data, 1 / 6, rtol=1e-6)
            np.testing.assert_allclose(ctx.contexts[l].data, z[l].data.mean(axis=1), rtol=1e-5, atol=1e-6)
        np.testing.assert_allclose(ctx.context.data[:, 4:], ctx.contexts[3].data)

    def test_scores_use_summary_then_patch(self, rng):
        y = rng.standard_normal((1, 4))
        z = rng.standard_normal((1, 3, 4))
        v = rng.standard_normal(8)
        ctx = vm.attention_context(Tensor(y, dtype=np.float64), {1: Tensor(z, dtype=np.float64)},
                                   Tensor(v, dtype=np.float64))
        expected = [v @ np.concatenate([y[0], z[0, i]]) for i in range(3)]
        np.testing.assert_allclose(ctx.scores[1].data[0], expected)

    def test_weights_sum_to_one(self, rng):
        z = {l: Tensor(rng.standard_normal((3, 10, 8)) * 5) for l in (1, 3, 5)}
        ctx = vm.attention_context(Tensor(rng.standard_normal((3, 8))), z, Tensor(rng.standard_normal(16)))
        for a in ctx.weights.values():
            np.testing.assert_allclose(a.data.sum(axis=-1), 1.0, atol=1e-6)
        assert ctx.context.shape == (3, 24)


class TestClassify:
    def test_zero_weights(self):
        params = zero_params(TOY_CONFIG)
        assert vm.classify(params, Tensor(np.ones((1, 8)), dtype=np.float64)).data[0] == 0.5

    def test_range(self, rng):
        params = ViTaParams.init(TOY_CONFIG, seed=0)
        p = vm.classify(params, Tensor(rng.standard_normal((16, 8)) * 10)).data
        assert np.all((p > 0) & (p < 1))

    def test_vit_head_shape(self):
        shapes = vm.parameter_shapes(REFERENCE_CONFIG.replace(variant="vit"))
        assert shapes["head.w1"] == (2048, 64)
        assert "attention.v" not in shapes


class TestForward:
    def test_deterministic_scalar_probability(self, rng):
        params = ViTaParams.init(TOY_CONFIG, seed=0)
        x = rng.standard_normal((10, 10, 3)).astype(np.float32)
        a, b = vm.forward(params, x), vm.forward(params, x)
        assert a.prob.shape == (1,)
        assert a.prob.data.tobytes() == b.prob.data.tobytes()
        assert sorted(a.attention) == [1]

    def test_vit_variant_has_no_attention(self, rng):
        params = ViTaParams.init(TOY_CONFIG.replace(variant="vit"), seed=0)
        out = vm.forward(params, rng.standard_normal((2, 10, 10, 3)))
        assert out.attention == {} and out.prob.shape == (2,)

    def test_wrong_input_shape(self):
        with pytest.raises(vm.ConfigError):
            vm.forward(ViTaParams.init(TOY_CONFIG, seed=0), np.zeros((1, 20, 20, 3)))

    def test_vit_and_vita_share_encoder(self, rng):
        vita = ViTaParams.init(TOY_CONFIG, seed=3, dtype=np.float64)
        vit = ViTaParams.init(TOY_CONFIG.replace(variant="vit"), seed=4, dtype=np.float64)
        for name, t in vit.items():
            if not name.startswith("head."):
                t.data[...] = vita[name].data
        x = rng.standard_normal((2, 10, 10, 3))
        a, b = vm.forward(vita, x), vm.forward(vit, x)
        for za, zb in zip(a.layers, b.layers):
            np.testing.assert_array_equal(za.data, zb.data)
        np.testing.assert_array_equal(a.y.data, b.y.data)

    def test_patch_permutation_invariance(self, rng):
        config = ViTaConfig(height=15, width=15, channels=3, patch=5, dim=8, depth=3, heads=2)
        params = ViTaParams.init(config, seed=0, dtype=np.float64)
        patches = rng.standard_normal((2, 9, 75))
        perm = rng.permutation(9)
        before = vm.forward_patches(params, Tensor(patches, dtype=np.float64))
        params["pos_embed"].data[1:] = params["pos_embed"].data[1:][perm]
        after = vm.forward_patches(params, Tensor(patches[:, perm], dtype=np.float64))
        np.testing.assert_allclose(after.prob.data, before.prob.data, rtol=1e-10)
        for l in before.attention:
            np.testing.assert_allclose(after.attention[l], before.attention[l][:, perm], rtol=1e-9)

    def test_every_group_gets_nonzero_gradient(self, rng):
        with ag.precision(np.float64):
            params = ViTaParams.init(TOY_CONFIG, seed=0)
            x = rng.standard_normal((4, 10, 10, 3))
            ag.bce_loss(vm.forward(params, x).prob, np.array([1.0, 0, 1, 0])).backward()
        for name, t in params.items():
            assert t.grad is not None and np.abs(t.grad).max() > 0, name

    def test_spot_check_against_finite_differences(self, rng):
        with ag.precision(np.float64):
            params = ViTaParams.init(TOY_CONFIG, seed=1)
            x = rng.standard_normal((3, 10, 10, 3))
            target = np.array([1.0, 0.0, 1.0])

            def loss():
                return float(ag.bce_loss(vm.forward(params, x).prob, target).data)

            ag.bce_loss(vm.forward(params, x).prob, target).backward()
            for name in ("attention.v", "head.w3", "layer2.attn.key.weight", "patch.bias"):
                t = params[name]
                idx = tuple(rng.integers(s) for s in t.shape)
                num = central_difference(loss, t.data, idx)
                assert relative_error(t.grad[idx], num) < 1e-4, name

    def test_reference_config_gradients_finite(self, rng):
        params = ViTaParams.init(REFERENCE_CONFIG, seed=0)
        x = rng.standard_normal((2, 250, 250, 3)).astype(np.float32)
        ag.bce_loss(vm.forward(params, x).prob, np.array([1.0, 0.0])).backward()
        assert all(np.all(np.isfinite(t.grad)) for t in params)


class TestParamCount:
    def test_reference_config(self):
        assert vm.param_count(REFERENCE_CONFIG) == 3_017_088
        assert vm.param_count(REFERENCE_CONFIG) == ViTaParams.init(REFERENCE_CONFIG, seed=0).count()

    def test_head_w1_scales_with_dim(self):
        small = vm.parameter_shapes(TOY_CONFIG)["head.w1"]
        big = vm.parameter_shapes(TOY_CONFIG.replace(dim=16))["head.w1"]
        assert np.prod(big) == 2 * np.prod(small)

    def test_vit_difference(self):
        d, d_ctx = REFERENCE_CONFIG.dim, REFERENCE_CONFIG.context_dim
        diff = vm.param_count(REFERENCE_CONFIG) - vm.param_count(REFERENCE_CONFIG.replace(variant="vit"))
        assert diff == 2 * d + (d_ctx - d) * 2048
