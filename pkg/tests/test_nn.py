"""Model-level tests: geometry, determinism, attention, parameter counts."""

import numpy as np
import pytest

from bubblekd import tensor as T
from bubblekd.errors import ConfigError, ShapeError
from bubblekd.nn import (
    CNN,
    CNNConfig,
    CNNStage,
    Linear,
    Model,
    ViT,
    ViTConfig,
    multi_head_attention,
    param_count,
)

from fd_oracle import grad_close, numeric_grad


def tiny_vit_cfg(**kw):
    base = dict(image_size=16, cell_size=8, embed_dim=8, num_layers=2,
                num_heads=2, mlp_ratio=2.0, num_classes=2, dropout_p=0.0)
    base.update(kw)
    return ViTConfig(**base)


class TestViTConfig:
    def test_token_count_224(self):
        cfg = ViTConfig(image_size=224, cell_size=16, embed_dim=192, num_layers=12, num_heads=3)
        assert cfg.num_tokens == 197

    def test_token_count_32(self):
        assert ViTConfig(image_size=32, cell_size=8).num_tokens == 17

    def test_indivisible_image_rejected(self):
        with pytest.raises(ConfigError):
            ViTConfig(image_size=30, cell_size=8)

    def test_indivisible_heads_rejected(self):
        with pytest.raises(ConfigError):
            ViTConfig(embed_dim=30, num_heads=4)

    @pytest.mark.parametrize("image,cell", [(32, 8), (64, 16), (224, 16), (48, 8)])
    def test_token_formula(self, image, cell):
        cfg = ViTConfig(image_size=image, cell_size=cell, embed_dim=16, num_heads=2)
        assert cfg.num_tokens == (image // cell) ** 2 + 1


class TestPatchEmbed:
    def test_shapes(self):
        model = ViT(tiny_vit_cfg(image_size=32, cell_size=8, embed_dim=12, num_heads=2))
        x = T.Tensor(np.zeros((2, 32, 32, 3), dtype=np.float32))
        out = model.patch_embed(x)
        assert out.shape == (2, 17, 12)

    def test_cell_permutation_moves_rows(self):
        cfg = tiny_vit_cfg(image_size=16, cell_size=8, embed_dim=6, num_heads=2)
        model = ViT(cfg, rng=np.random.default_rng(1))
        model.parameters()["pos"].data[:] = 0.0
        rng = np.random.default_rng(2)
        img = rng.normal(size=(16, 16, 3)).astype(np.float32)
        swapped = img.copy()
        swapped[:8, :8], swapped[:8, 8:] = img[:8, 8:].copy(), img[:8, :8].copy()
        a = model.patch_embed(T.Tensor(img)).data[0]
        b = model.patch_embed(T.Tensor(swapped)).data[0]
        # cells 0 and 1 swap; class token row 0 unchanged
        assert np.allclose(a[0], b[0])
        assert np.allclose(a[1], b[2]) and np.allclose(a[2], b[1])
        assert np.allclose(a[3:], b[3:])

    def test_wrong_size_rejected(self):
        model = ViT(tiny_vit_cfg())
        with pytest.raises(ShapeError):
            model(T.Tensor(np.zeros((1, 24, 24, 3), dtype=np.float32)))


def _attn_params(d, rng=None, identity=False):
    rng = rng or np.random.default_rng(0)
    mk = (lambda: np.eye(d, dtype=np.float64)) if identity else (
        lambda: rng.normal(scale=0.5, size=(d, d))
    )
    out = []
    for _ in range(4):
        out.append(T.Tensor(mk(), requires_grad=True))
        out.append(T.Tensor(np.zeros(d), requires_grad=True))
    return out


class TestAttention:
    def test_weights_rows_sum_to_one(self):
        rng = np.random.default_rng(3)
        tokens = T.Tensor(rng.normal(size=(5, 8)))
        _, attn = multi_head_attention(tokens, 2, *_attn_params(8, rng), return_weights=True)
        assert np.allclose(attn.data.sum(axis=-1), 1.0, atol=1e-6)

    def test_single_token_identity_projections(self):
        tokens = T.Tensor(np.array([[0.3, -1.2, 0.5, 2.0]]))
        out = multi_head_attention(tokens, 2, *_attn_params(4, identity=True))
        assert np.allclose(out.data, tokens.data, atol=1e-12)

    def test_permutation_equivariance_without_positions(self):
        rng = np.random.default_rng(4)
        tokens = rng.normal(size=(6, 8))
        params = _attn_params(8, rng)
        perm = np.array([3, 1, 5, 0, 2, 4])
        out = multi_head_attention(T.Tensor(tokens), 2, *params).data
        out_p = multi_head_attention(T.Tensor(tokens[perm]), 2, *params).data
        assert np.allclose(out[perm], out_p, atol=1e-10)

    def test_gradient_wrt_tokens(self):
        rng = np.random.default_rng(5)
        tokens_arr = rng.normal(size=(4, 8))
        params = _attn_params(8, rng)
        arrays = [p.data for p in params]
        tokens = T.Tensor(tokens_arr, requires_grad=True)
        T.tensor_sum(multi_head_attention(tokens, 2, *params)).backward()

        def np_fwd(tk):
            t = T.Tensor(tk)
            with_np = [T.Tensor(a) for a in arrays]
            return float(multi_head_attention(t, 2, *with_np).data.sum())

        assert grad_close(tokens.grad, numeric_grad(np_fwd, tokens_arr), 1e-3)

    def test_indivisible_heads_rejected(self):
        with pytest.raises(ConfigError):
            multi_head_attention(T.Tensor(np.zeros((3, 6))), 4, *_attn_params(6))


class TestViTForward:
    def test_logit_shape(self):
        model = ViT(ViTConfig(image_size=32, cell_size=8, embed_dim=16, num_layers=2, num_heads=2)).eval()
        x = T.Tensor(np.random.default_rng(0).normal(size=(4, 32, 32, 3)).astype(np.float32))
        assert model(x).shape == (4, 2)

    def test_eval_forward_deterministic(self):
        model = ViT(tiny_vit_cfg(dropout_p=0.3)).eval()
        x = T.Tensor(np.random.default_rng(1).normal(size=(2, 16, 16, 3)).astype(np.float32))
        a = model(x).data
        b = model(x).data
        assert np.array_equal(a, b)

    def test_zero_head_gives_uniform_softmax(self):
        model = ViT(tiny_vit_cfg()).eval()
        model.parameters()["head.w"].data[:] = 0.0
        model.parameters()["head.b"].data[:] = 0.0
        x = T.Tensor(np.random.default_rng(2).normal(size=(3, 16, 16, 3)).astype(np.float32))
        logits = model(x)
        assert np.allclose(logits.data, 0.0)
        assert np.allclose(T.softmax(logits, axis=-1).data, 0.5)

    def test_train_mode_dropout_changes_output(self):
        model = ViT(tiny_vit_cfg(dropout_p=0.5)).train()
        x = T.Tensor(np.random.default_rng(3).normal(size=(2, 16, 16, 3)).astype(np.float32))
        a = model(x, rng=np.random.default_rng(10)).data
        b = model(x, rng=np.random.default_rng(11)).data
        assert not np.allclose(a, b)


class TestCNNForward:
    def test_logit_shape(self):
        model = CNN(CNNConfig()).eval()
        x = T.Tensor(np.random.default_rng(0).normal(size=(4, 32, 32, 3)).astype(np.float32))
        assert model(x).shape == (4, 2)

    def test_zero_input_zero_bias_gives_zero_logits(self):
        model = CNN(CNNConfig()).eval()
        x = T.Tensor(np.zeros((2, 32, 32, 3), dtype=np.float32))
        assert np.allclose(model(x).data, 0.0)

    def test_first_layer_weight_gradient(self):
        cfg = CNNConfig(image_size=8, stages=(CNNStage(4, pool=2),), fc_hidden=(8,))
        model = CNN(cfg, rng=np.random.default_rng(7), dtype=np.float64).eval()
        x_arr = np.random.default_rng(8).normal(size=(2, 8, 8, 3))
        w0 = model.parameters()["stages.0.conv.w"]
        w0_arr = w0.data.copy()

        model.zero_grad()
        T.tensor_sum(model(T.Tensor(x_arr))).backward()

        def np_fwd(k):
            w0.data = k
            with T.no_grad():
                out = model(T.Tensor(x_arr))
            return float(out.data.sum())

        num = numeric_grad(np_fwd, w0_arr)
        w0.data = w0_arr
        assert grad_close(w0.grad, num, 1e-3)

    def test_bad_input_extent(self):
        model = CNN(CNNConfig())
        with pytest.raises(ShapeError):
            model(T.Tensor(np.zeros((1, 16, 16, 3), dtype=np.float32)))

    def test_bad_stage_geometry_rejected(self):
        with pytest.raises(ConfigError):
            CNNConfig(image_size=10, stages=(CNNStage(8, pool=4),))


class TestParamCount:
    def test_linear_with_bias(self):
        assert param_count(Linear(2, 3)) == 9

    def test_tiny_vit_matches_enumeration(self):
        cfg = ViTConfig(image_size=32, cell_size=8, embed_dim=64, num_layers=4,
                        num_heads=4, mlp_ratio=4.0, num_classes=2)
        model = ViT(cfg)
        d, m, tokens = 64, 256, 17
        embed = (8 * 8 * 3) * d + d
        cls_pos = d + tokens * d
        block = 2 * d + 4 * (d * d + d) + 2 * d + (d * m + m) + (m * d + d)
        head = 2 * d + (d * 2 + 2)
        assert param_count(model) == embed + cls_pos + 4 * block + head

    def test_vit_tiny_preset_near_5_52m(self):
        cfg = ViTConfig(image_size=224, cell_size=16, embed_dim=192, num_layers=12,
                        num_heads=3, mlp_ratio=4.0, num_classes=2, dropout_p=0.0)
        count = param_count(ViT(cfg))
        assert abs(count - 5_520_000) / 5_520_000 < 0.03


class TestModeFlags:
    def test_set_dropout_validates(self):
        model = ViT(tiny_vit_cfg())
        model.set_dropout(0.25)
        assert model.dropout_p == 0.25
        with pytest.raises(ConfigError):
            model.set_dropout(1.0)

    def test_train_eval_chainable(self):
        model = CNN(CNNConfig())
        assert model.eval().training is False
        assert model.train().training is True
