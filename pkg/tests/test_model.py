import numpy as np
import pytest
from scipy.special import erf

from cellcount import autodiff as ad
from cellcount import model as mdl
from cellcount.errors import ParameterError, ShapeError
from cellcount.imaging import GrayImage

from _oracles import finite_difference_gradient, max_relative_error

TINY = mdl.ModelConfig(
    input_size=32,
    patch_size=16,
    embed_dim=16,
    encoder_depth=1,
    num_heads=2,
    feature_dim=8,
    head_channels=(4,),
)


def random_image(size, seed=0):
    rng = np.random.default_rng(seed)
    return GrayImage(rng.uniform(0, 1, (size, size)))


class TestConfig:
    def test_grid_arithmetic(self):
        cfg = mdl.ModelConfig()
        assert cfg.grid_size == 14
        assert cfg.num_tokens == 196
        assert cfg.head_depth == 3

    def test_indivisible_input_rejected(self):
        with pytest.raises(ParameterError):
            mdl.ModelConfig(input_size=100, patch_size=16)

    def test_heads_must_divide_embed(self):
        with pytest.raises(ParameterError):
            mdl.ModelConfig(embed_dim=30, num_heads=4)

    def test_head_widths_for_depth(self):
        assert mdl.head_channels_for_depth(1) == ()
        assert mdl.head_channels_for_depth(2) == (128,)
        assert mdl.head_channels_for_depth(3) == (128, 64)


class TestPatchify:
    def test_token_grid_arithmetic(self):
        tokens = mdl.patchify(random_image(64, seed=1), 16)
        assert tokens.shape == (16, 256)

    def test_constant_image_gives_identical_tokens(self):
        tokens = mdl.patchify(GrayImage(np.full((32, 32), 0.7)), 16)
        assert np.all(tokens == tokens[0])

    def test_unpatchify_inverts(self):
        img = random_image(48, seed=2)
        tokens = mdl.patchify(img, 16)
        back = mdl.unpatchify(tokens, 16, 48, 48)
        np.testing.assert_array_equal(back.pixels, img.pixels)

    def test_indivisible_image_rejected(self):
        with pytest.raises(ShapeError):
            mdl.patchify(GrayImage(np.zeros((30, 30))), 16)


class TestEncode:
    def test_feature_map_shape(self):
        cfg = mdl.ModelConfig(
            input_size=224, patch_size=16, embed_dim=32, encoder_depth=1,
            num_heads=2, feature_dim=256, head_channels=(),
        )
        model = mdl.DensityModel(cfg, seed=0)
        tokens = mdl.patchify(random_image(224, seed=3), 16)
        assert model.encode(tokens).shape == (14, 14, 256)

    def test_token_count_mismatch_rejected(self):
        model = mdl.DensityModel(TINY, seed=0)
        with pytest.raises(ShapeError):
            model.encode_tokens(np.zeros((5, 256)))

    def test_depth_zero_locality(self):
        # Without attention, zeroing one patch can only change its own cell.
        cfg = mdl.ModelConfig(
            input_size=32, patch_size=16, embed_dim=16, encoder_depth=0,
            num_heads=2, feature_dim=8, head_channels=(),
        )
        model = mdl.DensityModel(cfg, seed=1)
        tokens = mdl.patchify(random_image(32, seed=4), 16)
        base = model.encode_tokens(tokens).data
        poked = tokens.copy()
        poked[2] = 0.0
        changed = model.encode_tokens(poked).data
        diffs = np.abs(changed - base).sum(axis=1)
        assert diffs[2] > 0
        assert diffs[[0, 1, 3]].max() == 0.0

    def test_forward_matches_straight_line_reimplementation(self):
        model = mdl.DensityModel(TINY, seed=5)
        tokens = mdl.patchify(random_image(32, seed=6), 16)
        out = model.forward_tokens(tokens).data.reshape(2, 2)
        np.testing.assert_allclose(out, reference_forward(model, tokens), atol=1e-12)


def reference_forward(model, tokens):
    """Plain-numpy re-implementation of the density forward pass."""
    p = {k: t.data for k, t in model.params.items()}
    cfg = model.config

    def ln(x, gain, bias):
        mu = x.mean(-1, keepdims=True)
        var = x.var(-1, keepdims=True)
        return (x - mu) / np.sqrt(var + 1e-12) * gain + bias

    def gelu(x):
        return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))

    x = tokens @ p["patch_embed.weight"] + p["patch_embed.bias"] + p["pos_embed"]
    dim_head = cfg.embed_dim // cfg.num_heads
    for i in range(cfg.encoder_depth):
        pre = f"blocks.{i}."
        h = ln(x, p[pre + "ln1.gain"], p[pre + "ln1.bias"])
        q = h @ p[pre + "attn.wq"] + p[pre + "attn.bq"]
        k = h @ p[pre + "attn.wk"] + p[pre + "attn.bk"]
        v = h @ p[pre + "attn.wv"] + p[pre + "attn.bv"]
        outs = []
        for head in range(cfg.num_heads):
            sl = slice(head * dim_head, (head + 1) * dim_head)
            scores = q[:, sl] @ k[:, sl].T / np.sqrt(dim_head)
            weights = np.exp(scores - scores.max(-1, keepdims=True))
            weights /= weights.sum(-1, keepdims=True)
            outs.append(weights @ v[:, sl])
        x = x + (np.concatenate(outs, axis=1) @ p[pre + "attn.wo"] + p[pre + "attn.bo"])
        h2 = ln(x, p[pre + "ln2.gain"], p[pre + "ln2.bias"])
        x = x + (gelu(h2 @ p[pre + "mlp.w1"] + p[pre + "mlp.b1"]) @ p[pre + "mlp.w2"] + p[pre + "mlp.b2"])
    x = ln(x, p["final_norm.gain"], p["final_norm.bias"])
    y = x @ p["neck.weight"] + p["neck.bias"]
    for j in range(cfg.head_depth):
        y = y @ p[f"head.{j}.weight"] + p[f"head.{j}.bias"]
        if j < cfg.head_depth - 1:
            y = np.maximum(y, 0.0)
    return y.reshape(cfg.grid_size, cfg.grid_size)


class TestDensityHead:
    @pytest.mark.parametrize(
        "channels,expected",
        [((), 257), ((128,), 33025), ((128, 64), 41217)],
    )
    def test_head_parameter_counts(self, channels, expected):
        cfg = mdl.ModelConfig(
            input_size=32, patch_size=16, embed_dim=16, encoder_depth=1,
            num_heads=2, feature_dim=256, head_channels=channels,
        )
        assert mdl.count_parameters(cfg)["head"] == expected
        model = mdl.DensityModel(cfg, seed=0)
        assert model.param_counts()["head"] == expected

    def test_full_scale_encoder_count(self):
        counts = mdl.count_parameters(mdl.ModelConfig())
        assert abs(counts["encoder"] - 89.7e6) <= 0.05 * 89.7e6

    def test_wrong_channel_count_rejected(self):
        model = mdl.DensityModel(TINY, seed=0)
        with pytest.raises(ShapeError):
            model.density_head(ad.Tensor(np.zeros((2, 2, 5))))

    def test_output_grid_shape(self):
        for size, patch in ((32, 16), (48, 16), (64, 8)):
            cfg = mdl.ModelConfig(
                input_size=size, patch_size=patch, embed_dim=16, encoder_depth=1,
                num_heads=2, feature_dim=8, head_channels=(4,),
            )
            model = mdl.DensityModel(cfg, seed=0)
            out = model.forward(random_image(size, seed=7))
            assert out.shape == (size // patch, size // patch, 1)


class TestPredictCount:
    def test_zeroed_head_predicts_zero(self):
        model = mdl.DensityModel(TINY, seed=8)
        last = model.config.head_depth - 1
        model.params[f"head.{last}.weight"].data[:] = 0.0
        model.params[f"head.{last}.bias"].data[:] = 0.0
        assert model.predict_count(random_image(32, seed=9)) == 0.0

    def test_count_equals_map_total(self):
        model = mdl.DensityModel(TINY, seed=10)
        img = random_image(32, seed=11)
        assert model.predict_count(img) == model.predict_density(img).total()


class TestFreezing:
    def test_frozen_trainable_equals_head_count(self):
        model = mdl.DensityModel(TINY, seed=12)
        mdl.set_trainable(model, encoder=False)
        counts = model.param_counts()
        assert counts["trainable"] == counts["head"]
        mdl.set_trainable(model, encoder=True)
        assert model.param_counts()["trainable"] == counts["total"]

    def test_frozen_encoder_receives_no_gradients(self):
        model = mdl.DensityModel(TINY, seed=13)
        mdl.set_trainable(model, encoder=False)
        tokens = mdl.patchify(random_image(32, seed=14), 16)
        with ad.Tape():
            out = model.forward_tokens(tokens)
            loss = ad.mse_loss(out, ad.Tensor(np.zeros(out.shape)))
            ad.backward(loss)
        assert all(t.grad is None for t in model.encoder_parameters().values())
        assert all(t.grad is not None for t in model.head_parameters().values())


class TestDeterminism:
    def test_same_seed_same_init_and_forward(self):
        a = mdl.DensityModel(TINY, seed=21)
        b = mdl.DensityModel(TINY, seed=21)
        for name in a.params:
            assert np.array_equal(a.params[name].data, b.params[name].data)
        img = random_image(32, seed=22)
        assert a.predict_count(img) == b.predict_count(img)

    def test_different_seeds_differ(self):
        a = mdl.DensityModel(TINY, seed=23)
        b = mdl.DensityModel(TINY, seed=24)
        assert not np.array_equal(a.params["patch_embed.weight"].data, b.params["patch_embed.weight"].data)


class TestRegressionModel:
    def test_output_clamped_non_negative(self):
        model = mdl.RegressionModel(TINY, seed=25)
        # Force a configuration that would otherwise predict negative.
        model.params["reg_head.bias"].data[:] = -100.0
        assert model.predict_count(random_image(32, seed=26)) == 0.0

    def test_scalar_differentiable_output(self):
        model = mdl.RegressionModel(TINY, seed=27)
        tokens = mdl.patchify(random_image(32, seed=28), 16)
        model.params["reg_head.bias"].data[:] = 1.0  # keep the ReLU active
        with ad.Tape():
            out = model.forward_tokens(tokens)
            assert out.shape == ()
            ad.backward(out)
        assert model.params["reg_head.weight"].grad is not None


def model_gradient_check(model, tokens, target, tol=1e-4):
    """Full-model finite-difference check over every trainable parameter."""
    with ad.Tape():
        loss = ad.mse_loss(model.forward_tokens(tokens), ad.Tensor(target))
        ad.backward(loss)

    def loss_fn(_):
        out = model.forward_tokens(tokens)
        return float(np.mean((out.data - target) ** 2))

    worst = 0.0
    for name, tensor in model.trainable_parameters().items():
        numeric = finite_difference_gradient(lambda _: loss_fn(None), tensor.data)
        err = max_relative_error(tensor.grad, numeric)
        worst = max(worst, err)
        assert err < tol, f"gradient mismatch for {name}: rel err {err:.3g}"
    return worst


class TestFullModelGradients:
    def test_density_model_matches_finite_differences(self):
        model = mdl.DensityModel(TINY, seed=31)
        rng = np.random.default_rng(32)
        tokens = rng.uniform(0, 1, (4, 256))
        target = rng.uniform(0, 1, (2, 2, 1))
        model_gradient_check(model, tokens, target)
