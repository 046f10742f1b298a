"""Patch-transformer density estimator and the scalar-regression baseline.

The encoder is a standard pre-norm vision transformer over non-overlapping
P x P patches of a single-channel image, followed by a linear neck that
projects tokens to ``feature_dim`` channels and a spatial reshape to the
(H/P, W/P) grid. The density head is a stack of per-cell linear layers
(1x1 convolutions) with ReLU between them and a single output channel;
the raw output is summed to produce the predicted count. Weights are
seeded random; there is no pretrained import.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .errors import ParameterError, ShapeError
from .imaging import DensityMap, GrayImage

INIT_STD = 0.02


@dataclass
class ModelConfig:
    input_size: int = 224
    patch_size: int = 16
    embed_dim: int = 768
    encoder_depth: int = 12
    num_heads: int = 12
    feature_dim: int = 256  # channels after the encoder neck
    head_channels: tuple[int, ...] = (128, 64)
    encoder_trainable: bool = True

    def __post_init__(self):
        self.head_channels = tuple(int(c) for c in self.head_channels)
        if self.input_size < 1 or self.patch_size < 1:
            raise ParameterError(f"input/patch sizes must be positive, got {self.input_size}/{self.patch_size}")
        if self.input_size % self.patch_size != 0:
            raise ParameterError(
                f"input size {self.input_size} is not divisible by patch size {self.patch_size}"
            )
        if self.encoder_depth < 0:
            raise ParameterError(f"encoder depth must be >= 0, got {self.encoder_depth}")
        if self.embed_dim < 1 or self.embed_dim % self.num_heads != 0:
            raise ParameterError(
                f"embed dim {self.embed_dim} must be a positive multiple of num_heads {self.num_heads}"
            )
        if any(c < 1 for c in self.head_channels):
            raise ParameterError(f"head channels must be positive, got {self.head_channels}")

    @property
    def grid_size(self) -> int:
        return self.input_size // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid_size * self.grid_size

    @property
    def head_depth(self) -> int:
        return len(self.head_channels) + 1


def head_channels_for_depth(depth: int, feature_dim: int = 256) -> tuple[int, ...]:
    """Canonical head widths: halve the channel count per extra layer."""
    if depth < 1:
        raise ParameterError(f"head depth must be >= 1, got {depth}")
    return tuple(feature_dim // 2 ** (i + 1) for i in range(depth - 1))


def patchify(img: GrayImage, patch_size: int) -> np.ndarray:
    """Row-major (top-left to bottom-right) patch tokens, each flattened row-major."""
    h, w = img.height, img.width
    if h % patch_size or w % patch_size:
        raise ShapeError(f"image {w}x{h} is not divisible into {patch_size}x{patch_size} patches")
    gh, gw = h // patch_size, w // patch_size
    blocks = img.pixels.reshape(gh, patch_size, gw, patch_size).transpose(0, 2, 1, 3)
    return blocks.reshape(gh * gw, patch_size * patch_size)


def unpatchify(tokens: np.ndarray, patch_size: int, width: int, height: int) -> GrayImage:
    """Inverse of :func:`patchify`."""
    gh, gw = height // patch_size, width // patch_size
    if tokens.shape != (gh * gw, patch_size * patch_size):
        raise ShapeError(f"token grid {tokens.shape} does not match a {width}x{height} image")
    blocks = tokens.reshape(gh, gw, patch_size, patch_size).transpose(0, 2, 1, 3)
    return GrayImage(blocks.reshape(height, width))


def parameter_shapes(config: ModelConfig, regression: bool = False) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every parameter tensor, in creation order."""
    e, d = config.embed_dim, config.feature_dim
    p2 = config.patch_size * config.patch_size
    shapes: dict[str, tuple[int, ...]] = {
        "patch_embed.weight": (p2, e),
        "patch_embed.bias": (e,),
        "pos_embed": (config.num_tokens, e),
    }
    for i in range(config.encoder_depth):
        prefix = f"blocks.{i}."
        shapes[prefix + "ln1.gain"] = (e,)
        shapes[prefix + "ln1.bias"] = (e,)
        for name in ("wq", "wk", "wv", "wo"):
            shapes[prefix + f"attn.{name}"] = (e, e)
            shapes[prefix + f"attn.{name.replace('w', 'b')}"] = (e,)
        shapes[prefix + "ln2.gain"] = (e,)
        shapes[prefix + "ln2.bias"] = (e,)
        shapes[prefix + "mlp.w1"] = (e, 4 * e)
        shapes[prefix + "mlp.b1"] = (4 * e,)
        shapes[prefix + "mlp.w2"] = (4 * e, e)
        shapes[prefix + "mlp.b2"] = (e,)
    shapes["final_norm.gain"] = (e,)
    shapes["final_norm.bias"] = (e,)
    shapes["neck.weight"] = (e, d)
    shapes["neck.bias"] = (d,)
    if regression:
        shapes["reg_head.weight"] = (d, 1)
        shapes["reg_head.bias"] = (1,)
    else:
        widths = (d, *config.head_channels, 1)
        for j, (w_in, w_out) in enumerate(zip(widths[:-1], widths[1:])):
            shapes[f"head.{j}.weight"] = (w_in, w_out)
            shapes[f"head.{j}.bias"] = (w_out,)
    return shapes


def _is_encoder_param(name: str) -> bool:
    return not name.startswith(("head.", "reg_head."))


class _BackboneModel:
    """Parameter storage plus the shared transformer encoder forward pass."""

    regression = False

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = replace(config)
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.params: dict[str, ad.Tensor] = {}
        for name, shape in parameter_shapes(config, regression=self.regression).items():
            if name.endswith((".gain",)):
                data = np.ones(shape)
            elif name.endswith((".bias", ".b1", ".b2", ".bq", ".bk", ".bv", ".bo")):
                data = np.zeros(shape)
            else:
                data = rng.normal(0.0, INIT_STD, size=shape)
            self.params[name] = ad.Tensor(data, requires_grad=True)
        self.set_encoder_trainable(config.encoder_trainable)

    # -- parameter plumbing ------------------------------------------------

    def set_encoder_trainable(self, trainable: bool) -> None:
        """Freezing removes encoder parameters from gradient computation."""
        self.config.encoder_trainable = bool(trainable)
        for name, tensor in self.params.items():
            if _is_encoder_param(name):
                tensor.requires_grad = bool(trainable)
                tensor.grad = None

    def trainable_parameters(self) -> dict[str, ad.Tensor]:
        return {n: t for n, t in self.params.items() if t.requires_grad}

    def encoder_parameters(self) -> dict[str, ad.Tensor]:
        return {n: t for n, t in self.params.items() if _is_encoder_param(n)}

    def head_parameters(self) -> dict[str, ad.Tensor]:
        return {n: t for n, t in self.params.items() if not _is_encoder_param(n)}

    def param_counts(self) -> dict[str, int]:
        encoder = sum(t.size for t in self.encoder_parameters().values())
        head = sum(t.size for t in self.head_parameters().values())
        trainable = sum(t.size for t in self.trainable_parameters().values())
        return {"encoder": encoder, "head": head, "trainable": trainable, "total": encoder + head}

    def zero_grad(self) -> None:
        for tensor in self.params.values():
            tensor.grad = None

    # -- forward pass --------------------------------------------------------

    def _attention(self, x: ad.Tensor, prefix: str) -> ad.Tensor:
        cfg = self.config
        p = self.params
        h = ad.layer_norm(x, p[prefix + "ln1.gain"], p[prefix + "ln1.bias"])
        q = ad.add_rowvec(ad.matmul(h, p[prefix + "attn.wq"]), p[prefix + "attn.bq"])
        k = ad.add_rowvec(ad.matmul(h, p[prefix + "attn.wk"]), p[prefix + "attn.bk"])
        v = ad.add_rowvec(ad.matmul(h, p[prefix + "attn.wv"]), p[prefix + "attn.bv"])
        dim_head = cfg.embed_dim // cfg.num_heads
        scale = 1.0 / math.sqrt(dim_head)
        outputs = []
        for head in range(cfg.num_heads):
            lo, hi = head * dim_head, (head + 1) * dim_head
            qh = ad.slice_cols(q, lo, hi)
            kh = ad.slice_cols(k, lo, hi)
            vh = ad.slice_cols(v, lo, hi)
            scores = ad.mul(ad.matmul(qh, ad.transpose2d(kh)), scale)
            outputs.append(ad.matmul(ad.softmax_lastdim(scores), vh))
        merged = ad.concat_cols(outputs)
        return ad.add_rowvec(ad.matmul(merged, p[prefix + "attn.wo"]), p[prefix + "attn.bo"])

    def _mlp(self, x: ad.Tensor, prefix: str) -> ad.Tensor:
        p = self.params
        h = ad.layer_norm(x, p[prefix + "ln2.gain"], p[prefix + "ln2.bias"])
        h = ad.gelu(ad.add_rowvec(ad.matmul(h, p[prefix + "mlp.w1"]), p[prefix + "mlp.b1"]))
        return ad.add_rowvec(ad.matmul(h, p[prefix + "mlp.w2"]), p[prefix + "mlp.b2"])

    def encode_tokens(self, tokens: np.ndarray) -> ad.Tensor:
        """Transformer features projected to feature_dim, still [N x D]."""
        cfg = self.config
        p = self.params
        expected = (cfg.num_tokens, cfg.patch_size * cfg.patch_size)
        if tuple(tokens.shape) != expected:
            raise ShapeError(f"expected token grid {expected}, got {tuple(tokens.shape)}")
        x = ad.add_rowvec(ad.matmul(ad.Tensor(tokens), p["patch_embed.weight"]), p["patch_embed.bias"])
        x = ad.add(x, p["pos_embed"])
        for i in range(cfg.encoder_depth):
            prefix = f"blocks.{i}."
            x = ad.add(x, self._attention(x, prefix))
            x = ad.add(x, self._mlp(x, prefix))
        x = ad.layer_norm(x, p["final_norm.gain"], p["final_norm.bias"])
        return ad.add_rowvec(ad.matmul(x, p["neck.weight"]), p["neck.bias"])

    def encode(self, tokens: np.ndarray) -> ad.Tensor:
        """Spatial feature map of shape (H/P, W/P, feature_dim)."""
        cfg = self.config
        return ad.reshape(self.encode_tokens(tokens), (cfg.grid_size, cfg.grid_size, cfg.feature_dim))

    def _tokens_for(self, img: GrayImage) -> np.ndarray:
        cfg = self.config
        if (img.width, img.height) != (cfg.input_size, cfg.input_size):
            raise ShapeError(
                f"model expects {cfg.input_size}x{cfg.input_size} input, got {img.width}x{img.height}"
            )
        return patchify(img, cfg.patch_size)


class DensityModel(_BackboneModel):
    """Predicts a single-channel density map whose sum is the cell count."""

    regression = False

    def density_head(self, feature_grid: ad.Tensor) -> ad.Tensor:
        """Per-cell channel MLP: feature_dim -> ... -> 1, ReLU between layers only."""
        cfg = self.config
        if feature_grid.shape[-1] != cfg.feature_dim:
            raise ShapeError(
                f"density head expects {cfg.feature_dim} channels, got {feature_grid.shape[-1]}"
            )
        n = cfg.num_tokens
        y = ad.reshape(feature_grid, (n, cfg.feature_dim))
        layers = cfg.head_depth
        for j in range(layers):
            y = ad.add_rowvec(ad.matmul(y, self.params[f"head.{j}.weight"]), self.params[f"head.{j}.bias"])
            if j < layers - 1:
                y = ad.relu(y)
        return ad.reshape(y, (cfg.grid_size, cfg.grid_size, 1))

    def forward_tokens(self, tokens: np.ndarray) -> ad.Tensor:
        return self.density_head(self.encode(tokens))

    def forward(self, img: GrayImage) -> ad.Tensor:
        """(H/P, W/P, 1) density grid as a differentiable tensor."""
        return self.forward_tokens(self._tokens_for(img))

    def predict_density(self, img: GrayImage) -> DensityMap:
        out = self.forward(img)
        return DensityMap(out.data.reshape(self.config.grid_size, self.config.grid_size))

    def predict_count(self, img: GrayImage) -> float:
        return self.predict_density(img).total()


class RegressionModel(_BackboneModel):
    """Global-average-pooled features to one scalar, clamped at zero."""

    regression = True

    def forward_tokens(self, tokens: np.ndarray) -> ad.Tensor:
        cfg = self.config
        features = self.encode_tokens(tokens)
        pool = ad.Tensor(np.full((1, cfg.num_tokens), 1.0 / cfg.num_tokens))
        pooled = ad.matmul(pool, features)  # [1 x D]
        out = ad.add_rowvec(ad.matmul(pooled, self.params["reg_head.weight"]), self.params["reg_head.bias"])
        return ad.reshape(ad.relu(out), ())

    def forward(self, img: GrayImage) -> ad.Tensor:
        return self.forward_tokens(self._tokens_for(img))

    def predict_count(self, img: GrayImage) -> float:
        return self.forward(img).item()


def param_count(model: _BackboneModel) -> int:
    """Total number of parameters (trainable or not)."""
    return model.param_counts()["total"]


def set_trainable(model: _BackboneModel, encoder: bool) -> None:
    model.set_encoder_trainable(encoder)


def count_parameters(config: ModelConfig, regression: bool = False) -> dict[str, int]:
    """Parameter totals from shapes alone, without allocating a model."""
    encoder = head = 0
    for name, shape in parameter_shapes(config, regression=regression).items():
        size = int(np.prod(shape))
        if _is_encoder_param(name):
            encoder += size
        else:
            head += size
    return {"encoder": encoder, "head": head, "total": encoder + head}
