"""scikit-learn style wrappers around the density and regression counters.

These follow the BaseEstimator contract (constructor args stored
verbatim, fitted state in trailing-underscore attributes), so they
compose with ``sklearn.base.clone``, grid search, and pipelines. ``X``
is a sequence of single-channel images; ``y`` is a per-image collection
of dot annotations (DensityCounter) or plain counts (RegressionCounter,
MeanCounter).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .imaging import DensityMap, density_from_dots, gaussian_kernel, resize_bilinear
from .model import DensityModel, ModelConfig, RegressionModel, patchify
from .training import Sample, TrainConfig, train
from .validation import check_counts, check_dots, check_images, check_same_length


class _CounterBase(BaseEstimator):
    """Shared fit/predict plumbing for the two trainable counters."""

    _objective = "density_mse"

    def _model_config(self) -> ModelConfig:
        return ModelConfig(
            input_size=self.input_size,
            patch_size=self.patch_size,
            embed_dim=self.embed_dim,
            encoder_depth=self.encoder_depth,
            num_heads=self.num_heads,
            feature_dim=self.feature_dim,
            head_channels=tuple(self.head_channels),
            encoder_trainable=self.encoder_trainable,
        )

    def _make_model(self, config: ModelConfig):
        raise NotImplementedError

    def _samples(self, X, y) -> list[Sample]:
        raise NotImplementedError

    def _prepare_image(self, image, config: ModelConfig):
        resized = resize_bilinear(image, config.input_size, config.input_size)
        return patchify(resized, config.patch_size)

    def fit(self, X, y):
        config = self._model_config()
        samples = self._samples(X, y)
        rng = np.random.default_rng(self.seed)
        order = rng.permutation(len(samples))
        n_val = int(round(self.val_fraction * len(samples))) if len(samples) > 1 else 0
        n_val = min(max(n_val, 1 if len(samples) > 1 else 0), len(samples) - 1)
        val = [samples[i] for i in order[:n_val]] or samples
        train_split = [samples[i] for i in order[n_val:]]
        model = self._make_model(config)
        train_config = TrainConfig(
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            max_epochs=self.max_epochs,
            seed=self.seed,
            objective=self._objective,
            patience=self.patience,
        )
        self.model_, self.train_state_ = train(model, train_split, val, train_config)
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError(f"{type(self).__name__} must be fitted before predicting")

    def predict(self, X) -> np.ndarray:
        self._check_fitted()
        config = self.model_.config
        return np.array(
            [
                float(np.sum(self.model_.forward_tokens(self._prepare_image(img, config)).data))
                for img in check_images(X)
            ]
        )

    def score(self, X, y) -> float:
        """Negative mean absolute count error (greater is better)."""
        counts = check_counts(y)
        predictions = self.predict(X)
        check_same_length(predictions, counts)
        return -float(np.mean(np.abs(predictions - counts)))


class DensityCounter(_CounterBase):
    """Counts cells by regressing a density map whose sum is the count.

    ``y`` holds per-image dot annotations; ground-truth maps are built by
    stamping a unit-mass Gaussian kernel per dot on the output grid.
    """

    _objective = "density_mse"

    def __init__(
        self,
        input_size=32,
        patch_size=16,
        embed_dim=32,
        encoder_depth=2,
        num_heads=4,
        feature_dim=16,
        head_channels=(8,),
        encoder_trainable=True,
        learning_rate=1e-3,
        batch_size=8,
        max_epochs=40,
        patience=10,
        kernel_size=5,
        kernel_sigma=1.0,
        val_fraction=0.2,
        seed=0,
    ):
        self.input_size = input_size
        self.patch_size = patch_size
        self.embed_dim = embed_dim
        self.encoder_depth = encoder_depth
        self.num_heads = num_heads
        self.feature_dim = feature_dim
        self.head_channels = head_channels
        self.encoder_trainable = encoder_trainable
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.kernel_size = kernel_size
        self.kernel_sigma = kernel_sigma
        self.val_fraction = val_fraction
        self.seed = seed

    def _make_model(self, config):
        return DensityModel(config, seed=self.seed)

    def _samples(self, X, y):
        images = check_images(X)
        check_same_length(images, y)
        kernel = gaussian_kernel(self.kernel_size, self.kernel_sigma)
        config = self._model_config()
        grid = config.grid_size
        samples = []
        for i, (image, targets) in enumerate(zip(images, y)):
            dots = check_dots(targets)
            gt = density_from_dots(dots, (grid, grid), (image.width, image.height), kernel)
            samples.append(
                Sample(
                    image_id=str(i),
                    tokens=self._prepare_image(image, config),
                    gt_map=gt.values.reshape(grid, grid, 1),
                    count=float(len(dots)),
                )
            )
        return samples

    def predict_density(self, X) -> list[DensityMap]:
        self._check_fitted()
        config = self.model_.config
        maps = []
        for img in check_images(X):
            out = self.model_.forward_tokens(self._prepare_image(img, config))
            maps.append(DensityMap(out.data.reshape(config.grid_size, config.grid_size)))
        return maps


class RegressionCounter(_CounterBase):
    """Scalar count regression over pooled encoder features (y >= 0)."""

    _objective = "count_mse"

    def __init__(
        self,
        input_size=32,
        patch_size=16,
        embed_dim=32,
        encoder_depth=2,
        num_heads=4,
        feature_dim=16,
        head_channels=(),
        encoder_trainable=True,
        learning_rate=1e-3,
        batch_size=8,
        max_epochs=40,
        patience=10,
        val_fraction=0.2,
        seed=0,
    ):
        self.input_size = input_size
        self.patch_size = patch_size
        self.embed_dim = embed_dim
        self.encoder_depth = encoder_depth
        self.num_heads = num_heads
        self.feature_dim = feature_dim
        self.head_channels = head_channels
        self.encoder_trainable = encoder_trainable
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.val_fraction = val_fraction
        self.seed = seed

    def _make_model(self, config):
        return RegressionModel(config, seed=self.seed)

    def _samples(self, X, y):
        images = check_images(X)
        counts = check_counts(y)
        check_same_length(images, counts)
        config = self._model_config()
        grid = config.grid_size
        return [
            Sample(
                image_id=str(i),
                tokens=self._prepare_image(image, config),
                gt_map=np.zeros((grid, grid, 1)),
                count=float(count),
            )
            for i, (image, count) in enumerate(zip(images, counts))
        ]


class MeanCounter(BaseEstimator):
    """Predicts the training-mean count everywhere; the floor to beat."""

    def fit(self, X, y):
        counts = check_counts(y)
        if counts.size == 0:
            raise NotFittedError("MeanCounter needs at least one training count")
        self.mean_ = float(np.mean(counts))
        return self

    def predict(self, X) -> np.ndarray:
        if not hasattr(self, "mean_"):
            raise NotFittedError("MeanCounter must be fitted before predicting")
        return np.full(len(check_images(X)), self.mean_)

    def score(self, X, y) -> float:
        return -float(np.mean(np.abs(self.predict(X) - check_counts(y))))
