"""End-to-end optimization: Adam on density or count MSE, with
validation-MAE checkpoint selection, ablation drivers, and a versioned
binary checkpoint container.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .annotations import DatasetManifest, ManifestRecord, parse_annotation_file
from .errors import ParameterError, TrainingDivergedError
from .imaging import DensityMap, GaussianKernel, density_from_dots, gaussian_kernel, read_image, resize_bilinear
from .metrics import CountPair, MetricsReport, evaluate_pairs
from .model import DensityModel, ModelConfig, RegressionModel, head_channels_for_depth, patchify

OBJECTIVES = ("density_mse", "count_mse")


@dataclass
class TrainConfig:
    batch_size: int = 8
    learning_rate: float = 1e-6
    max_epochs: int = 50
    seed: int = 0
    objective: str = "density_mse"
    encoder_trainable: bool | None = None  # None keeps the model's setting
    patience: int = 10  # epochs without validation improvement before stopping
    log_every: int = 50  # steps between loss-history entries

    def __post_init__(self):
        if self.batch_size < 1:
            raise ParameterError(f"batch size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ParameterError(f"learning rate must be positive, got {self.learning_rate}")
        if self.objective not in OBJECTIVES:
            raise ParameterError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")


@dataclass
class TrainState:
    epochs_run: int = 0
    loss_history: list[tuple[int, float]] = field(default_factory=list)  # (step, loss)
    val_history: list[tuple[int, float]] = field(default_factory=list)  # (epoch, val MAE)
    best_val_mae: float = float("inf")
    best_epoch: int = -1


class AdamOptimizer:
    """Classic Adam (b1=0.9, b2=0.999, eps=1e-8) over named parameters."""

    def __init__(self, learning_rate: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.learning_rate = learning_rate
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, ad.Tensor]) -> None:
        self.step_count += 1
        t = self.step_count
        for name, tensor in params.items():
            grad = tensor.grad
            if grad is None:
                continue
            m = self._m.setdefault(name, np.zeros_like(tensor.data))
            v = self._v.setdefault(name, np.zeros_like(tensor.data))
            m += (1.0 - self.beta1) * (grad - m)
            v += (1.0 - self.beta2) * (grad * grad - v)
            m_hat = m / (1.0 - self.beta1**t)
            v_hat = v / (1.0 - self.beta2**t)
            tensor.data = tensor.data - self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)


# --- Samples ----------------------------------------------------------------


@dataclass
class Sample:
    """One image prepared for the model: patch tokens plus ground truth."""

    image_id: str
    tokens: np.ndarray
    gt_map: np.ndarray  # (grid, grid, 1)
    count: float


def prepare_sample(
    record: ManifestRecord, config: ModelConfig, kernel: GaussianKernel | None = None
) -> Sample:
    """Load, resize, patchify one record; GT density goes straight to the output grid."""
    kernel = kernel or gaussian_kernel()
    image = read_image(Path(record.image_path).read_bytes())
    src_size = (image.width, image.height)
    resized = resize_bilinear(image, config.input_size, config.input_size)
    annotations = parse_annotation_file(record.annotation_path, image_id=record.image_id)
    grid = config.grid_size
    gt = density_from_dots(annotations.dots, (grid, grid), src_size, kernel)
    return Sample(
        image_id=record.image_id,
        tokens=patchify(resized, config.patch_size),
        gt_map=gt.values.reshape(grid, grid, 1),
        count=float(annotations.count()),
    )


def prepare_samples(
    manifest: DatasetManifest, config: ModelConfig, kernel: GaussianKernel | None = None
) -> list[Sample]:
    kernel = kernel or gaussian_kernel()
    return [prepare_sample(record, config, kernel) for record in manifest.records]


def predict_sample_count(model, sample: Sample) -> float:
    """Raw (unrounded) predicted count for one prepared sample."""
    if hasattr(model, "count_for"):  # baselines and oracle stand-ins
        return float(model.count_for(sample))
    return float(np.sum(model.forward_tokens(sample.tokens).data))


@dataclass
class ConstantCountModel:
    """Predicts the same count everywhere (e.g. the training mean)."""

    value: float

    def count_for(self, sample: Sample) -> float:
        return self.value


def mean_count_baseline(samples: list[Sample]) -> ConstantCountModel:
    return ConstantCountModel(float(np.mean([s.count for s in samples])))


class OracleCountModel:
    """Returns the ground truth; an upper bound used for harness checks."""

    def count_for(self, sample: Sample) -> float:
        return sample.count

    def density_for(self, sample: Sample) -> DensityMap:
        return DensityMap(sample.gt_map[:, :, 0])


# --- Training loop -----------------------------------------------------------


def _sample_loss(model, sample: Sample, objective: str) -> ad.Tensor:
    if objective == "density_mse":
        if not isinstance(model, DensityModel):
            raise ParameterError("density_mse needs a DensityModel")
        return ad.mse_loss(model.forward_tokens(sample.tokens), ad.Tensor(sample.gt_map))
    out = model.forward_tokens(sample.tokens)
    if out.shape != ():
        out = ad.sum_all(out)
    return ad.mse_loss(out, ad.Tensor(np.asarray(sample.count)))


def _mean_loss(model, batch: list[Sample], objective: str) -> ad.Tensor:
    total = _sample_loss(model, batch[0], objective)
    for sample in batch[1:]:
        total = ad.add(total, _sample_loss(model, sample, objective))
    return ad.mul(total, 1.0 / len(batch))


def validation_mae(model, samples: list[Sample]) -> float:
    return float(np.mean([abs(predict_sample_count(model, s) - s.count) for s in samples]))


def train(
    model,
    train_set: list[Sample],
    val_set: list[Sample],
    config: TrainConfig,
) -> tuple[object, TrainState]:
    """Seeded mini-batch Adam; returns the model restored to its best
    validation-MAE checkpoint, plus the training history."""
    if not train_set or not val_set:
        raise ParameterError("train() needs non-empty train and validation sets")
    if config.encoder_trainable is not None:
        model.set_encoder_trainable(config.encoder_trainable)

    rng = np.random.default_rng(config.seed)
    optimizer = AdamOptimizer(config.learning_rate)
    state = TrainState()
    best_params: dict[str, np.ndarray] | None = None
    epochs_since_best = 0
    step = 0

    for epoch in range(config.max_epochs):
        order = rng.permutation(len(train_set))
        for start in range(0, len(order), config.batch_size):
            batch = [train_set[i] for i in order[start : start + config.batch_size]]
            model.zero_grad()
            with ad.Tape():
                loss = _mean_loss(model, batch, config.objective)
                ad.backward(loss)
            loss_value = loss.item()
            if not np.isfinite(loss_value):
                raise TrainingDivergedError(f"non-finite loss at step {step} (epoch {epoch})")
            optimizer.step(model.trainable_parameters())
            if step % config.log_every == 0:
                state.loss_history.append((step, loss_value))
            step += 1

        mae = validation_mae(model, val_set)
        state.val_history.append((epoch, mae))
        state.epochs_run = epoch + 1
        if mae < state.best_val_mae:
            state.best_val_mae = mae
            state.best_epoch = epoch
            best_params = {name: t.data.copy() for name, t in model.params.items()}
            epochs_since_best = 0
        else:
            epochs_since_best += 1
            if epochs_since_best >= config.patience:
                break

    if best_params is not None:
        for name, tensor in model.params.items():
            tensor.data = best_params[name]
    model.zero_grad()
    return model, state


def evaluate(model, samples: list[Sample]) -> MetricsReport:
    """Predict every sample and run the full metric harness (with bins)."""
    if not samples:
        raise ParameterError("evaluate() needs at least one sample")
    pairs = [
        CountPair(y=s.count, y_hat=predict_sample_count(model, s), image_id=s.image_id)
        for s in samples
    ]
    return evaluate_pairs(pairs)


# --- Ablation ----------------------------------------------------------------


@dataclass
class AblationRow:
    encoder: str  # "frozen" | "trainable"
    head_depth: int
    trainable_params: int
    test_mae: float | None
    error: str = ""


def run_ablation(
    data: tuple[list[Sample], list[Sample], list[Sample]],
    model_config: ModelConfig,
    train_config: TrainConfig,
    encoder_options: tuple[bool, ...] = (False, True),
    head_depths: tuple[int, ...] = (1, 2, 3),
) -> list[AblationRow]:
    """Train one model per (encoder freeze x head depth) grid cell, all from
    identical seeds and data. A failed cell is reported and skipped; the
    remaining cells still run."""
    train_set, val_set, test_set = data
    rows: list[AblationRow] = []
    for trainable in encoder_options:
        for depth in head_depths:
            config = replace(
                model_config,
                encoder_trainable=trainable,
                head_channels=head_channels_for_depth(depth, model_config.feature_dim),
            )
            model = DensityModel(config, seed=train_config.seed)
            setting = "trainable" if trainable else "frozen"
            try:
                model, _ = train(model, train_set, val_set, train_config)
                mae = evaluate(model, test_set).mae
                rows.append(AblationRow(setting, depth, model.param_counts()["trainable"], mae))
            except TrainingDivergedError as exc:
                rows.append(
                    AblationRow(setting, depth, model.param_counts()["trainable"], None, str(exc))
                )
    return rows


def ablation_to_csv(rows: list[AblationRow]) -> str:
    lines = ["encoder,head_depth,trainable_params,test_mae,error"]
    for r in rows:
        mae = "" if r.test_mae is None else repr(r.test_mae)
        lines.append(f"{r.encoder},{r.head_depth},{r.trainable_params},{mae},{r.error}")
    return "\n".join(lines) + "\n"


def ablation_table_markdown(rows: list[AblationRow]) -> str:
    from .metrics import markdown_table

    return markdown_table(
        ["Encoder", "Head depth", "# Params", "Test MAE"],
        [
            [r.encoder, str(r.head_depth), f"{r.trainable_params:,}",
             "failed: " + r.error if r.test_mae is None else f"{r.test_mae:.2f}"]
            for r in rows
        ],
    )


# --- Checkpoints --------------------------------------------------------------

_CKPT_MAGIC = b"CELLCKPT"
_CKPT_VERSION = 1


def save_checkpoint(model, path: Path) -> None:
    """Versioned container: JSON config header, named float64 tensors,
    then a plain-text manifest footer listing every tensor name/shape."""
    header = {
        "model_class": type(model).__name__,
        "seed": model.seed,
        "config": {
            "input_size": model.config.input_size,
            "patch_size": model.config.patch_size,
            "embed_dim": model.config.embed_dim,
            "encoder_depth": model.config.encoder_depth,
            "num_heads": model.config.num_heads,
            "feature_dim": model.config.feature_dim,
            "head_channels": list(model.config.head_channels),
            "encoder_trainable": model.config.encoder_trainable,
        },
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(_CKPT_MAGIC)
    buf.write(struct.pack("<II", _CKPT_VERSION, len(header_bytes)))
    buf.write(header_bytes)
    buf.write(struct.pack("<I", len(model.params)))
    manifest_lines = []
    for name, tensor in model.params.items():
        name_bytes = name.encode("utf-8")
        buf.write(struct.pack("<H", len(name_bytes)))
        buf.write(name_bytes)
        buf.write(struct.pack("<B", tensor.data.ndim))
        for dim in tensor.data.shape:
            buf.write(struct.pack("<I", dim))
        buf.write(tensor.data.astype("<f8").tobytes())
        manifest_lines.append(f"{name} {'x'.join(map(str, tensor.data.shape)) or 'scalar'}")
    buf.write(b"MANIFEST\n" + "\n".join(manifest_lines).encode("utf-8") + b"\n")
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: Path):
    """Rebuild the model (class + config) and restore every tensor."""
    data = Path(path).read_bytes()
    if data[: len(_CKPT_MAGIC)] != _CKPT_MAGIC:
        raise ParameterError(f"{path} is not a checkpoint (bad magic)")
    offset = len(_CKPT_MAGIC)
    version, header_len = struct.unpack_from("<II", data, offset)
    if version != _CKPT_VERSION:
        raise ParameterError(f"unsupported checkpoint version {version}")
    offset += 8
    header = json.loads(data[offset : offset + header_len].decode("utf-8"))
    offset += header_len

    config = ModelConfig(
        input_size=header["config"]["input_size"],
        patch_size=header["config"]["patch_size"],
        embed_dim=header["config"]["embed_dim"],
        encoder_depth=header["config"]["encoder_depth"],
        num_heads=header["config"]["num_heads"],
        feature_dim=header["config"]["feature_dim"],
        head_channels=tuple(header["config"]["head_channels"]),
        encoder_trainable=header["config"]["encoder_trainable"],
    )
    cls = {"DensityModel": DensityModel, "RegressionModel": RegressionModel}.get(
        header["model_class"]
    )
    if cls is None:
        raise ParameterError(f"unknown model class {header['model_class']!r}")
    model = cls(config, seed=header["seed"])

    (n_tensors,) = struct.unpack_from("<I", data, offset)
    offset += 4
    for _ in range(n_tensors):
        (name_len,) = struct.unpack_from("<H", data, offset)
        offset += 2
        name = data[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack_from("<B", data, offset)
        offset += 1
        shape = struct.unpack_from(f"<{ndim}I", data, offset) if ndim else ()
        offset += 4 * ndim
        size = int(np.prod(shape)) if shape else 1
        values = np.frombuffer(data, dtype="<f8", count=size, offset=offset).reshape(shape)
        offset += 8 * size
        if name not in model.params:
            raise ParameterError(f"checkpoint tensor {name!r} does not fit the configured model")
        if model.params[name].data.shape != values.shape:
            raise ParameterError(
                f"checkpoint tensor {name!r} has shape {values.shape}, expected "
                f"{model.params[name].data.shape}"
            )
        model.params[name].data = values.copy()
    return model
