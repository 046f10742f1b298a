"""Command-line pipeline: ingest -> stats -> split -> train -> eval -> ablate -> report.

Every subcommand is deterministic given its inputs and --seed, and every
artifact is plain text (CSV / markdown) or PGM, so reruns can be diffed
byte for byte. Exit codes: 0 success, 2 configuration error, 3 data
error, 4 runtime error.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .annotations import (
    DatasetManifest,
    clean_dataset,
    dataset_stats,
    load_manifest,
    manifest_to_csv,
    parse_annotation_file,
    rejects_to_csv,
    stats_to_csv,
    write_csv,
)
from .errors import (
    AnnotationError,
    CellCountError,
    ImageFormatError,
    ParameterError,
)
from .imaging import DensityMap, gaussian_kernel, read_image, write_heatmap, write_pgm
from .metrics import (
    MetricsReport,
    REPORT_CSV_COLUMNS,
    macro_table_markdown,
    markdown_table,
    report_table_markdown,
    report_to_csv,
)
from .model import DensityModel, ModelConfig, RegressionModel
from .splitting import split_from_csv, split_to_csv, stratified_split
from .synthgen import SceneSpec, generate_corpus
from .training import (
    OracleCountModel,
    TrainConfig,
    ablation_table_markdown,
    ablation_to_csv,
    evaluate,
    load_checkpoint,
    mean_count_baseline,
    prepare_samples,
    run_ablation,
    save_checkpoint,
    train,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_RUNTIME = 4

THREADS_ENV = "CELLCOUNT_THREADS"

IMAGE_SUFFIXES = (".pgm", ".png")
ANNOTATION_SUFFIXES = (".xml", ".csv")

# Desk-scale defaults; override any of them via --config.
DESK_MODEL = dict(
    input_size=32,
    patch_size=16,
    embed_dim=16,
    encoder_depth=1,
    num_heads=2,
    feature_dim=8,
    head_channels=(4,),
    encoder_trainable=True,
)

MODEL_KEYS = {
    "input_size": int,
    "patch_size": int,
    "embed_dim": int,
    "encoder_depth": int,
    "num_heads": int,
    "feature_dim": int,
    "head_channels": "channels",
    "encoder_trainable": "bool",
}
TRAIN_KEYS = {
    "batch_size": int,
    "learning_rate": float,
    "max_epochs": int,
    "patience": int,
    "objective": str,
    "seed": int,
    "log_every": int,
    "val_fraction": float,
    "kernel_size": int,
    "kernel_sigma": float,
}
SYNTH_KEYS = {
    "width": int,
    "height": int,
    "count": int,
    "count_mu": float,
    "count_sigma": float,
    "count_min": int,
    "count_max": int,
    "radius_min": float,
    "radius_max": float,
    "intensity_min": float,
    "intensity_max": float,
    "allow_overlap": "bool",
    "noise_sigma": float,
    "seed": int,
    "n_images": int,
    "quota_low": int,
    "quota_medium": int,
    "quota_high": int,
    "fraction_40x": float,
}


def load_config(path: Path) -> dict[str, str]:
    """key=value lines; '#' starts a comment."""
    values: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParameterError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def _coerce(key: str, value: str, kind):
    try:
        if kind == "bool":
            lowered = value.lower()
            if lowered in ("true", "1", "yes"):
                return True
            if lowered in ("false", "0", "no"):
                return False
            raise ValueError(f"not a boolean: {value!r}")
        if kind == "channels":
            return tuple(int(v) for v in value.split(",") if v.strip()) if value else ()
        return kind(value)
    except ValueError as exc:
        raise ParameterError(f"config key {key}: {exc}") from exc


def typed_config(raw: dict[str, str], schema: dict, what: str) -> dict:
    unknown = set(raw) - set(schema)
    if unknown:
        raise ParameterError(f"unknown {what} config keys: {sorted(unknown)}")
    return {key: _coerce(key, value, schema[key]) for key, value in raw.items()}


def _split_schema(raw: dict[str, str]) -> tuple[dict, dict]:
    model_raw = {k: v for k, v in raw.items() if k in MODEL_KEYS}
    train_raw = {k: v for k, v in raw.items() if k in TRAIN_KEYS}
    unknown = set(raw) - set(MODEL_KEYS) - set(TRAIN_KEYS)
    if unknown:
        raise ParameterError(f"unknown config keys: {sorted(unknown)}")
    return (
        typed_config(model_raw, MODEL_KEYS, "model"),
        typed_config(train_raw, TRAIN_KEYS, "training"),
    )


def _require_file(path: Path, hint: str) -> Path:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"missing {hint}: {path} (run the earlier stage first)")
    return path


def _require_dir(path: Path, hint: str) -> Path:
    path = Path(path)
    if not path.is_dir():
        raise FileNotFoundError(f"missing {hint}: {path}")
    return path


def _natural_key(stem: str):
    return (0, int(stem), "") if stem.isdigit() else (1, 0, stem)


# --- subcommands -------------------------------------------------------------


def _scan_pairs(src: Path):
    """Pair images/<stem>.* with annotations/<stem>.* by stem."""
    images_dir = _require_dir(src / "images", "images directory")
    annotations_dir = src / "annotations"
    images: dict[str, Path] = {}
    extras: list[tuple[Path | None, Path | None]] = []
    for path in sorted(images_dir.iterdir()):
        if path.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        if path.stem in images:
            extras.append((path, None))
        else:
            images[path.stem] = path
    annotations: dict[str, Path] = {}
    if annotations_dir.is_dir():
        for path in sorted(annotations_dir.iterdir()):
            if path.suffix.lower() not in ANNOTATION_SUFFIXES:
                continue
            if path.stem in annotations:
                extras.append((None, path))
            else:
                annotations[path.stem] = path
    stems = sorted(set(images) | set(annotations), key=_natural_key)
    pairs = [(images.get(stem), annotations.get(stem)) for stem in stems]
    return pairs + extras


def _source_metadata(src: Path) -> dict[str, dict[str, str]]:
    path = src / "metadata.csv"
    if not path.is_file():
        return {}
    lines = path.read_text().splitlines()
    if not lines:
        return {}
    header = lines[0].split(",")
    out: dict[str, dict[str, str]] = {}
    for line in lines[1:]:
        if not line.strip():
            continue
        row = dict(zip(header, line.split(",")))
        stem = row.get("id", "")
        out[stem] = {
            "original_name": row.get("original_name", stem),
            "marker": row.get("marker", ""),
            "magnification": row.get("magnification", ""),
        }
    return out


def cmd_ingest(args) -> int:
    src = _require_dir(args.src, "source dataset directory")
    out = Path(args.out)
    pairs = _scan_pairs(src)
    manifest, rejects = clean_dataset(pairs, metadata=_source_metadata(src))

    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "annotations").mkdir(parents=True, exist_ok=True)
    for record in manifest.records:
        image_path = out / "images" / f"{record.image_id}.pgm"
        source = Path(record.image_path)
        if source.suffix.lower() == ".pgm":
            image_path.write_bytes(source.read_bytes())
        else:
            image_path.write_bytes(write_pgm(read_image(source.read_bytes()), maxval=65535))
        parsed = parse_annotation_file(record.annotation_path, image_id=record.image_id)
        (out / "annotations" / f"{record.image_id}.csv").write_text(write_csv(parsed))
        record.image_path = image_path
        record.annotation_path = out / "annotations" / f"{record.image_id}.csv"
    (out / "metadata.csv").write_text(manifest_to_csv(manifest))
    (out / "rejects.csv").write_text(rejects_to_csv(rejects))

    rows = dataset_stats(manifest) if manifest.records else []
    if rows:
        (out / "stats.csv").write_text(stats_to_csv(rows))
        print(_stats_markdown(rows))
    print(f"ingested {len(manifest)} images into {out} ({len(rejects)} rejected)")
    return EXIT_OK


def _stats_markdown(rows) -> str:
    return markdown_table(
        ["Group", "Name", "#Images", "#Cells", "Mean CPI +- std", "Median", "Min/Max"],
        [
            [r.group_kind, r.group, r.n_images, r.total_cells,
             f"{r.mean_cpi:.1f} +- {r.std_cpi:.1f}", f"{r.median_cpi:.1f}",
             f"{r.min_cpi}/{r.max_cpi}"]
            for r in rows
        ],
    )


def cmd_stats(args) -> int:
    manifest = load_manifest(_require_dir(args.data, "dataset directory"))
    rows = dataset_stats(manifest)
    print(_stats_markdown(rows))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "stats.csv").write_text(stats_to_csv(rows))
    return EXIT_OK


def cmd_synth(args) -> int:
    raw = load_config(_require_file(args.spec, "scene spec file"))
    values = typed_config(raw, SYNTH_KEYS, "synth")
    n_images = values.pop("n_images", 20)
    fraction_40x = values.pop("fraction_40x", 0.5)
    quotas = {
        name: values.pop(f"quota_{name}")
        for name in ("low", "medium", "high")
        if f"quota_{name}" in values
    }
    radius = (values.pop("radius_min", 1.5), values.pop("radius_max", 3.0))
    intensity = (values.pop("intensity_min", 0.4), values.pop("intensity_max", 0.9))
    if args.seed is not None:
        values["seed"] = args.seed
    spec = SceneSpec(radius_range=radius, intensity_range=intensity, **values)
    corpus = generate_corpus(
        spec, n_images, Path(args.out), binned=quotas or None, fraction_40x=fraction_40x
    )
    print(_stats_markdown(dataset_stats(corpus.manifest)))
    print(f"wrote {len(corpus.manifest)} synthetic images to {args.out}")
    return EXIT_OK


def cmd_split(args) -> int:
    manifest = load_manifest(_require_dir(args.data, "dataset directory"))
    split = stratified_split(manifest, ratio=args.ratio, seed=args.seed, k_bins=args.bins)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "split.csv").write_text(split_to_csv(split))

    strata_rows = []
    for (bin_idx, magnification), members in sorted(split.strata().items()):
        n_train = sum(e.assignment == "train" for e in members)
        strata_rows.append(
            [str(bin_idx), magnification, str(len(members)), str(n_train), str(len(members) - n_train)]
        )
    print(markdown_table(["Bin", "Magnification", "N", "Train", "Test"], strata_rows))

    counts = np.array([e.count for e in split.entries], dtype=float)
    edges = np.linspace(0.0, counts.max() + 1.0, 11)
    train_counts = np.array([e.count for e in split.entries if e.assignment == "train"])
    test_counts = np.array([e.count for e in split.entries if e.assignment == "test"])
    lines = ["bin_lo,bin_hi,train,test"]
    for lo, hi in zip(edges[:-1], edges[1:]):
        in_train = int(np.sum((train_counts >= lo) & (train_counts < hi)))
        in_test = int(np.sum((test_counts >= lo) & (test_counts < hi)))
        lines.append(f"{lo!r},{hi!r},{in_train},{in_test}")
    (out / "count_histogram.csv").write_text("\n".join(lines) + "\n")
    print(f"wrote split for {len(split.entries)} images to {out / 'split.csv'}")
    return EXIT_OK


def _load_model_and_train_config(args) -> tuple[ModelConfig, TrainConfig, dict]:
    model_values = dict(DESK_MODEL)
    train_values: dict = {}
    extras = {"val_fraction": 0.125, "kernel_size": 5, "kernel_sigma": 1.0}
    if args.config:
        file_model, file_train = _split_schema(load_config(_require_file(args.config, "config file")))
        model_values.update(file_model)
        for key in list(file_train):
            if key in extras:
                extras[key] = file_train.pop(key)
        train_values.update(file_train)
    for flag, key in (
        ("learning_rate", "learning_rate"),
        ("batch_size", "batch_size"),
        ("epochs", "max_epochs"),
        ("objective", "objective"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            train_values[key] = value
    if args.seed is not None:
        train_values["seed"] = args.seed
    if getattr(args, "freeze_encoder", False):
        model_values["encoder_trainable"] = False
    return ModelConfig(**model_values), TrainConfig(**train_values), extras


def _split_roles(manifest: DatasetManifest, split_path: Path, val_fraction: float, seed: int):
    """train/val/test sample id sets; validation is carved from the train side."""
    if not 0.0 < val_fraction < 1.0:
        raise ParameterError(f"val_fraction must be in (0, 1), got {val_fraction}")
    split = split_from_csv(_require_file(split_path, "split CSV").read_text())
    by_id = {r.image_id: r for r in manifest.records}
    missing = [e.image_id for e in split.entries if e.image_id not in by_id]
    if missing:
        raise AnnotationError(f"split references unknown image ids: {missing[:5]}")
    train_ids = [e.image_id for e in split.entries if e.assignment == "train"]
    test_ids = [e.image_id for e in split.entries if e.assignment == "test"]
    sub = DatasetManifest([by_id[i] for i in train_ids])
    distinct = len(set(sub.counts()))
    carve = stratified_split(
        sub, ratio=1.0 - val_fraction, seed=seed + 1, k_bins=min(5, distinct)
    )
    val_ids = [e.image_id for e in carve.entries if e.assignment == "test"]
    train_ids = [i for i in train_ids if i not in set(val_ids)]
    return train_ids, val_ids, test_ids


def _prepare_role_samples(manifest, ids, config, kernel):
    by_id = {r.image_id: r for r in manifest.records}
    sub = DatasetManifest([by_id[i] for i in ids])
    return prepare_samples(sub, config, kernel)


def cmd_train(args) -> int:
    manifest = load_manifest(_require_dir(args.data, "dataset directory"))
    model_config, train_config, extras = _load_model_and_train_config(args)
    kernel = gaussian_kernel(extras["kernel_size"], extras["kernel_sigma"])
    train_ids, val_ids, test_ids = _split_roles(
        manifest, Path(args.split), extras["val_fraction"], train_config.seed
    )
    del test_ids
    train_set = _prepare_role_samples(manifest, train_ids, model_config, kernel)
    val_set = _prepare_role_samples(manifest, val_ids, model_config, kernel)

    if train_config.objective == "count_mse":
        model = RegressionModel(model_config, seed=train_config.seed)
    else:
        model = DensityModel(model_config, seed=train_config.seed)
    model, state = train(model, train_set, val_set, train_config)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out / "model.ckpt")
    loss_lines = ["step,loss"] + [f"{step},{value!r}" for step, value in state.loss_history]
    (out / "loss_history.csv").write_text("\n".join(loss_lines) + "\n")
    val_lines = ["epoch,val_mae"] + [f"{epoch},{value!r}" for epoch, value in state.val_history]
    (out / "val_history.csv").write_text("\n".join(val_lines) + "\n")
    print(
        f"trained {type(model).__name__} for {state.epochs_run} epochs; "
        f"best val MAE {state.best_val_mae:.3f} at epoch {state.best_epoch}; "
        f"checkpoint: {out / 'model.ckpt'}"
    )
    return EXIT_OK


def cmd_eval(args) -> int:
    manifest = load_manifest(_require_dir(args.data, "dataset directory"))
    model_config, train_config, extras = _load_model_and_train_config(args)
    kernel = gaussian_kernel(extras["kernel_size"], extras["kernel_sigma"])

    if args.oracle:
        model = OracleCountModel()
        name = "oracle"
    else:
        if not args.checkpoint:
            raise ParameterError("eval needs --checkpoint (or --oracle)")
        model = load_checkpoint(_require_file(args.checkpoint, "model checkpoint"))
        model_config = model.config
        name = Path(args.checkpoint).stem

    train_ids, val_ids, test_ids = _split_roles(
        manifest, Path(args.split), extras["val_fraction"], train_config.seed
    )
    test_set = _prepare_role_samples(manifest, test_ids, model_config, kernel)
    reports: dict[str, MetricsReport] = {name: evaluate(model, test_set)}
    if args.with_baseline:
        train_set = _prepare_role_samples(manifest, train_ids + val_ids, model_config, kernel)
        reports["mean-baseline"] = evaluate(mean_count_baseline(train_set), test_set)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(report_to_csv(reports))
    markdown = report_table_markdown(reports) + "\n" + macro_table_markdown(reports)
    (out / "metrics.md").write_text(markdown)
    print(markdown)

    for sample in test_set[: args.heatmaps]:
        write_heatmap(DensityMap(sample.gt_map[:, :, 0]), out / f"gt_{sample.image_id}.pgm")
        if isinstance(model, OracleCountModel):
            predicted = model.density_for(sample)
        else:
            grid = model_config.grid_size
            predicted = DensityMap(model.forward_tokens(sample.tokens).data.reshape(grid, grid))
        write_heatmap(predicted, out / f"pred_{sample.image_id}.pgm")
    return EXIT_OK


def cmd_ablate(args) -> int:
    manifest = load_manifest(_require_dir(args.data, "dataset directory"))
    model_config, train_config, extras = _load_model_and_train_config(args)
    kernel = gaussian_kernel(extras["kernel_size"], extras["kernel_sigma"])
    train_ids, val_ids, test_ids = _split_roles(
        manifest, Path(args.split), extras["val_fraction"], train_config.seed
    )
    data = (
        _prepare_role_samples(manifest, train_ids, model_config, kernel),
        _prepare_role_samples(manifest, val_ids, model_config, kernel),
        _prepare_role_samples(manifest, test_ids, model_config, kernel),
    )
    depths = tuple(int(d) for d in args.head_depths.split(","))
    rows = run_ablation(data, model_config, train_config, head_depths=depths)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.csv").write_text(ablation_to_csv(rows))
    table = ablation_table_markdown(rows)
    (out / "ablation.md").write_text(table)
    print(table)
    return EXIT_OK


def cmd_report(args) -> int:
    out = _require_dir(args.out, "artifacts directory")
    printed = False
    for path in sorted(out.glob("**/metrics.csv")):
        print(f"## {path.relative_to(out)}")
        lines = path.read_text().strip().splitlines()
        header = lines[0].split(",")
        if header != list(REPORT_CSV_COLUMNS):
            raise AnnotationError(f"{path}: unexpected metrics header")
        print(markdown_table(header, [line.split(",") for line in lines[1:]]))
        printed = True
    for path in sorted(out.glob("**/ablation.csv")):
        print(f"## {path.relative_to(out)}")
        lines = path.read_text().strip().splitlines()
        print(markdown_table(lines[0].split(","), [line.split(",") for line in lines[1:]]))
        printed = True
    if not printed:
        print(f"no metrics.csv or ablation.csv artifacts under {out}")
    return EXIT_OK


# --- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cellcount",
        description="Density-map cell counting: data pipeline, training, and benchmark harness.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, config=True):
        p.add_argument("--seed", type=int, default=None, help="seed override")
        p.add_argument("--out", required=True, help="output directory")
        if config:
            p.add_argument("--config", default=None, help="key=value config file")

    p = sub.add_parser("ingest", help="pair, clean, and renumber a raw dataset directory")
    p.add_argument("--src", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("stats", help="print per-marker/magnification count statistics")
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("synth", help="generate a synthetic corpus in dataset layout")
    p.add_argument("--spec", required=True, help="key=value scene spec file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", help="Jenks-stratified train/test split")
    p.add_argument("--data", required=True)
    p.add_argument("--ratio", type=float, default=0.8)
    p.add_argument("--bins", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train a density (or regression) counter")
    p.add_argument("--data", required=True)
    p.add_argument("--split", required=True, help="split.csv from the split stage")
    add_common(p)
    p.add_argument("--learning-rate", dest="learning_rate", type=float, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--objective", choices=("density_mse", "count_mse"), default=None)
    p.add_argument("--freeze-encoder", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    p.add_argument("--data", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--oracle", action="store_true", help="score a perfect ground-truth oracle")
    p.add_argument("--with-baseline", action="store_true", help="add a predict-training-mean row")
    p.add_argument("--heatmaps", type=int, default=0, help="write GT/prediction PGMs for N test images")
    add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="encoder freeze x head depth grid")
    p.add_argument("--data", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--head-depths", default="1,2,3")
    add_common(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="render metric/ablation CSV artifacts as tables")
    p.add_argument("--out", required=True, help="directory holding earlier artifacts")
    p.set_defaults(func=cmd_report)

    return parser


def _apply_thread_env() -> None:
    threads = os.environ.get(THREADS_ENV)
    if threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, threads)


def main(argv=None) -> int:
    _apply_thread_env()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ParameterError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (AnnotationError, ImageFormatError, FileNotFoundError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except CellCountError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
