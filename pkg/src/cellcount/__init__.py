"""Density-map cell counting toolkit.

Ships the full desk-scale pipeline: dot-annotation ingestion, ground-truth
density-map generation, Jenks-stratified splitting, a trainable
patch-transformer density estimator with scikit-learn style wrappers, and
a five-metric benchmark harness with a CLI.
"""

from .annotations import (
    AnnotationSet,
    DatasetManifest,
    DotAnnotation,
    clean_dataset,
    dataset_stats,
    load_manifest,
    parse_cellcounter_xml,
    parse_csv,
    write_csv,
)
from .errors import (
    AnnotationError,
    CellCountError,
    GenerationError,
    ImageFormatError,
    ParameterError,
    ShapeError,
    TrainingDivergedError,
)
from .estimators import DensityCounter, MeanCounter, RegressionCounter
from .imaging import (
    DensityMap,
    GaussianKernel,
    GrayImage,
    density_from_dots,
    gaussian_kernel,
    read_image,
    resize_bilinear,
    write_heatmap,
    write_pgm,
)
from .metrics import (
    CountPair,
    MetricsReport,
    bin_by_density,
    compute_metrics,
    evaluate_pairs,
    macro_report,
)
from .model import (
    DensityModel,
    ModelConfig,
    RegressionModel,
    head_channels_for_depth,
    param_count,
    patchify,
    set_trainable,
)
from .splitting import (
    JenksBreaks,
    SplitManifest,
    assign_bin,
    jenks_breaks,
    stratified_split,
    three_way_split,
)
from .synthgen import SceneSpec, SyntheticScene, generate_corpus, generate_scene
from .training import (
    AdamOptimizer,
    TrainConfig,
    TrainState,
    evaluate,
    load_checkpoint,
    prepare_samples,
    run_ablation,
    save_checkpoint,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "AdamOptimizer",
    "AnnotationError",
    "AnnotationSet",
    "CellCountError",
    "CountPair",
    "DatasetManifest",
    "DensityCounter",
    "DensityMap",
    "DensityModel",
    "DotAnnotation",
    "GaussianKernel",
    "GenerationError",
    "GrayImage",
    "ImageFormatError",
    "JenksBreaks",
    "MeanCounter",
    "MetricsReport",
    "ModelConfig",
    "ParameterError",
    "RegressionCounter",
    "RegressionModel",
    "SceneSpec",
    "ShapeError",
    "SplitManifest",
    "SyntheticScene",
    "TrainConfig",
    "TrainState",
    "TrainingDivergedError",
    "assign_bin",
    "bin_by_density",
    "clean_dataset",
    "compute_metrics",
    "dataset_stats",
    "density_from_dots",
    "evaluate",
    "evaluate_pairs",
    "gaussian_kernel",
    "generate_corpus",
    "generate_scene",
    "head_channels_for_depth",
    "jenks_breaks",
    "load_checkpoint",
    "load_manifest",
    "macro_report",
    "param_count",
    "parse_cellcounter_xml",
    "parse_csv",
    "patchify",
    "prepare_samples",
    "read_image",
    "resize_bilinear",
    "run_ablation",
    "save_checkpoint",
    "set_trainable",
    "stratified_split",
    "three_way_split",
    "train",
    "write_csv",
    "write_heatmap",
    "write_pgm",
]
