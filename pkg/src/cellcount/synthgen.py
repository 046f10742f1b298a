"""Seeded synthetic fluorescence-scene generator.

Scenes are Gaussian blobs on a dark background with optional pixel
noise: not biology, but they give exact dot ground truth and controllable
density, which is what the counting machinery needs for verification.
Corpora are written in the same directory layout the ingestion pipeline
consumes (images/*.pgm, annotations/*.csv, metadata.csv).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .annotations import (
    AnnotationSet,
    DatasetManifest,
    DotAnnotation,
    ManifestRecord,
    manifest_to_csv,
    write_csv,
)
from .errors import GenerationError, ParameterError
from .imaging import GrayImage, write_pgm

DENSITY_BIN_RANGES = {"low": (0, 250), "medium": (251, 500), "high": (501, None)}

_PLACEMENT_TRIES = 200


@dataclass(frozen=True)
class SceneSpec:
    """Knobs for one synthetic scene family.

    ``count`` fixes the number of cells; when None, counts are drawn from
    a log-normal (``count_mu``, ``count_sigma``) clipped to
    [count_min, count_max]. The default log-normal mimics a nuclear-stain
    long tail (median well below mean), scaled to desk-size images.
    """

    width: int = 64
    height: int = 64
    count: int | None = None
    count_mu: float = 3.3
    count_sigma: float = 1.1
    count_min: int = 0
    count_max: int = 400
    radius_range: tuple[float, float] = (1.5, 3.0)
    intensity_range: tuple[float, float] = (0.4, 0.9)
    allow_overlap: bool = True
    noise_sigma: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.width < 4 or self.height < 4:
            raise ParameterError(f"scene size must be at least 4x4, got {self.width}x{self.height}")
        if self.count is not None and self.count < 0:
            raise ParameterError(f"fixed count must be >= 0, got {self.count}")
        if self.count_min < 0 or self.count_max < self.count_min:
            raise ParameterError(
                f"count range [{self.count_min}, {self.count_max}] is invalid"
            )
        if not 0 < self.radius_range[0] <= self.radius_range[1]:
            raise ParameterError(f"radius range {self.radius_range} is invalid")
        lo, hi = self.intensity_range
        if not 0 <= lo <= hi <= 1:
            raise ParameterError(f"intensity range {self.intensity_range} must sit inside [0, 1]")
        if self.noise_sigma < 0:
            raise ParameterError(f"noise sigma must be >= 0, got {self.noise_sigma}")


@dataclass
class SyntheticScene:
    image: GrayImage
    dots: AnnotationSet
    spec: SceneSpec


def draw_count(spec: SceneSpec, rng: np.random.Generator) -> int:
    """Number of cells for one scene: fixed, or clipped log-normal."""
    if spec.count is not None:
        return spec.count
    value = int(round(float(rng.lognormal(spec.count_mu, spec.count_sigma))))
    return int(np.clip(value, spec.count_min, spec.count_max))


def _place_centers(spec: SceneSpec, n: int, radii, rng: np.random.Generator):
    centers: list[tuple[float, float]] = []
    for i in range(n):
        for _ in range(_PLACEMENT_TRIES):
            x = rng.uniform(0.0, spec.width - 1e-9)
            y = rng.uniform(0.0, spec.height - 1e-9)
            if spec.allow_overlap or all(
                math.hypot(x - cx, y - cy) >= radii[i] + radii[j]
                for j, (cx, cy) in enumerate(centers)
            ):
                centers.append((x, y))
                break
        else:
            raise GenerationError(
                f"could not place cell {i} of {n} without overlap after {_PLACEMENT_TRIES} tries"
            )
    return centers


def generate_scene(spec: SceneSpec, seed: int | None = None, image_id: str = "") -> SyntheticScene:
    """Render one scene: Gaussian blobs plus noise, with exact dot truth."""
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    n = draw_count(spec, rng)
    radii = rng.uniform(*spec.radius_range, size=n)
    intensities = rng.uniform(*spec.intensity_range, size=n)
    centers = _place_centers(spec, n, radii, rng)

    ys, xs = np.mgrid[0 : spec.height, 0 : spec.width]
    image = np.zeros((spec.height, spec.width), dtype=np.float64)
    for (cx, cy), radius, intensity in zip(centers, radii, intensities):
        sigma = radius / 2.0
        image += intensity * np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2.0 * sigma * sigma))
    if spec.noise_sigma > 0:
        image += rng.normal(0.0, spec.noise_sigma, size=image.shape)
    image = np.clip(image, 0.0, 1.0)

    dots = AnnotationSet(
        image_id=image_id,
        dots=[DotAnnotation(x, y) for x, y in centers],
        marker="DAPI",
        image_size=(spec.width, spec.height),
    )
    return SyntheticScene(image=GrayImage(image), dots=dots, spec=spec)


def _spec_for_bin(spec: SceneSpec, bin_name: str) -> SceneSpec:
    lo, hi = DENSITY_BIN_RANGES[bin_name]
    lo = max(lo, spec.count_min)
    hi = spec.count_max if hi is None else min(hi, spec.count_max)
    if lo > hi:
        raise ParameterError(
            f"quota for bin {bin_name!r} is infeasible: needs counts in "
            f"[{DENSITY_BIN_RANGES[bin_name][0]}, {DENSITY_BIN_RANGES[bin_name][1]}] "
            f"but the spec allows [{spec.count_min}, {spec.count_max}]"
        )
    return replace(spec, count=None, count_min=lo, count_max=hi)


@dataclass
class GeneratedCorpus:
    root: Path
    manifest: DatasetManifest
    scenes: list[SyntheticScene] = field(repr=False, default_factory=list)


def generate_corpus(
    spec: SceneSpec,
    n_images: int,
    out_dir: Path,
    binned: dict[str, int] | None = None,
    fraction_40x: float = 0.5,
) -> GeneratedCorpus:
    """Write a dataset-layout corpus of seeded scenes.

    ``binned`` optionally fixes how many images fall into each density
    bin (low/medium/high on the true count); remaining images draw from
    the spec's own count distribution. Magnifications alternate between
    20x and 40x at ``fraction_40x`` for stratification exercises.
    """
    if n_images < 1:
        raise ParameterError(f"corpus needs at least one image, got {n_images}")
    binned = dict(binned or {})
    unknown = set(binned) - set(DENSITY_BIN_RANGES)
    if unknown:
        raise ParameterError(f"unknown density bins in quota: {sorted(unknown)}")
    if any(q < 0 for q in binned.values()):
        raise ParameterError(f"bin quotas must be >= 0, got {binned}")
    if sum(binned.values()) > n_images:
        raise ParameterError(
            f"bin quotas sum to {sum(binned.values())} but the corpus holds {n_images} images"
        )

    per_image_specs = []
    for bin_name in ("low", "medium", "high"):
        quota = binned.get(bin_name, 0)
        if quota:
            per_image_specs += [_spec_for_bin(spec, bin_name)] * quota
    per_image_specs += [spec] * (n_images - len(per_image_specs))

    root = Path(out_dir)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "annotations").mkdir(parents=True, exist_ok=True)

    master = np.random.default_rng(spec.seed)
    image_seeds = master.integers(0, 2**63 - 1, size=n_images)
    magnifications = np.where(master.random(n_images) < fraction_40x, "40x", "20x")

    records = []
    scenes = []
    for i, (scene_spec, scene_seed) in enumerate(zip(per_image_specs, image_seeds), start=1):
        image_id = str(i)
        scene = generate_scene(scene_spec, seed=int(scene_seed), image_id=image_id)
        scenes.append(scene)
        image_path = root / "images" / f"{image_id}.pgm"
        annotation_path = root / "annotations" / f"{image_id}.csv"
        image_path.write_bytes(write_pgm(scene.image))
        annotation_path.write_text(write_csv(scene.dots))
        records.append(
            ManifestRecord(
                image_id=image_id,
                original_name=f"synthetic_{image_id}",
                image_path=image_path,
                annotation_path=annotation_path,
                marker="DAPI",
                magnification=str(magnifications[i - 1]),
                width=scene.spec.width,
                height=scene.spec.height,
                count=scene.dots.count(),
            )
        )

    manifest = DatasetManifest(records)
    (root / "metadata.csv").write_text(manifest_to_csv(manifest))
    return GeneratedCorpus(root=root, manifest=manifest, scenes=scenes)
