"""Dot-annotation parsing, cleaning, and dataset bookkeeping.

Annotations arrive either as ImageJ CellCounter XML exports or as plain
``X,Y`` CSV files; both map to the same in-memory types. Cleaning pairs
annotation files with images, drops orphans and exact content
duplicates, and renames survivors to sequential numeric identifiers.
See docs/formats.md for the on-disk layouts.
"""

from __future__ import annotations

import hashlib
import statistics
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path

from .errors import AnnotationError, ParameterError
from .imaging import read_image

BASE_MARKERS = ("DAPI", "PI", "RIP", "GFAP", "TuJ1", "MAP2ab", "Ki67")
MAGNIFICATIONS = ("20x", "40x")


def normalize_marker(marker: str) -> str:
    """Canonicalize a marker label; co-labels use '+' between base markers."""
    parts = [p.strip() for p in marker.split("+")]
    canon = []
    for part in parts:
        match = next((m for m in BASE_MARKERS if m.lower() == part.lower()), None)
        if match is None:
            raise AnnotationError(f"unknown marker {part!r}; expected one of {BASE_MARKERS}")
        canon.append(match)
    return "+".join(canon)


@dataclass(frozen=True)
class DotAnnotation:
    """A single (x, y) cell-center click, in pixel coordinates."""

    x: float
    y: float

    def __post_init__(self):
        if not (self.x >= 0 and self.y >= 0):
            raise AnnotationError(f"dot coordinates must be non-negative, got ({self.x}, {self.y})")


@dataclass
class AnnotationSet:
    """Every dot for one image, plus optional acquisition metadata."""

    image_id: str
    dots: list[DotAnnotation] = field(default_factory=list)
    marker: str | None = None
    magnification: str | None = None
    image_size: tuple[int, int] | None = None

    def __post_init__(self):
        if self.marker is not None:
            self.marker = normalize_marker(self.marker)
        if self.magnification is not None and self.magnification not in MAGNIFICATIONS:
            raise AnnotationError(
                f"unknown magnification {self.magnification!r}; expected one of {MAGNIFICATIONS}"
            )

    def count(self) -> int:
        return len(self.dots)


def _byte_offset(data: bytes, line: int, column: int) -> int:
    """Translate a 1-based line / 0-based column into a byte offset."""
    lines = data.split(b"\n")
    return sum(len(l) + 1 for l in lines[: line - 1]) + column


def parse_cellcounter_xml(data: bytes) -> AnnotationSet:
    """Read a CellCounter marker file; all marker-type groups are merged."""
    try:
        root = ET.fromstring(data)
    except ET.ParseError as exc:
        line, column = exc.position
        offset = _byte_offset(data, line, column)
        raise AnnotationError(f"malformed XML at byte offset {offset}: {exc}") from exc

    filename = root.findtext("Image_Properties/Image_Filename", default="").strip()
    dots: list[DotAnnotation] = []
    index = 0
    for marker in root.iter("Marker"):
        x_text = marker.findtext("MarkerX")
        y_text = marker.findtext("MarkerY")
        if x_text is None or y_text is None:
            raise AnnotationError(f"marker {index} is missing MarkerX/MarkerY")
        try:
            dots.append(DotAnnotation(float(x_text), float(y_text)))
        except ValueError as exc:
            raise AnnotationError(f"marker {index} has non-numeric coordinates") from exc
        index += 1
    return AnnotationSet(image_id=filename, dots=dots)


def write_csv(annotations: AnnotationSet) -> str:
    """Serialize dots as an ``X,Y`` CSV; coordinates round-trip exactly."""
    lines = ["X,Y"]
    lines.extend(f"{dot.x!r},{dot.y!r}" for dot in annotations.dots)
    return "\n".join(lines) + "\n"


def parse_csv(data: str | bytes, image_id: str = "") -> AnnotationSet:
    text = data.decode("utf-8") if isinstance(data, bytes) else data
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or [c.strip().upper() for c in lines[0].split(",")] != ["X", "Y"]:
        raise AnnotationError("annotation CSV must start with an X,Y header")
    dots = []
    for number, line in enumerate(lines[1:], start=2):
        cells = line.split(",")
        try:
            x, y = float(cells[0]), float(cells[1])
        except (ValueError, IndexError) as exc:
            raise AnnotationError(f"row {number}: expected two numeric cells, got {line!r}") from exc
        dots.append(DotAnnotation(x, y))
    return AnnotationSet(image_id=image_id, dots=dots)


def parse_annotation_file(path: Path, image_id: str = "") -> AnnotationSet:
    """Dispatch on suffix: .xml (CellCounter) or .csv."""
    data = Path(path).read_bytes()
    if Path(path).suffix.lower() == ".xml":
        parsed = parse_cellcounter_xml(data)
        parsed.image_id = image_id or parsed.image_id
        return parsed
    return parse_csv(data, image_id=image_id)


# --- Dataset cleaning ----------------------------------------------------

REJECT_REASONS = ("orphan_annotation", "orphan_image", "duplicate")


@dataclass(frozen=True)
class RejectEntry:
    image_path: str
    annotation_path: str
    reason: str


@dataclass
class ManifestRecord:
    image_id: str
    original_name: str
    image_path: Path
    annotation_path: Path
    marker: str
    magnification: str
    width: int
    height: int
    count: int


@dataclass
class DatasetManifest:
    records: list[ManifestRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def counts(self) -> list[int]:
        return [r.count for r in self.records]


def _content_key(image_bytes: bytes, annotations: AnnotationSet) -> str:
    digest = hashlib.sha256(image_bytes)
    for dot in sorted(annotations.dots, key=lambda d: (d.x, d.y)):
        digest.update(f"{dot.x!r},{dot.y!r};".encode("ascii"))
    return digest.hexdigest()


def clean_dataset(
    pairs: list[tuple[Path | None, Path | None]],
    metadata: dict[str, dict[str, str]] | None = None,
) -> tuple[DatasetManifest, list[RejectEntry]]:
    """Match, de-duplicate, and renumber image/annotation pairs.

    ``pairs`` may contain half-open entries (a missing side is None);
    those become orphan rejections. Duplicate detection hashes image
    bytes plus the sorted dot list, so renamed copies are still caught.
    ``metadata`` optionally maps an image stem to marker / magnification
    / original_name values to carry through.
    """
    metadata = metadata or {}
    rejects: list[RejectEntry] = []
    records: list[ManifestRecord] = []
    seen: set[str] = set()
    next_id = 1
    for image_path, annotation_path in pairs:
        if image_path is None and annotation_path is None:
            continue
        if image_path is None:
            rejects.append(RejectEntry("", str(annotation_path), "orphan_annotation"))
            continue
        if annotation_path is None:
            rejects.append(RejectEntry(str(image_path), "", "orphan_image"))
            continue
        image_path, annotation_path = Path(image_path), Path(annotation_path)
        image_bytes = image_path.read_bytes()
        annotations = parse_annotation_file(annotation_path, image_id=image_path.stem)
        key = _content_key(image_bytes, annotations)
        if key in seen:
            rejects.append(RejectEntry(str(image_path), str(annotation_path), "duplicate"))
            continue
        seen.add(key)
        image = read_image(image_bytes)
        meta = metadata.get(image_path.stem, {})
        records.append(
            ManifestRecord(
                image_id=str(next_id),
                original_name=meta.get("original_name", image_path.stem),
                image_path=image_path,
                annotation_path=annotation_path,
                marker=meta.get("marker", ""),
                magnification=meta.get("magnification", ""),
                width=image.width,
                height=image.height,
                count=annotations.count(),
            )
        )
        next_id += 1
    return DatasetManifest(records), rejects


METADATA_COLUMNS = ("id", "original_name", "marker", "magnification", "width", "height", "count")


def manifest_to_csv(manifest: DatasetManifest) -> str:
    lines = [",".join(METADATA_COLUMNS)]
    for r in manifest.records:
        lines.append(
            f"{r.image_id},{r.original_name},{r.marker},{r.magnification},"
            f"{r.width},{r.height},{r.count}"
        )
    return "\n".join(lines) + "\n"


def rejects_to_csv(rejects: list[RejectEntry]) -> str:
    lines = ["image,annotation,reason"]
    lines.extend(f"{r.image_path},{r.annotation_path},{r.reason}" for r in rejects)
    return "\n".join(lines) + "\n"


def load_manifest(root: Path) -> DatasetManifest:
    """Rebuild a manifest from a dataset directory written by ingest/synth.

    Expects ``metadata.csv`` plus ``images/<id>.pgm`` and
    ``annotations/<id>.csv`` per record.
    """
    root = Path(root)
    metadata_path = root / "metadata.csv"
    if not metadata_path.is_file():
        raise ParameterError(f"no metadata.csv under {root}")
    lines = metadata_path.read_text().splitlines()
    if not lines or tuple(lines[0].split(",")) != METADATA_COLUMNS:
        raise AnnotationError(f"unexpected metadata header in {metadata_path}")
    records = []
    for line in lines[1:]:
        if not line.strip():
            continue
        image_id, original_name, marker, magnification, width, height, count = line.split(",")
        records.append(
            ManifestRecord(
                image_id=image_id,
                original_name=original_name,
                image_path=root / "images" / f"{image_id}.pgm",
                annotation_path=root / "annotations" / f"{image_id}.csv",
                marker=marker,
                magnification=magnification,
                width=int(width),
                height=int(height),
                count=int(count),
            )
        )
    return DatasetManifest(records)


# --- Summary statistics ---------------------------------------------------


@dataclass(frozen=True)
class StatsRow:
    group_kind: str  # "marker" | "magnification" | "all"
    group: str
    n_images: int
    total_cells: int
    mean_cpi: float
    std_cpi: float  # population standard deviation
    median_cpi: float
    min_cpi: int
    max_cpi: int


def _stats_row(kind: str, group: str, counts: list[int]) -> StatsRow:
    return StatsRow(
        group_kind=kind,
        group=group,
        n_images=len(counts),
        total_cells=sum(counts),
        mean_cpi=statistics.fmean(counts),
        std_cpi=statistics.pstdev(counts),
        median_cpi=float(statistics.median(counts)),
        min_cpi=min(counts),
        max_cpi=max(counts),
    )


def dataset_stats(manifest: DatasetManifest) -> list[StatsRow]:
    """Per-marker and per-magnification count summaries, plus an overall row."""
    if not manifest.records:
        raise ParameterError("cannot summarize an empty manifest")
    rows = [_stats_row("all", "all", manifest.counts())]
    for kind, key in (("marker", lambda r: r.marker), ("magnification", lambda r: r.magnification)):
        groups: dict[str, list[int]] = {}
        for record in manifest.records:
            groups.setdefault(key(record) or "(unspecified)", []).append(record.count)
        for group in sorted(groups):
            rows.append(_stats_row(kind, group, groups[group]))
    return rows


def stats_to_csv(rows: list[StatsRow]) -> str:
    lines = ["group_kind,group,n_images,total_cells,mean_cpi,std_cpi,median_cpi,min_cpi,max_cpi"]
    for r in rows:
        lines.append(
            f"{r.group_kind},{r.group},{r.n_images},{r.total_cells},"
            f"{r.mean_cpi!r},{r.std_cpi!r},{r.median_cpi!r},{r.min_cpi},{r.max_cpi}"
        )
    return "\n".join(lines) + "\n"
