"""Jenks natural-breaks binning and stratified train/test splitting.

The Jenks classifier is the exact O(k*n^2) dynamic program over
contiguous partitions of the sorted values (no heuristic reshuffling),
so small instances can be verified against brute-force enumeration.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .annotations import DatasetManifest
from .errors import ParameterError


@dataclass(frozen=True)
class JenksBreaks:
    """k-class natural-breaks classification of a 1-D sample.

    ``breaks`` holds the k-1 upper-inclusive thresholds: a value equal to
    a threshold belongs to the lower class.
    """

    k: int
    breaks: tuple[float, ...]
    gvf: float  # goodness of variance fit in [0, 1]


def _segment_cost(s1: np.ndarray, s2: np.ndarray, i, j):
    """Sum of squared deviations of sorted[i:j], from prefix sums."""
    n = j - i
    return np.maximum(0.0, (s2[j] - s2[i]) - (s1[j] - s1[i]) ** 2 / n)


def jenks_breaks(values, k: int) -> JenksBreaks:
    """Class boundaries minimizing total within-class squared deviation."""
    data = np.sort(np.asarray(list(values), dtype=np.float64))
    n = len(data)
    if k < 1:
        raise ParameterError(f"need at least one class, got k={k}")
    if n < k:
        raise ParameterError(f"cannot split {n} values into {k} classes")
    distinct = len(np.unique(data))
    if k > distinct:
        raise ParameterError(f"k={k} exceeds the {distinct} distinct values")

    s1 = np.concatenate([[0.0], np.cumsum(data)])
    s2 = np.concatenate([[0.0], np.cumsum(data * data)])

    # cost[m, j]: best partition of the first j values into m classes.
    cost = np.full((k + 1, n + 1), np.inf)
    cut = np.zeros((k + 1, n + 1), dtype=np.int64)
    cost[1, 1:] = _segment_cost(s1, s2, 0, np.arange(1, n + 1))
    for m in range(2, k + 1):
        for j in range(m, n + 1):
            starts = np.arange(m - 1, j)
            candidates = cost[m - 1, starts] + _segment_cost(s1, s2, starts, j)
            best = int(np.argmin(candidates))  # first optimum: smallest start
            cost[m, j] = candidates[best]
            cut[m, j] = starts[best]

    bounds = []
    j = n
    for m in range(k, 1, -1):
        j = int(cut[m, j])
        bounds.append(j)
    bounds.reverse()

    total = float(_segment_cost(s1, s2, 0, n))
    gvf = 1.0 if total == 0.0 else 1.0 - float(cost[k, n]) / total
    return JenksBreaks(
        k=k,
        breaks=tuple(float(data[b - 1]) for b in bounds),
        gvf=min(1.0, max(0.0, gvf)),
    )


def assign_bin(count: float, breaks: JenksBreaks) -> int:
    """Index of the class containing ``count``; boundary values go low."""
    return int(np.searchsorted(np.asarray(breaks.breaks), count, side="left"))


# --- Stratified splitting -------------------------------------------------


@dataclass(frozen=True)
class SplitEntry:
    image_id: str
    count: int
    bin: int
    magnification: str
    assignment: str  # "train" | "test"


@dataclass
class SplitManifest:
    entries: list[SplitEntry]
    seed: int
    breaks: JenksBreaks | None = None

    def ids(self, assignment: str) -> list[str]:
        return [e.image_id for e in self.entries if e.assignment == assignment]

    def strata(self) -> dict[tuple[int, str], list[SplitEntry]]:
        out: dict[tuple[int, str], list[SplitEntry]] = {}
        for e in self.entries:
            out.setdefault((e.bin, e.magnification), []).append(e)
        return out


def _id_sort_key(image_id: str):
    return (0, int(image_id), "") if image_id.isdigit() else (1, 0, image_id)


def _train_size(n: int, ratio: float) -> int:
    size = int(np.floor(ratio * n + 0.5))  # round half up
    if n == 1:
        return 1  # singleton strata go to train
    return max(1, min(n - 1, size))


def stratified_split(
    manifest: DatasetManifest,
    ratio: float = 0.8,
    seed: int = 0,
    k_bins: int = 5,
    breaks: JenksBreaks | None = None,
) -> SplitManifest:
    """Assign train/test within each (count bin, magnification) stratum.

    The shuffle is seeded and strata are visited in sorted order, so the
    result is a pure function of (manifest, ratio, seed, k_bins).
    """
    if not manifest.records:
        raise ParameterError("cannot split an empty manifest")
    if not 0.0 < ratio < 1.0:
        raise ParameterError(f"train ratio must be in (0, 1), got {ratio}")
    if breaks is None:
        breaks = jenks_breaks(manifest.counts(), k_bins)

    strata: dict[tuple[int, str], list] = {}
    for record in manifest.records:
        key = (assign_bin(record.count, breaks), record.magnification)
        strata.setdefault(key, []).append(record)

    rng = np.random.default_rng(seed)
    assignment: dict[str, str] = {}
    for key in sorted(strata):
        members = sorted(strata[key], key=lambda r: _id_sort_key(r.image_id))
        order = rng.permutation(len(members))
        n_train = _train_size(len(members), ratio)
        for rank, idx in enumerate(order):
            assignment[members[idx].image_id] = "train" if rank < n_train else "test"

    entries = [
        SplitEntry(
            image_id=r.image_id,
            count=r.count,
            bin=assign_bin(r.count, breaks),
            magnification=r.magnification,
            assignment=assignment[r.image_id],
        )
        for r in manifest.records
    ]
    return SplitManifest(entries=entries, seed=seed, breaks=breaks)


def three_way_split(
    manifest: DatasetManifest,
    seed: int = 0,
    test_ratio: float = 0.2,
    val_ratio_of_train: float = 0.125,
    k_bins: int = 5,
) -> dict[str, str]:
    """Train/val/test assignment (default net 70/10/20).

    The validation subset is carved from the training side with the same
    stratified procedure, reusing the bins fitted on the full manifest.
    """
    first = stratified_split(manifest, ratio=1.0 - test_ratio, seed=seed, k_bins=k_bins)
    out = {e.image_id: e.assignment for e in first.entries}
    train_ids = set(first.ids("train"))
    sub = DatasetManifest([r for r in manifest.records if r.image_id in train_ids])
    second = stratified_split(
        sub, ratio=1.0 - val_ratio_of_train, seed=seed + 1, breaks=first.breaks
    )
    for entry in second.entries:
        if entry.assignment == "test":
            out[entry.image_id] = "val"
    return out


SPLIT_COLUMNS = ("image_id", "count", "bin", "magnification", "assignment")


def split_to_csv(split: SplitManifest) -> str:
    lines = [",".join(SPLIT_COLUMNS)]
    lines.extend(
        f"{e.image_id},{e.count},{e.bin},{e.magnification},{e.assignment}"
        for e in split.entries
    )
    return "\n".join(lines) + "\n"


def split_from_csv(text: str, seed: int = 0) -> SplitManifest:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or tuple(lines[0].split(",")) != SPLIT_COLUMNS:
        raise ParameterError("unexpected split CSV header")
    entries = []
    for line in lines[1:]:
        image_id, count, bin_idx, magnification, assignment = line.split(",")
        entries.append(
            SplitEntry(
                image_id=image_id,
                count=int(count),
                bin=int(bin_idx),
                magnification=magnification,
                assignment=assignment,
            )
        )
    return SplitManifest(entries=entries, seed=seed)
