"""Input coercion/validation helpers for the estimator API."""

from __future__ import annotations

import numbers

import numpy as np

from .annotations import AnnotationSet, DotAnnotation
from .errors import ParameterError
from .imaging import GrayImage


def check_image(obj) -> GrayImage:
    """Accept a GrayImage or a 2-D array of floats in [0, 1]."""
    if isinstance(obj, GrayImage):
        return obj
    return GrayImage(np.asarray(obj, dtype=np.float64))


def check_images(X) -> list[GrayImage]:
    """Accept a sequence of images or a single (n, h, w) array."""
    if isinstance(X, np.ndarray) and X.ndim == 3:
        return [GrayImage(plane) for plane in X]
    images = [check_image(item) for item in X]
    if not images:
        raise ParameterError("need at least one image")
    return images


def check_dots(obj) -> list[DotAnnotation]:
    """Accept an AnnotationSet, a list of dots/(x, y) pairs, or an (n, 2) array."""
    if isinstance(obj, AnnotationSet):
        return list(obj.dots)
    if isinstance(obj, np.ndarray):
        if obj.size == 0:
            return []
        if obj.ndim != 2 or obj.shape[1] != 2:
            raise ParameterError(f"dot arrays must have shape (n, 2), got {obj.shape}")
        return [DotAnnotation(float(x), float(y)) for x, y in obj]
    dots = []
    for item in obj:
        if isinstance(item, DotAnnotation):
            dots.append(item)
        else:
            x, y = item
            dots.append(DotAnnotation(float(x), float(y)))
    return dots


def check_counts(y) -> np.ndarray:
    """Accept per-image counts, or dot collections to count."""
    items = list(y)
    if items and not isinstance(items[0], numbers.Number):
        counts = np.array([len(check_dots(item)) for item in items], dtype=np.float64)
    else:
        counts = np.asarray(items, dtype=np.float64)
    if counts.ndim != 1:
        raise ParameterError(f"counts must be 1-D, got shape {counts.shape}")
    if counts.size and (not np.all(np.isfinite(counts)) or counts.min() < 0):
        raise ParameterError("counts must be finite and non-negative")
    return counts


def check_same_length(X, y) -> None:
    if len(X) != len(y):
        raise ParameterError(f"X holds {len(X)} images but y holds {len(y)} targets")
