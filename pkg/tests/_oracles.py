"""Independent oracles shared by the test suite.

Everything here is deliberately written without touching the library's
internals: finite differences for gradients, brute-force enumeration for
1-D partitions, and naive re-implementations of formulas under test.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

FD_STEP = 1e-5


def finite_difference_gradient(f, x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central finite differences of a scalar function at ``x``.

    ``f`` receives the (mutated in place, then restored) array and must
    return a plain float.
    """
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat_x = x.reshape(-1)
    flat_g = grad.reshape(-1)
    for i in range(flat_x.size):
        orig = flat_x[i]
        flat_x[i] = orig + h
        f_plus = f(x)
        flat_x[i] = orig - h
        f_minus = f(x)
        flat_x[i] = orig
        flat_g[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def max_relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Elementwise |a-b| / max(|a|, |b|, 1), reduced with max."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1.0)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def partition_cost(sorted_values: np.ndarray, boundaries: tuple[int, ...]) -> float:
    """Total within-class sum of squared deviations for a contiguous partition.

    ``boundaries`` are the start indices of classes 1..k-1 in the sorted
    array (class 0 starts at index 0).
    """
    edges = [0, *boundaries, len(sorted_values)]
    total = 0.0
    for lo, hi in zip(edges[:-1], edges[1:]):
        seg = sorted_values[lo:hi]
        if len(seg):
            total += float(np.sum((seg - np.mean(seg)) ** 2))
    return total


def best_partition_brute_force(values, k: int) -> tuple[float, tuple[int, ...]]:
    """Enumerate every contiguous k-partition of the sorted values.

    Returns (minimal cost, lexicographically smallest optimal boundary
    tuple). Boundaries are class start indices as in ``partition_cost``.
    """
    data = np.sort(np.asarray(values, dtype=np.float64))
    n = len(data)
    best_cost = math.inf
    best_bounds: tuple[int, ...] = ()
    for bounds in itertools.combinations(range(1, n), k - 1):
        cost = partition_cost(data, bounds)
        if cost < best_cost - 1e-12:
            best_cost = cost
            best_bounds = bounds
    return best_cost, best_bounds


def naive_count_metrics(truths, predictions) -> dict[str, float]:
    """Accumulator-style re-implementation of the five count metrics."""
    n = len(truths)
    abs_sum = 0.0
    sq_sum = 0.0
    pct_sum = 0.0
    pct_n = 0
    acceptable = 0
    for y, y_hat in zip(truths, predictions):
        err = y - y_hat
        abs_sum += abs(err)
        sq_sum += err * err
        if y > 0:
            pct_sum += abs(err) / y
            pct_n += 1
        if abs(y_hat - y) <= 0.05 * y:
            acceptable += 1
    return {
        "mae": abs_sum / n,
        "mse": sq_sum / n,
        "rmse": math.sqrt(sq_sum / n),
        "mape": 100.0 * pct_sum / pct_n if pct_n else float("nan"),
        "acp": 100.0 * acceptable / n,
        "n": n,
        "mape_excluded": n - pct_n,
    }
