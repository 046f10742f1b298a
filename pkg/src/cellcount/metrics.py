"""Count-accuracy metrics and per-density-bin (macro) reporting.

All metrics operate on real-valued predicted counts; density-map sums
are never rounded first. MAPE skips zero-ground-truth pairs (the
percentage is undefined there) and reports how many were skipped; ACP
keeps them, where the 5% band degenerates to requiring an exact zero
prediction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .errors import ParameterError

ACP_TOLERANCE = 0.05
DEFAULT_DENSITY_BOUNDS = (250.0, 500.0)
DENSITY_BIN_NAMES = ("low", "medium", "high")


@dataclass(frozen=True)
class CountPair:
    """Ground-truth and predicted count for one image."""

    y: float
    y_hat: float
    image_id: str = ""

    def __post_init__(self):
        if not (math.isfinite(self.y) and math.isfinite(self.y_hat)):
            raise ParameterError(f"counts must be finite, got y={self.y}, y_hat={self.y_hat}")
        if self.y < 0:
            raise ParameterError(f"ground-truth count must be >= 0, got {self.y}")


@dataclass
class MetricsReport:
    mae: float
    mse: float
    rmse: float
    mape: float | None  # percent; None when every pair had y == 0
    acp: float  # percent
    n: int
    mape_excluded: int = 0  # zero-ground-truth pairs skipped by MAPE
    bins: dict[str, "MetricsReport"] = field(default_factory=dict)


def compute_metrics(pairs: list[CountPair]) -> MetricsReport:
    """MAE / MSE / RMSE / MAPE / ACP over a set of count pairs."""
    n = len(pairs)
    if n < 1:
        raise ParameterError("compute_metrics needs at least one pair")
    abs_errors = [abs(p.y - p.y_hat) for p in pairs]
    sq_errors = [(p.y - p.y_hat) ** 2 for p in pairs]
    positives = [p for p in pairs if p.y > 0]
    mse = sum(sq_errors) / n
    return MetricsReport(
        mae=sum(abs_errors) / n,
        mse=mse,
        rmse=math.sqrt(mse),
        mape=(
            100.0 * sum(abs(p.y - p.y_hat) / p.y for p in positives) / len(positives)
            if positives
            else None
        ),
        acp=100.0 * sum(abs(p.y_hat - p.y) <= ACP_TOLERANCE * p.y for p in pairs) / n,
        n=n,
        mape_excluded=n - len(positives),
    )


def bin_by_density(
    pairs: list[CountPair], bounds: tuple[float, float] = DEFAULT_DENSITY_BOUNDS
) -> dict[str, list[CountPair]]:
    """Partition pairs by ground-truth count: low <= b0 < medium <= b1 < high."""
    lo, hi = bounds
    if not lo < hi:
        raise ParameterError(f"density bounds must ascend, got {bounds}")
    out: dict[str, list[CountPair]] = {name: [] for name in DENSITY_BIN_NAMES}
    for p in pairs:
        if p.y <= lo:
            out["low"].append(p)
        elif p.y <= hi:
            out["medium"].append(p)
        else:
            out["high"].append(p)
    return out


def macro_report(
    pairs: list[CountPair], bounds: tuple[float, float] = DEFAULT_DENSITY_BOUNDS
) -> dict[str, MetricsReport]:
    """Independent metrics per density bin; empty bins are absent, not zero."""
    return {
        name: compute_metrics(members)
        for name, members in bin_by_density(pairs, bounds).items()
        if members
    }


def evaluate_pairs(
    pairs: list[CountPair], bounds: tuple[float, float] = DEFAULT_DENSITY_BOUNDS
) -> MetricsReport:
    """Overall report with per-bin sub-reports attached."""
    report = compute_metrics(pairs)
    report.bins = macro_report(pairs, bounds)
    return report


# --- Rendering ------------------------------------------------------------


def _fmt(value, digits=2) -> str:
    if value is None:
        return "-"
    return f"{value:.{digits}f}"


def markdown_table(headers: list[str], rows: list[list[str]]) -> str:
    widths = [
        max(len(str(h)), *(len(str(r[i])) for r in rows)) if rows else len(str(h))
        for i, h in enumerate(headers)
    ]
    def line(cells):
        return "| " + " | ".join(str(c).ljust(w) for c, w in zip(cells, widths)) + " |"
    sep = "|" + "|".join("-" * (w + 2) for w in widths) + "|"
    return "\n".join([line(headers), sep, *(line(r) for r in rows)]) + "\n"


def report_table_markdown(reports: dict[str, MetricsReport]) -> str:
    """One row per model: the five headline metrics."""
    headers = ["Model", "MAE v", "MSE v", "RMSE v", "MAPE v", "ACP ^"]
    rows = [
        [name, _fmt(r.mae), _fmt(r.mse), _fmt(r.rmse),
         _fmt(r.mape) + ("%" if r.mape is not None else ""), _fmt(r.acp) + "%"]
        for name, r in reports.items()
    ]
    return markdown_table(headers, rows)


def macro_table_markdown(reports: dict[str, MetricsReport]) -> str:
    """One row per model: MAE and ACP within each density bin."""
    headers = ["Model"]
    for name in DENSITY_BIN_NAMES:
        headers += [f"{name.capitalize()} MAE v", f"{name.capitalize()} ACP ^"]
    rows = []
    for name, report in reports.items():
        row = [name]
        for bin_name in DENSITY_BIN_NAMES:
            sub = report.bins.get(bin_name)
            row += [_fmt(sub.mae if sub else None), _fmt(sub.acp if sub else None)]
        rows.append(row)
    return markdown_table(headers, rows)


REPORT_CSV_COLUMNS = ("model", "subset", "n", "mae", "mse", "rmse", "mape", "acp", "mape_excluded")


def report_to_csv(reports: dict[str, MetricsReport]) -> str:
    """Flat CSV with an `all` row plus one row per populated density bin."""
    lines = [",".join(REPORT_CSV_COLUMNS)]

    def row(model, subset, r):
        mape = "" if r.mape is None else repr(r.mape)
        return (
            f"{model},{subset},{r.n},{r.mae!r},{r.mse!r},{r.rmse!r},"
            f"{mape},{r.acp!r},{r.mape_excluded}"
        )

    for model, report in reports.items():
        lines.append(row(model, "all", report))
        for bin_name in DENSITY_BIN_NAMES:
            if bin_name in report.bins:
                lines.append(row(model, bin_name, report.bins[bin_name]))
    return "\n".join(lines) + "\n"
