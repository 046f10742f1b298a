"""Image containers, Gaussian kernels, and count-conserving density maps.

Ground-truth density maps are generated directly at the target grid
resolution by scaling dot coordinates, so no resampling step can leak
mass: the sum of every generated map equals the number of dots exactly
(up to float rounding), including dots whose kernel is truncated by the
border.
"""

from __future__ import annotations

import io
import math
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import AnnotationError, ImageFormatError, ParameterError


class GrayImage:
    """Single-channel image with float pixels normalized to [0, 1]."""

    __slots__ = ("pixels",)

    def __init__(self, pixels):
        arr = np.asarray(pixels, dtype=np.float64)
        if arr.ndim != 2 or arr.size == 0:
            raise ParameterError(f"GrayImage needs a non-empty 2-D pixel grid, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ParameterError("GrayImage pixels must be finite")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ParameterError(
                f"GrayImage pixels must lie in [0, 1], got range [{arr.min()}, {arr.max()}]"
            )
        self.pixels = arr

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def size(self) -> tuple[int, int]:
        """(width, height) in pixels."""
        return (self.width, self.height)

    def __repr__(self) -> str:
        return f"GrayImage({self.width}x{self.height})"


class DensityMap:
    """2-D grid whose element sum is a (possibly fractional) object count.

    Ground-truth maps are non-negative by construction. Maps predicted by
    a model may carry small negative values; they are summed as-is and
    only clamped for rendering.
    """

    __slots__ = ("values",)

    def __init__(self, values):
        arr = np.asarray(values, dtype=np.float64)
        if arr.ndim != 2:
            raise ParameterError(f"DensityMap needs a 2-D value grid, got ndim={arr.ndim}")
        self.values = arr

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def total(self) -> float:
        """Predicted/ground-truth count: the sum over the whole grid."""
        return float(self.values.sum())

    def __repr__(self) -> str:
        return f"DensityMap({self.width}x{self.height}, total={self.total():.3f})"


@dataclass(frozen=True)
class GaussianKernel:
    """Odd-sized, unit-mass, rotation-symmetric stamp for dot annotations."""

    size: int
    sigma: float
    weights: np.ndarray = field(repr=False)

    def radius(self) -> int:
        return self.size // 2


def gaussian_kernel(size: int = 5, sigma: float = 1.0) -> GaussianKernel:
    """Sample a centered isotropic Gaussian on a size x size grid, sum-normalized to 1."""
    if size < 1 or size % 2 == 0:
        raise ParameterError(f"kernel size must be an odd integer >= 1, got {size}")
    if not sigma > 0:
        raise ParameterError(f"kernel sigma must be positive, got {sigma}")
    r = size // 2
    coords = np.arange(-r, r + 1, dtype=np.float64)
    dx, dy = np.meshgrid(coords, coords)
    w = np.exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma))
    w /= w.sum()
    return GaussianKernel(size=size, sigma=float(sigma), weights=w)


def _dot_xy(dot) -> tuple[float, float]:
    if hasattr(dot, "x") and hasattr(dot, "y"):
        return float(dot.x), float(dot.y)
    x, y = dot
    return float(x), float(y)


def density_from_dots(
    dots,
    out_size: tuple[int, int],
    src_size: tuple[int, int],
    kernel: GaussianKernel | None = None,
) -> DensityMap:
    """Stamp one unit-mass kernel per dot onto a (possibly smaller) grid.

    Dot pixel coordinates are scaled from ``src_size`` (width, height) to
    the ``out_size`` grid and rounded to the nearest cell. Kernels cut
    off by the border are renormalized so every dot still contributes a
    mass of exactly 1, keeping total() == len(dots).
    """
    out_w, out_h = int(out_size[0]), int(out_size[1])
    src_w, src_h = float(src_size[0]), float(src_size[1])
    if out_w < 1 or out_h < 1:
        raise ParameterError(f"output grid must be at least 1x1, got {out_size}")
    if src_w <= 0 or src_h <= 0:
        raise ParameterError(f"source size must be positive, got {src_size}")
    if kernel is None:
        kernel = gaussian_kernel()

    grid = np.zeros((out_h, out_w), dtype=np.float64)
    r = kernel.radius()
    for index, dot in enumerate(dots):
        x, y = _dot_xy(dot)
        if not (0.0 <= x < src_w and 0.0 <= y < src_h):
            raise AnnotationError(
                f"dot {index} at ({x}, {y}) lies outside the {src_w}x{src_h} image"
            )
        cx = min(out_w - 1, int(math.floor(x * out_w / src_w + 0.5)))
        cy = min(out_h - 1, int(math.floor(y * out_h / src_h + 0.5)))
        row_lo, row_hi = max(0, cy - r), min(out_h, cy + r + 1)
        col_lo, col_hi = max(0, cx - r), min(out_w, cx + r + 1)
        sub = kernel.weights[
            row_lo - (cy - r) : row_hi - (cy - r),
            col_lo - (cx - r) : col_hi - (cx - r),
        ]
        grid[row_lo:row_hi, col_lo:col_hi] += sub / sub.sum()
    return DensityMap(grid)


def resize_bilinear(img: GrayImage, width: int, height: int) -> GrayImage:
    """Bilinear resample with edge clamping; output stays in the input's range."""
    if width < 1 or height < 1:
        raise ParameterError(f"target size must be at least 1x1, got {width}x{height}")
    src = img.pixels
    if (width, height) == (img.width, img.height):
        return GrayImage(src.copy())

    def axis_coords(n_dst: int, n_src: int):
        s = (np.arange(n_dst, dtype=np.float64) + 0.5) * (n_src / n_dst) - 0.5
        lo = np.floor(s).astype(np.int64)
        t = s - lo
        lo0 = np.clip(lo, 0, n_src - 1)
        lo1 = np.clip(lo + 1, 0, n_src - 1)
        return lo0, lo1, t

    x0, x1, tx = axis_coords(width, img.width)
    y0, y1, ty = axis_coords(height, img.height)
    top = src[np.ix_(y0, x0)] * (1 - tx) + src[np.ix_(y0, x1)] * tx
    bot = src[np.ix_(y1, x0)] * (1 - tx) + src[np.ix_(y1, x1)] * tx
    out = top * (1 - ty)[:, None] + bot * ty[:, None]
    return GrayImage(np.clip(out, src.min(), src.max()))


# --- PGM / PNG I/O -------------------------------------------------------

_PGM_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n)*(\S+)")


def _pgm_tokens(data: bytes, count: int, start: int):
    """Read whitespace/comment-separated header tokens; returns (tokens, offset)."""
    tokens = []
    pos = start
    for _ in range(count):
        m = _PGM_TOKEN.match(data, pos)
        if not m:
            raise ImageFormatError("truncated PGM header")
        tokens.append(m.group(1))
        pos = m.end()
    return tokens, pos

def _read_pgm(data: bytes) -> GrayImage:
    magic = data[:2]
    try:
        (w_tok, h_tok, max_tok), pos = _pgm_tokens(data, 3, 2)
        width, height, maxval = int(w_tok), int(h_tok), int(max_tok)
    except (ValueError, ImageFormatError) as exc:
        raise ImageFormatError(f"bad PGM header: {exc}") from exc
    if width < 1 or height < 1 or not (0 < maxval < 65536):
        raise ImageFormatError(f"bad PGM dimensions {width}x{height} maxval {maxval}")

    n = width * height
    if magic == b"P5":
        pos += 1  # single whitespace byte after maxval
        itemsize = 2 if maxval > 255 else 1
        raw = data[pos : pos + n * itemsize]
        if len(raw) < n * itemsize:
            raise ImageFormatError(f"truncated PGM: expected {n * itemsize} pixel bytes, got {len(raw)}")
        dtype = ">u2" if itemsize == 2 else np.uint8
        values = np.frombuffer(raw, dtype=dtype, count=n).astype(np.float64)
    else:  # P2
        try:
            text = data[pos:].split()
            values = np.array([int(v) for v in text[:n]], dtype=np.float64)
        except ValueError as exc:
            raise ImageFormatError(f"bad PGM pixel value: {exc}") from exc
        if values.size < n:
            raise ImageFormatError(f"truncated PGM: expected {n} pixels, got {values.size}")
    if values.max(initial=0.0) > maxval:
        raise ImageFormatError("PGM pixel exceeds declared maxval")
    return GrayImage((values / maxval).reshape(height, width))


def _read_png(data: bytes) -> GrayImage:
    try:
        from PIL import Image
    except ImportError as exc:
        raise ImageFormatError(
            "PNG support requires Pillow (install the 'png' extra)"
        ) from exc
    try:
        with Image.open(io.BytesIO(data)) as im:
            im.load()
            if im.mode in ("I;16", "I;16B", "I"):
                arr = np.asarray(im, dtype=np.float64)
                return GrayImage(np.clip(arr / 65535.0, 0.0, 1.0))
            arr = np.asarray(im.convert("L"), dtype=np.float64)
            return GrayImage(arr / 255.0)
    except (OSError, SyntaxError) as exc:
        raise ImageFormatError(f"bad PNG data: {exc}") from exc


def read_image(data: bytes) -> GrayImage:
    """Decode PGM (P2/P5) or grayscale PNG bytes into a normalized image."""
    if data[:2] in (b"P2", b"P5"):
        return _read_pgm(data)
    if data[:8] == b"\x89PNG\r\n\x1a\n":
        return _read_png(data)
    raise ImageFormatError(f"unsupported image format (magic {data[:4]!r})")


def write_pgm(img: GrayImage, maxval: int = 255) -> bytes:
    """Encode as binary PGM (P5); 16-bit when maxval > 255."""
    if not (0 < maxval < 65536):
        raise ParameterError(f"maxval must be in [1, 65535], got {maxval}")
    quantized = np.rint(img.pixels * maxval).astype(">u2" if maxval > 255 else np.uint8)
    header = f"P5\n{img.width} {img.height}\n{maxval}\n".encode("ascii")
    return header + quantized.tobytes()


def write_heatmap(density: DensityMap, path) -> None:
    """Render a density map as an 8-bit PGM, max-normalized and clamped at 0."""
    values = np.clip(density.values, 0.0, None)
    peak = values.max(initial=0.0)
    if peak > 0:
        values = values / peak
    with open(path, "wb") as fh:
        fh.write(write_pgm(GrayImage(values)))


def write_density_csv(density: DensityMap) -> str:
    """Flat CSV: a width,height header line, then one value per line, row-major."""
    lines = [f"{density.width},{density.height}"]
    lines.extend(repr(float(v)) for v in density.values.reshape(-1))
    return "\n".join(lines) + "\n"


def read_density_csv(text: str) -> DensityMap:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ParameterError("empty density CSV")
    try:
        w, h = (int(part) for part in lines[0].split(","))
        values = np.array([float(ln) for ln in lines[1:]], dtype=np.float64)
    except ValueError as exc:
        raise ParameterError(f"bad density CSV: {exc}") from exc
    if values.size != w * h:
        raise ParameterError(f"density CSV holds {values.size} values, expected {w * h}")
    return DensityMap(values.reshape(h, w))
