"""Deterministic grayscale image primitives.

Equalization, edge extraction, frequency-domain high-pass filtering,
normalization, and binary morphology, plus PNG / PGM / raw-field I/O.
All operations are pure functions on immutable rasters and are safe to
call concurrently.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from PIL import Image
from scipy import ndimage

__all__ = [
    "DimensionError",
    "GrayImage",
    "RealField",
    "BinaryMask",
    "histogram_equalize",
    "gradient_magnitude",
    "butterworth_highpass",
    "normalize01",
    "morphological_open",
    "disc_footprint",
    "read_png",
    "write_png",
    "read_pgm",
    "write_pgm",
    "read_real_field",
    "write_real_field",
]


class DimensionError(ValueError):
    """Raised for unusable raster dimensions (empty, too small, mismatched)."""


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class GrayImage:
    """8-bit grayscale raster, row-major, shape (height, width)."""

    pixels: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.pixels)
        if arr.ndim != 2 or arr.size == 0:
            raise DimensionError(f"image must be 2-D and non-empty, got shape {arr.shape}")
        if arr.dtype != np.uint8:
            if not np.issubdtype(arr.dtype, np.integer):
                raise ValueError(f"image values must be integers, got dtype {arr.dtype}")
            if arr.min() < 0 or arr.max() > 255:
                raise ValueError("image values must lie in [0, 255]")
            arr = arr.astype(np.uint8)
        object.__setattr__(self, "pixels", _freeze(arr))

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


@dataclass(frozen=True)
class RealField:
    """Row-major field of real values; `normalized` tags fields within [0, 1]."""

    values: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim != 2 or arr.size == 0:
            raise DimensionError(f"field must be 2-D and non-empty, got shape {arr.shape}")
        if self.normalized and (arr.min() < 0.0 or arr.max() > 1.0):
            raise ValueError("field tagged normalized must lie within [0, 1]")
        object.__setattr__(self, "values", _freeze(arr))

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class BinaryMask:
    """Row-major boolean mask."""

    values: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.values)
        if arr.ndim != 2 or arr.size == 0:
            raise DimensionError(f"mask must be 2-D and non-empty, got shape {arr.shape}")
        object.__setattr__(self, "values", _freeze(arr.astype(bool)))

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]


def histogram_equalize(img: GrayImage) -> GrayImage:
    """Standard cumulative-histogram equalization.

    The transfer function is m(v) = round(255 * (cdf(v) - cdf_min) / (N - cdf_min))
    with N the pixel count and cdf_min the cdf at the lowest occupied bin.
    A single-bin (constant) image maps to 255, the limit of the transfer
    function as the occupied range collapses.
    """
    counts = np.bincount(img.pixels.ravel(), minlength=256)
    cdf = np.cumsum(counts)
    n = img.pixels.size
    cdf_min = int(cdf[np.nonzero(counts)[0][0]])
    if cdf_min == n:
        lut = np.full(256, 255, dtype=np.uint8)
    else:
        scaled = np.rint(255.0 * (cdf - cdf_min) / float(n - cdf_min))
        lut = np.clip(scaled, 0, 255).astype(np.uint8)
    return GrayImage(lut[img.pixels])


def _gaussian_kernel1d(sigma: float) -> np.ndarray:
    radius = max(1, int(round(3.0 * sigma)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T.copy()


def correlate_replicate(arr: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """2-D correlation with edge-replicated borders.

    Accumulates one kernel tap at a time over shifted views, so every output
    pixel sees the identical floating-point operation sequence; a constant
    input therefore yields an exactly constant output.
    """
    kh, kw = kernel.shape
    ry, rx = (kh - 1) // 2, (kw - 1) // 2
    padded = np.pad(arr, ((ry, kh - 1 - ry), (rx, kw - 1 - rx)), mode="edge")
    h, w = arr.shape
    out = np.zeros_like(arr, dtype=np.float64)
    for dy in range(kh):
        for dx in range(kw):
            tap = kernel[dy, dx]
            if tap != 0.0:
                out += tap * padded[dy : dy + h, dx : dx + w]
    return out


def gradient_magnitude(img: GrayImage, sigma: float = 1.0) -> RealField:
    """Gaussian-smoothed Sobel gradient magnitude.

    Smoothing uses a normalized Gaussian (kernel radius 3*sigma), then the
    Sobel x/y responses give sqrt(gx^2 + gy^2). Borders are handled by edge
    replication so the frame does not read as an artificial edge, and a
    constant image yields an exactly zero field.
    """
    if img.width < 3 or img.height < 3:
        raise DimensionError(f"gradient needs at least 3x3 pixels, got {img.width}x{img.height}")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    f = img.pixels.astype(np.float64)
    k1 = _gaussian_kernel1d(sigma)
    smoothed = correlate_replicate(f, k1[None, :])
    smoothed = correlate_replicate(smoothed, k1[:, None])
    gx = correlate_replicate(smoothed, SOBEL_X)
    # transpose trick: the x-kernel taps cancel pairwise within each row, so
    # flat regions come out exactly zero in either direction
    gy = correlate_replicate(smoothed.T, SOBEL_X).T
    return RealField(np.hypot(gx, gy))


def _next_pow2(n: int) -> int:
    return 1 << (n - 1).bit_length()


def butterworth_highpass(img: GrayImage, cutoff: float = 0.05, order: int = 2) -> RealField:
    """Frequency-domain Butterworth high-pass magnitude response.

    Applies H(u, v) = 1 / (1 + (D0 / D)^(2n)) over the centered radial
    frequency D, with H at D = 0 defined as 0 (zero DC gain). Non-power-of-two
    images are zero-padded up to the next power of two and cropped back; the
    mean is removed before padding so that DC removal is exact regardless of
    padding (a constant image comes back identically zero).
    """
    if not 0.0 < cutoff <= 0.5:
        raise ValueError(f"cutoff must be in (0, 0.5], got {cutoff}")
    if order < 1:
        raise ValueError(f"order must be a positive integer, got {order}")
    h, w = img.pixels.shape
    f = img.pixels.astype(np.float64)
    f -= f.mean()
    ph, pw = _next_pow2(h), _next_pow2(w)
    padded = np.zeros((ph, pw), dtype=np.float64)
    padded[:h, :w] = f
    spectrum = np.fft.fft2(padded)
    d = np.hypot(np.fft.fftfreq(ph)[:, None], np.fft.fftfreq(pw)[None, :])
    gain = np.zeros_like(d)
    nonzero = d > 0.0
    gain[nonzero] = 1.0 / (1.0 + (cutoff / d[nonzero]) ** (2 * order))
    filtered = np.fft.ifft2(spectrum * gain).real
    return RealField(np.abs(filtered[:h, :w]))


def normalize01(field: RealField) -> RealField:
    """Linear rescale to [0, 1]; a constant field maps to all zeros."""
    v = field.values
    vmin = float(v.min())
    vmax = float(v.max())
    if vmax == vmin:
        return RealField(np.zeros_like(v), normalized=True)
    return RealField((v - vmin) / (vmax - vmin), normalized=True)


def disc_footprint(radius: int) -> np.ndarray:
    """Boolean disc of the given pixel radius (dx^2 + dy^2 <= r^2)."""
    if radius < 1:
        raise ValueError(f"radius must be >= 1, got {radius}")
    yy, xx = np.ogrid[-radius : radius + 1, -radius : radius + 1]
    return (yy * yy + xx * xx) <= radius * radius


def morphological_open(mask: BinaryMask, radius: int = 1) -> BinaryMask:
    """Erosion then dilation with a disc structuring element.

    Pixels outside the raster count as true for erosion and false for
    dilation, so a fully-true mask is a fixed point and the operation never
    adds pixels beyond the input support.
    """
    footprint = disc_footprint(radius)
    eroded = ndimage.binary_erosion(mask.values, structure=footprint, border_value=1)
    opened = ndimage.binary_dilation(eroded, structure=footprint, border_value=0)
    return BinaryMask(opened)


# --- raster I/O -----------------------------------------------------------


def read_png(path) -> GrayImage:
    with Image.open(path) as im:
        return GrayImage(np.asarray(im.convert("L")))


def write_png(path, img: GrayImage) -> None:
    Image.fromarray(img.pixels, mode="L").save(path, format="PNG")


def read_pgm(path) -> GrayImage:
    """Binary PGM (P5), maxval <= 255."""
    with open(path, "rb") as fh:
        data = fh.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise ValueError(f"not a binary PGM file: magic {tokens[0]!r}")
    width, height, maxval = (int(t) for t in tokens[1:4])
    if maxval > 255:
        raise ValueError("only 8-bit PGM is supported")
    pos += 1  # single whitespace after maxval
    raw = np.frombuffer(data, dtype=np.uint8, count=width * height, offset=pos)
    return GrayImage(raw.reshape(height, width))


def write_pgm(path, img: GrayImage) -> None:
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (img.width, img.height))
        fh.write(img.pixels.tobytes())


_RFLD_MAGIC = b"RFLD"


def write_real_field(path, field: RealField) -> None:
    """Debug dump: 16-byte header (magic, u32 w, u32 h, u32 reserved, LE) + f32 data."""
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIII", _RFLD_MAGIC, field.width, field.height, 0))
        fh.write(field.values.astype("<f4").tobytes())


def read_real_field(path) -> RealField:
    with open(path, "rb") as fh:
        header = fh.read(16)
        magic, width, height, _ = struct.unpack("<4sIII", header)
        if magic != _RFLD_MAGIC:
            raise ValueError(f"not a real-field dump: magic {magic!r}")
        raw = np.frombuffer(fh.read(4 * width * height), dtype="<f4")
    return RealField(raw.reshape(height, width).astype(np.float64))
