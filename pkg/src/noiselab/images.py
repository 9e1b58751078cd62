"""Deterministic image primitives: crops, gradients, median filtering, quality metrics, PNG I/O.

Images are H x W x C float64 rasters nominally in [0, 1]. Values may leave
[0, 1] transiently inside noise synthesis; everything persisted to disk is
clamped first.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from PIL import Image as PILImage
from scipy import ndimage


class DimensionError(ValueError):
    """Image dimensions violate an operation's contract."""


class ParameterError(ValueError):
    """A parameter is outside its allowed range."""


@dataclass(frozen=True)
class Image:
    """H x W x C raster of finite floats, C in {1, 3}.

    A 2-D array is promoted to H x W x 1. Data is stored as float64 so that
    metric identities (e.g. a uniform 0.1 difference giving exactly 20 dB)
    hold to machine precision; the networks cast to float32 at the tensor
    boundary.
    """

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3:
            raise DimensionError(f"expected H x W x C array, got shape {arr.shape}")
        h, w, c = arr.shape
        if h < 1 or w < 1 or c not in (1, 3):
            raise DimensionError(f"invalid image shape {arr.shape}; channels must be 1 or 3")
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ParameterError("image contains non-finite values")
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def clamp(self) -> "Image":
        return Image(np.clip(self.data, 0.0, 1.0))


@dataclass(frozen=True)
class GradientField:
    """Horizontal (dx) and vertical (dy) adjacent-pixel deviations, same shape as the source."""

    dx: np.ndarray
    dy: np.ndarray


@dataclass(frozen=True)
class MetricRecord:
    psnr: float
    ssim: float
    image_id: str


def crop_random(img: Image, size: int, rng: np.random.Generator) -> Image:
    """Uniform random size x size crop. Row offset is drawn before column offset."""
    if size < 1:
        raise ParameterError(f"crop size must be >= 1, got {size}")
    if size > min(img.height, img.width):
        raise DimensionError(
            f"crop size {size} exceeds image dims {img.height}x{img.width}"
        )
    top = int(rng.integers(0, img.height - size + 1))
    left = int(rng.integers(0, img.width - size + 1))
    return Image(img.data[top : top + size, left : left + size])


def gradient(img: Image) -> GradientField:
    """Adjacent-pixel deviations: dx[i,j] = img[i,j+1] - img[i,j], last column zero.

    dy analogously along rows. Zero padding keeps the field the same shape
    as the image so penalties on gradient gaps stay elementwise.
    """
    a = img.data
    dx = np.diff(a, axis=1, append=a[:, -1:, :])
    dy = np.diff(a, axis=0, append=a[-1:, :, :])
    return GradientField(dx=dx, dy=dy)


def median_filter(img: Image, kernel: int) -> Image:
    """Exact median over a kernel x kernel window per channel, reflect-padded borders.

    Reflection here mirrors about the edge pixel without repeating it
    (np.pad mode='reflect', scipy mode='mirror').
    """
    if kernel < 1 or kernel % 2 == 0:
        raise ParameterError(f"kernel must be odd and >= 1, got {kernel}")
    if kernel == 1:
        return img
    if kernel > 2 * min(img.height, img.width) - 1:
        raise DimensionError(
            f"kernel {kernel} too large for {img.height}x{img.width} image"
        )
    out = np.empty_like(img.data)
    for c in range(img.channels):
        out[:, :, c] = ndimage.median_filter(img.data[:, :, c], size=kernel, mode="mirror")
    return Image(out)


def psnr(a: Image, b: Image) -> float:
    """Peak signal-to-noise ratio in dB with peak 1.0; +inf for identical images."""
    if a.data.shape != b.data.shape:
        raise DimensionError(f"shape mismatch: {a.data.shape} vs {b.data.shape}")
    diff = a.data.astype(np.float64) - b.data.astype(np.float64)
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_SSIM_K1 = 0.01
_SSIM_K2 = 0.03

# Rec. 601 luma weights for color -> gray before windowed statistics.
_LUMA = np.array([0.299, 0.587, 0.114])


def _to_gray(img: Image) -> np.ndarray:
    if img.channels == 1:
        return img.data[:, :, 0].astype(np.float64)
    return img.data.astype(np.float64) @ _LUMA


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords**2) / (2.0 * sigma**2))
    kernel = np.outer(g, g)
    return kernel / kernel.sum()


def _window_means(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    windows = sliding_window_view(x, kernel.shape)
    return np.tensordot(windows, kernel, axes=([2, 3], [0, 1]))


def ssim(a: Image, b: Image) -> float:
    """Single-scale SSIM: 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03, range 1.0.

    Color inputs are converted to grayscale first; the score is the mean over
    all valid window positions.
    """
    if a.data.shape != b.data.shape:
        raise DimensionError(f"shape mismatch: {a.data.shape} vs {b.data.shape}")
    if min(a.height, a.width) < _SSIM_WINDOW:
        raise DimensionError(
            f"image must be at least {_SSIM_WINDOW} pixels per side for SSIM"
        )
    x = _to_gray(a)
    y = _to_gray(b)
    kernel = _gaussian_window(_SSIM_WINDOW, _SSIM_SIGMA)

    mu_x = _window_means(x, kernel)
    mu_y = _window_means(y, kernel)
    var_x = _window_means(x * x, kernel) - mu_x**2
    var_y = _window_means(y * y, kernel) - mu_y**2
    cov = _window_means(x * y, kernel) - mu_x * mu_y

    c1 = _SSIM_K1**2
    c2 = _SSIM_K2**2
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))


def read_png(path) -> Image:
    """Read an 8-bit PNG, mapping [0, 255] linearly onto [0, 1]."""
    with PILImage.open(path) as pil:
        if pil.mode not in ("L", "RGB"):
            pil = pil.convert("RGB" if ("A" in pil.mode or len(pil.mode) > 2) else "L")
        arr = np.asarray(pil, dtype=np.float64) / 255.0
    return Image(arr)


def write_png(img: Image, path) -> None:
    """Write as 8-bit PNG; values are clamped then rounded to the nearest level."""
    arr = np.clip(img.data, 0.0, 1.0)
    quant = np.rint(arr * 255.0).astype(np.uint8)
    if img.channels == 1:
        pil = PILImage.fromarray(quant[:, :, 0], mode="L")
    else:
        pil = PILImage.fromarray(quant, mode="RGB")
    pil.save(path, format="PNG")
