"""Seeded synthetic degradations: gaussian, speckle, poisson, rician, and text overlay.

Every op is a pure function of (image, parameters, rng stream); clamping to
[0, 1] is always the final step. Level conventions follow the corpus
recipes: gaussian sigma is quoted in 8-bit units (sigma=25 means 25/255 in
normalized units), speckle level is the variance of the multiplicative
uniform noise, poisson level is the count magnitude lambda, rician level is
a fraction of the maximum intensity 1.0, text level is the target fraction
of corrupted pixels.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .images import Image, ParameterError

FAMILIES = ("gaussian", "speckle", "poisson", "rician", "text")

_LEVEL_CAP = {"speckle": 0.25, "rician": 0.2, "text": 1.0}


@dataclass(frozen=True)
class NoiseSpec:
    """A degradation family plus its level range (and optional pinned level).

    Ranges are sampled from the half-open interval (lo, hi], so lo=0 encodes
    ranges like sigma in (0, 50] directly.
    """

    family: str
    level_range: Tuple[float, float]
    fixed_level: Optional[float] = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ParameterError(f"unknown noise family {self.family!r}")
        lo, hi = self.level_range
        if not (np.isfinite(lo) and np.isfinite(hi)) or lo > hi or lo < 0:
            raise ParameterError(f"invalid level range [{lo}, {hi}]")
        if hi <= 0 and self.family != "text":
            raise ParameterError(f"{self.family} level range must stay positive")
        cap = _LEVEL_CAP.get(self.family)
        if cap is not None and hi > cap:
            raise ParameterError(f"{self.family} level must be <= {cap}, got {hi}")
        if self.fixed_level is not None and not (lo <= self.fixed_level <= hi):
            raise ParameterError(
                f"fixed level {self.fixed_level} outside range [{lo}, {hi}]"
            )


def sample_level(spec: NoiseSpec, rng: np.random.Generator) -> float:
    """The pinned level if set, otherwise a uniform draw from (lo, hi]."""
    if spec.fixed_level is not None:
        return float(spec.fixed_level)
    lo, hi = spec.level_range
    u = rng.random()  # in [0, 1), so hi - u*(hi-lo) lies in (lo, hi]
    return float(hi - u * (hi - lo))


def gaussian_field(shape, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """I.i.d. normal noise with mean 0 and std sigma/255 (sigma in 8-bit units)."""
    return rng.standard_normal(shape) * (sigma / 255.0)


def speckle_field(shape, v: float, rng: np.random.Generator) -> np.ndarray:
    """I.i.d. uniform noise on [-sqrt(3v), +sqrt(3v)]: mean 0, variance v."""
    a = np.sqrt(3.0 * v)
    return rng.uniform(-a, a, size=shape)


def add_gaussian(img: Image, sigma: float, rng: np.random.Generator) -> Image:
    if sigma < 0:
        raise ParameterError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return img
    noisy = img.data + gaussian_field(img.data.shape, sigma, rng)
    return Image(noisy).clamp()


def add_speckle(img: Image, v: float, rng: np.random.Generator) -> Image:
    if not 0 < v <= 0.25:
        raise ParameterError(f"speckle variance must be in (0, 0.25], got {v}")
    n = speckle_field(img.data.shape, v, rng)
    return Image(img.data + img.data * n).clamp()


def add_poisson(img: Image, lam: float, rng: np.random.Generator) -> Image:
    """Photon-count model x = Poisson(lam * y) / lam; preserves the mean, var y/lam."""
    if lam <= 0:
        raise ParameterError(f"poisson magnitude must be > 0, got {lam}")
    counts = rng.poisson(lam * np.maximum(img.data, 0.0))
    return Image(counts.astype(np.float64) / lam).clamp()


def add_rician(img: Image, level: float, rng: np.random.Generator) -> Image:
    """Magnitude-image noise x = sqrt((y+n1)^2 + n2^2), n1,n2 normal with std level."""
    if not 0 <= level <= 0.2:
        raise ParameterError(f"rician level must be in [0, 0.2], got {level}")
    if level == 0:
        return img
    n1 = rng.standard_normal(img.data.shape) * level
    n2 = rng.standard_normal(img.data.shape) * level
    mag = np.sqrt((img.data + n1) ** 2 + n2**2)
    return Image(mag).clamp()


# 5x7 bitmap glyphs, one int per row, low 5 bits used. Enough coverage for
# random strings without any font file dependency.
_GLYPHS = {
    "A": (0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11),
    "B": (0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E),
    "C": (0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E),
    "D": (0x1E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1E),
    "E": (0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F),
    "F": (0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10),
    "G": (0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F),
    "H": (0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11),
    "I": (0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E),
    "J": (0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C),
    "K": (0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11),
    "L": (0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F),
    "M": (0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11),
    "N": (0x11, 0x19, 0x15, 0x13, 0x11, 0x11, 0x11),
    "O": (0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E),
    "P": (0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10),
    "Q": (0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D),
    "R": (0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11),
    "S": (0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E),
    "T": (0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04),
    "U": (0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E),
    "V": (0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04),
    "W": (0x11, 0x11, 0x11, 0x15, 0x15, 0x1B, 0x11),
    "X": (0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11),
    "Y": (0x11, 0x11, 0x0A, 0x04, 0x04, 0x04, 0x04),
    "Z": (0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F),
    "0": (0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E),
    "1": (0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E),
    "2": (0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F),
    "3": (0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E),
    "4": (0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02),
    "5": (0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E),
    "6": (0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E),
    "7": (0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08),
    "8": (0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E),
    "9": (0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C),
}
_GLYPH_CHARS = sorted(_GLYPHS)
_GLYPH_H, _GLYPH_W = 7, 5

_TEXT_TOLERANCE = 0.02
_MAX_STAMPS = 10_000


def _glyph_bitmap(char: str) -> np.ndarray:
    rows = _GLYPHS[char]
    bits = np.array(
        [[(row >> (4 - j)) & 1 for j in range(5)] for row in rows], dtype=bool
    )
    return bits


def _stamp_string(rng: np.random.Generator, max_chars: int, max_scale: int) -> np.ndarray:
    """Render a random string into a boolean bitmap (glyphs separated by 1 column)."""
    n = int(rng.integers(1, max_chars + 1))
    scale = int(rng.integers(1, max_scale + 1))
    chars = [_GLYPH_CHARS[int(rng.integers(0, len(_GLYPH_CHARS)))] for _ in range(n)]
    cols = n * _GLYPH_W + (n - 1)
    bitmap = np.zeros((_GLYPH_H, cols), dtype=bool)
    for k, ch in enumerate(chars):
        bitmap[:, k * (_GLYPH_W + 1) : k * (_GLYPH_W + 1) + _GLYPH_W] = _glyph_bitmap(ch)
    if scale > 1:
        bitmap = np.kron(bitmap, np.ones((scale, scale), dtype=bool))
    return bitmap


def overlay_text(
    img: Image, p: float, rng: np.random.Generator
) -> Tuple[Image, np.ndarray]:
    """Stamp random glyph strings until roughly a fraction p of pixels is overwritten.

    Returns the degraded image and the boolean corruption mask. Stamping
    stops once the corrupted fraction reaches p - 0.02 (stamp sizes shrink
    as the target nears, so the overshoot stays inside the +/-0.02 band), or
    when the stamp budget runs out.
    """
    if not 0 <= p <= 1:
        raise ParameterError(f"text probability must be in [0, 1], got {p}")
    h, w, c = img.data.shape
    mask = np.zeros((h, w), dtype=bool)
    if p == 0:
        return img, mask
    out = img.data.copy()
    total = h * w
    for _ in range(_MAX_STAMPS):
        corrupted = int(mask.sum())
        if corrupted / total >= p - _TEXT_TOLERANCE:
            break
        remaining = p * total - corrupted
        # Keep a single stamp's footprint below the remaining pixel budget so
        # the final fraction cannot jump past the tolerance band.
        max_scale = 1
        while (
            max_scale < 4
            and (max_scale + 1) ** 2 * _GLYPH_H * _GLYPH_W * 2 <= remaining
            and (max_scale + 1) * _GLYPH_H < h
            and (max_scale + 1) * _GLYPH_W < w
        ):
            max_scale += 1
        per_char = max_scale**2 * _GLYPH_H * _GLYPH_W
        max_chars = max(1, min(8, int(remaining // per_char), w // (max_scale * (_GLYPH_W + 1))))
        bitmap = _stamp_string(rng, max_chars, max_scale)
        bh, bw = bitmap.shape
        if bh > h or bw > w:
            bitmap = bitmap[:h, :w]
            bh, bw = bitmap.shape
        top = int(rng.integers(0, h - bh + 1))
        left = int(rng.integers(0, w - bw + 1))
        color = rng.random(c)
        region = out[top : top + bh, left : left + bw]
        region[bitmap] = color
        mask[top : top + bh, left : left + bw] |= bitmap
    return Image(out).clamp(), mask


def apply_noise(
    img: Image, spec: NoiseSpec, rng: np.random.Generator
) -> Tuple[Image, float]:
    """Sample a level from the spec and apply its family; returns (noisy, level)."""
    level = sample_level(spec, rng)
    if spec.family == "gaussian":
        return add_gaussian(img, level, rng), level
    if spec.family == "speckle":
        return add_speckle(img, level, rng), level
    if spec.family == "poisson":
        return add_poisson(img, level, rng), level
    if spec.family == "rician":
        return add_rician(img, level, rng), level
    noisy, _ = overlay_text(img, level, rng)
    return noisy, level


def derive_seed(master_seed: int, image_id: str) -> int:
    """Stable per-image seed so corpus synthesis can run image-parallel."""
    digest = hashlib.blake2b(
        f"{master_seed}:{image_id}".encode("utf-8"), digest_size=8
    ).digest()
    return int.from_bytes(digest, "big")
