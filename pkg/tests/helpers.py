"""Shared corpus builders for the test suite: piecewise-smooth synthetic
clean images (smooth shading + a few flat shapes) and seeded noisy/clean
corpus directories with manifests."""

from __future__ import annotations

from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from scipy import ndimage

from noiselab.data import CorpusManifest, ManifestEntry, save_manifest
from noiselab.images import Image, write_png
from noiselab.noise import NoiseSpec, apply_noise, derive_seed


def synthetic_clean(rng: np.random.Generator, size: int = 64, channels: int = 1) -> Image:
    """A clean test image: low-frequency shading, a handful of flat shapes,
    slightly blurred edges, values kept inside [0.1, 0.9] so moderate noise
    rarely clamps."""
    yy, xx = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, size), indexing="ij")
    planes = []
    for _ in range(channels):
        a = rng.uniform(0.3, 0.7)
        a = a + rng.uniform(-0.25, 0.25) * xx + rng.uniform(-0.25, 0.25) * yy
        freq = rng.uniform(1.0, 3.0)
        angle = rng.uniform(0, np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.cos(2 * np.pi * freq * (xx * np.cos(angle) + yy * np.sin(angle)) + phase)
        a = a + rng.uniform(0.05, 0.15) * wave
        for _ in range(int(rng.integers(2, 5))):
            kind = rng.integers(0, 2)
            value = rng.uniform(0.1, 0.9)
            cy, cx = rng.uniform(0.1, 0.9, size=2) * size
            if kind == 0:  # axis-aligned rectangle
                h, w = rng.uniform(0.1, 0.4, size=2) * size
                r0, r1 = int(max(0, cy - h / 2)), int(min(size, cy + h / 2))
                c0, c1 = int(max(0, cx - w / 2)), int(min(size, cx + w / 2))
                a[r0:r1, c0:c1] = value
            else:  # disk
                radius = rng.uniform(0.05, 0.2) * size
                mask = (yy * size - cy) ** 2 + (xx * size - cx) ** 2 <= radius**2
                a[mask] = value
        a = ndimage.gaussian_filter(a, sigma=0.8, mode="reflect")
        planes.append(a)
    stack = np.stack(planes, axis=-1)
    lo, hi = stack.min(), stack.max()
    stack = 0.1 + 0.8 * (stack - lo) / max(hi - lo, 1e-9)
    return Image(stack)


def write_clean_corpus(
    directory, n: int, seed: int, size: int = 64, channels: int = 1, prefix: str = "c", split: str = "train"
) -> CorpusManifest:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    entries = []
    for i in range(n):
        image_id = f"{prefix}{i:04d}"
        path = directory / f"{image_id}.png"
        write_png(synthetic_clean(rng, size, channels), path)
        entries.append(ManifestEntry(image_id=image_id, path=path, role="clean"))
    manifest = CorpusManifest(root=directory, entries=entries, split=split, master_seed=seed)
    save_manifest(manifest, directory / "manifest.jsonl")
    return manifest


def write_noisy_corpus(
    directory,
    n: int,
    spec: NoiseSpec,
    seed: int,
    size: int = 64,
    channels: int = 1,
    prefix: str = "n",
    split: str = "train",
    include_clean: bool = False,
) -> CorpusManifest:
    """Unpaired noisy corpus: fresh clean content per image (never reused in a
    clean corpus), degraded with a per-image derived seed. With
    include_clean=True the source images are stored too, paired by clean_id,
    which makes the manifest usable for evaluation."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(derive_seed(seed, "noisy-content"))
    entries = []
    for i in range(n):
        clean_img = synthetic_clean(rng, size, channels)
        clean_id = f"{prefix}{i:04d}.src"
        image_id = f"{prefix}{i:04d}"
        if include_clean:
            clean_path = directory / f"{clean_id}.png"
            write_png(clean_img, clean_path)
            entries.append(ManifestEntry(image_id=clean_id, path=clean_path, role="clean"))
            clean_img = _reread(clean_path)  # evaluate against the quantized file
        noise_seed = derive_seed(seed, image_id)
        noisy, level = apply_noise(clean_img, spec, np.random.default_rng(noise_seed))
        path = directory / f"{image_id}.png"
        write_png(noisy, path)
        entries.append(
            ManifestEntry(
                image_id=image_id,
                path=path,
                role="noisy",
                noise_family=spec.family,
                level=level,
                seed=noise_seed,
                clean_id=clean_id if include_clean else None,
            )
        )
    manifest = CorpusManifest(root=directory, entries=entries, split=split, master_seed=seed)
    save_manifest(manifest, directory / "manifest.jsonl")
    return manifest


def _reread(path) -> Image:
    from noiselab.images import read_png

    return read_png(path)


def gaussian_spec(lo: float = 0.0, hi: float = 50.0, fixed: Optional[float] = None) -> NoiseSpec:
    return NoiseSpec(family="gaussian", level_range=(lo, hi), fixed_level=fixed)


def speckle_spec(lo: float = 0.0, hi: float = 0.2, fixed: Optional[float] = None) -> NoiseSpec:
    return NoiseSpec(family="speckle", level_range=(lo, hi), fixed_level=fixed)
