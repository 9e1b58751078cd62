"""Corpus manifests, deterministic unpaired sampling, and filter-target generation.

A manifest is a line-delimited text file: one JSON header line followed by
one JSON object per image entry. Paths inside the file are relative to the
manifest's directory, so corpora stay relocatable; entries resolve to
absolute paths at load time.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import List, Optional

import numpy as np

from .images import DimensionError, Image, crop_random, median_filter, read_png

ROLES = ("noisy", "clean")
BCM_KERNEL = 31


class ManifestError(ValueError):
    """Malformed or inconsistent corpus manifest."""


@dataclass(frozen=True)
class ManifestEntry:
    image_id: str
    path: Path  # absolute at runtime
    role: str
    noise_family: Optional[str] = None
    level: Optional[float] = None
    seed: Optional[int] = None
    clean_id: Optional[str] = None  # pairs a synthetic noisy entry with its source

    def to_record(self, root: Path) -> dict:
        rec = {
            "image_id": self.image_id,
            "relative_path": os.path.relpath(self.path, root),
            "role": self.role,
        }
        for key in ("noise_family", "level", "seed", "clean_id"):
            value = getattr(self, key)
            if value is not None:
                rec[key] = value
        return rec


@dataclass(frozen=True)
class CorpusManifest:
    root: Path
    entries: List[ManifestEntry]
    split: str = "train"
    master_seed: int = 0

    def __post_init__(self):
        ids = [e.image_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ManifestError("duplicate image_ids in manifest")

    def with_role(self, role: str) -> List[ManifestEntry]:
        return [e for e in self.entries if e.role == role]

    def by_id(self, image_id: str) -> ManifestEntry:
        for e in self.entries:
            if e.image_id == image_id:
                return e
        raise KeyError(image_id)

    def __len__(self) -> int:
        return len(self.entries)


@dataclass(frozen=True)
class UnpairedSample:
    """A guide patch from the noisy corpus and an unrelated clean background patch."""

    x_r: Image
    y_r: Image


def save_manifest(manifest: CorpusManifest, path) -> None:
    path = Path(path)
    root = path.parent
    with open(path, "w", encoding="utf-8") as fh:
        header = {
            "kind": "corpus",
            "split": manifest.split,
            "master_seed": manifest.master_seed,
        }
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for entry in manifest.entries:
            fh.write(json.dumps(entry.to_record(root), sort_keys=True) + "\n")


def load_manifest(path) -> CorpusManifest:
    path = Path(path)
    root = path.parent.resolve()
    with open(path, "r", encoding="utf-8") as fh:
        lines = [line for line in fh.read().splitlines() if line.strip()]
    if not lines:
        raise ManifestError(f"empty manifest {path}")
    header = json.loads(lines[0])
    if header.get("kind") != "corpus":
        raise ManifestError(f"{path} is not a corpus manifest")
    entries = []
    for line in lines[1:]:
        rec = json.loads(line)
        if rec.get("role") not in ROLES:
            raise ManifestError(f"bad role in entry: {rec}")
        entry = ManifestEntry(
            image_id=rec["image_id"],
            path=(root / rec["relative_path"]).resolve(),
            role=rec["role"],
            noise_family=rec.get("noise_family"),
            level=rec.get("level"),
            seed=rec.get("seed"),
            clean_id=rec.get("clean_id"),
        )
        if not entry.path.exists():
            raise ManifestError(f"missing image file {entry.path}")
        entries.append(entry)
    return CorpusManifest(
        root=root,
        entries=entries,
        split=header.get("split", "train"),
        master_seed=int(header.get("master_seed", 0)),
    )


def ingest_directory(directory, role: str, split: str = "train", master_seed: int = 0) -> CorpusManifest:
    """Build a manifest from a folder of PNGs (sorted by filename for stable ids)."""
    directory = Path(directory).resolve()
    if role not in ROLES:
        raise ManifestError(f"role must be one of {ROLES}")
    files = sorted(directory.glob("*.png"))
    if not files:
        raise ManifestError(f"no PNG files under {directory}")
    entries = [
        ManifestEntry(image_id=f.stem, path=f, role=role) for f in files
    ]
    return CorpusManifest(root=directory, entries=entries, split=split, master_seed=master_seed)


def build_mix(noisy: CorpusManifest, clean: CorpusManifest) -> CorpusManifest:
    """Concatenate the two corpora for classifier/filter pretraining (noisy=1, clean=0)."""
    noisy_entries = noisy.with_role("noisy")
    clean_entries = clean.with_role("clean")
    if not noisy_entries or not clean_entries:
        raise ManifestError("mix requires a non-empty noisy corpus and clean corpus")
    overlap = {e.image_id for e in noisy_entries} & {e.image_id for e in clean_entries}
    if overlap:
        raise ManifestError(f"image_id collision between corpora: {sorted(overlap)[:5]}")
    return CorpusManifest(
        root=noisy.root,
        entries=noisy_entries + clean_entries,
        split=noisy.split,
        master_seed=noisy.master_seed,
    )


@lru_cache(maxsize=2048)
def _read_png_cached(path_str: str) -> Image:
    return read_png(path_str)


def load_image(entry: ManifestEntry) -> Image:
    """Decode an entry's PNG; decoded images are cached, so treat them as read-only."""
    return _read_png_cached(str(entry.path))


def filtered_target(img: Image) -> Image:
    """The background target used for filter-regression pretraining: median, kernel 31."""
    if min(img.height, img.width) < BCM_KERNEL:
        raise DimensionError(
            f"image {img.height}x{img.width} smaller than filter kernel {BCM_KERNEL}"
        )
    return median_filter(img, BCM_KERNEL)


def filtered_target_cached(entry: ManifestEntry) -> Image:
    """filtered_target with an on-disk cache beside the source image.

    Cache files are keyed by a content hash of the source bytes, so stale
    caches cannot survive an image edit. Writes go through a temp file and
    rename, which keeps concurrent prefetchers safe.
    """
    src = entry.path
    digest = hashlib.blake2b(src.read_bytes(), digest_size=10).hexdigest()
    cache_dir = src.parent / ".bcm_cache"
    cache_file = cache_dir / f"{digest}-k{BCM_KERNEL}.npy"
    if cache_file.exists():
        return Image(np.load(cache_file))
    target = filtered_target(load_image(entry))
    cache_dir.mkdir(exist_ok=True)
    # np.save appends .npy unless the name already ends in it
    tmp = cache_file.with_name(f"{cache_file.stem}.{os.getpid()}.tmp.npy")
    np.save(tmp, target.data)
    os.replace(tmp, cache_file)
    return target


def sample_unpaired(
    noisy: CorpusManifest,
    clean: CorpusManifest,
    rng: np.random.Generator,
    patch: int = 128,
) -> UnpairedSample:
    """Draw one guide patch and one background patch, each a uniform image choice
    followed by a uniform crop. Draw order: noisy index, noisy crop, clean index,
    clean crop."""
    noisy_entries = noisy.with_role("noisy")
    clean_entries = clean.with_role("clean")
    if not noisy_entries or not clean_entries:
        raise ManifestError("both corpora must be non-empty")
    xe = noisy_entries[int(rng.integers(0, len(noisy_entries)))]
    x_r = crop_random(load_image(xe), patch, rng)
    ye = clean_entries[int(rng.integers(0, len(clean_entries)))]
    y_r = crop_random(load_image(ye), patch, rng)
    return UnpairedSample(x_r=x_r, y_r=y_r)
