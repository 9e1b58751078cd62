"""Quantitative evaluation (PSNR/SSIM tables) and statistical diagnostics:
noise-residual histograms, generated-level coverage, estimator monotonicity,
and the multi-variant ablation harness.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
from scipy import stats as scipy_stats

from .adani import AdaniConfig, train_adani
from .data import CorpusManifest, ManifestError, load_image, sample_unpaired
from .images import Image, MetricRecord, ParameterError, crop_random, psnr, ssim
from .networks import ModelBundle, estimate, generate, run_denoiser, softmax2
from .noise import NoiseSpec, apply_noise, derive_seed


@dataclass
class Histogram:
    """Fixed-edge histogram with explicit out-of-range bookkeeping: `total`
    counts only in-range values; `below`/`above` record the spill."""

    bin_edges: np.ndarray
    counts: np.ndarray
    below: int = 0
    above: int = 0

    def __post_init__(self):
        self.bin_edges = np.asarray(self.bin_edges, dtype=np.float64)
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.bin_edges.ndim != 1 or len(self.bin_edges) != len(self.counts) + 1:
            raise ParameterError("need len(bin_edges) == len(counts) + 1")
        if not np.all(np.diff(self.bin_edges) > 0):
            raise ParameterError("bin edges must be strictly increasing")
        if np.any(self.counts < 0) or self.below < 0 or self.above < 0:
            raise ParameterError("counts must be nonnegative")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @classmethod
    def from_values(cls, values, bins: int, lo: float, hi: float) -> "Histogram":
        v = np.asarray(values, dtype=np.float64).ravel()
        if bins < 1 or not hi > lo:
            raise ParameterError("need bins >= 1 and hi > lo")
        counts, edges = np.histogram(v, bins=bins, range=(lo, hi))
        return cls(edges, counts, below=int((v < lo).sum()), above=int((v > hi).sum()))

    def density(self) -> np.ndarray:
        t = self.total
        if t == 0:
            return np.zeros_like(self.counts, dtype=np.float64)
        return self.counts / t


def histogram_distance(a: Histogram, b: Histogram) -> float:
    """Symmetric chi-square over normalized counts: sum (p-q)^2/(p+q) over
    bins with any mass. Zero for identical histograms, 2.0 for disjoint ones.
    """
    if not np.array_equal(a.bin_edges, b.bin_edges):
        raise ParameterError("histograms have different bin edges")
    p, q = a.density(), b.density()
    mass = p + q
    live = mass > 0
    return float((((p - q) ** 2)[live] / mass[live]).sum())


def noise_residual_histogram(x: Image, y: Image, bins: int, lo: float, hi: float) -> Histogram:
    """Histogram of the noise component x - y (noisy minus known background)."""
    if x.data.shape != y.data.shape:
        raise ParameterError(f"shape mismatch {x.data.shape} vs {y.data.shape}")
    return Histogram.from_values(x.data - y.data, bins, lo, hi)


# ---------------------------------------------------------------------------
# denoiser evaluation


@dataclass
class EvalReport:
    per_image: List[MetricRecord]
    mean_psnr: float
    mean_ssim: float
    config_hash: str = ""


def _aggregate(records: List[MetricRecord], config_hash: str) -> EvalReport:
    records = sorted(records, key=lambda r: r.image_id)
    mean_psnr = float(np.mean([r.psnr for r in records])) if records else math.nan
    mean_ssim = float(np.mean([r.ssim for r in records])) if records else math.nan
    return EvalReport(per_image=records, mean_psnr=mean_psnr, mean_ssim=mean_ssim, config_hash=config_hash)


def _pad_to(a: np.ndarray, h: int, w: int) -> np.ndarray:
    ph, pw = h - a.shape[0], w - a.shape[1]
    if ph == 0 and pw == 0:
        return a
    mode = "reflect" if ph < a.shape[0] and pw < a.shape[1] else "edge"
    return np.pad(a, ((0, ph), (0, pw), (0, 0)), mode=mode)


def _tile_starts(length: int, tile: int, step: int) -> List[int]:
    starts = list(range(0, length - tile + 1, step))
    if starts[-1] != length - tile:
        starts.append(length - tile)
    return starts


def _feather_window(tile_h: int, tile_w: int, overlap: int) -> np.ndarray:
    def ramp(n):
        i = np.arange(n, dtype=np.float64)
        edge = float(overlap) + 1.0
        return np.minimum(1.0, np.minimum((i + 1) / edge, (n - i) / edge))

    return np.outer(ramp(tile_h), ramp(tile_w))[:, :, None]


def tiled_denoise(M: ModelBundle, img: Image, tile: int = 128, overlap: int = 32) -> Image:
    """Full-image inference built from overlapping patch passes.

    Tiles of `tile`x`tile` are blended with a feathered (linearly ramped)
    window; images smaller than a tile are reflect-padded up to the
    downsampling granularity and run in one pass.
    """
    if M.descriptor.kind != "denoiser":
        raise ParameterError(f"expected a denoiser bundle, got {M.descriptor.kind!r}")
    unit = 2 ** M.module.depth
    if tile % unit != 0 or overlap >= tile:
        raise ParameterError(f"tile must be a multiple of {unit} and larger than overlap")
    h, w = img.height, img.width
    tile_h = min(tile, math.ceil(h / unit) * unit)
    tile_w = min(tile, math.ceil(w / unit) * unit)
    a = _pad_to(img.data, max(h, tile_h), max(w, tile_w))
    H, W = a.shape[:2]

    out = np.zeros_like(a, dtype=np.float64)
    weight = np.zeros((H, W, 1), dtype=np.float64)
    window = _feather_window(tile_h, tile_w, overlap)
    step_h = max(1, tile_h - overlap)
    step_w = max(1, tile_w - overlap)
    with torch.no_grad():
        for r in _tile_starts(H, tile_h, step_h):
            for c in _tile_starts(W, tile_w, step_w):
                sub = a[r : r + tile_h, c : c + tile_w, :]
                x = torch.from_numpy(np.ascontiguousarray(sub, dtype=np.float32)).permute(2, 0, 1).unsqueeze(0)
                y = run_denoiser(M.module, x)
                y_np = y.squeeze(0).permute(1, 2, 0).numpy().astype(np.float64)
                out[r : r + tile_h, c : c + tile_w, :] += window * y_np
                weight[r : r + tile_h, c : c + tile_w, :] += window
    out = (out / weight)[:h, :w, :]
    return Image(out).clamp()


def _paired_entries(test: CorpusManifest):
    clean_by_id = {e.image_id: e for e in test.with_role("clean")}
    pairs = []
    for e in sorted(test.with_role("noisy"), key=lambda e: e.image_id):
        if e.clean_id is None or e.clean_id not in clean_by_id:
            raise ManifestError(f"no ground truth for noisy image {e.image_id!r}")
        pairs.append((e, clean_by_id[e.clean_id]))
    if not pairs:
        raise ManifestError("manifest holds no (noisy, clean) pairs")
    return pairs


def evaluate_denoiser(
    M: ModelBundle,
    test: CorpusManifest,
    config_hash: str = "",
    tile: int = 128,
    overlap: int = 32,
) -> EvalReport:
    """PSNR/SSIM of the denoiser over every paired (noisy, clean) entry."""
    records = []
    for noisy_entry, clean_entry in _paired_entries(test):
        den = tiled_denoise(M, load_image(noisy_entry), tile=tile, overlap=overlap)
        ref = load_image(clean_entry)
        records.append(MetricRecord(psnr(den, ref), ssim(den, ref), noisy_entry.image_id))
    return _aggregate(records, config_hash)


def noisy_baseline(test: CorpusManifest, config_hash: str = "") -> EvalReport:
    """Metrics of the raw noisy inputs against ground truth (the no-op bar
    any denoiser must clear)."""
    records = []
    for noisy_entry, clean_entry in _paired_entries(test):
        x, ref = load_image(noisy_entry), load_image(clean_entry)
        records.append(MetricRecord(psnr(x, ref), ssim(x, ref), noisy_entry.image_id))
    return _aggregate(records, config_hash)


# ---------------------------------------------------------------------------
# estimator-centric diagnostics


def generated_logits(
    G: ModelBundle,
    C: ModelBundle,
    clean: CorpusManifest,
    guides: CorpusManifest,
    n: int,
    patch: int = 128,
    seed: int = 0,
) -> np.ndarray:
    """Class-1 logits of n generated images from random (clean, guide) pairs."""
    rng = np.random.default_rng(derive_seed(seed, "level-coverage"))
    values = np.empty(n, dtype=np.float64)
    for i in range(n):
        sample = sample_unpaired(guides, clean, rng, patch)
        x_g, _ = generate(G, sample.y_r, sample.x_r)
        values[i] = estimate(C, x_g)[1]
    return values


def guide_logits(
    C: ModelBundle, guides: CorpusManifest, n: int, patch: int = 128, seed: int = 0
) -> np.ndarray:
    """Class-1 logits of n random crops of the real noisy guides."""
    rng = np.random.default_rng(derive_seed(seed, "guide-logits"))
    entries = guides.with_role("noisy")
    if not entries:
        raise ParameterError("guide corpus holds no noisy images")
    values = np.empty(n, dtype=np.float64)
    for i in range(n):
        img = load_image(entries[int(rng.integers(0, len(entries)))])
        crop = crop_random(img, min(patch, img.height, img.width), rng)
        values[i] = estimate(C, crop)[1]
    return values


def level_coverage(
    G: ModelBundle,
    C: ModelBundle,
    clean: CorpusManifest,
    guides: CorpusManifest,
    n: int,
    bins: int = 40,
    lo: float = -10.0,
    hi: float = 60.0,
    patch: int = 128,
    seed: int = 0,
) -> Histogram:
    """Histogram of estimated levels over generated images — wide coverage
    here is what separates guided generation from a fixed-level synthesizer."""
    values = generated_logits(G, C, clean, guides, n, patch=patch, seed=seed) if n else []
    return Histogram.from_values(values, bins, lo, hi)


@dataclass(frozen=True)
class LevelStat:
    level: float
    mean_z1: float
    mean_q1: float
    median_q1: float


@dataclass
class MonotonicityReport:
    spearman: float  # NaN when the grid is degenerate
    rows: List[LevelStat] = field(default_factory=list)


def monotonicity_report(
    C: ModelBundle,
    clean: CorpusManifest,
    levels: Sequence[float],
    family: str = "gaussian",
    seed: int = 0,
) -> MonotonicityReport:
    """Corrupt held-out clean images at each level and track the estimator's
    mean class-1 logit and probability; Spearman rank correlation of level
    against mean logit summarizes monotonicity."""
    entries = clean.with_role("clean")
    if not entries or not levels:
        raise ParameterError("need at least one clean image and one level")
    rows = []
    for level in levels:
        spec = NoiseSpec(family=family, level_range=(0.0, max(level, 1e-6)), fixed_level=level)
        z1s, q1s = [], []
        for e in entries:
            rng = np.random.default_rng(derive_seed(seed, f"mono:{family}:{level}:{e.image_id}"))
            noisy, _ = apply_noise(load_image(e), spec, rng)
            z0, z1 = estimate(C, noisy)
            z1s.append(z1)
            q1s.append(softmax2(z0, z1)[1])
        rows.append(
            LevelStat(
                level=float(level),
                mean_z1=float(np.mean(z1s)),
                mean_q1=float(np.mean(q1s)),
                median_q1=float(np.median(q1s)),
            )
        )
    if len(rows) < 2:
        rho = math.nan
    else:
        rho = float(scipy_stats.spearmanr([r.level for r in rows], [r.mean_z1 for r in rows]).statistic)
    return MonotonicityReport(spearman=rho, rows=rows)


# ---------------------------------------------------------------------------
# ablation harness


_ABLATION_FREE = ("alpha_mode", "alpha_fixed", "gamma")


def run_ablation(
    variants: Sequence[AdaniConfig],
    noisy: CorpusManifest,
    clean: CorpusManifest,
    test: CorpusManifest,
    B: ModelBundle,
    C: Optional[ModelBundle],
    out_dir=None,
    config_hash: str = "",
) -> List[Tuple[AdaniConfig, EvalReport]]:
    """Train every variant under identical corpora/seed/budget and report
    denoiser metrics per variant, in the given order. Variants may differ
    only in the objective weights (alpha_mode, alpha_fixed, gamma)."""
    if not variants:
        raise ParameterError("need at least one variant")
    defaults = {k: AdaniConfig.__dataclass_fields__[k].default for k in _ABLATION_FREE}
    reference = dataclasses.replace(variants[0], **defaults)
    for v in variants:
        if dataclasses.replace(v, **defaults) != reference:
            raise ParameterError("ablation variants may differ only in alpha_mode/alpha_fixed/gamma")
    results = []
    for i, cfg in enumerate(variants):
        sub = Path(out_dir) / f"variant{i:02d}" if out_dir is not None else None
        trained = train_adani(noisy, clean, B, C, cfg, out_dir=sub, config_hash=config_hash)
        results.append((cfg, evaluate_denoiser(trained.denoiser, test, config_hash=config_hash)))
    return results


# ---------------------------------------------------------------------------
# artifact export


def write_report(report: EvalReport, directory, name: str = "eval") -> None:
    """CSV of per-image metrics plus a JSON summary."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = ["image_id,psnr,ssim"]
    lines += [f"{r.image_id},{r.psnr:.6f},{r.ssim:.6f}" for r in report.per_image]
    (directory / f"{name}.csv").write_text("\n".join(lines) + "\n")
    summary = {
        "mean_psnr": report.mean_psnr,
        "mean_ssim": report.mean_ssim,
        "images": len(report.per_image),
        "config_hash": report.config_hash,
    }
    (directory / f"{name}.json").write_text(json.dumps(summary, indent=2, sort_keys=True))


def write_histogram(hist: Histogram, path) -> None:
    """CSV with one row per bin: lo, hi, count (spill recorded in a header)."""
    lines = [f"# below={hist.below} above={hist.above}", "lo,hi,count"]
    for i, c in enumerate(hist.counts):
        lines.append(f"{hist.bin_edges[i]:.9g},{hist.bin_edges[i + 1]:.9g},{int(c)}")
    Path(path).write_text("\n".join(lines) + "\n")


def plot_histogram(hist: Histogram, path, title: str = "", label: str = "") -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    centers = 0.5 * (hist.bin_edges[:-1] + hist.bin_edges[1:])
    widths = np.diff(hist.bin_edges)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(centers, hist.counts, width=widths, align="center", edgecolor="none", label=label or None)
    ax.set_title(title)
    ax.set_xlabel("value")
    ax.set_ylabel("count")
    if label:
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
