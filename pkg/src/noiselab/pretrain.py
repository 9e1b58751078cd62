"""Pretraining for the two frozen components: the background-consistency
filter network (regression onto a wide median filter) and the noise-level
estimator (noisy/clean classifier whose class-1 logit doubles as a level
score).

Both loops share the same shape: Adam, batch 1, one shuffled pass over the
pool per epoch, learning rate decayed linearly to zero at epoch boundaries.
Each run can checkpoint a resumable training state (optimizer moments plus
both RNG states), and resuming reproduces the uninterrupted trajectory
exactly.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import Archive, load_archive, save_archive
from .data import CorpusManifest, ManifestEntry, filtered_target_cached, load_image
from .images import Image, ParameterError
from .networks import ModelBundle, descriptor_for, new_bundle, run_bcm
from .noise import derive_seed

log = logging.getLogger(__name__)

MIN_FILTER_POOL = 10


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 200
    lr: float = 2e-4
    patch: int = 128
    seed: int = 0
    scale: str = "full"
    checkpoint_every: int = 0  # epochs between resumable snapshots; 0 = final only

    def __post_init__(self):
        if self.epochs < 1 or self.lr <= 0 or self.patch < 4:
            raise ParameterError("epochs, lr, and patch must be positive")


@dataclass
class PretrainResult:
    bundle: ModelBundle
    log_rows: List[dict]
    log_path: Optional[Path] = None


def _crop_pair(rng: np.random.Generator, patch: int, *arrays: np.ndarray):
    """One aligned random crop across several same-sized H×W×C arrays."""
    h, w = arrays[0].shape[:2]
    if h < patch or w < patch:
        raise ParameterError(f"image {h}x{w} smaller than patch {patch}")
    r = int(rng.integers(0, h - patch + 1))
    c = int(rng.integers(0, w - patch + 1))
    return tuple(a[r : r + patch, c : c + patch, :] for a in arrays)


# ---------------------------------------------------------------------------
# resumable training state


def _optimizer_arrays(opt: torch.optim.Adam):
    arrays = {}
    steps = []
    params = [p for group in opt.param_groups for p in group["params"]]
    for idx, p in enumerate(params):
        state = opt.state.get(p)
        if not state:
            steps.append(-1.0)
            continue
        steps.append(float(state["step"]))
        arrays[f"opt/{idx}/exp_avg"] = state["exp_avg"].numpy().copy()
        arrays[f"opt/{idx}/exp_avg_sq"] = state["exp_avg_sq"].numpy().copy()
    return arrays, steps


def _restore_optimizer(opt: torch.optim.Adam, archive: Archive):
    steps = archive.meta["adam_steps"]
    params = [p for group in opt.param_groups for p in group["params"]]
    if len(steps) != len(params):
        raise ParameterError("training state does not match the optimizer layout")
    for idx, p in enumerate(params):
        if steps[idx] < 0:
            continue
        opt.state[p] = {
            "step": torch.tensor(float(steps[idx])),
            "exp_avg": torch.from_numpy(archive.arrays[f"opt/{idx}/exp_avg"].copy()),
            "exp_avg_sq": torch.from_numpy(archive.arrays[f"opt/{idx}/exp_avg_sq"].copy()),
        }


def save_training_state(
    path, bundle: ModelBundle, opt: torch.optim.Adam, rng: np.random.Generator, next_epoch: int
) -> None:
    arrays = {f"model/{k}": v.numpy().copy() for k, v in bundle.module.state_dict().items()}
    opt_arrays, steps = _optimizer_arrays(opt)
    arrays.update(opt_arrays)
    arrays["torch_rng"] = torch.get_rng_state().numpy().copy()
    meta = {
        "next_epoch": next_epoch,
        "adam_steps": steps,
        "numpy_rng": rng.bit_generator.state,
    }
    save_archive(path, Archive(arrays=arrays, descriptor=bundle.descriptor.to_dict(), provenance=bundle.provenance, meta=meta))


def load_training_state(path, bundle: ModelBundle, opt: torch.optim.Adam) -> Tuple[np.random.Generator, int]:
    archive = load_archive(path)
    state = {
        k[len("model/") :]: torch.from_numpy(v.copy())
        for k, v in archive.arrays.items()
        if k.startswith("model/")
    }
    bundle.module.load_state_dict(state, strict=True)
    _restore_optimizer(opt, archive)
    torch.set_rng_state(torch.from_numpy(archive.arrays["torch_rng"].copy()))
    rng = np.random.default_rng(0)
    rng.bit_generator.state = archive.meta["numpy_rng"]
    return rng, int(archive.meta["next_epoch"])


# ---------------------------------------------------------------------------
# shared epoch engine


def _run_epochs(
    name: str,
    pool_size: int,
    step_fn,
    bundle: ModelBundle,
    cfg: PretrainConfig,
    out_dir: Optional[Path],
    resume_from=None,
    extra_fields: Sequence[str] = (),
) -> PretrainResult:
    """step_fn(rng, index, opt) -> dict of scalar stats, must contain 'loss'."""
    opt = torch.optim.Adam(bundle.module.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(derive_seed(cfg.seed, f"pretrain-{name}"))
    start_epoch = 0
    if resume_from is not None:
        rng, start_epoch = load_training_state(resume_from, bundle, opt)
        log.info("%s: resuming at epoch %d from %s", name, start_epoch, resume_from)

    fields = ["epoch", "loss", *extra_fields, "lr"]
    log_rows: List[dict] = []
    log_path = None
    writer = None
    log_file = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / f"{name}_log.csv"
        fresh = start_epoch == 0 or not log_path.exists()
        log_file = open(log_path, "w" if fresh else "a", newline="")
        writer = csv.DictWriter(log_file, fieldnames=fields)
        if fresh:
            writer.writeheader()

    try:
        for epoch in range(start_epoch, cfg.epochs):
            lr = cfg.lr * (1.0 - epoch / cfg.epochs)
            for group in opt.param_groups:
                group["lr"] = lr
            sums = {k: 0.0 for k in fields if k not in ("epoch", "lr")}
            order = rng.permutation(pool_size)
            for index in order:
                stats = step_fn(rng, int(index), opt)
                if not np.isfinite(stats["loss"]):
                    raise RuntimeError(f"{name}: non-finite loss in epoch {epoch}")
                for k, v in stats.items():
                    sums[k] += v
            row = {k: v / pool_size for k, v in sums.items()}
            row.update(epoch=epoch, lr=lr)
            log_rows.append(row)
            if writer is not None:
                writer.writerow({k: f"{row[k]:.6g}" if isinstance(row[k], float) else row[k] for k in fields})
                log_file.flush()
            done = epoch + 1
            if out_dir is not None and cfg.checkpoint_every and done % cfg.checkpoint_every == 0 and done < cfg.epochs:
                bundle.save(out_dir / f"{name}_epoch{done:05d}.ckpt")
                save_training_state(out_dir / f"{name}_state_epoch{done:05d}.ckpt", bundle, opt, rng, done)
    finally:
        if log_file is not None:
            log_file.close()

    bundle.provenance = dict(bundle.provenance, epochs=cfg.epochs)
    if out_dir is not None:
        bundle.save(out_dir / f"{name}_final.ckpt")
    return PretrainResult(bundle=bundle, log_rows=log_rows, log_path=log_path)


# ---------------------------------------------------------------------------
# the two pretraining tasks


def pretrain_bcm(
    noisy: CorpusManifest,
    clean: CorpusManifest,
    cfg: PretrainConfig,
    out_dir=None,
    resume_from=None,
    config_hash: str = "",
) -> PretrainResult:
    """Fit the filter network to reproduce the wide median filter, in L1,
    on the union of both corpora. The pool must hold at least
    MIN_FILTER_POOL images: a near-empty pool memorises its targets and the
    background loss stops constraining anything.
    """
    pool: List[ManifestEntry] = list(noisy.entries) + list(clean.entries)
    if len(pool) < MIN_FILTER_POOL:
        raise ParameterError(
            f"filter pretraining needs at least {MIN_FILTER_POOL} images, got {len(pool)}"
        )
    channels = load_image(pool[0]).channels
    bundle = new_bundle(
        descriptor_for("bcm", channels, cfg.scale),
        derive_seed(cfg.seed, "bcm-init"),
        {"config_hash": config_hash, "master_seed": cfg.seed},
    )
    module = bundle.module

    def step(rng: np.random.Generator, index: int, opt) -> dict:
        entry = pool[index]
        img = load_image(entry)
        target = filtered_target_cached(entry)
        x_np, t_np = _crop_pair(rng, min(cfg.patch, img.height, img.width), img.data, target.data)
        x = torch.from_numpy(x_np.astype(np.float32)).permute(2, 0, 1).unsqueeze(0)
        t = torch.from_numpy(t_np.astype(np.float32)).permute(2, 0, 1).unsqueeze(0)
        opt.zero_grad(set_to_none=True)
        loss = (run_bcm(module, x) - t).abs().mean()
        loss.backward()
        opt.step()
        return {"loss": float(loss.detach())}

    out = Path(out_dir) if out_dir is not None else None
    return _run_epochs("bcm", len(pool), step, bundle, cfg, out, resume_from)


def pretrain_estimator(
    noisy: CorpusManifest,
    clean: CorpusManifest,
    cfg: PretrainConfig,
    out_dir=None,
    resume_from=None,
    config_hash: str = "",
) -> PretrainResult:
    """Fit the two-class estimator: label 1 for images from the noisy corpus,
    0 for the clean corpus, plain cross-entropy on patch crops. Both classes
    must be present; the class-1 logit of a one-class classifier carries no
    level information.
    """
    labeled: List[Tuple[ManifestEntry, int]] = [(e, 1) for e in noisy.with_role("noisy")]
    labeled += [(e, 0) for e in clean.with_role("clean")]
    n_noisy = sum(1 for _, y in labeled if y == 1)
    if n_noisy == 0 or n_noisy == len(labeled):
        raise ParameterError("estimator pretraining needs both a noisy and a clean class")
    channels = load_image(labeled[0][0]).channels
    bundle = new_bundle(
        descriptor_for("estimator", channels, cfg.scale),
        derive_seed(cfg.seed, "estimator-init"),
        {"config_hash": config_hash, "master_seed": cfg.seed},
    )
    module = bundle.module

    def step(rng: np.random.Generator, index: int, opt) -> dict:
        entry, label = labeled[index]
        img = load_image(entry)
        (x_np,) = _crop_pair(rng, min(cfg.patch, img.height, img.width), img.data)
        x = torch.from_numpy(x_np.astype(np.float32)).permute(2, 0, 1).unsqueeze(0)
        target = torch.tensor([label])
        opt.zero_grad(set_to_none=True)
        logits = module(x)
        loss = F.cross_entropy(logits, target)
        loss.backward()
        opt.step()
        correct = float(int(logits.argmax(dim=1)) == label)
        return {"loss": float(loss.detach()), "accuracy": correct}

    out = Path(out_dir) if out_dir is not None else None
    return _run_epochs("estimator", len(labeled), step, bundle, cfg, out, resume_from, extra_fields=("accuracy",))


def estimate_alpha_reference(C: ModelBundle, images: Sequence[Image]) -> float:
    """Mean floored class-1 logit over a probe set — the fixed-weight stand-in
    used when comparing against the adaptive schedule."""
    from .adani import alpha_from_guide

    if not images:
        raise ParameterError("need at least one probe image")
    return float(np.mean([alpha_from_guide(C, img) for img in images]))
