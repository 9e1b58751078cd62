"""Adaptive noise imitation: the guided-generation losses, the logit-driven
adaptive weight, the combined generator objective, and the joint
generator / discriminator / denoiser training loop.

The generator is pushed to copy the guide patch's noise onto the clean
background: the GAN term fixes the noise type, the gradient term matches the
guide's high-frequency structure, the background term (through the frozen
filter network) pins the low-frequency content to the clean patch, and the
logit term matches the guide's estimated noise level. The gradient term's
weight is the guide's class-1 logit, so strongly noisy guides dominate and
near-clean guides (whose gradients are mostly edges) are ignored.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch
import torch.nn.functional as F

from .data import CorpusManifest, load_image, sample_unpaired
from .images import Image, ParameterError, write_png
from .networks import (
    ModelBundle,
    descriptor_for,
    new_bundle,
    run_bcm,
    run_denoiser,
    run_generator,
    to_tensor,
)
from .noise import derive_seed

log = logging.getLogger(__name__)


class TrainingAbort(RuntimeError):
    """Raised when a non-finite loss is detected; carries the snapshot path."""

    def __init__(self, message: str, snapshot_path: Optional[Path] = None):
        super().__init__(message)
        self.snapshot_path = snapshot_path


@dataclass(frozen=True)
class AdaniConfig:
    beta: float = 300.0  # background-consistency weight
    gamma: float = 0.1  # logit-consistency weight
    alpha_mode: str = "adaptive"  # "adaptive" (guide logit) or "fixed"
    alpha_fixed: float = 0.0
    epochs: int = 1000
    lr: float = 2e-4  # linearly decayed to 0 across epochs
    patch: int = 128
    seed: int = 0
    scale: str = "full"  # architecture preset: "full" or "desk"
    log_every: int = 100
    checkpoint_every: int = 0  # epochs between checkpoints; 0 = final only
    sample_every: int = 500  # iterations between visual audit grids; 0 = off

    def __post_init__(self):
        if self.beta <= 0 or self.gamma < 0:
            raise ParameterError("beta must be > 0 and gamma >= 0")
        if self.alpha_mode not in ("adaptive", "fixed"):
            raise ParameterError(f"unknown alpha_mode {self.alpha_mode!r}")
        if self.alpha_fixed < 0:
            raise ParameterError("alpha_fixed must be >= 0")
        if self.epochs < 1 or self.lr <= 0 or self.patch < 4:
            raise ParameterError("epochs, lr, and patch must be positive")


@dataclass
class LossBreakdown:
    gan_g: float
    gan_d: float
    gradient: float
    bc: float
    logit: float
    denoiser: float
    alpha_used: float

    def total_g(self, beta: float, gamma: float) -> float:
        return generator_total(self.gan_g, self.gradient, self.bc, self.logit, self.alpha_used, beta, gamma)


def generator_total(gan_g, gradient, bc, logit, alpha, beta, gamma):
    """The full generator objective; affine in each component with
    coefficients (1, alpha, beta, gamma). Works on floats and tensors alike."""
    return gan_g + alpha * gradient + beta * bc + gamma * logit


# ---------------------------------------------------------------------------
# loss terms (tensor level; image-level wrappers below)


def gradient_pair_t(x: torch.Tensor) -> torch.Tensor:
    """dx and dy stacked along channels, zero-padded on the trailing edge."""
    dx = F.pad(x[..., :, 1:] - x[..., :, :-1], (0, 1, 0, 0))
    dy = F.pad(x[..., 1:, :] - x[..., :-1, :], (0, 0, 0, 1))
    return torch.cat([dx, dy], dim=1)


def loss_gradient_t(x_g: torch.Tensor, x_r: torch.Tensor) -> torch.Tensor:
    if x_g.shape != x_r.shape:
        raise ParameterError(f"shape mismatch {tuple(x_g.shape)} vs {tuple(x_r.shape)}")
    return (gradient_pair_t(x_g) - gradient_pair_t(x_r)).abs().mean()


def loss_bc_t(bcm_module, x_g: torch.Tensor, y_r: torch.Tensor) -> torch.Tensor:
    if x_g.shape != y_r.shape:
        raise ParameterError(f"shape mismatch {tuple(x_g.shape)} vs {tuple(y_r.shape)}")
    return (run_bcm(bcm_module, x_g) - run_bcm(bcm_module, y_r)).abs().mean()


def gan_losses(real_scores: torch.Tensor, fake_scores: torch.Tensor):
    """(d_loss, g_loss) for logistic-squashed patch scores.

    d_loss = -mean log s(real) - mean log(1 - s(fake));
    g_loss = -mean log s(fake), the non-saturating generator form (same fixed
    point as the min-max objective, without the vanishing early gradient).
    """
    ones = torch.ones_like(real_scores)
    zeros = torch.zeros_like(fake_scores)
    d_loss = F.binary_cross_entropy_with_logits(real_scores, ones) + F.binary_cross_entropy_with_logits(
        fake_scores, zeros
    )
    g_loss = F.binary_cross_entropy_with_logits(fake_scores, torch.ones_like(fake_scores))
    return d_loss, g_loss


def class1_logit_t(estimator_module, x: torch.Tensor) -> torch.Tensor:
    return estimator_module(x)[0, 1]


def loss_logit_t(estimator_module, x_g: torch.Tensor, z_r1: float) -> torch.Tensor:
    """Squared gap between the generated image's class-1 logit and the guide's.

    z_r1 must be a plain float (gradient-free); gradients flow into the
    generator through x_g only.
    """
    z_g1 = class1_logit_t(estimator_module, x_g)
    return (z_g1 - float(z_r1)) ** 2


# ---------------------------------------------------------------------------
# image-level op surface


def loss_gradient(x_g: Image, x_r: Image) -> float:
    return float(loss_gradient_t(to_tensor(x_g), to_tensor(x_r)))


def loss_bc(B: ModelBundle, x_g: Image, y_r: Image) -> float:
    with torch.no_grad():
        return float(loss_bc_t(B.module, to_tensor(x_g), to_tensor(y_r)))


def loss_gan(D: ModelBundle, x_r: Image, x_g: Image):
    with torch.no_grad():
        d_loss, g_loss = gan_losses(D.module(to_tensor(x_r)), D.module(to_tensor(x_g)))
    return float(d_loss), float(g_loss)


def alpha_from_guide(C: ModelBundle, x_r: Image) -> float:
    """The guide's class-1 logit, floored at zero. Carries no gradient."""
    with torch.no_grad():
        z1 = float(class1_logit_t(C.module, to_tensor(x_r)))
    return max(z1, 0.0)


def loss_logit(C: ModelBundle, x_g: Image, z_r1: float) -> float:
    with torch.no_grad():
        return float(loss_logit_t(C.module, to_tensor(x_g), z_r1))


def generator_objective(cfg: AdaniConfig, losses: LossBreakdown) -> float:
    return losses.total_g(cfg.beta, cfg.gamma)


# ---------------------------------------------------------------------------
# joint training loop


@dataclass
class AdaniResult:
    generator: ModelBundle
    discriminator: ModelBundle
    denoiser: ModelBundle
    log_rows: List[dict]
    log_path: Optional[Path] = None


def _set_requires_grad(module, flag: bool):
    for p in module.parameters():
        p.requires_grad_(flag)


def _audit_grid(tensors, path: Path):
    """Horizontal strip of clamped patches with thin separators, for visual audit."""
    panels = []
    for t in tensors:
        arr = t.detach().squeeze(0).permute(1, 2, 0).clamp(0, 1).numpy()
        panels.append(arr)
        panels.append(np.ones((arr.shape[0], 2, arr.shape[2]), dtype=np.float32))
    strip = np.concatenate(panels[:-1], axis=1)
    write_png(Image(strip), path)


LOG_FIELDS = [
    "epoch",
    "iteration",
    "gan_d",
    "gan_g",
    "gradient",
    "bc",
    "logit",
    "denoiser",
    "alpha_used",
    "total_g",
    "lr",
]


def train_adani(
    noisy: CorpusManifest,
    clean: CorpusManifest,
    B: ModelBundle,
    C: Optional[ModelBundle],
    cfg: AdaniConfig,
    out_dir=None,
    config_hash: str = "",
) -> AdaniResult:
    """Joint loop: per iteration draw an unpaired sample, update the
    discriminator on (x_r, detached x_g), update the generator on the combined
    objective, then update the denoiser on the detached generated pair.

    B (and C, when the adaptive weight or the logit term is active) must be
    pretrained and frozen; their weights are never touched here.
    """
    needs_estimator = cfg.alpha_mode == "adaptive" or cfg.gamma > 0
    if needs_estimator and C is None:
        raise ParameterError("adaptive alpha / logit loss require a frozen estimator bundle")
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    clean_entries = clean.with_role("clean")
    if not clean_entries or not noisy.with_role("noisy"):
        raise ParameterError("both corpora must contain images of their role")
    channels = load_image(clean_entries[0]).channels

    provenance = {"config_hash": config_hash, "master_seed": cfg.seed}
    G = new_bundle(descriptor_for("generator", channels, cfg.scale), derive_seed(cfg.seed, "generator"), provenance)
    D = new_bundle(descriptor_for("discriminator", channels, cfg.scale), derive_seed(cfg.seed, "discriminator"), provenance)
    den = new_bundle(descriptor_for("denoiser", channels, cfg.scale), derive_seed(cfg.seed, "denoiser"), provenance)

    B.freeze()
    bcm_module = B.module
    est_module = None
    if C is not None:
        C.freeze()
        est_module = C.module

    opt_g = torch.optim.Adam(G.module.parameters(), lr=cfg.lr)
    opt_d = torch.optim.Adam(D.module.parameters(), lr=cfg.lr)
    opt_den = torch.optim.Adam(den.module.parameters(), lr=cfg.lr)

    rng = np.random.default_rng(derive_seed(cfg.seed, "adani-sampling"))
    iters_per_epoch = len(clean_entries)
    log.info(
        "adani: %d epochs x %d iters, alpha=%s beta=%g gamma=%g scale=%s",
        cfg.epochs, iters_per_epoch, cfg.alpha_mode, cfg.beta, cfg.gamma, cfg.scale,
    )
    log_rows: List[dict] = []
    log_path = out_dir / "losses.csv" if out_dir is not None else None
    log_file = None
    writer = None
    if log_path is not None:
        log_file = open(log_path, "w", newline="")
        writer = csv.DictWriter(log_file, fieldnames=LOG_FIELDS)
        writer.writeheader()

    window = {k: 0.0 for k in LOG_FIELDS if k not in ("epoch", "iteration", "lr")}
    window_n = 0
    iteration = 0

    def flush_window(epoch: int, lr: float):
        nonlocal window_n
        if window_n == 0:
            return
        row = {k: v / window_n for k, v in window.items()}
        row.update(epoch=epoch, iteration=iteration, lr=lr)
        log_rows.append(row)
        if writer is not None:
            writer.writerow({k: f"{row[k]:.6g}" if isinstance(row[k], float) else row[k] for k in LOG_FIELDS})
            log_file.flush()
        for k in window:
            window[k] = 0.0
        window_n = 0

    try:
        for epoch in range(cfg.epochs):
            lr = cfg.lr * (1.0 - epoch / cfg.epochs)
            for opt in (opt_g, opt_d, opt_den):
                for group in opt.param_groups:
                    group["lr"] = lr
            for _ in range(iters_per_epoch):
                iteration += 1
                sample = sample_unpaired(noisy, clean, rng, cfg.patch)
                x_r = to_tensor(sample.x_r)
                y_r = to_tensor(sample.y_r)

                x_g, _ = run_generator(G.module, y_r, x_r)

                # discriminator on (real, detached fake)
                _set_requires_grad(D.module, True)
                opt_d.zero_grad(set_to_none=True)
                x_g_det = x_g.detach()
                d_loss, _ = gan_losses(D.module(x_r), D.module(x_g_det))
                d_loss.backward()
                opt_d.step()

                # generator: GAN + alpha*gradient + beta*bc + gamma*logit
                _set_requires_grad(D.module, False)
                fake_scores = D.module(x_g)
                g_gan = F.binary_cross_entropy_with_logits(fake_scores, torch.ones_like(fake_scores))
                grad_l = loss_gradient_t(x_g, x_r)
                with torch.no_grad():
                    b_yr = run_bcm(bcm_module, y_r)
                bc_l = (run_bcm(bcm_module, x_g) - b_yr).abs().mean()

                z_r1 = 0.0
                if est_module is not None:
                    with torch.no_grad():
                        z_r1 = float(class1_logit_t(est_module, x_r))
                alpha = max(z_r1, 0.0) if cfg.alpha_mode == "adaptive" else cfg.alpha_fixed

                if cfg.gamma > 0 and est_module is not None:
                    logit_l = loss_logit_t(est_module, x_g, z_r1)
                elif est_module is not None:
                    with torch.no_grad():
                        logit_l = loss_logit_t(est_module, x_g, z_r1)
                else:
                    logit_l = torch.zeros(())

                g_total = generator_total(g_gan, grad_l, bc_l, logit_l if cfg.gamma > 0 else 0.0, alpha, cfg.beta, cfg.gamma)
                opt_g.zero_grad(set_to_none=True)
                g_total.backward()
                opt_g.step()

                # denoiser on the detached generated pair
                opt_den.zero_grad(set_to_none=True)
                den_out = run_denoiser(den.module, x_g_det)
                den_loss = (den_out - y_r).abs().mean()
                den_loss.backward()
                opt_den.step()

                values = LossBreakdown(
                    gan_g=float(g_gan.detach()),
                    gan_d=float(d_loss.detach()),
                    gradient=float(grad_l.detach()),
                    bc=float(bc_l.detach()),
                    logit=float(logit_l.detach()),
                    denoiser=float(den_loss.detach()),
                    alpha_used=float(alpha),
                )
                if not all(np.isfinite(v) for v in asdict(values).values()):
                    snapshot = _abort_snapshot(out_dir, iteration, epoch, cfg, values)
                    raise TrainingAbort(
                        f"non-finite loss at iteration {iteration}", snapshot
                    )

                for key, val in asdict(values).items():
                    window[key] += val
                window["total_g"] += values.total_g(cfg.beta, cfg.gamma)
                window_n += 1
                if iteration % cfg.log_every == 0:
                    flush_window(epoch, lr)
                if out_dir is not None and cfg.sample_every and iteration % cfg.sample_every == 0:
                    with torch.no_grad():
                        den_view = run_denoiser(den.module, x_g_det)
                    _audit_grid([y_r, x_r, x_g, den_view], out_dir / f"audit_{iteration:07d}.png")

            if (
                out_dir is not None
                and cfg.checkpoint_every
                and (epoch + 1) % cfg.checkpoint_every == 0
                and epoch + 1 < cfg.epochs
            ):
                _save_triplet(out_dir, G, D, den, epoch + 1)
        flush_window(cfg.epochs - 1, 0.0)
    finally:
        if log_file is not None:
            log_file.close()

    for bundle in (G, D, den):
        bundle.provenance = dict(provenance, epoch=cfg.epochs)
    if out_dir is not None:
        _save_triplet(out_dir, G, D, den, cfg.epochs, final=True)
    return AdaniResult(generator=G, discriminator=D, denoiser=den, log_rows=log_rows, log_path=log_path)


def _save_triplet(out_dir: Path, G, D, den, epoch: int, final: bool = False):
    tag = "final" if final else f"epoch{epoch:05d}"
    for bundle, name in ((G, "generator"), (D, "discriminator"), (den, "denoiser")):
        bundle.save(out_dir / f"{name}_{tag}.ckpt")


def _abort_snapshot(out_dir: Optional[Path], iteration: int, epoch: int, cfg: AdaniConfig, values: LossBreakdown):
    payload = {
        "iteration": iteration,
        "epoch": epoch,
        "seed": cfg.seed,
        "losses": asdict(values),
    }
    target = (out_dir or Path(".")) / "abort_snapshot.json"
    try:
        target.write_text(json.dumps(payload, indent=2, sort_keys=True))
    except OSError:  # diagnostics must not mask the abort itself
        return None
    return target
