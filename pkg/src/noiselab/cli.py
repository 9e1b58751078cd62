"""Operator surface: subcommands over config files, with per-run artifact
directories.

Every config-driven command materializes a fresh run directory named
<command>-<timestamp>-<confighash8>, persists the resolved config there, and
holds a lock file while it runs. Exit codes: 0 success, 2 configuration /
input errors, 3 runtime aborts (non-finite losses and other mid-run
failures).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import shutil
import sys
import time
from pathlib import Path
from typing import List, Optional

import numpy as np

from .adani import TrainingAbort, train_adani
from .checkpoint import CheckpointError
from .config import (
    ConfigError,
    RunConfig,
    apply_overrides,
    from_mapping,
    load_config,
    resolve_path,
    save_config,
)
from .data import (
    CorpusManifest,
    ManifestEntry,
    ManifestError,
    load_image,
    load_manifest,
    save_manifest,
)
from .evalstats import (
    Histogram,
    evaluate_denoiser,
    generated_logits,
    guide_logits,
    histogram_distance,
    monotonicity_report,
    noise_residual_histogram,
    noisy_baseline,
    plot_histogram,
    run_ablation,
    tiled_denoise,
    write_histogram,
    write_report,
)
from .images import DimensionError, ParameterError, read_png, write_png
from .networks import ModelBundle
from .noise import apply_noise, derive_seed
from .pretrain import pretrain_bcm, pretrain_estimator

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

_EPOCH_SECTION = {
    "pretrain-bcm": "pretrain",
    "pretrain-estimator": "pretrain",
    "train": "adani",
    "ablate": "adani",
}


# ---------------------------------------------------------------------------
# run directories


def _resolved_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else from_mapping({})
    overrides: List[str] = []
    if args.seed is not None:
        overrides.append(f"master_seed={args.seed}")
    if args.out is not None:
        overrides.append(f"output_dir={args.out}")
    if getattr(args, "epochs", None) is not None:
        section = _EPOCH_SECTION.get(args.command)
        if section is None:
            raise ConfigError(f"--epochs does not apply to {args.command!r}")
        overrides.append(f"{section}.epochs={args.epochs}")
    overrides.extend(args.set or [])
    return apply_overrides(cfg, overrides)


def _make_run_dir(cfg: RunConfig, command: str) -> Path:
    base = resolve_path(cfg.output_dir)
    stamp = time.strftime("%Y%m%d-%H%M%S")
    short = cfg.config_hash()[:8]
    for attempt in range(1000):
        suffix = "" if attempt == 0 else f"-{attempt}"
        run_dir = base / f"{command}-{stamp}-{short}{suffix}"
        try:
            run_dir.mkdir(parents=True, exist_ok=False)
        except FileExistsError:
            continue
        return run_dir
    raise ConfigError(f"could not allocate a fresh run directory under {base}")


def _acquire_lock(run_dir: Path) -> Path:
    lock = run_dir / ".lock"
    try:
        with open(lock, "x") as fh:
            fh.write(str(os.getpid()))
    except FileExistsError:
        raise ConfigError(f"{run_dir} is already in use (lock file present)")
    return lock


def _require(section: dict, key: str, name: str):
    if key not in section:
        raise ConfigError(f"[{name}] needs {key!r}")
    return section[key]


def _load_corpora(cfg: RunConfig):
    data = cfg.section("data")
    noisy = load_manifest(resolve_path(_require(data, "noisy_manifest", "data")))
    clean = load_manifest(resolve_path(_require(data, "clean_manifest", "data")))
    return noisy, clean


def _load_bundle(path, kind: str) -> ModelBundle:
    bundle = ModelBundle.load(resolve_path(path))
    if bundle.descriptor.kind != kind:
        raise ConfigError(f"{path}: expected a {kind} checkpoint, got {bundle.descriptor.kind}")
    return bundle


# ---------------------------------------------------------------------------
# subcommands


def cmd_synthesize(cfg: RunConfig, run_dir: Path) -> int:
    sec = cfg.section("synthesize")
    input_dir = resolve_path(_require(sec, "input_dir", "synthesize"))
    per_image = int(sec.get("per_image", 1))
    include_clean = bool(sec.get("include_clean", True))
    split = str(sec.get("split", "train"))
    if per_image < 1:
        raise ConfigError("per_image must be >= 1")
    spec = cfg.noise_spec()
    files = sorted(Path(input_dir).glob("*.png"))
    if not files:
        raise ConfigError(f"no PNG files under {input_dir}")

    (run_dir / "images").mkdir()
    if include_clean:
        (run_dir / "clean").mkdir()
    entries: List[ManifestEntry] = []
    for f in files:
        clean_img = read_png(f)
        if include_clean:
            target = run_dir / "clean" / f.name
            shutil.copyfile(f, target)
            entries.append(ManifestEntry(image_id=f.stem, path=target, role="clean"))
        for j in range(per_image):
            image_id = f"{f.stem}.n{j:02d}"
            seed = derive_seed(cfg.master_seed, image_id)
            noisy, level = apply_noise(clean_img, spec, np.random.default_rng(seed))
            out_path = run_dir / "images" / f"{image_id}.png"
            write_png(noisy, out_path)
            entries.append(
                ManifestEntry(
                    image_id=image_id,
                    path=out_path,
                    role="noisy",
                    noise_family=spec.family,
                    level=float(level),
                    seed=seed,
                    clean_id=f.stem,
                )
            )
    manifest = CorpusManifest(root=run_dir, entries=entries, split=split, master_seed=cfg.master_seed)
    save_manifest(manifest, run_dir / "manifest.jsonl")
    print(f"synthesized {per_image * len(files)} {spec.family} images -> {run_dir / 'manifest.jsonl'}")
    return EXIT_OK


def _print_epoch_tail(rows: List[dict]):
    if rows:
        tail = rows[-1]
        printable = ", ".join(f"{k}={v:.5g}" if isinstance(v, float) else f"{k}={v}" for k, v in tail.items())
        print(f"final epoch: {printable}")


def cmd_pretrain(cfg: RunConfig, run_dir: Path, which: str, resume: Optional[str]) -> int:
    noisy, clean = _load_corpora(cfg)
    pcfg = cfg.pretrain_config()
    trainer = pretrain_bcm if which == "bcm" else pretrain_estimator
    result = trainer(
        noisy, clean, pcfg, out_dir=run_dir, resume_from=resume, config_hash=cfg.config_hash()
    )
    _print_epoch_tail(result.log_rows)
    print(f"checkpoint: {run_dir / (which + '_final.ckpt')}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, run_dir: Path) -> int:
    noisy, clean = _load_corpora(cfg)
    frozen = cfg.section("frozen")
    B = _load_bundle(_require(frozen, "bcm", "frozen"), "bcm")
    C = _load_bundle(frozen["estimator"], "estimator") if "estimator" in frozen else None
    acfg = cfg.adani_config()
    result = train_adani(noisy, clean, B, C, acfg, out_dir=run_dir, config_hash=cfg.config_hash())
    _print_epoch_tail(result.log_rows)
    print(f"checkpoints: {run_dir}/{{generator,discriminator,denoiser}}_final.ckpt")
    return EXIT_OK


def _print_report(title: str, report) -> None:
    print(f"== {title} ==")
    print(f"{'image_id':<28} {'psnr_db':>9} {'ssim':>7}")
    for r in report.per_image:
        print(f"{r.image_id:<28} {r.psnr:>9.3f} {r.ssim:>7.4f}")
    print(f"{'mean':<28} {report.mean_psnr:>9.3f} {report.mean_ssim:>7.4f}")


def cmd_eval(cfg: RunConfig, run_dir: Path) -> int:
    sec = cfg.section("eval")
    bundle = _load_bundle(_require(sec, "model", "eval"), "denoiser")
    test = load_manifest(resolve_path(_require(sec, "test_manifest", "eval")))
    report = evaluate_denoiser(
        bundle,
        test,
        config_hash=cfg.config_hash(),
        tile=int(sec.get("tile", 128)),
        overlap=int(sec.get("overlap", 32)),
    )
    write_report(report, run_dir, "eval")
    _print_report("denoiser", report)
    if bool(sec.get("baseline", True)):
        base = noisy_baseline(test, config_hash=cfg.config_hash())
        write_report(base, run_dir, "baseline")
        _print_report("noisy baseline", base)
        print(f"psnr gain over baseline: {report.mean_psnr - base.mean_psnr:+.3f} dB")
    return EXIT_OK


def cmd_stats(cfg: RunConfig, run_dir: Path) -> int:
    sec = cfg.section("stats")
    C = _load_bundle(_require(sec, "estimator", "stats"), "estimator")
    summary = {}

    if "clean_manifest" in sec:
        clean = load_manifest(resolve_path(sec["clean_manifest"]))
        levels = [float(v) for v in sec.get("levels", [5.0, 20.0, 35.0, 50.0])]
        report = monotonicity_report(
            C, clean, levels, family=str(sec.get("family", "gaussian")), seed=cfg.master_seed
        )
        lines = ["level,mean_z1,mean_q1,median_q1"]
        print(f"{'level':>7} {'mean_z1':>9} {'mean_q1':>9} {'median_q1':>10}")
        for row in report.rows:
            print(
                f"{row.level:>7.2f} {row.mean_z1:>9.4f} {row.mean_q1:>9.4f}"
                f" {row.median_q1:>10.4f}"
            )
            lines.append(
                f"{row.level:.6g},{row.mean_z1:.6g},{row.mean_q1:.6g},{row.median_q1:.6g}"
            )
        print(f"spearman(level, mean_z1) = {report.spearman:.4f}")
        (run_dir / "monotonicity.csv").write_text("\n".join(lines) + "\n")
        summary["spearman"] = report.spearman

    if "generator" in sec:
        G = _load_bundle(sec["generator"], "generator")
        clean = load_manifest(resolve_path(_require(sec, "clean_manifest", "stats")))
        guides = load_manifest(resolve_path(_require(sec, "guide_manifest", "stats")))
        n = int(sec.get("n", 1000))
        patch = int(sec.get("patch", 128))
        bins = int(sec.get("bins", 40))
        lo, hi = float(sec.get("lo", -10.0)), float(sec.get("hi", 60.0))
        gen_z = generated_logits(G, C, clean, guides, n, patch=patch, seed=cfg.master_seed)
        guide_z = guide_logits(C, guides, n, patch=patch, seed=cfg.master_seed)
        gen_h = Histogram.from_values(gen_z, bins, lo, hi)
        guide_h = Histogram.from_values(guide_z, bins, lo, hi)
        write_histogram(gen_h, run_dir / "coverage_generated.csv")
        write_histogram(guide_h, run_dir / "coverage_guides.csv")
        plot_histogram(gen_h, run_dir / "coverage_generated.png", "estimated level, generated", "generated")
        plot_histogram(guide_h, run_dir / "coverage_guides.png", "estimated level, guides", "guides")
        summary.update(
            generated_std=float(np.std(gen_z)),
            guide_std=float(np.std(guide_z)),
            coverage_distance=histogram_distance(gen_h, guide_h),
        )
        print(
            f"level coverage: std(generated)={summary['generated_std']:.3f} "
            f"std(guides)={summary['guide_std']:.3f} chi2={summary['coverage_distance']:.4f}"
        )

    if "residual_manifest" in sec:
        test = load_manifest(resolve_path(sec["residual_manifest"]))
        bins = int(sec.get("residual_bins", 81))
        lo, hi = float(sec.get("residual_lo", -0.4)), float(sec.get("residual_hi", 0.4))
        merged = None
        for noisy_entry in sorted(test.with_role("noisy"), key=lambda e: e.image_id):
            if noisy_entry.clean_id is None:
                raise ManifestError(f"no ground truth for noisy image {noisy_entry.image_id!r}")
            h = noise_residual_histogram(
                load_image(noisy_entry), load_image(test.by_id(noisy_entry.clean_id)), bins, lo, hi
            )
            if merged is None:
                merged = h
            else:
                merged = Histogram(h.bin_edges, merged.counts + h.counts, merged.below + h.below, merged.above + h.above)
        if merged is None:
            raise ManifestError("residual manifest holds no noisy entries")
        write_histogram(merged, run_dir / "residuals.csv")
        plot_histogram(merged, run_dir / "residuals.png", "noise residuals")
        summary["residual_total"] = merged.total
        print(f"residual histogram over {merged.total} in-range values -> residuals.csv")

    if not summary:
        raise ConfigError("[stats] selected nothing: provide clean_manifest, generator, or residual_manifest")
    (run_dir / "stats.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


_VARIANT_KEYS = {"alpha_mode", "alpha_fixed", "gamma"}


def cmd_ablate(cfg: RunConfig, run_dir: Path) -> int:
    noisy, clean = _load_corpora(cfg)
    frozen = cfg.section("frozen")
    B = _load_bundle(_require(frozen, "bcm", "frozen"), "bcm")
    C = _load_bundle(frozen["estimator"], "estimator") if "estimator" in frozen else None
    sec = cfg.section("ablate")
    test = load_manifest(resolve_path(_require(sec, "test_manifest", "ablate")))
    rows = sec.get("variants")
    if not isinstance(rows, list) or not rows or not all(isinstance(r, dict) for r in rows):
        raise ConfigError("[ablate] needs [[ablate.variants]] entries")
    base = cfg.adani_config()
    variants = []
    for row in rows:
        extra = sorted(set(row) - _VARIANT_KEYS)
        if extra:
            raise ConfigError(f"variants may only set {sorted(_VARIANT_KEYS)}, got {extra}")
        variants.append(dataclasses.replace(base, **row))
    results = run_ablation(variants, noisy, clean, test, B, C, out_dir=run_dir, config_hash=cfg.config_hash())
    lines = ["alpha_mode,alpha_fixed,gamma,mean_psnr,mean_ssim"]
    print(f"{'alpha':>12} {'gamma':>6} {'psnr_db':>9} {'ssim':>7}")
    for vcfg, report in results:
        alpha = "adaptive" if vcfg.alpha_mode == "adaptive" else f"{vcfg.alpha_fixed:g}"
        print(f"{alpha:>12} {vcfg.gamma:>6g} {report.mean_psnr:>9.3f} {report.mean_ssim:>7.4f}")
        lines.append(
            f"{vcfg.alpha_mode},{vcfg.alpha_fixed:g},{vcfg.gamma:g},{report.mean_psnr:.6f},{report.mean_ssim:.6f}"
        )
    (run_dir / "ablation.csv").write_text("\n".join(lines) + "\n")
    return EXIT_OK


def cmd_denoise(args) -> int:
    bundle = _load_bundle(args.model, "denoiser")
    img = read_png(args.input)
    out = tiled_denoise(bundle, img, tile=args.tile, overlap=args.overlap)
    write_png(out, args.output)
    print(f"wrote {args.output}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing and dispatch


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="noiselab",
        description="Unpaired denoising lab: corpus synthesis, guided noise "
        "generation, denoiser training, and evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(sp, epochs=False):
        sp.add_argument("--config", help="TOML run config")
        sp.add_argument("--seed", type=int, help="override master_seed")
        sp.add_argument("--out", help="override output_dir (run dirs are created inside it)")
        sp.add_argument("--device-hint", default="cpu", help="compute device hint (cpu-only build)")
        sp.add_argument(
            "--set",
            action="append",
            metavar="KEY=VALUE",
            help="dotted-key config override, TOML literal value (repeatable)",
        )
        if epochs:
            sp.add_argument("--epochs", type=int, help="override the epoch budget")

    common(sub.add_parser("synthesize", help="degrade a clean corpus into a noisy one"))
    for name in ("pretrain-bcm", "pretrain-estimator"):
        sp = sub.add_parser(name, help=f"pretrain the {'filter network' if name.endswith('bcm') else 'level estimator'}")
        common(sp, epochs=True)
        sp.add_argument("--resume", help="training-state checkpoint to continue from")
    common(sub.add_parser("train", help="adversarial noise-imitation + denoiser training"), epochs=True)
    common(sub.add_parser("eval", help="PSNR/SSIM of a denoiser over a paired manifest"))
    common(sub.add_parser("stats", help="coverage / monotonicity / residual diagnostics"))
    common(sub.add_parser("ablate", help="train objective variants and compare"), epochs=True)

    sp = sub.add_parser("denoise", help="run a denoiser checkpoint over one PNG")
    sp.add_argument("--model", required=True)
    sp.add_argument("--input", required=True)
    sp.add_argument("--output", required=True)
    sp.add_argument("--tile", type=int, default=128)
    sp.add_argument("--overlap", type=int, default=32)
    sp.add_argument("--device-hint", default="cpu")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    if args.device_hint not in ("", "cpu"):
        log.warning("device hint %r ignored: this build runs on cpu", args.device_hint)

    try:
        if args.command == "denoise":
            return cmd_denoise(args)
        cfg = _resolved_config(args)
        run_dir = _make_run_dir(cfg, args.command)
        lock = _acquire_lock(run_dir)
        try:
            save_config(cfg, run_dir / "config.toml")
            print(f"run dir: {run_dir}")
            if args.command == "synthesize":
                return cmd_synthesize(cfg, run_dir)
            if args.command == "pretrain-bcm":
                return cmd_pretrain(cfg, run_dir, "bcm", args.resume)
            if args.command == "pretrain-estimator":
                return cmd_pretrain(cfg, run_dir, "estimator", args.resume)
            if args.command == "train":
                return cmd_train(cfg, run_dir)
            if args.command == "eval":
                return cmd_eval(cfg, run_dir)
            if args.command == "stats":
                return cmd_stats(cfg, run_dir)
            if args.command == "ablate":
                return cmd_ablate(cfg, run_dir)
            raise ConfigError(f"unknown command {args.command!r}")
        finally:
            lock.unlink(missing_ok=True)
    except TrainingAbort as exc:
        where = f" (snapshot: {exc.snapshot_path})" if exc.snapshot_path else ""
        print(f"error: {exc}{where}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ConfigError, ManifestError, ParameterError, DimensionError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except RuntimeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
