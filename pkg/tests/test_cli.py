"""Command-line surface: run directories, subcommand artifacts, exit codes,
and cross-run determinism of synthesized corpora."""

import filecmp
import json
from pathlib import Path

import numpy as np
import pytest
import torch

import noiselab.adani as adani
from helpers import gaussian_spec, write_clean_corpus, write_noisy_corpus
from noiselab.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, _acquire_lock, main
from noiselab.config import ConfigError
from noiselab.data import load_manifest
from noiselab.images import read_png, write_png
from noiselab.networks import descriptor_for, new_bundle


@pytest.fixture(scope="module")
def lab(tmp_path_factory):
    """Shared directory tree: corpora, a clean PNG folder, and fresh
    (identity-at-init) checkpoints of every network kind."""
    root = tmp_path_factory.mktemp("cli-lab")
    noisy = write_noisy_corpus(root / "noisy", 5, gaussian_spec(), seed=800, size=48)
    clean = write_clean_corpus(root / "clean", 5, seed=801, size=48)
    test = write_noisy_corpus(
        root / "test", 3, gaussian_spec(fixed=25.0), seed=802, size=48, include_clean=True
    )
    ckpts = root / "ckpts"
    ckpts.mkdir()
    for kind in ("bcm", "estimator", "generator", "denoiser"):
        new_bundle(descriptor_for(kind, 1, "desk"), seed=60).save(ckpts / f"{kind}.ckpt")
    return {
        "root": root,
        "noisy_manifest": root / "noisy" / "manifest.jsonl",
        "clean_manifest": root / "clean" / "manifest.jsonl",
        "test_manifest": root / "test" / "manifest.jsonl",
        "clean_dir": root / "clean",
        "ckpts": ckpts,
    }


def write_cfg(tmp_path, text, name="run.toml"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def run_dirs(out: Path, command: str):
    return sorted(d for d in out.glob(f"{command}-*") if d.is_dir())


class TestSynthesize:
    def cfg_text(self, lab):
        return f"""
master_seed = 5

[noise]
family = "gaussian"
level_range = [0.0, 50.0]

[synthesize]
input_dir = "{lab['clean_dir']}"
per_image = 2
"""

    def test_writes_manifest_and_copies_clean(self, lab, tmp_path):
        cfg = write_cfg(tmp_path, self.cfg_text(lab))
        out = tmp_path / "out"
        assert main(["synthesize", "--config", cfg, "--out", str(out)]) == EXIT_OK
        (run_dir,) = run_dirs(out, "synthesize")
        manifest = load_manifest(run_dir / "manifest.jsonl")
        assert len(manifest.with_role("noisy")) == 10
        assert len(manifest.with_role("clean")) == 5
        for entry in manifest.with_role("clean"):
            assert filecmp.cmp(entry.path, lab["clean_dir"] / entry.path.name, shallow=False)
        for entry in manifest.with_role("noisy"):
            assert entry.clean_id is not None
            assert entry.level is not None and 0.0 < entry.level <= 50.0
        assert (run_dir / "config.toml").exists()
        assert not (run_dir / ".lock").exists()  # released on completion

    def test_bitwise_deterministic_across_runs(self, lab, tmp_path):
        cfg = write_cfg(tmp_path, self.cfg_text(lab))
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        assert main(["synthesize", "--config", cfg, "--out", str(out_a)]) == EXIT_OK
        assert main(["synthesize", "--config", cfg, "--out", str(out_b)]) == EXIT_OK
        (dir_a,) = run_dirs(out_a, "synthesize")
        (dir_b,) = run_dirs(out_b, "synthesize")
        names = sorted(p.name for p in (dir_a / "images").glob("*.png"))
        assert len(names) == 10
        for name in names:
            assert (dir_a / "images" / name).read_bytes() == (dir_b / "images" / name).read_bytes()

    def test_seed_changes_output(self, lab, tmp_path):
        cfg = write_cfg(tmp_path, self.cfg_text(lab))
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        assert main(["synthesize", "--config", cfg, "--out", str(out_a)]) == EXIT_OK
        assert main(["synthesize", "--config", cfg, "--out", str(out_b), "--seed", "6"]) == EXIT_OK
        (dir_a,) = run_dirs(out_a, "synthesize")
        (dir_b,) = run_dirs(out_b, "synthesize")
        name = sorted(p.name for p in (dir_a / "images").glob("*.png"))[0]
        assert (dir_a / "images" / name).read_bytes() != (dir_b / "images" / name).read_bytes()

    def test_empty_input_dir_is_config_error(self, lab, tmp_path):
        empty = tmp_path / "empty"
        empty.mkdir()
        cfg = write_cfg(
            tmp_path,
            self.cfg_text(lab).replace(str(lab["clean_dir"]), str(empty)),
        )
        assert main(["synthesize", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_CONFIG


class TestPretrainCommands:
    def cfg_text(self, lab):
        return f"""
master_seed = 2

[data]
noisy_manifest = "{lab['noisy_manifest']}"
clean_manifest = "{lab['clean_manifest']}"

[pretrain]
epochs = 2
lr = 1e-3
patch = 32
scale = "desk"
"""

    def test_bcm_pretraining_run(self, lab, tmp_path):
        cfg = write_cfg(tmp_path, self.cfg_text(lab))
        out = tmp_path / "out"
        assert main(["pretrain-bcm", "--config", cfg, "--out", str(out)]) == EXIT_OK
        (run_dir,) = run_dirs(out, "pretrain-bcm")
        assert (run_dir / "bcm_final.ckpt").exists()
        log = (run_dir / "bcm_log.csv").read_text().strip().splitlines()
        assert len(log) == 1 + 2  # header + one row per epoch

    def test_epochs_flag_overrides_budget(self, lab, tmp_path):
        cfg = write_cfg(tmp_path, self.cfg_text(lab))
        out = tmp_path / "out"
        assert main(["pretrain-estimator", "--config", cfg, "--out", str(out), "--epochs", "1"]) == EXIT_OK
        (run_dir,) = run_dirs(out, "pretrain-estimator")
        log = (run_dir / "estimator_log.csv").read_text().strip().splitlines()
        assert len(log) == 1 + 1

    def test_missing_manifest_is_config_error(self, lab, tmp_path):
        cfg = write_cfg(
            tmp_path,
            self.cfg_text(lab).replace(str(lab["noisy_manifest"]), str(tmp_path / "nope.jsonl")),
        )
        assert main(["pretrain-bcm", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_CONFIG


class TestTrainCommand:
    def cfg_text(self, lab, frozen_estimator=True, extra=""):
        est = f'estimator = "{lab["ckpts"] / "estimator.ckpt"}"' if frozen_estimator else ""
        return f"""
master_seed = 3

[data]
noisy_manifest = "{lab['noisy_manifest']}"
clean_manifest = "{lab['clean_manifest']}"

[frozen]
bcm = "{lab['ckpts'] / 'bcm.ckpt'}"
{est}

[adani]
epochs = 1
lr = 1e-4
patch = 32
scale = "desk"
log_every = 1
sample_every = 0
{extra}
"""

    def test_joint_training_run(self, lab, tmp_path):
        cfg = write_cfg(tmp_path, self.cfg_text(lab))
        out = tmp_path / "out"
        assert main(["train", "--config", cfg, "--out", str(out)]) == EXIT_OK
        (run_dir,) = run_dirs(out, "train")
        for name in ("generator", "discriminator", "denoiser"):
            assert (run_dir / f"{name}_final.ckpt").exists()
        losses = (run_dir / "losses.csv").read_text().strip().splitlines()
        assert len(losses) == 1 + 5  # header + one row per iteration (log_every=1)

    def test_adaptive_alpha_without_estimator_is_config_error(self, lab, tmp_path):
        cfg = write_cfg(tmp_path, self.cfg_text(lab, frozen_estimator=False))
        assert main(["train", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_CONFIG

    def test_unguided_arm_trains_without_estimator(self, lab, tmp_path):
        cfg = write_cfg(
            tmp_path,
            self.cfg_text(lab, frozen_estimator=False, extra='alpha_mode = "fixed"\ngamma = 0.0'),
        )
        assert main(["train", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_OK

    def test_diverging_run_exits_3_with_snapshot(self, lab, tmp_path, monkeypatch):
        real = adani.loss_gradient_t

        def poisoned(x_g, x_r):
            return real(x_g, x_r) * torch.tensor(float("nan"))

        monkeypatch.setattr(adani, "loss_gradient_t", poisoned)
        cfg = write_cfg(tmp_path, self.cfg_text(lab))
        out = tmp_path / "out"
        assert main(["train", "--config", cfg, "--out", str(out)]) == EXIT_RUNTIME
        (run_dir,) = run_dirs(out, "train")
        snapshots = list(run_dir.glob("abort_*.json"))
        assert len(snapshots) == 1


class TestEvalCommand:
    def test_identity_denoiser_reports_zero_gain(self, lab, tmp_path, capsys):
        cfg = write_cfg(
            tmp_path,
            f"""
[eval]
model = "{lab['ckpts'] / 'denoiser.ckpt'}"
test_manifest = "{lab['test_manifest']}"
tile = 48
overlap = 8
""",
        )
        out = tmp_path / "out"
        assert main(["eval", "--config", cfg, "--out", str(out)]) == EXIT_OK
        (run_dir,) = run_dirs(out, "eval")
        eval_summary = json.loads((run_dir / "eval.json").read_text())
        base_summary = json.loads((run_dir / "baseline.json").read_text())
        assert eval_summary["images"] == base_summary["images"] == 3
        assert eval_summary["mean_psnr"] == pytest.approx(base_summary["mean_psnr"], abs=1e-3)
        assert "psnr gain over baseline" in capsys.readouterr().out

    def test_wrong_checkpoint_kind_is_config_error(self, lab, tmp_path):
        cfg = write_cfg(
            tmp_path,
            f"""
[eval]
model = "{lab['ckpts'] / 'generator.ckpt'}"
test_manifest = "{lab['test_manifest']}"
""",
        )
        assert main(["eval", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_CONFIG


class TestStatsCommand:
    def test_monotonicity_and_residual_arms(self, lab, tmp_path):
        cfg = write_cfg(
            tmp_path,
            f"""
[stats]
estimator = "{lab['ckpts'] / 'estimator.ckpt'}"
clean_manifest = "{lab['clean_manifest']}"
levels = [5.0, 25.0, 45.0]
residual_manifest = "{lab['test_manifest']}"
""",
        )
        out = tmp_path / "out"
        assert main(["stats", "--config", cfg, "--out", str(out)]) == EXIT_OK
        (run_dir,) = run_dirs(out, "stats")
        assert (run_dir / "monotonicity.csv").exists()
        assert (run_dir / "residuals.csv").exists()
        assert (run_dir / "residuals.png").exists()
        summary = json.loads((run_dir / "stats.json").read_text())
        assert "spearman" in summary and "residual_total" in summary

    def test_coverage_arm(self, lab, tmp_path):
        cfg = write_cfg(
            tmp_path,
            f"""
[stats]
estimator = "{lab['ckpts'] / 'estimator.ckpt'}"
generator = "{lab['ckpts'] / 'generator.ckpt'}"
clean_manifest = "{lab['clean_manifest']}"
guide_manifest = "{lab['noisy_manifest']}"
n = 6
patch = 32
""",
        )
        out = tmp_path / "out"
        assert main(["stats", "--config", cfg, "--out", str(out)]) == EXIT_OK
        (run_dir,) = run_dirs(out, "stats")
        assert (run_dir / "coverage_generated.csv").exists()
        assert (run_dir / "coverage_guides.csv").exists()
        summary = json.loads((run_dir / "stats.json").read_text())
        assert {"generated_std", "guide_std", "coverage_distance"} <= set(summary)

    def test_nothing_selected_is_config_error(self, lab, tmp_path):
        cfg = write_cfg(
            tmp_path,
            f"""
[stats]
estimator = "{lab['ckpts'] / 'estimator.ckpt'}"
""",
        )
        assert main(["stats", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_CONFIG


class TestAblateCommand:
    def test_two_variant_table(self, lab, tmp_path):
        cfg = write_cfg(
            tmp_path,
            f"""
master_seed = 4

[data]
noisy_manifest = "{lab['noisy_manifest']}"
clean_manifest = "{lab['clean_manifest']}"

[frozen]
bcm = "{lab['ckpts'] / 'bcm.ckpt'}"
estimator = "{lab['ckpts'] / 'estimator.ckpt'}"

[adani]
epochs = 1
lr = 1e-4
patch = 32
scale = "desk"

[ablate]
test_manifest = "{lab['test_manifest']}"

[[ablate.variants]]
alpha_mode = "fixed"
alpha_fixed = 0.0
gamma = 0.0

[[ablate.variants]]
alpha_mode = "adaptive"
gamma = 0.1
""",
        )
        out = tmp_path / "out"
        assert main(["ablate", "--config", cfg, "--out", str(out)]) == EXIT_OK
        (run_dir,) = run_dirs(out, "ablate")
        table = (run_dir / "ablation.csv").read_text().strip().splitlines()
        assert table[0] == "alpha_mode,alpha_fixed,gamma,mean_psnr,mean_ssim"
        assert len(table) == 3
        assert (run_dir / "variant00" / "denoiser_final.ckpt").exists()
        assert (run_dir / "variant01" / "denoiser_final.ckpt").exists()

    def test_variant_keys_restricted(self, lab, tmp_path):
        cfg = write_cfg(
            tmp_path,
            f"""
[data]
noisy_manifest = "{lab['noisy_manifest']}"
clean_manifest = "{lab['clean_manifest']}"

[frozen]
bcm = "{lab['ckpts'] / 'bcm.ckpt'}"

[ablate]
test_manifest = "{lab['test_manifest']}"

[[ablate.variants]]
alpha_mode = "fixed"
epochs = 5
""",
        )
        assert main(["ablate", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_CONFIG


class TestDenoiseCommand:
    def test_single_image_round_trip(self, lab, tmp_path):
        src = next((lab["root"] / "test").glob("n????.png"))
        out_png = tmp_path / "denoised.png"
        code = main(
            [
                "denoise",
                "--model", str(lab["ckpts"] / "denoiser.ckpt"),
                "--input", str(src),
                "--output", str(out_png),
                "--tile", "48",
                "--overlap", "8",
            ]
        )
        assert code == EXIT_OK
        # identity network: the 8-bit round trip is exact
        assert np.array_equal(read_png(out_png).data, read_png(src).data)

    def test_missing_model_is_config_error(self, tmp_path):
        code = main(
            [
                "denoise",
                "--model", str(tmp_path / "missing.ckpt"),
                "--input", str(tmp_path / "x.png"),
                "--output", str(tmp_path / "y.png"),
            ]
        )
        assert code == EXIT_CONFIG


class TestRunDirPlumbing:
    def test_lock_collision_detected(self, tmp_path):
        run_dir = tmp_path / "r"
        run_dir.mkdir()
        _acquire_lock(run_dir)
        with pytest.raises(ConfigError):
            _acquire_lock(run_dir)

    def test_config_persisted_with_overrides(self, lab, tmp_path):
        cfg = write_cfg(
            tmp_path,
            f"""
[noise]
family = "gaussian"
level_range = [0.0, 50.0]

[synthesize]
input_dir = "{lab['clean_dir']}"
""",
        )
        out = tmp_path / "out"
        code = main(
            ["synthesize", "--config", cfg, "--out", str(out), "--seed", "42", "--set", "synthesize.per_image=1"]
        )
        assert code == EXIT_OK
        (run_dir,) = run_dirs(out, "synthesize")
        from noiselab.config import load_config

        persisted = load_config(run_dir / "config.toml")
        assert persisted.master_seed == 42
        assert persisted.section("synthesize")["per_image"] == 1

    def test_missing_config_file_is_config_error(self, tmp_path):
        assert main(["train", "--config", str(tmp_path / "none.toml"), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
