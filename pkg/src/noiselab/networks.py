"""Network architectures and forward contracts: generator, background filter (BCM),
patch discriminator, noise-level estimator, and denoising U-Net.

Conventions:
  * modules run on (1, C, H, W) float tensors;
  * generator / BCM / denoiser modules emit residual fields, and the run_*
    helpers add them to the input, so zero-initialized heads start these
    networks at the identity mapping;
  * clamping to [0, 1] happens only at export/evaluation, never inside the
    training graph.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from typing import Dict, Tuple

import numpy as np
import torch
from torch import nn

from .checkpoint import Archive, load_archive, save_archive
from .images import DimensionError, Image, ParameterError

KINDS = ("generator", "bcm", "discriminator", "estimator", "denoiser")

# width/depth presets; desk scale keeps CPU experiments tractable
PRESETS = {
    "generator": {"full": (64, 6), "desk": (32, 4)},
    "bcm": {"full": (64, 6), "desk": (32, 4)},
    "discriminator": {"full": (64, 4), "desk": (32, 4)},
    "estimator": {"full": (32, 4), "desk": (32, 4)},
    "denoiser": {"full": (48, 4), "desk": (24, 3)},
}


@dataclass(frozen=True)
class ArchDescriptor:
    kind: str
    width: int
    depth: int
    in_channels: int
    out_channels: int

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ParameterError(f"unknown network kind {self.kind!r}")
        if self.width < 1 or self.depth < 1:
            raise ParameterError("width and depth must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchDescriptor":
        return cls(**d)


def descriptor_for(kind: str, channels: int = 3, scale: str = "full") -> ArchDescriptor:
    if kind not in PRESETS:
        raise ParameterError(f"unknown network kind {kind!r}")
    if scale not in PRESETS[kind]:
        raise ParameterError(f"unknown scale {scale!r} (expected 'full' or 'desk')")
    width, depth = PRESETS[kind][scale]
    in_ch = 2 * channels if kind == "generator" else channels
    out_ch = 1 if kind == "discriminator" else (2 if kind == "estimator" else channels)
    return ArchDescriptor(kind, width, depth, in_ch, out_ch)


def _zero_init(conv: nn.Module) -> nn.Module:
    nn.init.zeros_(conv.weight)
    if conv.bias is not None:
        nn.init.zeros_(conv.bias)
    return conv


class ResidualBlock(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(ch, ch, 3, padding=1, padding_mode="reflect"),
            nn.InstanceNorm2d(ch),
            nn.ReLU(inplace=True),
            nn.Conv2d(ch, ch, 3, padding=1, padding_mode="reflect"),
            nn.InstanceNorm2d(ch),
        )

    def forward(self, x):
        return x + self.body(x)


class ResnetTranslator(nn.Module):
    """Conv stem, residual blocks at constant width, conv head — everything at
    full resolution, so arbitrary spatial dims are preserved. The zero-initialized
    head makes a fresh network emit exactly zero."""

    def __init__(self, in_ch: int, out_ch: int, width: int, blocks: int):
        super().__init__()
        # 9x9 stem/head + 3x3 block convs put the receptive field at 33 px
        # (desk depth), wide enough to span the 31x31 background filter window.
        self.stem = nn.Sequential(
            nn.ReflectionPad2d(4),
            nn.Conv2d(in_ch, width, 9),
            nn.InstanceNorm2d(width),
            nn.ReLU(inplace=True),
        )
        self.blocks = nn.Sequential(*[ResidualBlock(width) for _ in range(blocks)])
        self.head = nn.Sequential(
            nn.ReflectionPad2d(4), _zero_init(nn.Conv2d(width, out_ch, 9))
        )

    def forward(self, x):
        return self.head(self.blocks(self.stem(x)))


class PatchDiscriminator(nn.Module):
    """PatchGAN: strided convs doubling channels, one-channel score map head,
    ~70x70 receptive field at depth 4. No output squashing; the loss applies it."""

    def __init__(self, in_ch: int, width: int = 64, layers: int = 4):
        super().__init__()
        seq = [nn.Conv2d(in_ch, width, 4, stride=2, padding=1), nn.LeakyReLU(0.2, inplace=True)]
        ch = width
        for i in range(1, layers):
            stride = 2 if i < layers - 1 else 1
            seq += [
                nn.Conv2d(ch, ch * 2, 4, stride=stride, padding=1),
                nn.InstanceNorm2d(ch * 2),
                nn.LeakyReLU(0.2, inplace=True),
            ]
            ch *= 2
        seq.append(nn.Conv2d(ch, 1, 4, stride=1, padding=1))
        self.body = nn.Sequential(*seq)

    def forward(self, x):
        return self.body(x)


class LevelEstimator(nn.Module):
    """Four stride-2 convs, global average pool, two-logit linear head.

    Deliberately unnormalized: the class-1 logit magnitude is the noise-level
    signal, and normalization layers would wash it out.
    """

    def __init__(self, in_ch: int, width: int = 32):
        super().__init__()
        chs = [width, 2 * width, 4 * width, 8 * width]
        seq = []
        prev = in_ch
        for ch in chs:
            seq += [nn.Conv2d(prev, ch, 3, stride=2, padding=1), nn.ReLU(inplace=True)]
            prev = ch
        self.features = nn.Sequential(*seq)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.fc = nn.Linear(prev, 2)

    def forward(self, x):
        h = self.pool(self.features(x)).flatten(1)
        return self.fc(h)


class _DoubleConv(nn.Module):
    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_ch, out_ch, 3, padding=1),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.body(x)


class UNetDenoiser(nn.Module):
    """Encoder-decoder with skip concatenation; depth = number of downsamplings.
    Emits a residual field via a zero-initialized 1x1 head."""

    def __init__(self, in_ch: int, out_ch: int, width: int, depth: int):
        super().__init__()
        self.depth = depth
        enc_widths = [width * 2**i for i in range(depth)]
        self.encoders = nn.ModuleList()
        prev = in_ch
        for w in enc_widths:
            self.encoders.append(_DoubleConv(prev, w))
            prev = w
        self.pool = nn.MaxPool2d(2)
        self.bottleneck = _DoubleConv(prev, width * 2**depth)
        self.ups = nn.ModuleList()
        self.decoders = nn.ModuleList()
        prev = width * 2**depth
        for w in reversed(enc_widths):
            self.ups.append(nn.ConvTranspose2d(prev, w, 2, stride=2))
            self.decoders.append(_DoubleConv(2 * w, w))
            prev = w
        self.head = _zero_init(nn.Conv2d(width, out_ch, 1))

    def forward(self, x):
        skips = []
        h = x
        for enc in self.encoders:
            h = enc(h)
            skips.append(h)
            h = self.pool(h)
        h = self.bottleneck(h)
        for up, dec, skip in zip(self.ups, self.decoders, reversed(skips)):
            h = up(h)
            h = dec(torch.cat([skip, h], dim=1))
        return self.head(h)


def build_network(desc: ArchDescriptor) -> nn.Module:
    if desc.kind in ("generator", "bcm"):
        return ResnetTranslator(desc.in_channels, desc.out_channels, desc.width, desc.depth)
    if desc.kind == "discriminator":
        return PatchDiscriminator(desc.in_channels, desc.width, desc.depth)
    if desc.kind == "estimator":
        return LevelEstimator(desc.in_channels, desc.width)
    return UNetDenoiser(desc.in_channels, desc.out_channels, desc.width, desc.depth)


# ---------------------------------------------------------------------------
# tensor-level forward helpers (used inside training graphs)


def run_generator(module: nn.Module, y_r: torch.Tensor, x_r: torch.Tensor):
    """x_g = y_r + n_g with n_g emitted from the channel-concatenated pair."""
    if y_r.shape != x_r.shape:
        raise DimensionError(f"patch shape mismatch: {tuple(y_r.shape)} vs {tuple(x_r.shape)}")
    n_g = module(torch.cat([y_r, x_r], dim=1))
    return y_r + n_g, n_g


def run_bcm(module: nn.Module, x: torch.Tensor) -> torch.Tensor:
    # Residual skip: the filter output shares the input's local intensity
    # levels, which the normalized trunk cannot carry on its own, so the
    # module only has to emit the correction toward the filtered image.
    return x + module(x)


def run_denoiser(module: nn.Module, x: torch.Tensor) -> torch.Tensor:
    depth = getattr(module, "depth", None)
    if depth is not None:
        f = 2**depth
        if x.shape[-2] % f or x.shape[-1] % f:
            raise DimensionError(
                f"denoiser input dims {tuple(x.shape[-2:])} not divisible by {f}"
            )
    return x + module(x)


# ---------------------------------------------------------------------------
# bundles


def to_tensor(img: Image) -> torch.Tensor:
    """(1, C, H, W) float32 view of an image; images store float64 but every
    network runs in float32."""
    return torch.from_numpy(np.transpose(img.data, (2, 0, 1)).astype(np.float32)).unsqueeze(0)


def to_image(t: torch.Tensor, clamp: bool = False) -> Image:
    arr = t.detach().squeeze(0).permute(1, 2, 0).cpu().numpy()
    img = Image(arr)
    return img.clamp() if clamp else img


@dataclass
class ModelBundle:
    descriptor: ArchDescriptor
    module: nn.Module
    provenance: dict = field(default_factory=dict)

    @property
    def kind(self) -> str:
        return self.descriptor.kind

    def save(self, path) -> None:
        arrays = {k: v.detach().cpu().numpy() for k, v in self.module.state_dict().items()}
        save_archive(
            path,
            Archive(arrays=arrays, descriptor=self.descriptor.to_dict(), provenance=self.provenance),
        )

    @classmethod
    def load(cls, path) -> "ModelBundle":
        arc = load_archive(path)
        desc = ArchDescriptor.from_dict(arc.descriptor)
        module = build_network(desc)
        state = {k: torch.from_numpy(v) for k, v in arc.arrays.items()}
        module.load_state_dict(state, strict=True)
        return cls(descriptor=desc, module=module, provenance=arc.provenance)

    def weights_digest(self) -> str:
        h = hashlib.sha256()
        for name, tensor in sorted(self.module.state_dict().items()):
            h.update(name.encode())
            h.update(tensor.detach().cpu().numpy().tobytes())
        return h.hexdigest()

    def freeze(self) -> "ModelBundle":
        self.module.eval()
        for p in self.module.parameters():
            p.requires_grad_(False)
        return self


def new_bundle(desc: ArchDescriptor, seed: int, provenance: dict | None = None) -> ModelBundle:
    torch.manual_seed(seed)
    module = build_network(desc)
    return ModelBundle(descriptor=desc, module=module, provenance=dict(provenance or {}))


def _expect_kind(bundle: ModelBundle, kind: str):
    if bundle.kind != kind:
        raise ParameterError(f"expected a {kind} bundle, got {bundle.kind}")


# ---------------------------------------------------------------------------
# image-level forward contracts (no_grad, for evaluation and tests)


def generate(G: ModelBundle, y_r: Image, x_r: Image) -> Tuple[Image, np.ndarray]:
    """Returns (x_g, n_g); x_g = y_r + n_g, unclamped (clamp at export only)."""
    _expect_kind(G, "generator")
    with torch.no_grad():
        x_g, n_g = run_generator(G.module, to_tensor(y_r), to_tensor(x_r))
    residual = np.ascontiguousarray(n_g.squeeze(0).permute(1, 2, 0).numpy())
    return to_image(x_g), residual


def discriminate(D: ModelBundle, x: Image) -> np.ndarray:
    """Patch score map (h', w'), raw logits."""
    _expect_kind(D, "discriminator")
    with torch.no_grad():
        scores = D.module(to_tensor(x))
    return scores.squeeze(0).squeeze(0).numpy()


def estimate(C: ModelBundle, x: Image) -> Tuple[float, float]:
    """Two-class logits (z0, z1); softmax2 turns them into probabilities."""
    _expect_kind(C, "estimator")
    with torch.no_grad():
        z = C.module(to_tensor(x))
    return float(z[0, 0]), float(z[0, 1])


def softmax2(z0: float, z1: float) -> Tuple[float, float]:
    m = max(z0, z1)
    e0, e1 = np.exp(z0 - m), np.exp(z1 - m)
    s = e0 + e1
    return float(e0 / s), float(e1 / s)


def bcm_forward(B: ModelBundle, x: Image) -> Image:
    _expect_kind(B, "bcm")
    with torch.no_grad():
        out = run_bcm(B.module, to_tensor(x))
    return to_image(out, clamp=True)


def denoise(M: ModelBundle, x: Image) -> Image:
    _expect_kind(M, "denoiser")
    with torch.no_grad():
        out = run_denoiser(M.module, to_tensor(x))
    return to_image(out, clamp=True)
