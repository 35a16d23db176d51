"""x2 super-resolution GAN lifting diffusion outputs to the target resolution.

Trained on real pairs: high-resolution crops and their bicubic downsamples.
At inference the low-resolution side comes from the diffusion sampler after
histogram matching.
"""

import time
from collections import namedtuple
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoints import (ModelCheckpoint, check_architecture, module_from_arrays,
                          module_to_arrays, optimizer_from_arrays, optimizer_to_arrays,
                          save_checkpoint)
from .dataset import DatasetManifest, augment, batch_plan, load_batch, stage_plan
from .diffusion import arch_echo
from .errors import NumericsError, UsgenError
from .seeding import derive_seed

SR_TRACE_HEADER = "epoch,g_loss,d_loss,content_loss,wall_time_s"

SRLosses = namedtuple("SRLosses", ["g_loss", "d_loss", "content"])


class SuperResError(UsgenError):
    pass


@dataclass(frozen=True)
class SRConfig:
    channels: int = 1
    width: int = 64
    blocks: int = 8


def sr_config(preset: str, channels: int = 1) -> SRConfig:
    if preset == "tiny":
        return SRConfig(channels=channels, width=32, blocks=2)
    if preset == "default":
        return SRConfig(channels=channels)
    raise SuperResError(f"unknown SR preset {preset!r}")


class _ResBlock(nn.Module):
    def __init__(self, width):
        super().__init__()
        self.conv1 = nn.Conv2d(width, width, 3, padding=1)
        self.act = nn.PReLU()
        self.conv2 = nn.Conv2d(width, width, 3, padding=1)

    def forward(self, x):
        return x + self.conv2(self.act(self.conv1(x)))


class SRGenerator(nn.Module):
    """Input conv, residual trunk, one sub-pixel x2 stage, tanh output."""

    def __init__(self, cfg: SRConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.width
        self.head = nn.Conv2d(cfg.channels, w, 9, padding=4)
        self.head_act = nn.PReLU()
        self.body = nn.Sequential(*[_ResBlock(w) for _ in range(cfg.blocks)])
        self.body_out = nn.Conv2d(w, w, 3, padding=1)
        self.up_conv = nn.Conv2d(w, 4 * w, 3, padding=1)
        self.shuffle = nn.PixelShuffle(2)
        self.up_act = nn.PReLU()
        self.tail = nn.Conv2d(w, cfg.channels, 9, padding=4)

    def forward(self, x):
        if x.shape[-1] != x.shape[-2]:
            raise SuperResError(f"expected square input, got {tuple(x.shape[-2:])}")
        feat = self.head_act(self.head(x))
        h = self.body_out(self.body(feat)) + feat
        h = self.up_act(self.shuffle(self.up_conv(h)))
        return torch.tanh(self.tail(h))


class SRDiscriminator(nn.Module):
    """Strided convolutional classifier; one realness logit per image."""

    def __init__(self, cfg: SRConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.width
        self.net = nn.Sequential(
            nn.Conv2d(cfg.channels, w, 3, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(w, w, 3, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(w, 2 * w, 3, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(2 * w, 2 * w, 3, stride=2, padding=1), nn.LeakyReLU(0.2),
        )
        self.head = nn.Linear(2 * w, 1)

    def forward(self, x):
        h = self.net(x)
        h = F.adaptive_avg_pool2d(h, 1).flatten(1)
        return self.head(h)


def sr_generate(g: SRGenerator, low: torch.Tensor) -> torch.Tensor:
    """Deterministic inference: doubled spatial dims from frozen weights."""
    was_training = g.training
    g.eval()
    try:
        with torch.no_grad():
            out = g(torch.as_tensor(low))
    finally:
        g.train(was_training)
    return out


def sr_losses(g, d, low: torch.Tensor, high_real: torch.Tensor, adv_weight: float = 1e-3) -> SRLosses:
    """Content (pixel MSE) + weighted adversarial generator loss, and the
    discriminator's mean binary cross-entropy on real vs generated."""
    if high_real.shape[-1] != 2 * low.shape[-1] or high_real.shape[-2] != 2 * low.shape[-2]:
        raise SuperResError(
            f"high dims {tuple(high_real.shape[-2:])} must be 2x low dims {tuple(low.shape[-2:])}")
    sr = g(low)
    content = F.mse_loss(sr, high_real)
    real_logits = d(high_real)
    fake_logits = d(sr.detach())
    d_loss = 0.5 * (
        F.binary_cross_entropy_with_logits(real_logits, torch.ones_like(real_logits))
        + F.binary_cross_entropy_with_logits(fake_logits, torch.zeros_like(fake_logits)))
    adv_logits = d(sr)
    g_adv = F.binary_cross_entropy_with_logits(adv_logits, torch.ones_like(adv_logits))
    g_loss = content + adv_weight * g_adv
    if not (torch.isfinite(g_loss) and torch.isfinite(d_loss)):
        raise NumericsError("non-finite SR loss")
    return SRLosses(g_loss, d_loss, content)


def downsample2(high: torch.Tensor) -> torch.Tensor:
    """Antialiased bicubic x0.5, clamped back to [-1, 1]."""
    low = F.interpolate(high, scale_factor=0.5, mode="bicubic",
                        align_corners=False, antialias=True)
    return low.clamp_(-1.0, 1.0)


def make_pairs(manifest: DatasetManifest, high_size: int, seed: int,
               batch_size: int = 16, channels: int = 1):
    """One seeded epoch of (low, high) training pairs."""
    if high_size % 2 != 0:
        raise SuperResError(f"high_size must be even, got {high_size}")
    for indices in batch_plan(manifest.count, batch_size, seed):
        high = torch.from_numpy(load_batch(manifest, indices, high_size, channels))
        yield downsample2(high), high


def _snapshot(g, d, opt_g, opt_d, epoch, seed) -> ModelCheckpoint:
    arrays = module_to_arrays(g, "generator")
    arrays.update(module_to_arrays(d, "discriminator"))
    og_arrays, og_meta = optimizer_to_arrays(opt_g, "opt_g")
    od_arrays, od_meta = optimizer_to_arrays(opt_d, "opt_d")
    arrays.update(og_arrays)
    arrays.update(od_arrays)
    return ModelCheckpoint(
        pipeline="srgan",
        config={"sr": arch_echo(g.cfg)},
        arrays=arrays,
        epoch=epoch,
        rng_state=derive_seed(seed, "rng", epoch).to_bytes(8, "little"),
        meta={"opt_g": og_meta, "opt_d": od_meta},
    )


def train_srgan(g: SRGenerator, d: SRDiscriminator, manifest: DatasetManifest, cfg, *,
                resume_from: ModelCheckpoint = None, checkpoint_dir=None, on_epoch=None):
    """Alternating discriminator/generator Adam steps on real pairs.

    Highs are loaded at dsr.high_size and augmented; lows are their bicubic
    downsamples, so the pair stays geometrically consistent.
    """
    if manifest.count == 0:
        raise SuperResError("cannot train on an empty manifest")
    sub = cfg.dsr
    opt_g = torch.optim.Adam(g.parameters(), lr=cfg.lr_generator, betas=tuple(cfg.adam_betas))
    opt_d = torch.optim.Adam(d.parameters(), lr=cfg.lr_discriminator, betas=tuple(cfg.adam_betas))
    start_epoch = 0
    if resume_from is not None:
        check_architecture(resume_from.config.get("sr", {}), arch_echo(g.cfg))
        module_from_arrays(g, resume_from.arrays, "generator")
        module_from_arrays(d, resume_from.arrays, "discriminator")
        optimizer_from_arrays(opt_g, resume_from.arrays, "opt_g", resume_from.meta["opt_g"])
        optimizer_from_arrays(opt_d, resume_from.arrays, "opt_d", resume_from.meta["opt_d"])
        start_epoch = resume_from.epoch
    trace = []
    last_ckpt = None
    for epoch in range(start_epoch, sub.sr_epochs):
        t0 = time.perf_counter()
        g_losses, d_losses, contents = [], [], []
        for j, indices in enumerate(stage_plan(manifest.count, cfg.batch_size, cfg.seed,
                                               epoch, sub.sr_unit)):
            batch = load_batch(manifest, indices, sub.high_size, cfg.channels)
            batch = augment(batch, cfg.augment, derive_seed(cfg.seed, "sr-augment", epoch, j))
            high = torch.from_numpy(batch)
            low = downsample2(high)

            with torch.no_grad():
                sr = g(low)
            real_logits = d(high)
            fake_logits = d(sr)
            d_loss = 0.5 * (
                F.binary_cross_entropy_with_logits(real_logits, torch.ones_like(real_logits))
                + F.binary_cross_entropy_with_logits(fake_logits, torch.zeros_like(fake_logits)))
            opt_d.zero_grad()
            d_loss.backward()
            opt_d.step()

            sr = g(low)
            content = F.mse_loss(sr, high)
            adv_logits = d(sr)
            g_adv = F.binary_cross_entropy_with_logits(adv_logits, torch.ones_like(adv_logits))
            g_loss = content + sub.adv_weight * g_adv
            if not (torch.isfinite(g_loss) and torch.isfinite(d_loss)):
                raise NumericsError(
                    f"non-finite SR loss at epoch {epoch + 1}; last good checkpoint: {last_ckpt}")
            opt_g.zero_grad()
            g_loss.backward()
            opt_g.step()

            g_losses.append(float(g_loss.detach()))
            d_losses.append(float(d_loss.detach()))
            contents.append(float(content.detach()))
        done = epoch + 1
        row = {"epoch": done, "g_loss": float(np.mean(g_losses)),
               "d_loss": float(np.mean(d_losses)), "content_loss": float(np.mean(contents)),
               "wall_time_s": time.perf_counter() - t0}
        trace.append(row)
        if checkpoint_dir is not None and (done % cfg.checkpoint_every == 0 or done == sub.sr_epochs):
            last_ckpt = save_checkpoint(_snapshot(g, d, opt_g, opt_d, done, cfg.seed),
                                        f"{checkpoint_dir}/srgan_{done:06d}.ckpt")
        if on_epoch is not None:
            on_epoch(done, g, row)
    return _snapshot(g, d, opt_g, opt_d, sub.sr_epochs, cfg.seed), trace
