"""Transformer GAN for limited data: a style-modulated generator built from
window/shifted-window attention blocks, a strided convolutional
discriminator, differentiable augmentation, and adaptive pseudo augmentation.
"""

import math
import time
from collections import namedtuple
from dataclasses import dataclass, replace

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoints import (ModelCheckpoint, check_architecture, module_from_arrays,
                          module_to_arrays, optimizer_from_arrays, optimizer_to_arrays,
                          save_checkpoint)
from .dataset import DatasetManifest, augment, load_batch, stage_plan
from .diffusion import arch_echo
from .errors import NumericsError, UsgenError
from .seeding import as_generator, derive_seed, torch_generator

TBGAN_TRACE_HEADER = "epoch,g_loss,d_loss,r1,apa_p,lambda_r,wall_time_s"

COLOR_TRANSFORMS = ("brightness", "saturation", "contrast")
ALL_TRANSFORMS = COLOR_TRANSFORMS + ("translation", "cutout")


class TBGanError(UsgenError):
    pass


# ---------------------------------------------------------------------------
# Window attention


def window_partition(x: torch.Tensor, window: int) -> torch.Tensor:
    """(B, H, W, C) -> (B * num_windows, window*window, C)."""
    b, h, w, c = x.shape
    x = x.view(b, h // window, window, w // window, window, c)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, window * window, c)


def window_reverse(windows: torch.Tensor, window: int, h: int, w: int) -> torch.Tensor:
    b = windows.shape[0] // ((h // window) * (w // window))
    x = windows.view(b, h // window, w // window, window, window, -1)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(b, h, w, -1)


class WindowAttention(nn.Module):
    """Multi-head self-attention weights applied within token windows."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads != 0:
            raise TBGanError(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def attend(self, tokens: torch.Tensor):
        bn, n, c = tokens.shape
        head_dim = c // self.heads
        qkv = self.qkv(tokens).reshape(bn, n, 3, self.heads, head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv.unbind(0)
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(head_dim), dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(bn, n, c)
        return self.proj(out), attn


def window_attention(features: torch.Tensor, window: int, shift: int,
                     weights: WindowAttention, return_attn: bool = False):
    """Self-attention within each (optionally cyclically shifted) window.

    `features` is (batch, height, width, dim); the output has the same shape.
    """
    b, h, w, c = features.shape
    if h % window != 0 or w % window != 0:
        raise TBGanError(f"spatial dims {h}x{w} not divisible by window {window}")
    if not 0 <= shift < window:
        raise TBGanError(f"shift must satisfy 0 <= shift < window, got {shift}")
    x = features
    if shift > 0:
        x = torch.roll(x, shifts=(-shift, -shift), dims=(1, 2))
    out, attn = weights.attend(window_partition(x, window))
    out = window_reverse(out, window, h, w)
    if shift > 0:
        out = torch.roll(out, shifts=(shift, shift), dims=(1, 2))
    if return_attn:
        return out, attn
    return out


class DoubleWindowAttention(nn.Module):
    """Channel split with half the heads on regular windows and half on
    half-window-shifted windows."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % 2 != 0:
            raise TBGanError(f"dim must be even for the double split, got {dim}")
        self.half = dim // 2
        branch_heads = max(1, heads // 2)
        self.attn_plain = WindowAttention(self.half, branch_heads)
        self.attn_shifted = WindowAttention(self.half, branch_heads)

    def forward(self, x, window, shift):
        a, b = x.split(self.half, dim=-1)
        ya = window_attention(a, window, 0, self.attn_plain)
        yb = window_attention(b, window, shift, self.attn_shifted)
        return torch.cat([ya, yb], dim=-1)


# ---------------------------------------------------------------------------
# Generator


@dataclass(frozen=True)
class GeneratorConfig:
    resolution: int = 256
    channels: int = 1
    latent_dim: int = 128
    base_dim: int = 256
    window: int = 8
    heads: int = 4
    blocks_per_stage: int = 2
    mapping_layers: int = 4
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.resolution < 4 or (self.resolution & (self.resolution - 1)) != 0:
            raise TBGanError(f"resolution must be a power of two >= 4, got {self.resolution}")

    def stage_dims(self) -> list:
        """Stage width per resolution: constant up to 32, halving above."""
        dims = []
        r = 4
        while r <= self.resolution:
            shrink = max(1, r // 32)
            dims.append(max(16, self.base_dim // shrink))
            r *= 2
        return dims


def generator_config(preset: str, resolution: int, channels: int = 1) -> GeneratorConfig:
    if preset == "tiny":
        return GeneratorConfig(resolution=resolution, channels=channels, latent_dim=64,
                               base_dim=64, heads=4, blocks_per_stage=1,
                               mapping_layers=2, mlp_ratio=2)
    if preset == "default":
        return GeneratorConfig(resolution=resolution, channels=channels)
    raise TBGanError(f"unknown generator preset {preset!r}")


class PixelNorm(nn.Module):
    def forward(self, x):
        return x / torch.sqrt(torch.mean(x * x, dim=-1, keepdim=True) + 1e-8)


class StyleLayerNorm(nn.Module):
    """Layer norm whose scale and shift are projected from the style vector."""

    def __init__(self, dim, style_dim):
        super().__init__()
        self.norm = nn.LayerNorm(dim, elementwise_affine=False)
        # default weight init keeps the style pathway live from step one
        self.proj = nn.Linear(style_dim, 2 * dim)
        nn.init.zeros_(self.proj.bias)

    def forward(self, x, style):
        scale, shift = self.proj(style).chunk(2, dim=-1)
        h = self.norm(x)
        return h * (1.0 + scale[:, None, None, :]) + shift[:, None, None, :]


class TransformerBlock(nn.Module):
    def __init__(self, dim, heads, style_dim, mlp_ratio):
        super().__init__()
        self.norm1 = StyleLayerNorm(dim, style_dim)
        self.attn = DoubleWindowAttention(dim, heads)
        self.norm2 = StyleLayerNorm(dim, style_dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim))

    def forward(self, x, style, window, shift):
        x = x + self.attn(self.norm1(x, style), window, shift)
        x = x + self.mlp(self.norm2(x, style))
        return x


def _upsample_nhwc(x: torch.Tensor) -> torch.Tensor:
    y = F.interpolate(x.permute(0, 3, 1, 2), scale_factor=2, mode="bilinear",
                      align_corners=False)
    return y.permute(0, 2, 3, 1)


class _Stage(nn.Module):
    def __init__(self, resolution, dim, prev_dim, cfg: GeneratorConfig):
        super().__init__()
        self.resolution = resolution
        self.window = min(cfg.window, resolution)
        self.shift = self.window // 2 if self.window < resolution else 0
        self.proj = nn.Linear(prev_dim, dim) if prev_dim != dim else nn.Identity()
        self.pos = nn.Parameter(torch.zeros(1, resolution, resolution, dim))
        nn.init.trunc_normal_(self.pos, std=0.02)
        self.blocks = nn.ModuleList(
            TransformerBlock(dim, cfg.heads, cfg.latent_dim, cfg.mlp_ratio)
            for _ in range(cfg.blocks_per_stage))
        self.to_image = nn.Linear(dim, cfg.channels)

    def forward(self, x, style):
        x = self.proj(x) + self.pos
        for block in self.blocks:
            x = block(x, style, self.window, self.shift)
        image = self.to_image(x).permute(0, 3, 1, 2)
        return x, image


class StyleGenerator(nn.Module):
    """Latent -> style mapping, a learned 4x4 constant, per-resolution
    attention stages, and summed per-stage image projections."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        mapping = [PixelNorm()]
        for _ in range(cfg.mapping_layers):
            mapping += [nn.Linear(cfg.latent_dim, cfg.latent_dim), nn.LeakyReLU(0.2)]
        self.mapping = nn.Sequential(*mapping)
        dims = cfg.stage_dims()
        self.const = nn.Parameter(torch.randn(1, 4, 4, dims[0]))
        self.stages = nn.ModuleList()
        res, prev = 4, dims[0]
        for dim in dims:
            self.stages.append(_Stage(res, dim, prev, cfg))
            prev = dim
            res *= 2

    def forward(self, latent: torch.Tensor) -> torch.Tensor:
        if latent.ndim != 2 or latent.shape[1] != self.cfg.latent_dim:
            raise TBGanError(
                f"latent must be (n, {self.cfg.latent_dim}), got {tuple(latent.shape)}")
        style = self.mapping(latent)
        x = self.const.expand(latent.shape[0], -1, -1, -1)
        image = None
        for i, stage in enumerate(self.stages):
            if i > 0:
                x = _upsample_nhwc(x)
            x, contribution = stage(x, style)
            if image is None:
                image = contribution
            else:
                image = F.interpolate(image, scale_factor=2, mode="bilinear",
                                      align_corners=False) + contribution
        return torch.tanh(image)


def generate(g: StyleGenerator, latent=None, seed=0, count: int = 1) -> torch.Tensor:
    """Sample images; draws latents from `seed` when none are given."""
    if latent is None:
        latent = torch.empty(count, g.cfg.latent_dim).normal_(generator=torch_generator(seed))
    was_training = g.training
    g.eval()
    try:
        with torch.no_grad():
            out = g(torch.as_tensor(latent))
    finally:
        g.train(was_training)
    return out


@dataclass(frozen=True)
class DiscriminatorConfig:
    resolution: int = 256
    channels: int = 1
    base_width: int = 32
    max_width: int = 256


def discriminator_config(preset: str, resolution: int, channels: int = 1) -> DiscriminatorConfig:
    if preset == "tiny":
        return DiscriminatorConfig(resolution=resolution, channels=channels,
                                   base_width=16, max_width=64)
    if preset == "default":
        return DiscriminatorConfig(resolution=resolution, channels=channels)
    raise TBGanError(f"unknown discriminator preset {preset!r}")


class ConvDiscriminator(nn.Module):
    def __init__(self, cfg: DiscriminatorConfig):
        super().__init__()
        self.cfg = cfg
        layers = [nn.Conv2d(cfg.channels, cfg.base_width, 3, padding=1), nn.LeakyReLU(0.2)]
        width, res = cfg.base_width, cfg.resolution
        while res > 4:
            nxt = min(2 * width, cfg.max_width)
            layers += [nn.Conv2d(width, nxt, 3, stride=2, padding=1), nn.LeakyReLU(0.2)]
            width, res = nxt, res // 2
        self.net = nn.Sequential(*layers)
        self.head = nn.Linear(width * 4 * 4, 1)

    def forward(self, x):
        return self.head(self.net(x).flatten(1))


# ---------------------------------------------------------------------------
# Differentiable augmentation


@dataclass(frozen=True)
class DiffAugPolicy:
    transforms: tuple = ("color", "translation", "cutout")
    translation_ratio: float = 0.125
    cutout_ratio: float = 0.5

    def __post_init__(self):
        expanded = []
        for name in self.transforms:
            if name == "color":
                expanded.extend(COLOR_TRANSFORMS)
            elif name in ALL_TRANSFORMS:
                expanded.append(name)
            else:
                raise TBGanError(f"unknown diffaug transform {name!r}")
        object.__setattr__(self, "transforms", tuple(expanded))
        for name in ("translation_ratio", "cutout_ratio"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise TBGanError(f"{name} must be in [0,1], got {v}")

    @classmethod
    def identity(cls) -> "DiffAugPolicy":
        return cls(transforms=())


def draw_diffaug_params(policy: DiffAugPolicy, n: int, height: int, width: int, seed) -> dict:
    """Seed-determined per-image transform parameters, in application order."""
    g = as_generator(seed)
    params = {}
    if "brightness" in policy.transforms:
        params["brightness"] = torch.rand(n, generator=g) - 0.5
    if "saturation" in policy.transforms:
        params["saturation"] = torch.rand(n, generator=g) * 2.0
    if "contrast" in policy.transforms:
        params["contrast"] = torch.rand(n, generator=g) + 0.5
    if "translation" in policy.transforms:
        sy = int(height * policy.translation_ratio + 0.5)
        sx = int(width * policy.translation_ratio + 0.5)
        params["translation"] = torch.stack([
            torch.randint(-sy, sy + 1, (n,), generator=g),
            torch.randint(-sx, sx + 1, (n,), generator=g)], dim=1)
    if "cutout" in policy.transforms:
        ch = int(height * policy.cutout_ratio + 0.5)
        cw = int(width * policy.cutout_ratio + 0.5)
        params["cutout"] = torch.stack([
            torch.randint(0, height - ch + 1, (n,), generator=g),
            torch.randint(0, width - cw + 1, (n,), generator=g)], dim=1)
        params["cutout_size"] = (ch, cw)
    return params


def apply_diffaug(batch: torch.Tensor, policy: DiffAugPolicy, params: dict) -> torch.Tensor:
    """Apply the drawn transforms; every step is differentiable in `batch`."""
    x = batch
    if "brightness" in params:
        x = x + params["brightness"].to(x.dtype)[:, None, None, None]
    if "saturation" in params:
        # delta form keeps factor-1 draws exact identities
        mean_c = x.mean(dim=1, keepdim=True)
        x = x + (x - mean_c) * (params["saturation"].to(x.dtype)[:, None, None, None] - 1.0)
    if "contrast" in params:
        mean_all = x.mean(dim=(1, 2, 3), keepdim=True)
        x = x + (x - mean_all) * (params["contrast"].to(x.dtype)[:, None, None, None] - 1.0)
    if "translation" in params:
        shifts = params["translation"]
        if bool(torch.any(shifts != 0)):
            n, _, h, w = x.shape
            pad = int(shifts.abs().max())
            padded = F.pad(x, (pad, pad, pad, pad))
            rows = []
            for i in range(n):
                dy, dx = int(shifts[i, 0]), int(shifts[i, 1])
                rows.append(padded[i, :, pad - dy:pad - dy + h, pad - dx:pad - dx + w])
            x = torch.stack(rows)
    if "cutout" in params:
        ch, cw = params["cutout_size"]
        if ch > 0 and cw > 0:
            n, _, h, w = x.shape
            mask = torch.ones(n, 1, h, w, dtype=x.dtype)
            for i in range(n):
                oy, ox = int(params["cutout"][i, 0]), int(params["cutout"][i, 1])
                mask[i, :, oy:oy + ch, ox:ox + cw] = 0
            x = x * mask
    return x


def diffaug(batch: torch.Tensor, policy: DiffAugPolicy, seed) -> torch.Tensor:
    """Color -> translation -> cutout, seed-determined, differentiable."""
    if batch.shape[0] == 0:
        raise TBGanError("diffaug requires a nonempty batch")
    if not policy.transforms:
        return batch
    params = draw_diffaug_params(policy, batch.shape[0], batch.shape[2], batch.shape[3], seed)
    return apply_diffaug(batch, policy, params)


# ---------------------------------------------------------------------------
# Adaptive pseudo augmentation


@dataclass(frozen=True)
class APAState:
    p: float = 0.0
    lambda_r: float = 0.0
    target: float = 0.6
    step_size: float = 0.01
    ema_decay: float = 0.99

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise TBGanError(f"p must be in [0,1], got {self.p}")
        if not -1.0 <= self.lambda_r <= 1.0:
            raise TBGanError(f"lambda_r must be in [-1,1], got {self.lambda_r}")


def apa_update(state: APAState, disc_logits_real) -> APAState:
    """Track discriminator overconfidence and nudge the pseudo-real rate.

    lambda_r is an EMA of mean(sign(real logits)); p moves by step_size
    toward keeping lambda_r at the target, clamped to [0, 1].
    """
    logits = torch.as_tensor(disc_logits_real, dtype=torch.float64)
    if logits.numel() == 0:
        raise TBGanError("apa_update requires a nonempty logit batch")
    raw = float(torch.sign(logits).mean())
    lam = state.ema_decay * state.lambda_r + (1.0 - state.ema_decay) * raw
    direction = (lam > state.target) - (lam < state.target)
    p = min(1.0, max(0.0, state.p + state.step_size * direction))
    return replace(state, p=p, lambda_r=lam)


def apa_mix(real: torch.Tensor, fake: torch.Tensor, p: float, seed) -> torch.Tensor:
    """Replace each real image by a fake one with probability p."""
    if real.shape != fake.shape:
        raise TBGanError(f"shape mismatch: real {tuple(real.shape)} vs fake {tuple(fake.shape)}")
    if p <= 0.0:
        return real
    coins = torch.rand(real.shape[0], generator=as_generator(seed)) < p
    return torch.where(coins[:, None, None, None], fake, real)


# ---------------------------------------------------------------------------
# Losses and training


GANLosses = namedtuple("GANLosses", ["g_loss", "d_loss", "r1", "real_logits"])


def r1_penalty(d, real_in: torch.Tensor, gamma: float) -> torch.Tensor:
    """(gamma/2) * E[ ||grad_x d(x)||^2 ] at the real-side inputs."""
    x = real_in.detach().requires_grad_(True)
    out = d(x)
    if not out.requires_grad:  # discriminator constant in its input
        return torch.zeros(())
    grad = torch.autograd.grad(out.sum(), x, create_graph=True, allow_unused=True)[0]
    if grad is None:
        return torch.zeros(())
    return (gamma / 2.0) * grad.pow(2).sum(dim=tuple(range(1, grad.ndim))).mean()


def gan_losses(g, d, real: torch.Tensor, latents: torch.Tensor, policy: DiffAugPolicy,
               apa_state: APAState, r1_gamma: float, step_index: int, *,
               seed=0, r1_interval: int = 16) -> GANLosses:
    """Non-saturating logistic losses with DiffAug on both discriminator
    sides, APA mixing on the real side, and a lazy R1 penalty."""
    rng_root = derive_seed(seed, "gan-step", step_index)
    fake = g(latents)
    mixed = apa_mix(real, fake.detach(), apa_state.p, derive_seed(rng_root, "apa"))
    real_in = diffaug(mixed, policy, derive_seed(rng_root, "aug-real"))
    fake_in = diffaug(fake.detach(), policy, derive_seed(rng_root, "aug-fake"))
    real_logits = d(real_in)
    fake_logits = d(fake_in)
    d_loss = 0.5 * (F.softplus(-real_logits).mean() + F.softplus(fake_logits).mean())
    r1 = None
    if r1_gamma > 0 and step_index % r1_interval == 0:
        r1 = r1_penalty(d, real_in, r1_gamma)
        d_loss = d_loss + r1
    g_in = diffaug(fake, policy, derive_seed(rng_root, "aug-gen"))
    g_loss = F.softplus(-d(g_in)).mean()
    if not (torch.isfinite(g_loss) and torch.isfinite(d_loss)):
        raise NumericsError(f"non-finite GAN loss at step {step_index}")
    return GANLosses(g_loss, d_loss, r1, real_logits)


def _snapshot(g, d, opt_g, opt_d, apa_state, epoch, seed) -> ModelCheckpoint:
    arrays = module_to_arrays(g, "generator")
    arrays.update(module_to_arrays(d, "discriminator"))
    og_arrays, og_meta = optimizer_to_arrays(opt_g, "opt_g")
    od_arrays, od_meta = optimizer_to_arrays(opt_d, "opt_d")
    arrays.update(og_arrays)
    arrays.update(od_arrays)
    return ModelCheckpoint(
        pipeline="tbgan",
        config={"generator": arch_echo(g.cfg), "discriminator": arch_echo(d.cfg)},
        arrays=arrays,
        epoch=epoch,
        rng_state=derive_seed(seed, "rng", epoch).to_bytes(8, "little"),
        meta={"opt_g": og_meta, "opt_d": od_meta,
              "apa": {"p": apa_state.p, "lambda_r": apa_state.lambda_r}},
    )


def train_tbgan(g: StyleGenerator, d: ConvDiscriminator, manifest: DatasetManifest, cfg, *,
                init_from: ModelCheckpoint = None, resume_from: ModelCheckpoint = None,
                checkpoint_dir=None, on_epoch=None, stage_tag: str = "tbgan"):
    """Two time-scale Adam training (discriminator faster than generator)
    with DiffAug on both sides and APA state updated every step.

    `init_from` transfers weights from a pretraining stage (optimizer and APA
    state start fresh); `resume_from` restores everything for bit-exact
    continuation.
    """
    if manifest.count == 0:
        raise TBGanError("cannot train on an empty manifest")
    sub = cfg.tbgan
    opt_g = torch.optim.Adam(g.parameters(), lr=cfg.lr_generator, betas=tuple(cfg.adam_betas))
    opt_d = torch.optim.Adam(d.parameters(), lr=cfg.lr_discriminator, betas=tuple(cfg.adam_betas))
    policy = DiffAugPolicy(transforms=tuple(sub.diffaug_transforms),
                           translation_ratio=sub.translation_ratio,
                           cutout_ratio=sub.cutout_ratio)
    apa_state = APAState(target=sub.apa_target,
                         step_size=cfg.batch_size / sub.apa_speed_images,
                         ema_decay=sub.apa_ema_decay)
    start_epoch = 0
    arch = {"generator": arch_echo(g.cfg), "discriminator": arch_echo(d.cfg)}
    if init_from is not None:
        check_architecture(init_from.config, arch)
        module_from_arrays(g, init_from.arrays, "generator")
        module_from_arrays(d, init_from.arrays, "discriminator")
    if resume_from is not None:
        check_architecture(resume_from.config, arch)
        module_from_arrays(g, resume_from.arrays, "generator")
        module_from_arrays(d, resume_from.arrays, "discriminator")
        optimizer_from_arrays(opt_g, resume_from.arrays, "opt_g", resume_from.meta["opt_g"])
        optimizer_from_arrays(opt_d, resume_from.arrays, "opt_d", resume_from.meta["opt_d"])
        apa_state = replace(apa_state, **resume_from.meta["apa"])
        start_epoch = resume_from.epoch
    size = g.cfg.resolution
    n_batches = (manifest.count + cfg.batch_size - 1) // cfg.batch_size
    trace = []
    last_ckpt = None
    for epoch in range(start_epoch, cfg.epochs):
        t0 = time.perf_counter()
        g_losses, d_losses, r1_values = [], [], []
        for j, indices in enumerate(stage_plan(manifest.count, cfg.batch_size, cfg.seed,
                                               epoch, cfg.epoch_unit)):
            step = epoch if cfg.epoch_unit == "steps" else epoch * n_batches + j
            batch = load_batch(manifest, indices, size, cfg.channels)
            batch = augment(batch, cfg.augment, derive_seed(cfg.seed, "tb-augment", epoch, j))
            real = torch.from_numpy(batch)
            latents = torch.empty(real.shape[0], g.cfg.latent_dim).normal_(
                generator=torch_generator(derive_seed(cfg.seed, "latent", epoch, j)))
            rng_root = derive_seed(cfg.seed, "gan-step", step)

            # Discriminator step: fake side detached, APA mixing on the real side.
            with torch.no_grad():
                fake = g(latents)
            mixed = apa_mix(real, fake, apa_state.p, derive_seed(rng_root, "apa"))
            real_in = diffaug(mixed, policy, derive_seed(rng_root, "aug-real"))
            fake_in = diffaug(fake, policy, derive_seed(rng_root, "aug-fake"))
            real_logits = d(real_in)
            fake_logits = d(fake_in)
            d_loss = 0.5 * (F.softplus(-real_logits).mean() + F.softplus(fake_logits).mean())
            r1 = None
            if sub.r1_gamma > 0 and step % sub.r1_interval == 0:
                r1 = r1_penalty(d, real_in, sub.r1_gamma)
                d_loss = d_loss + r1
                r1_values.append(float(r1.detach()))
            opt_d.zero_grad()
            d_loss.backward()
            opt_d.step()
            apa_state = apa_update(apa_state, real_logits.detach())

            # Generator step: gradients flow through the augmentation.
            fake2 = g(latents)
            g_in = diffaug(fake2, policy, derive_seed(rng_root, "aug-gen"))
            g_loss = F.softplus(-d(g_in)).mean()
            if not (torch.isfinite(g_loss) and torch.isfinite(d_loss)):
                raise NumericsError(
                    f"non-finite GAN loss at epoch {epoch + 1} step {step}; "
                    f"last good checkpoint: {last_ckpt}")
            opt_g.zero_grad()
            g_loss.backward()
            opt_g.step()

            g_losses.append(float(g_loss.detach()))
            d_losses.append(float(d_loss.detach()))
        done = epoch + 1
        row = {"epoch": done, "g_loss": float(np.mean(g_losses)),
               "d_loss": float(np.mean(d_losses)),
               "r1": float(np.mean(r1_values)) if r1_values else 0.0,
               "apa_p": apa_state.p, "lambda_r": apa_state.lambda_r,
               "wall_time_s": time.perf_counter() - t0}
        trace.append(row)
        if checkpoint_dir is not None and (done % cfg.checkpoint_every == 0 or done == cfg.epochs):
            last_ckpt = save_checkpoint(_snapshot(g, d, opt_g, opt_d, apa_state, done, cfg.seed),
                                        f"{checkpoint_dir}/{stage_tag}_{done:06d}.ckpt")
        if on_epoch is not None:
            on_epoch(done, g, row)
    return _snapshot(g, d, opt_g, opt_d, apa_state, cfg.epochs, cfg.seed), trace
