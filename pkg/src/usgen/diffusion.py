"""Denoising diffusion probabilistic model at a configurable base resolution.

Covers the noise schedule, the closed-form forward noising, the
epsilon-prediction training objective, ancestral sampling, and a finetuning
loop over a dataset manifest.
"""

import dataclasses
import json
import math
import time
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoints import (ModelCheckpoint, check_architecture, module_from_arrays,
                          module_to_arrays, optimizer_from_arrays, optimizer_to_arrays,
                          save_checkpoint)
from .dataset import DatasetManifest, augment, load_batch, stage_plan
from .errors import NumericsError, UsgenError
from .seeding import as_generator, derive_seed

DIFFUSION_TRACE_HEADER = "epoch,mean_loss,wall_time_s"


class DiffusionError(UsgenError):
    pass


@dataclass(frozen=True)
class DiffusionSchedule:
    """Per-timestep noise coefficients beta, alpha = 1 - beta, and the
    cumulative product alpha_bar."""

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        if beta.ndim != 1 or beta.size < 1:
            raise DiffusionError("beta must be a nonempty 1-D array")
        if np.any(beta <= 0) or np.any(beta >= 1):
            raise DiffusionError("beta values must lie in (0, 1)")
        if np.any(np.diff(beta) < 0):
            raise DiffusionError("beta must be monotone nondecreasing")
        if np.any(np.diff(self.alpha_bar) >= 0):
            raise DiffusionError("alpha_bar must be strictly decreasing")

    @property
    def timesteps(self) -> int:
        return len(self.beta)


def build_schedule(timesteps: int, beta_start: float, beta_end: float) -> DiffusionSchedule:
    """Linear beta schedule with derived alpha and alpha_bar."""
    if timesteps < 1:
        raise DiffusionError(f"timesteps must be >= 1, got {timesteps}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise DiffusionError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    beta = np.linspace(beta_start, beta_end, timesteps, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return DiffusionSchedule(beta, alpha, alpha_bar)


def schedule_from_beta(beta: np.ndarray) -> DiffusionSchedule:
    beta = np.asarray(beta, dtype=np.float64)
    alpha = 1.0 - beta
    return DiffusionSchedule(beta, alpha, np.cumprod(alpha))


# ---------------------------------------------------------------------------
# Denoiser network


@dataclass(frozen=True)
class UNetConfig:
    image_size: int = 128
    channels: int = 1
    base_width: int = 64
    width_mults: tuple = (1, 1, 2, 2, 4)
    blocks_per_level: int = 2
    groups: int = 8
    attention_at: tuple = (16,)   # resolutions that get self-attention

    def widths(self) -> list:
        return [self.base_width * m for m in self.width_mults]

    @property
    def time_dim(self) -> int:
        return self.base_width * 4


def unet_config(preset: str, image_size: int, channels: int = 1) -> UNetConfig:
    if preset == "tiny":
        return UNetConfig(image_size=image_size, channels=channels, base_width=16,
                          width_mults=(1, 2), blocks_per_level=1, groups=8)
    if preset == "default":
        return UNetConfig(image_size=image_size, channels=channels)
    raise DiffusionError(f"unknown unet preset {preset!r}")


def arch_echo(cfg) -> dict:
    """Dataclass config as a JSON-normalized dict for checkpoint headers."""
    return json.loads(json.dumps(dataclasses.asdict(cfg)))


class SinusoidalEmbedding(nn.Module):
    def __init__(self, dim):
        super().__init__()
        self.dim = dim

    def forward(self, t):
        half = self.dim // 2
        freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
        args = t.float()[:, None] * freqs[None, :]
        return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class ResidualBlock(nn.Module):
    def __init__(self, in_ch, out_ch, time_dim, groups):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_ch)
        self.norm2 = nn.GroupNorm(groups, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class SelfAttention2d(nn.Module):
    def __init__(self, ch, groups):
        super().__init__()
        self.norm = nn.GroupNorm(groups, ch)
        self.qkv = nn.Conv2d(ch, 3 * ch, 1)
        self.proj = nn.Conv2d(ch, ch, 1)

    def forward(self, x):
        b, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(b, 3, c, h * w).unbind(1)
        attn = torch.softmax(q.transpose(1, 2) @ k / math.sqrt(c), dim=-1)
        out = (v @ attn.transpose(1, 2)).reshape(b, c, h, w)
        return x + self.proj(out)


class NoisePredictor(nn.Module):
    """U-Net epsilon-predictor: residual blocks, group norm, sinusoidal
    timestep embedding, self-attention at the configured resolutions."""

    def __init__(self, cfg: UNetConfig):
        super().__init__()
        self.cfg = cfg
        widths = cfg.widths()
        self.time_mlp = nn.Sequential(
            SinusoidalEmbedding(cfg.base_width),
            nn.Linear(cfg.base_width, cfg.time_dim), nn.SiLU(),
            nn.Linear(cfg.time_dim, cfg.time_dim),
        )
        self.stem = nn.Conv2d(cfg.channels, widths[0], 3, padding=1)
        self.down_levels = nn.ModuleList()
        res = cfg.image_size
        for i, w in enumerate(widths):
            level = nn.ModuleDict()
            if i > 0:
                level["down"] = nn.Conv2d(widths[i - 1], w, 3, stride=2, padding=1)
                res //= 2
            level["blocks"] = nn.ModuleList(
                ResidualBlock(w, w, cfg.time_dim, cfg.groups) for _ in range(cfg.blocks_per_level))
            if res in cfg.attention_at:
                level["attn"] = SelfAttention2d(w, cfg.groups)
            self.down_levels.append(level)
        w_mid = widths[-1]
        self.mid_block1 = ResidualBlock(w_mid, w_mid, cfg.time_dim, cfg.groups)
        self.mid_attn = SelfAttention2d(w_mid, cfg.groups)
        self.mid_block2 = ResidualBlock(w_mid, w_mid, cfg.time_dim, cfg.groups)
        self.up_levels = nn.ModuleList()
        for i in reversed(range(len(widths))):
            w = widths[i]
            level = nn.ModuleDict()
            level["blocks"] = nn.ModuleList(
                [ResidualBlock(2 * w, w, cfg.time_dim, cfg.groups)] +
                [ResidualBlock(w, w, cfg.time_dim, cfg.groups) for _ in range(cfg.blocks_per_level - 1)])
            if res in cfg.attention_at:
                level["attn"] = SelfAttention2d(w, cfg.groups)
            if i > 0:
                level["up"] = nn.Conv2d(w, widths[i - 1], 3, padding=1)
                res *= 2
            self.up_levels.append(level)
        self.out_norm = nn.GroupNorm(cfg.groups, widths[0])
        self.out_conv = nn.Conv2d(widths[0], cfg.channels, 3, padding=1)

    def forward(self, x, t):
        if x.shape[-1] != self.cfg.image_size or x.shape[-2] != self.cfg.image_size:
            raise DiffusionError(
                f"expected {self.cfg.image_size}x{self.cfg.image_size} input, got {tuple(x.shape[-2:])}")
        if not torch.is_tensor(t):
            t = torch.as_tensor(t, dtype=torch.long)
        if t.ndim == 0:
            t = t.expand(x.shape[0])
        temb = self.time_mlp(t)
        h = self.stem(x)
        skips = []
        for level in self.down_levels:
            if "down" in level:
                h = level["down"](h)
            for block in level["blocks"]:
                h = block(h, temb)
            if "attn" in level:
                h = level["attn"](h)
            skips.append(h)
        h = self.mid_block1(h, temb)
        h = self.mid_attn(h)
        h = self.mid_block2(h, temb)
        for level in self.up_levels:
            h = torch.cat([h, skips.pop()], dim=1)
            for block in level["blocks"]:
                h = block(h, temb)
            if "attn" in level:
                h = level["attn"](h)
            if "up" in level:
                h = F.interpolate(h, scale_factor=2, mode="nearest")
                h = level["up"](h)
        return self.out_conv(F.silu(self.out_norm(h)))


# ---------------------------------------------------------------------------
# Closed-form operations


def _gather(values: np.ndarray, t, like: torch.Tensor) -> torch.Tensor:
    """Pick per-timestep coefficients and shape them for broadcasting."""
    coeffs = torch.as_tensor(values, dtype=like.dtype)
    if not torch.is_tensor(t):
        t = torch.as_tensor(t, dtype=torch.long)
    if t.ndim == 0:
        t = t.expand(like.shape[0])
    if torch.any(t < 0) or torch.any(t >= len(values)):
        raise DiffusionError(f"timestep out of range [0, {len(values)})")
    return coeffs[t].reshape(-1, *([1] * (like.ndim - 1)))


def q_sample(x0: torch.Tensor, t, noise: torch.Tensor, s: DiffusionSchedule) -> torch.Tensor:
    """Forward noising: sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * noise."""
    if x0.shape != noise.shape:
        raise DiffusionError(f"x0 shape {tuple(x0.shape)} != noise shape {tuple(noise.shape)}")
    ab = _gather(s.alpha_bar, t, x0)
    return torch.sqrt(ab) * x0 + torch.sqrt(1.0 - ab) * noise


def denoise_loss(model, x0: torch.Tensor, s: DiffusionSchedule, seed) -> torch.Tensor:
    """MSE between predicted and true noise at per-image uniform timesteps."""
    if x0.shape[0] == 0:
        raise DiffusionError("denoise_loss requires a nonempty batch")
    g = as_generator(seed)
    t = torch.randint(0, s.timesteps, (x0.shape[0],), generator=g)
    noise = torch.empty_like(x0).normal_(generator=g)
    x_t = q_sample(x0, t, noise, s)
    pred = model(x_t, t)
    if not torch.isfinite(pred).all():
        raise NumericsError(f"non-finite model output at timesteps {t.tolist()}")
    return F.mse_loss(pred, noise)


def p_sample_step(model, x_t: torch.Tensor, t: int, s: DiffusionSchedule, seed,
                  noise=None) -> torch.Tensor:
    """One ancestral sampling step from x_t to x_{t-1}; no noise at t = 0."""
    if not 0 <= t < s.timesteps:
        raise DiffusionError(f"timestep {t} out of range [0, {s.timesteps})")
    beta = float(s.beta[t])
    alpha = float(s.alpha[t])
    ab = float(s.alpha_bar[t])
    eps = model(x_t, torch.full((x_t.shape[0],), t, dtype=torch.long))
    mean = (x_t - beta / math.sqrt(1.0 - ab) * eps) / math.sqrt(alpha)
    if t > 0:
        if noise is None:
            noise = torch.empty_like(x_t).normal_(generator=as_generator(seed))
        x_prev = mean + math.sqrt(beta) * noise
    else:
        x_prev = mean
    if not torch.isfinite(x_prev).all():
        raise NumericsError(f"non-finite sample at step {t}")
    return x_prev


def sample(model, s: DiffusionSchedule, count: int, size: int, seed, channels: int = 1) -> torch.Tensor:
    """Run the full reverse chain from seeded noise; output clamped to [-1, 1]."""
    if count < 1:
        raise DiffusionError(f"count must be >= 1, got {count}")
    g = as_generator(seed)
    with torch.no_grad():
        x = torch.empty(count, channels, size, size).normal_(generator=g)
        for t in reversed(range(s.timesteps)):
            x = p_sample_step(model, x, t, s, g)
    return x.clamp_(-1.0, 1.0)


# ---------------------------------------------------------------------------
# Finetuning


def _snapshot(model, opt, schedule, epoch, seed) -> ModelCheckpoint:
    arrays = module_to_arrays(model, "model")
    opt_arrays, opt_meta = optimizer_to_arrays(opt, "opt")
    arrays.update(opt_arrays)
    arrays["schedule/beta"] = schedule.beta.copy()
    return ModelCheckpoint(
        pipeline="diffusion",
        config={"unet": arch_echo(model.cfg)},
        arrays=arrays,
        epoch=epoch,
        rng_state=derive_seed(seed, "rng", epoch).to_bytes(8, "little"),
        meta={"opt": opt_meta},
    )


def finetune(model: NoisePredictor, manifest: DatasetManifest, schedule: DiffusionSchedule,
             cfg, *, resume_from: ModelCheckpoint = None, init_from: ModelCheckpoint = None,
             checkpoint_dir=None, on_epoch=None):
    """Adam training of the denoiser on augmented batches.

    `resume_from` restores weights, optimizer state, and the epoch counter for
    a bit-exact continuation; `init_from` loads weights only (transfer start).
    Returns the final checkpoint and the per-epoch loss trace.
    """
    if manifest.count == 0:
        raise DiffusionError("cannot finetune on an empty manifest")
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr_generator, betas=tuple(cfg.adam_betas))
    start_epoch = 0
    if init_from is not None:
        check_architecture(init_from.config.get("unet", {}), arch_echo(model.cfg))
        module_from_arrays(model, init_from.arrays, "model")
    if resume_from is not None:
        check_architecture(resume_from.config.get("unet", {}), arch_echo(model.cfg))
        module_from_arrays(model, resume_from.arrays, "model")
        optimizer_from_arrays(opt, resume_from.arrays, "opt", resume_from.meta["opt"])
        start_epoch = resume_from.epoch
    size = model.cfg.image_size
    trace = []
    last_ckpt = None
    for epoch in range(start_epoch, cfg.epochs):
        t0 = time.perf_counter()
        losses = []
        for j, indices in enumerate(stage_plan(manifest.count, cfg.batch_size, cfg.seed,
                                               epoch, cfg.epoch_unit)):
            batch = load_batch(manifest, indices, size, cfg.channels)
            batch = augment(batch, cfg.augment, derive_seed(cfg.seed, "augment", epoch, j))
            loss = denoise_loss(model, torch.from_numpy(batch), schedule,
                                derive_seed(cfg.seed, "loss", epoch, j))
            if not torch.isfinite(loss):
                raise NumericsError(
                    f"non-finite diffusion loss at epoch {epoch + 1}; "
                    f"last good checkpoint: {last_ckpt}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        done = epoch + 1
        row = {"epoch": done, "mean_loss": float(np.mean(losses)),
               "wall_time_s": time.perf_counter() - t0}
        trace.append(row)
        if checkpoint_dir is not None and (done % cfg.checkpoint_every == 0 or done == cfg.epochs):
            last_ckpt = save_checkpoint(_snapshot(model, opt, schedule, done, cfg.seed),
                                        f"{checkpoint_dir}/diffusion_{done:06d}.ckpt")
        if on_epoch is not None:
            on_epoch(done, model, row)
    return _snapshot(model, opt, schedule, cfg.epochs, cfg.seed), trace
