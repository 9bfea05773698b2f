"""Desk-scale conditional latent diffusion.

An image autoencoder maps 32x32 stimuli to a 4x8x8 latent. A small UNet with
cross-attention predicts the noise added by the forward process, conditioned
on EEG codes through a projection ``tau`` of the code context. The loss is the
usual epsilon-MSE; fine-tuning adds a regional cross-entropy between
segmentations of the stimulus and of the model's reconstruction.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Protocol

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .archive import JsonlLog, load_checkpoint, load_module, module_tensors, save_checkpoint
from .common import NumericalAbort, generator
from .encoder import EEGEncoder, LatentEEGCode
from .layers import Attention, sinusoidal

logger = logging.getLogger(__name__)


# --------------------------------------------------------------------------- schedule

@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: torch.Tensor       # [T], float64; index t-1 holds step t
    alpha: torch.Tensor
    alpha_bar: torch.Tensor

    def ab(self, t: int | torch.Tensor) -> torch.Tensor:
        t = torch.as_tensor(t)
        if (t < 1).any() or (t > self.T).any():
            raise ValueError(f"t must lie in [1, {self.T}]")
        return self.alpha_bar[t.long() - 1]


def make_schedule(T: int = 100, beta_start: float = 1e-4, beta_end: float = 2e-2) -> NoiseSchedule:
    if T < 2:
        raise ValueError("T must be >= 2")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    beta = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
    alpha = 1.0 - beta
    return NoiseSchedule(T, beta, alpha, torch.cumprod(alpha, 0))


def _bcast(v: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    v = v.to(like.dtype)
    return v.reshape(-1, *([1] * (like.dim() - 1))) if v.dim() else v


def q_sample(schedule: NoiseSchedule, z0: torch.Tensor, t: int | torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    """z_t = sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps."""
    if eps.shape != z0.shape:
        raise ValueError("eps must match z0")
    ab = _bcast(schedule.ab(t), z0)
    return ab.sqrt() * z0 + (1 - ab).sqrt() * eps


# --------------------------------------------------------------------------- autoencoder

@dataclass
class AEConfig:
    image_size: int = 32
    latent_channels: int = 4
    width: int = 24


class AutoEncoder(nn.Module):
    """4x spatial downsampling image autoencoder (stand-in for a pretrained VAE)."""

    def __init__(self, cfg: AEConfig = AEConfig()):
        super().__init__()
        self.cfg = cfg
        w, c = cfg.width, cfg.latent_channels
        self.enc = nn.Sequential(
            nn.Conv2d(3, w, 3, padding=1), nn.SiLU(),
            nn.Conv2d(w, w, 4, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(w, 2 * w, 3, padding=1), nn.SiLU(),
            nn.Conv2d(2 * w, 2 * w, 4, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(2 * w, c, 3, padding=1),
        )
        self.dec = nn.Sequential(
            nn.Conv2d(c, 2 * w, 3, padding=1), nn.SiLU(),
            nn.Conv2d(2 * w, 2 * w, 3, padding=1), nn.SiLU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(2 * w, w, 3, padding=1), nn.SiLU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(w, w, 3, padding=1), nn.SiLU(),
            nn.Conv2d(w, 3, 3, padding=1),
        )
        self.register_buffer("scale", torch.ones(()))

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        s = self.cfg.image_size // 4
        return (self.cfg.latent_channels, s, s)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        return self.enc(x * 2 - 1) * self.scale

    def decode_raw(self, z: torch.Tensor) -> torch.Tensor:
        return (self.dec(z / self.scale) + 1) / 2

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return self.decode_raw(z).clamp(0, 1)


def psnr(x: torch.Tensor, y: torch.Tensor) -> float:
    mse = float(((x.detach() - y.detach()) ** 2).mean())
    return float("inf") if mse == 0 else 10 * math.log10(1.0 / mse)


def train_autoencoder(images: torch.Tensor, cfg: AEConfig = AEConfig(), *, steps: int = 1200, batch_size: int = 32,
                      lr: float = 4e-3, seed: int = 0, log: JsonlLog | None = None) -> AutoEncoder:
    """MSE-train the autoencoder, then fix the latent scale to unit std."""
    torch.manual_seed(seed)
    g = generator(seed)
    ae = AutoEncoder(cfg)
    opt = torch.optim.Adam(ae.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, steps)
    for step in range(1, steps + 1):
        idx = torch.randint(0, len(images), (batch_size,), generator=g)
        x = images[idx]
        loss = F.mse_loss(ae.decode_raw(ae.encode(x)), x)
        if not torch.isfinite(loss):
            raise NumericalAbort("autoencoder loss diverged", step=step)
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        if log is not None:
            log.write({"step": step, "ae_loss": loss.item()})
    with torch.no_grad():
        std = torch.cat([ae.encode(images[i:i + 128]) for i in range(0, len(images), 128)]).std()
        ae.scale.fill_(1.0 / float(std))
    ae.eval()
    return ae


# --------------------------------------------------------------------------- denoiser

@dataclass
class DenoiserConfig:
    latent_channels: int = 4
    width: int = 32
    context_dim: int = 128
    heads: int = 4
    time_dim: int = 96
    groups: int = 8


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, time_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(time_dim, cout)
        self.norm2 = nn.GroupNorm(groups, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class SpatialTransformer(nn.Module):
    """Self-attention over pixels, then cross-attention to the projected EEG context."""

    def __init__(self, dim: int, heads: int, groups: int):
        super().__init__()
        self.norm = nn.GroupNorm(groups, dim)
        self.ln1 = nn.LayerNorm(dim)
        self.self_attn = Attention(dim, heads)
        self.ln2 = nn.LayerNorm(dim)
        self.cross_attn = Attention(dim, heads, context_dim=dim)
        self.ln3 = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, 2 * dim), nn.GELU(), nn.Linear(2 * dim, dim))

    def forward(self, x, context, keep):
        b, c, hh, ww = x.shape
        h = self.norm(x).flatten(2).transpose(1, 2)
        h = h + self.self_attn(self.ln1(h))
        if context is not None:
            cross = self.cross_attn(self.ln2(h), context)
            h = h + (cross if keep is None else cross * keep[:, None, None])
        h = h + self.ff(self.ln3(h))
        return x + h.transpose(1, 2).reshape(b, c, hh, ww)


class Denoiser(nn.Module):
    """Two-level UNet with a cross-attention transformer at each level.

    The EEG context enters only through ``tau`` and the cross-attention
    key/value projections. Context rows carry no positional encoding.
    """

    def __init__(self, cfg: DenoiserConfig = DenoiserConfig()):
        super().__init__()
        self.cfg = cfg
        w, td, g = cfg.width, cfg.time_dim, cfg.groups
        self.time_mlp = nn.Sequential(nn.Linear(w, td), nn.SiLU(), nn.Linear(td, td))
        self.tau = nn.Linear(cfg.context_dim, w)
        self.tau2 = nn.Linear(w, 2 * w, bias=False)
        self.conv_in = nn.Conv2d(cfg.latent_channels, w, 3, padding=1)
        self.res1 = ResBlock(w, w, td, g)
        self.attn1 = SpatialTransformer(w, cfg.heads, g)
        self.down = nn.Conv2d(w, 2 * w, 3, stride=2, padding=1)
        self.res2 = ResBlock(2 * w, 2 * w, td, g)
        self.attn2 = SpatialTransformer(2 * w, cfg.heads, g)
        self.up = nn.Sequential(nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(2 * w, w, 3, padding=1))
        self.res3 = ResBlock(2 * w, w, td, g)
        self.attn3 = SpatialTransformer(w, cfg.heads, g)
        self.norm_out = nn.GroupNorm(g, w)
        self.conv_out = nn.Conv2d(w, cfg.latent_channels, 3, padding=1)

    def cross_attention_modules(self):
        return [self.attn1.cross_attn, self.attn2.cross_attn, self.attn3.cross_attn]

    def forward(self, z: torch.Tensor, t: torch.Tensor | int, context: torch.Tensor | None = None,
                keep: torch.Tensor | None = None) -> torch.Tensor:
        t = torch.as_tensor(t).reshape(-1).expand(z.shape[0])
        temb = self.time_mlp(sinusoidal(t, self.cfg.width).to(z.dtype))
        ctx1 = ctx2 = None
        if context is not None:
            ctx1 = self.tau(context)
            ctx2 = self.tau2(ctx1)
        if keep is not None:
            keep = keep.to(z.dtype)
        h1 = self.attn1(self.res1(self.conv_in(z), temb), ctx1, keep)
        h2 = self.attn2(self.res2(self.down(h1), temb), ctx2, keep)
        h = torch.cat([self.up(h2), h1], dim=1)
        h = self.attn3(self.res3(h, temb), ctx1, keep)
        return self.conv_out(F.silu(self.norm_out(h)))


EpsModel = Callable[..., torch.Tensor]


def denoise_predict(model: EpsModel, z_t: torch.Tensor, t: int | torch.Tensor,
                    code: LatentEEGCode | None) -> torch.Tensor:
    return model(z_t, t, None if code is None else code.context)


def ldm_loss(model: EpsModel, schedule: NoiseSchedule, z0: torch.Tensor, code: LatentEEGCode | None,
             rng: torch.Generator, keep: torch.Tensor | None = None) -> torch.Tensor:
    """Epsilon-prediction MSE at t ~ U{1..T}, eps ~ N(0, I), averaged over elements."""
    t = torch.randint(1, schedule.T + 1, (z0.shape[0],), generator=rng)
    eps = torch.randn(z0.shape, generator=rng, dtype=z0.dtype)
    z_t = q_sample(schedule, z0, t, eps)
    ctx = None if code is None else code.context
    eps_hat = model(z_t, t, ctx) if keep is None else model(z_t, t, ctx, keep)
    return ((eps - eps_hat) ** 2).mean()


# --------------------------------------------------------------------------- regional semantics

class Segmenter(Protocol):
    num_classes: int

    def probs(self, images: torch.Tensor) -> torch.Tensor: ...   # [B, M, H, W]

    def labels(self, images: torch.Tensor) -> torch.Tensor: ...  # [B, H, W]


class OracleSegmenter:
    """Foreground/background split of synthetic stimuli (anything not white).

    Hard one-hot probabilities: usable for evaluation only.
    """

    num_classes = 2

    def __init__(self, threshold: float = 0.1):
        self.threshold = threshold

    def labels(self, images: torch.Tensor) -> torch.Tensor:
        return ((1.0 - images).abs().amax(dim=1) > self.threshold).long()

    def probs(self, images: torch.Tensor) -> torch.Tensor:
        return F.one_hot(self.labels(images), 2).permute(0, 3, 1, 2).to(images.dtype)


class MiniSegmenter(nn.Module):
    """Small fully-convolutional segmenter with soft per-pixel probabilities."""

    def __init__(self, num_classes: int = 2, width: int = 16):
        super().__init__()
        self.num_classes = num_classes
        self.net = nn.Sequential(
            nn.Conv2d(3, width, 3, padding=1), nn.SiLU(),
            nn.Conv2d(width, width, 3, padding=2, dilation=2), nn.SiLU(),
            nn.Conv2d(width, width, 3, padding=1), nn.SiLU(),
            nn.Conv2d(width, num_classes, 1),
        )

    def logits(self, images: torch.Tensor) -> torch.Tensor:
        return self.net(images * 2 - 1)

    def probs(self, images: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.logits(images), dim=1)

    def labels(self, images: torch.Tensor) -> torch.Tensor:
        return self.logits(images).argmax(1)


def train_segmenter(images: torch.Tensor, masks: torch.Tensor, *, steps: int = 300, batch_size: int = 32,
                    lr: float = 3e-3, seed: int = 0) -> MiniSegmenter:
    """Fit on (image, mask) pairs with random channel permutations so it keys on shape, not hue."""
    torch.manual_seed(seed)
    g = generator(seed)
    seg = MiniSegmenter(int(masks.max()) + 1 if masks.numel() else 2)
    opt = torch.optim.Adam(seg.parameters(), lr=lr)
    for _ in range(steps):
        idx = torch.randint(0, len(images), (batch_size,), generator=g)
        perm = torch.randperm(3, generator=g)
        x = images[idx][:, perm]
        loss = F.cross_entropy(seg.logits(x), masks[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
    seg.eval()
    return seg


def region_loss(segmenter: Segmenter, S: torch.Tensor, S_prime: torch.Tensor) -> torch.Tensor:
    """Pixel-averaged cross-entropy between segmenter(S) labels and segmenter(S') probabilities."""
    if S.shape[-2:] != S_prime.shape[-2:]:
        raise ValueError(f"image sizes differ: {tuple(S.shape[-2:])} vs {tuple(S_prime.shape[-2:])}")
    with torch.no_grad():
        labels = segmenter.labels(S)
    p_hat = segmenter.probs(S_prime)
    m = p_hat.shape[1]
    if m != segmenter.num_classes or int(labels.max()) >= m:
        raise ValueError(f"segmenter class count mismatch: labels need {int(labels.max()) + 1}, "
                         f"probabilities have {m}")
    p = F.one_hot(labels, m).permute(0, 3, 1, 2).to(p_hat.dtype)
    return -(p * p_hat.clamp_min(1e-12).log()).sum(1).mean()


def total_finetune_loss(l_ldm: torch.Tensor, l_region: torch.Tensor | None,
                        lambda_ldm: float = 1.0, lambda_region: float = 1.0) -> torch.Tensor:
    if lambda_ldm < 0 or lambda_region < 0:
        raise ValueError("balancing factors must be >= 0")
    if l_region is None or lambda_region == 0:
        return lambda_ldm * l_ldm
    return lambda_ldm * l_ldm + lambda_region * l_region


# --------------------------------------------------------------------------- sampling

def guided_eps(model: EpsModel, z: torch.Tensor, t: torch.Tensor, context: torch.Tensor | None,
               guidance: float | None) -> torch.Tensor:
    if guidance is None or context is None:
        return model(z, t, context)
    eps_c = model(z, t, context)
    eps_u = model(z, t, None)
    return eps_u + guidance * (eps_c - eps_u)


def ddim_timesteps(T: int, steps: int) -> list[int]:
    if not 1 <= steps <= T:
        raise ValueError(f"steps must lie in [1, T={T}]")
    ts = np.round(np.linspace(T, 1, steps)).astype(int)
    return sorted(set(ts.tolist()), reverse=True)


@torch.no_grad()
def sample_latents(model: EpsModel, schedule: NoiseSchedule, code: LatentEEGCode | None, shape: tuple[int, ...],
                   steps: int, rng: torch.Generator, guidance: float | None = None, n: int | None = None) -> torch.Tensor:
    """Deterministic DDIM (eta = 0) from z_T ~ N(0, I)."""
    b = len(code) if code is not None else (n or 1)
    z = torch.randn((b, *shape), generator=rng)
    ctx = None if code is None else code.context
    ts = ddim_timesteps(schedule.T, steps)
    for i, t in enumerate(ts):
        ab = schedule.alpha_bar[t - 1].item()
        ab_next = schedule.alpha_bar[ts[i + 1] - 1].item() if i + 1 < len(ts) else 1.0
        tt = torch.full((b,), t)
        eps = guided_eps(model, z, tt, ctx, guidance)
        x0 = (z - math.sqrt(1 - ab) * eps) / math.sqrt(ab)
        z = math.sqrt(ab_next) * x0 + math.sqrt(1 - ab_next) * eps
    return z


def sample(model: EpsModel, ae: AutoEncoder, schedule: NoiseSchedule, code: LatentEEGCode, steps: int,
           rng: torch.Generator, guidance: float | None = None) -> torch.Tensor:
    """Images [B, 3, H, W] in [0, 1] conditioned on ``code``."""
    z = sample_latents(model, schedule, code, ae.latent_shape, steps, rng, guidance)
    with torch.no_grad():
        return ae.decode(z)


# --------------------------------------------------------------------------- fine-tuning

@dataclass
class LDMConfig:
    T: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.1
    epochs: int = 300
    batch_size: int = 32
    lr: float = 1e-3
    lambda_ldm: float = 1.0
    lambda_region: float = 1.0
    region_every: int = 4
    region_mode: str = "differentiable"  # or "oracle" (evaluation-only metric)
    region_t_max: float = 0.2
    cond_dropout: float = 0.1
    guidance: float = 3.0
    sample_steps: int = 50
    freeze_encoder: bool = True
    ae_steps: int = 1200
    ae_lr: float = 4e-3
    segmenter_steps: int = 300
    ae: AEConfig = field(default_factory=AEConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)

    @property
    def region_enabled(self) -> bool:
        return self.lambda_region > 0


@dataclass
class DiffusionBundle:
    ae: AutoEncoder
    denoiser: Denoiser
    schedule: NoiseSchedule
    segmenter: MiniSegmenter | None
    cfg: LDMConfig


def _region_term(model, ae, segmenter, schedule, z0, ctx, images, cfg: LDMConfig, g: torch.Generator):
    t_hi = max(1, int(cfg.region_t_max * schedule.T))
    t = torch.randint(1, t_hi + 1, (z0.shape[0],), generator=g)
    eps = torch.randn(z0.shape, generator=g)
    z_t = q_sample(schedule, z0, t, eps)
    eps_hat = model(z_t, t, ctx)
    ab = _bcast(schedule.ab(t), z0)
    z0_hat = (z_t - (1 - ab).sqrt() * eps_hat) / ab.sqrt()
    return region_loss(segmenter, images, ae.decode(z0_hat))


def finetune_ldm(denoiser: Denoiser, encoder: EEGEncoder, ae: AutoEncoder, segmenter: Segmenter | None,
                 eeg: torch.Tensor, images: torch.Tensor, cfg: LDMConfig, *, seed: int = 0,
                 log: JsonlLog | None = None, epoch_log: list | None = None) -> Denoiser:
    """Optimize ``lambda_ldm * L_ldm + lambda_region * L_region`` with EEG codes as conditioning.

    The autoencoder and segmenter stay frozen. ``L_region`` compares the
    segmentation of each stimulus with that of the one-step reconstruction
    decoded from the denoiser's x0 estimate (``region_mode="differentiable"``),
    or is computed on full DDIM samples as a logged metric only
    (``region_mode="oracle"``).
    """
    torch.manual_seed(seed)
    g = generator(seed)
    g_region = generator(seed + 7919)
    schedule = make_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
    params = list(denoiser.parameters())
    if cfg.freeze_encoder:
        encoder.eval()
        for p in encoder.parameters():
            p.requires_grad_(False)
    else:
        encoder.train()
        params += list(encoder.parameters())
    opt = torch.optim.Adam(params, lr=cfg.lr)
    log = log if log is not None else JsonlLog()
    with torch.no_grad():
        z_all = torch.cat([ae.encode(images[i:i + 128]) for i in range(0, len(images), 128)])
    n = len(eeg)
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        perm = torch.randperm(n, generator=g)
        ldm_sum, batches = 0.0, 0
        for i in range(0, n, cfg.batch_size):
            idx = perm[i:i + cfg.batch_size]
            if cfg.freeze_encoder:
                with torch.no_grad():
                    code = encoder(eeg[idx])
            else:
                code = encoder(eeg[idx])
            keep = (torch.rand(len(idx), generator=g) >= cfg.cond_dropout)
            l_ldm = ldm_loss(denoiser, schedule, z_all[idx], code, g, keep=keep)
            l_region = None
            step += 1
            rec: dict[str, Any] = {"step": step, "ldm_loss": l_ldm.item()}
            if cfg.region_enabled and step % cfg.region_every == 0 and segmenter is not None:
                if cfg.region_mode == "differentiable":
                    l_region = _region_term(denoiser, ae, segmenter, schedule, z_all[idx], code.context,
                                            images[idx], cfg, g_region)
                    rec["region_loss"] = l_region.item()
                elif cfg.region_mode == "oracle":
                    with torch.no_grad():
                        s_prime = sample(denoiser, ae, schedule, code[:4], 10, g_region, cfg.guidance)
                        rec["region_loss"] = region_loss(segmenter, images[idx][:4], s_prime).item()
                else:
                    raise ValueError(f"unknown region_mode {cfg.region_mode!r}")
            total = total_finetune_loss(l_ldm, l_region, cfg.lambda_ldm, cfg.lambda_region)
            if not torch.isfinite(total):
                raise NumericalAbort("LDM loss diverged", step=step, ldm=l_ldm.item())
            opt.zero_grad()
            total.backward()
            opt.step()
            rec.update(total=total.item(), lr=cfg.lr)
            log.write(rec)
            ldm_sum += l_ldm.item()
            batches += 1
        if epoch_log is not None:
            epoch_log.append({"epoch": epoch, "ldm_loss": ldm_sum / batches})
        if epoch % 10 == 0 or epoch == cfg.epochs:
            logger.info("LDM epoch %d: ldm_loss=%.4f", epoch, ldm_sum / batches)
    denoiser.eval()
    encoder.eval()
    return denoiser


# --------------------------------------------------------------------------- persistence

def save_diffusion(path: str | Path, bundle: DiffusionBundle, step: int = 0) -> Path:
    tensors = {**module_tensors("ae", bundle.ae), **module_tensors("denoiser", bundle.denoiser)}
    if bundle.segmenter is not None:
        tensors.update(module_tensors("segmenter", bundle.segmenter))
    return save_checkpoint(path, tensors, config=asdict(bundle.cfg), step=step, kind="latent_diffusion")


def load_diffusion(path: str | Path) -> DiffusionBundle:
    tensors, header = load_checkpoint(path)
    raw = dict(header["config"])
    ae_cfg, den_cfg = AEConfig(**raw.pop("ae")), DenoiserConfig(**raw.pop("denoiser"))
    cfg = LDMConfig(**raw, ae=ae_cfg, denoiser=den_cfg)
    ae, den = AutoEncoder(ae_cfg), Denoiser(den_cfg)
    load_module("ae", ae, tensors)
    load_module("denoiser", den, tensors)
    seg = None
    if any(k.startswith("segmenter.") for k in tensors):
        seg = MiniSegmenter()
        load_module("segmenter", seg, tensors)
        seg.eval()
    ae.eval()
    den.eval()
    return DiffusionBundle(ae, den, make_schedule(cfg.T, cfg.beta_start, cfg.beta_end), seg, cfg)
