"""Stage B: score distillation into a radiance field, plus EEG alignment and color-matching losses.

Gradients from every loss stream are accumulated into the field parameters
and applied with a single optimizer step per iteration. Each stream draws
its randomness from its own generator so that switching one stream off
leaves the others' random sequences untouched.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .archive import JsonlLog, load_checkpoint, load_module, module_tensors, save_checkpoint
from .common import NumericalAbort, freeze, generator
from .diffusion import AutoEncoder, NoiseSchedule, guided_eps, q_sample
from .encoder import LatentEEGCode
from .render import CameraPose, CameraRanges, RadianceField, build_field, paper_views, render_image, sample_camera
from .style import FeatureExtractor, color_loss

logger = logging.getLogger(__name__)

OMEGA_RULES = ("one", "sigma_sq")


@dataclass
class SDSConfig:
    t_range: tuple[float, float] = (0.02, 0.98)   # fractions of T
    omega: str = "sigma_sq"
    guidance: float = 3.0
    steps: int = 2000
    lr: float = 1e-3

    def t_bounds(self, T: int) -> tuple[int, int]:
        lo = max(1, int(math.ceil(self.t_range[0] * T)))
        hi = min(T, int(math.floor(self.t_range[1] * T)))
        if not 1 <= lo < hi <= T:
            raise ValueError(f"t range {self.t_range} is empty for T={T}")
        return lo, hi

    def __post_init__(self):
        if self.omega not in OMEGA_RULES:
            raise ValueError(f"unknown omega rule {self.omega!r}")
        if not 0 <= self.t_range[0] < self.t_range[1] <= 1:
            raise ValueError("t_range must be increasing fractions within [0, 1]")


def omega(rule: str, schedule: NoiseSchedule, t: int | torch.Tensor) -> torch.Tensor:
    ab = schedule.ab(t)
    if rule == "one":
        return torch.ones_like(ab)
    if rule == "sigma_sq":
        return 1 - ab
    raise ValueError(f"unknown omega rule {rule!r}")


def sds_backward(field_image: torch.Tensor, denoiser, schedule: NoiseSchedule, ae: AutoEncoder,
                 code: LatentEEGCode | None, cfg: SDSConfig, rng: torch.Generator, *, weight: float = 1.0,
                 pose: CameraPose | None = None) -> dict[str, Any]:
    """Accumulate the SDS gradient of a rendered image [3, H, W] into whatever produced it.

    The noise residual is computed without gradient and injected as the
    upstream gradient of the AE latent, so only the encoder Jacobian and the
    renderer carry it back to the field.
    """
    z = ae.encode(field_image[None])
    lo, hi = cfg.t_bounds(schedule.T)
    t = torch.randint(lo, hi + 1, (1,), generator=rng)
    eps = torch.randn(z.shape, generator=rng, dtype=z.dtype)
    with torch.no_grad():
        z_t = q_sample(schedule, z.detach(), t, eps)
        eps_hat = guided_eps(denoiser, z_t, t, None if code is None else code.context, cfg.guidance)
        g = weight * omega(cfg.omega, schedule, t).to(z.dtype) * (eps_hat - eps)
    if not torch.isfinite(g).all():
        raise NumericalAbort("non-finite SDS gradient", t=int(t), pose=None if pose is None else pose.to_json(),
                             z_norm=float(z.detach().norm()), eps_hat_norm=float(eps_hat.norm()))
    (g * z).sum().backward()
    return {"t": int(t), "sds_grad_norm": float(g.norm())}


def sds_step(field_: RadianceField, optimizer: torch.optim.Optimizer, denoiser, schedule: NoiseSchedule,
             ae: AutoEncoder, code: LatentEEGCode | None, cfg: SDSConfig, rng: torch.Generator, *,
             ranges: CameraRanges = CameraRanges(), n_samples: int = 32, weight: float = 1.0) -> dict[str, Any]:
    """Sample a pose, render, apply one SDS update to the field (denoiser and AE stay frozen)."""
    freeze(ae)
    if isinstance(denoiser, nn.Module):
        freeze(denoiser)
    pose = sample_camera(rng, ranges)
    img, _ = render_image(field_, pose, n_samples, rng)
    optimizer.zero_grad()
    info = sds_backward(img, denoiser, schedule, ae, code, cfg, rng, weight=weight, pose=pose)
    _check_grads(field_, step=None, pose=pose, t=info["t"])
    optimizer.step()
    return {"pose": pose.to_json(), **info}


def _check_grads(module: nn.Module, **diag) -> None:
    for name, p in module.named_parameters():
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise NumericalAbort(f"non-finite gradient in {name}", grad_norm=float(p.grad.norm()), **diag)


# --------------------------------------------------------------------------- embedder

class Embedder(nn.Module):
    """Toy CLIP substitute: image, class-name and EEG-code towers into a shared unit sphere."""

    def __init__(self, class_names: Sequence[str], code_dim: int = 128, token_dim: int = 64, dim: int = 64,
                 width: int = 32, temperature: float = 0.1):
        super().__init__()
        self.class_names = list(class_names)
        self.vocab = {n: i for i, n in enumerate(self.class_names)}
        self.temperature = temperature
        self.image_net = nn.Sequential(
            nn.Conv2d(3, width, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(width, width, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(width, width, 3, stride=2, padding=1), nn.SiLU(),
            nn.AdaptiveAvgPool2d(1), nn.Flatten(), nn.Linear(width, dim),
        )
        self.text = nn.Embedding(len(self.class_names), dim)
        self.eeg_net = nn.Sequential(nn.Linear(code_dim + token_dim, 2 * dim), nn.SiLU(), nn.Linear(2 * dim, dim))

    def embed_image(self, images: torch.Tensor) -> torch.Tensor:
        if images.dim() == 3:
            images = images[None]
        return F.normalize(self.image_net(images * 2 - 1), dim=-1)

    def embed_text(self, prompts: str | Sequence[str]) -> torch.Tensor:
        prompts = [prompts] if isinstance(prompts, str) else list(prompts)
        unknown = [p for p in prompts if p not in self.vocab]
        if unknown:
            raise KeyError(f"unknown prompt(s): {unknown}")
        return F.normalize(self.text(torch.tensor([self.vocab[p] for p in prompts])), dim=-1)

    def project_eeg(self, code: LatentEEGCode) -> torch.Tensor:
        h = torch.cat([code.context.mean(1), code.class_token], dim=-1)
        return F.normalize(self.eeg_net(h), dim=-1)


def contrastive_loss(a: torch.Tensor, b: torch.Tensor, temperature: float = 0.1) -> torch.Tensor:
    """Symmetric InfoNCE where row i of ``a`` pairs with row i of ``b``."""
    logits = a @ b.T / temperature
    target = torch.arange(len(a))
    return 0.5 * (F.cross_entropy(logits, target) + F.cross_entropy(logits.T, target))


def _class_contrast(emb: torch.Tensor, text: torch.Tensor, labels: torch.Tensor, temperature: float) -> torch.Tensor:
    return F.cross_entropy(emb @ text.T / temperature, labels)


def embedder_loss(embedder: Embedder, images: torch.Tensor, codes: LatentEEGCode, labels: torch.Tensor
                  ) -> torch.Tensor:
    tmp = embedder.temperature
    e_img, e_eeg = embedder.embed_image(images), embedder.project_eeg(codes)
    e_txt = embedder.embed_text(embedder.class_names)
    return (contrastive_loss(e_img, e_eeg, tmp) + _class_contrast(e_img, e_txt, labels, tmp)
            + _class_contrast(e_eeg, e_txt, labels, tmp))


@torch.no_grad()
def retrieval_top1(embedder: Embedder, codes: LatentEEGCode, images: torch.Tensor, labels: torch.Tensor) -> float:
    """EEG -> image retrieval over the pool, scored by class of the retrieved image."""
    sims = embedder.project_eeg(codes) @ embedder.embed_image(images).T
    return float((labels[sims.argmax(1)] == labels).double().mean())


def train_embedder(images: torch.Tensor, codes: LatentEEGCode, labels: torch.Tensor, class_names: Sequence[str], *,
                   steps: int = 400, batch_size: int = 32, lr: float = 2e-3, seed: int = 0,
                   log: JsonlLog | None = None) -> Embedder:
    torch.manual_seed(seed)
    g = generator(seed)
    emb = Embedder(class_names, code_dim=codes.context.shape[-1], token_dim=codes.class_token.shape[-1])
    opt = torch.optim.Adam(emb.parameters(), lr=lr)
    codes = codes.detach()
    for step in range(1, steps + 1):
        idx = torch.randint(0, len(images), (batch_size,), generator=g)
        loss = embedder_loss(emb, images[idx], codes[idx], labels[idx])
        if not torch.isfinite(loss):
            raise NumericalAbort("embedder loss diverged", step=step)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if log is not None:
            log.write({"step": step, "contrastive_loss": loss.item()})
    return freeze(emb)


def save_embedder(path: str | Path, emb: Embedder) -> Path:
    return save_checkpoint(path, module_tensors("embedder", emb), kind="embedder", class_names=emb.class_names,
                           code_dim=emb.eeg_net[0].in_features - emb.text.embedding_dim,
                           token_dim=emb.text.embedding_dim)


def load_embedder(path: str | Path) -> Embedder:
    tensors, header = load_checkpoint(path)
    emb = Embedder(header["class_names"], code_dim=header["code_dim"], token_dim=header["token_dim"])
    load_module("embedder", emb, tensors)
    return freeze(emb)


def eeg_text_loss(embedder: Embedder, code: LatentEEGCode, render: torch.Tensor,
                  prompt: str | None = None) -> torch.Tensor:
    """-s_eeg * cos(anchor, image), with s_eeg = cos(eeg, anchor); anchor is the prompt or the EEG itself."""
    e_eeg = embedder.project_eeg(code)
    e_anchor = e_eeg if prompt is None else embedder.embed_text(prompt)
    e_img = embedder.embed_image(render)
    s_eeg = (e_eeg * e_anchor).sum(-1)
    return -(s_eeg * (e_anchor * e_img).sum(-1)).mean()


def histogram_l1(x: torch.Tensor, y: torch.Tensor, bins: int = 32) -> float:
    """Mean over channels of the L1 distance between normalized per-channel histograms of [3, H, W] images."""
    total = 0.0
    for c in range(x.shape[0]):
        hx = torch.histc(x[c].double().clamp(0, 1), bins=bins, min=0, max=1)
        hy = torch.histc(y[c].double().clamp(0, 1), bins=bins, min=0, max=1)
        total += float((hx / hx.sum() - hy / hy.sum()).abs().sum())
    return total / x.shape[0]


# --------------------------------------------------------------------------- stage B loop

@dataclass
class StageBConfig:
    sds: SDSConfig = field(default_factory=SDSConfig)
    w_sds: float = 1.0
    w_align: float = 1.0
    w_color: float = 1.0
    w_ref: float = 1.0
    k_align: int = 4
    k_color: int = 4
    color_lambda: float = 10.0
    n_samples: int = 32
    image_size: int = 32
    field_kind: str = "dense"
    field_resolution: int = 16
    blob_strength: float = 20.0
    blob_radius: float = 0.5
    density_init: float = -8.0
    ref_azimuth_deg: float = 0.0
    ref_elevation_deg: float = 15.0
    ref_radius: float = 2.0
    elevation_range_deg: tuple[float, float] = (-30.0, 45.0)
    radius_range: tuple[float, float] = (1.8, 2.2)
    fov_deg: float = 40.0
    use_prompt: bool = False

    def __post_init__(self):
        for k in ("w_sds", "w_align", "w_color", "w_ref"):
            if getattr(self, k) < 0:
                raise ValueError(f"{k} must be >= 0")
        if self.k_align < 1 or self.k_color < 1:
            raise ValueError("k_align and k_color must be >= 1")

    def ranges(self) -> CameraRanges:
        return CameraRanges(elevation=tuple(math.radians(e) for e in self.elevation_range_deg),
                            radius=tuple(self.radius_range), fov=math.radians(self.fov_deg),
                            width=self.image_size, height=self.image_size)

    def reference_pose(self) -> CameraPose:
        return CameraPose(math.radians(self.ref_azimuth_deg), math.radians(self.ref_elevation_deg), self.ref_radius,
                          math.radians(self.fov_deg), self.image_size, self.image_size)


def new_field(cfg: StageBConfig) -> RadianceField:
    if cfg.field_kind == "dense":
        return build_field("dense", resolution=cfg.field_resolution, blob_strength=cfg.blob_strength,
                           blob_radius=cfg.blob_radius, density_init=cfg.density_init)
    return build_field(cfg.field_kind, blob_strength=cfg.blob_strength, blob_radius=cfg.blob_radius,
                       density_init=cfg.density_init)


@dataclass
class StageBResult:
    field: RadianceField
    renders: dict[float, torch.Tensor]   # azimuth_deg -> [3, H, W]
    history: list[dict[str, Any]]
    warnings: list[str]


def run_stage_b(denoiser, schedule: NoiseSchedule, ae: AutoEncoder, code: LatentEEGCode,
                reference_view: torch.Tensor, cfg: StageBConfig, *, embedder: Embedder | None = None,
                extractor: FeatureExtractor | None = None, style_image: torch.Tensor | None = None,
                prompt: str | None = None, seed: int = 0, log: JsonlLog | None = None) -> StageBResult:
    """Optimize a radiance field from one EEG code and its Stage-A reference view.

    Streams: SDS at a random pose every step, the reference-pose pixel anchor
    every step, EEG alignment every ``k_align`` steps and the color loss every
    ``k_color`` steps. A stream whose weight is zero (or whose model is
    missing) is skipped entirely and never appears in the log.
    """
    torch.manual_seed(seed)
    for m in (denoiser, ae):
        if isinstance(m, nn.Module):
            freeze(m)
    g_pose, g_sds, g_render = generator(seed), generator(seed + 1), generator(seed + 2)
    fld = new_field(cfg)
    opt = torch.optim.Adam(fld.parameters(), lr=cfg.sds.lr)
    ranges, ref_pose = cfg.ranges(), cfg.reference_pose()
    do_align = cfg.w_align > 0 and embedder is not None
    do_color = cfg.w_color > 0 and extractor is not None
    style_ref = style_image if style_image is not None else reference_view
    log = log if log is not None else JsonlLog()
    history, warnings = [], []
    ref_x = reference_view.detach()
    for step in range(1, cfg.sds.steps + 1):
        pose = sample_camera(g_pose, ranges)
        opt.zero_grad()
        img, opacity = render_image(fld, pose, cfg.n_samples, g_render)
        rec: dict[str, Any] = {"step": step, "pose": pose.to_json()}
        keep_graph = do_align and step % cfg.k_align == 0 or do_color and step % cfg.k_color == 0
        if cfg.w_sds > 0:
            info = _sds_retain(img, denoiser, schedule, ae, code, cfg, g_sds, pose, keep_graph)
            rec["sds_grad_norm"] = info["sds_grad_norm"]
        if do_align and step % cfg.k_align == 0:
            la = eeg_text_loss(embedder, code, img, prompt if cfg.use_prompt else None)
            (cfg.w_align * la).backward(retain_graph=do_color and step % cfg.k_color == 0)
            rec["align_loss"] = la.item()
        if do_color and step % cfg.k_color == 0:
            lc = color_loss(extractor, img, ref_x, style_ref, cfg.color_lambda)
            (cfg.w_color * lc).backward()
            rec["color_loss"] = lc.item()
        if cfg.w_ref > 0:
            ref_img, _ = render_image(fld, ref_pose, cfg.n_samples, g_render)
            la_ref = F.mse_loss(ref_img, ref_x)
            (cfg.w_ref * la_ref).backward()
            rec["anchor_mse"] = la_ref.item()
        rec["opacity_mean"] = opacity.mean().item()
        _check_grads(fld, step=step, pose=pose.to_json())
        opt.step()
        if step == max(1, int(0.2 * cfg.sds.steps)) and rec["opacity_mean"] < 0.01:
            msg = f"opacity collapse: mean opacity {rec['opacity_mean']:.4g} at step {step}"
            logger.warning(msg)
            warnings.append(msg)
        log.write(rec)
        history.append(rec)
    renders = export_views(fld, cfg)
    return StageBResult(fld, renders, history, warnings)


def _sds_retain(img, denoiser, schedule, ae, code, cfg: StageBConfig, g, pose, retain: bool) -> dict[str, Any]:
    if not retain:
        return sds_backward(img, denoiser, schedule, ae, code, cfg.sds, g, weight=cfg.w_sds, pose=pose)
    # keep the render graph alive for the streams that follow
    leaf = img.detach().requires_grad_(True)
    info = sds_backward(leaf, denoiser, schedule, ae, code, cfg.sds, g, weight=cfg.w_sds, pose=pose)
    img.backward(leaf.grad, retain_graph=True)
    return info


@torch.no_grad()
def export_views(fld: RadianceField, cfg: StageBConfig) -> dict[float, torch.Tensor]:
    views = paper_views(cfg.image_size, cfg.ref_elevation_deg, cfg.ref_radius, math.radians(cfg.fov_deg))
    return {round(math.degrees(p.azimuth), 6): render_image(fld, p, cfg.n_samples)[0] for p in views}


def stage_b_config_dict(cfg: StageBConfig) -> dict[str, Any]:
    return asdict(cfg)


def save_field(path: str | Path, fld: RadianceField, cfg: StageBConfig, step: int = 0) -> Path:
    return save_checkpoint(path, module_tensors("field", fld), config=asdict(cfg), step=step, kind="radiance_field")


def load_field(path: str | Path) -> tuple[RadianceField, StageBConfig]:
    tensors, header = load_checkpoint(path)
    raw = dict(header["config"])
    sds = SDSConfig(**{**raw.pop("sds"), "t_range": tuple(header["config"]["sds"]["t_range"])})
    for k in ("elevation_range_deg", "radius_range"):
        raw[k] = tuple(raw[k])
    cfg = StageBConfig(sds=sds, **raw)
    fld = new_field(cfg)
    load_module("field", fld, tensors)
    return fld, cfg
