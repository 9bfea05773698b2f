"""Run configuration: one TOML file with a section per pipeline stage."""

from __future__ import annotations

import math
from pathlib import Path
from typing import Any, Literal, Optional

import tomli
import tomli_w
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .diffusion import AEConfig, DenoiserConfig, LDMConfig
from .distill import SDSConfig, StageBConfig
from .encoder import EncoderConfig, StageAConfig


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SyntheticSpec(_Section):
    num_classes: int = Field(4, ge=2)
    segments_per_class: int = Field(64, ge=5)
    channels: int = Field(8, ge=1)
    timesteps: int = Field(128, ge=8)
    image_size: int = Field(32, ge=8)
    noise: float = Field(0.5, ge=0)
    phase_jitter: float = Field(0.3, ge=0)
    n_subjects: int = Field(2, ge=1)


class DatasetSection(_Section):
    path: Optional[str] = None
    band: Optional[str] = None
    synthetic: SyntheticSpec = SyntheticSpec()


class StageASection(_Section):
    mask_ratio: float = Field(0.75, ge=0, lt=1)
    patch_len: int = Field(8, ge=1)
    token_dim: int = Field(64, ge=4)
    depth: int = Field(2, ge=1)
    heads: int = Field(4, ge=1)
    code_dim: int = Field(128, ge=4)
    epochs: int = Field(5, ge=1)
    batch_size: int = Field(16, ge=1)
    lr: float = Field(1e-3, gt=0)
    w_mae: float = Field(1.0, ge=0)
    w_cls: float = Field(1.0, ge=0)
    normalize: Literal["per_channel_z", "global_z", "none"] = "per_channel_z"


class LDMSection(_Section):
    T: int = Field(100, ge=2)
    beta_start: float = Field(1e-4, gt=0, lt=1)
    beta_end: float = Field(0.1, gt=0, lt=1)
    lambda_ldm: float = Field(1.0, ge=0)
    lambda_region: float = Field(1.0, ge=0)
    region_every: int = Field(4, ge=1)
    region_t_max: float = Field(0.2, gt=0, le=1)
    guidance: float = Field(3.0, ge=0)
    cond_dropout: float = Field(0.1, ge=0, lt=1)
    freeze_encoder: bool = True
    epochs: int = Field(300, ge=1)
    batch_size: int = Field(32, ge=1)
    lr: float = Field(1e-3, gt=0)
    sample_steps: int = Field(50, ge=1)
    ae_steps: int = Field(1200, ge=1)
    ae_lr: float = Field(4e-3, gt=0)
    ae_width: int = Field(24, ge=8)
    denoiser_width: int = Field(32, ge=8)
    segmenter_steps: int = Field(300, ge=1)

    @model_validator(mode="after")
    def _check(self):
        if self.beta_start > self.beta_end:
            raise ValueError("beta_start must be <= beta_end")
        if self.sample_steps > self.T:
            raise ValueError("sample_steps must be <= T")
        if self.denoiser_width % 8:
            raise ValueError("denoiser_width must be a multiple of 8 (group norm)")
        return self


class EmbedderSection(_Section):
    steps: int = Field(400, ge=1)
    extractor_steps: int = Field(300, ge=1)


class StageBSection(_Section):
    w_sds: float = Field(1.0, ge=0)
    w_align: float = Field(1.0, ge=0)
    w_color: float = Field(1.0, ge=0)
    w_ref: float = Field(1.0, ge=0)
    omega: Literal["one", "sigma_sq"] = "sigma_sq"
    steps: int = Field(2000, ge=1)
    lr: float = Field(1e-3, gt=0)
    guidance: float = Field(3.0, ge=0)
    t_range: tuple[float, float] = (0.02, 0.98)
    k_align: int = Field(4, ge=1)
    k_color: int = Field(4, ge=1)
    color_lambda: float = Field(10.0, ge=0)
    n_samples: int = Field(32, ge=2)
    field_resolution: int = Field(16, ge=2)
    blob_strength: float = Field(20.0, ge=0)
    blob_radius: float = Field(0.5, gt=0)
    density_init: float = -8.0
    elevation_range_deg: tuple[float, float] = (-30.0, 45.0)
    radius_range: tuple[float, float] = (1.8, 2.2)
    fov_deg: float = Field(40.0, gt=0, lt=180)
    reference_seeds: int = Field(4, ge=1)

    @model_validator(mode="after")
    def _check(self):
        lo, hi = self.t_range
        if not 0 <= lo < hi <= 1:
            raise ValueError("t_range must be increasing fractions of T within [0, 1]")
        if self.elevation_range_deg[0] > self.elevation_range_deg[1] or self.radius_range[0] > self.radius_range[1]:
            raise ValueError("camera ranges must be (low, high)")
        if self.radius_range[0] <= 0:
            raise ValueError("camera radius must be > 0")
        return self


class MetricsSection(_Section):
    n_way: int = Field(4, ge=1)
    trials: int = Field(1000, ge=1)
    bandwidth: float = Field(0.5, gt=0)
    ssim_window: int = Field(11, ge=1)
    split: Literal["train", "val", "test"] = "test"
    objects: int = Field(4, ge=1)

    @model_validator(mode="after")
    def _check(self):
        if self.ssim_window % 2 == 0:
            raise ValueError("ssim_window must be odd")
        return self


class PipelineConfig(_Section):
    seed: int = 0
    dataset: DatasetSection = DatasetSection()
    stage_a: StageASection = StageASection()
    ldm: LDMSection = LDMSection()
    embedder: EmbedderSection = EmbedderSection()
    stage_b: StageBSection = StageBSection()
    metrics: MetricsSection = MetricsSection()

    # ---- views into the module-level configs

    def stage_a_config(self) -> StageAConfig:
        s = self.stage_a
        return StageAConfig(epochs=s.epochs, batch_size=s.batch_size, lr=s.lr, mask_ratio=s.mask_ratio,
                            w_mae=s.w_mae, w_cls=s.w_cls, normalize=s.normalize,
                            model=EncoderConfig(patch_len=s.patch_len, token_dim=s.token_dim, depth=s.depth,
                                                heads=s.heads, code_dim=s.code_dim))

    def ldm_config(self) -> LDMConfig:
        s = self.ldm
        return LDMConfig(T=s.T, beta_start=s.beta_start, beta_end=s.beta_end, epochs=s.epochs,
                         batch_size=s.batch_size, lr=s.lr, lambda_ldm=s.lambda_ldm, lambda_region=s.lambda_region,
                         region_every=s.region_every, region_t_max=s.region_t_max, cond_dropout=s.cond_dropout,
                         guidance=s.guidance, sample_steps=s.sample_steps, freeze_encoder=s.freeze_encoder,
                         ae_steps=s.ae_steps, ae_lr=s.ae_lr, segmenter_steps=s.segmenter_steps,
                         ae=AEConfig(image_size=self.dataset.synthetic.image_size, width=s.ae_width),
                         denoiser=DenoiserConfig(width=s.denoiser_width, context_dim=self.stage_a.code_dim))

    def stage_b_config(self) -> StageBConfig:
        s = self.stage_b
        return StageBConfig(sds=SDSConfig(t_range=tuple(s.t_range), omega=s.omega, guidance=s.guidance,
                                          steps=s.steps, lr=s.lr),
                            w_sds=s.w_sds, w_align=s.w_align, w_color=s.w_color, w_ref=s.w_ref,
                            k_align=s.k_align, k_color=s.k_color, color_lambda=s.color_lambda,
                            n_samples=s.n_samples, image_size=self.dataset.synthetic.image_size,
                            field_resolution=s.field_resolution, blob_strength=s.blob_strength,
                            blob_radius=s.blob_radius, density_init=s.density_init,
                            elevation_range_deg=tuple(s.elevation_range_deg), radius_range=tuple(s.radius_range),
                            fov_deg=s.fov_deg)


class ConfigError(ValueError):
    pass


def _format(err: ValidationError) -> str:
    return "; ".join(f"{'.'.join(str(p) for p in e['loc']) or '<root>'}: {e['msg']}" for e in err.errors())


def parse_config(data: dict[str, Any]) -> PipelineConfig:
    try:
        return PipelineConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(_format(e)) from None


def load_config(path: str | Path | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        data = tomli.loads(p.read_text())
    except tomli.TOMLDecodeError as e:
        raise ConfigError(f"{p}: {e}") from None
    return parse_config(data)


def with_overrides(cfg: PipelineConfig, **dotted: Any) -> PipelineConfig:
    """Apply ``section.key=value`` overrides and re-validate."""
    data = cfg.model_dump()
    for key, value in dotted.items():
        node = data
        *parents, leaf = key.split(".")
        for part in parents:
            node = node[part]
        node[leaf] = value
    return parse_config(data)


def dumps(cfg: PipelineConfig) -> str:
    data = cfg.model_dump(exclude_none=True)
    return tomli_w.dumps(data)


def check_finite_numbers(cfg: PipelineConfig) -> None:
    def walk(v, path):
        if isinstance(v, float) and not math.isfinite(v):
            raise ConfigError(f"{path}: not finite")
        if isinstance(v, dict):
            for k, x in v.items():
                walk(x, f"{path}.{k}" if path else k)
        if isinstance(v, (list, tuple)):
            for i, x in enumerate(v):
                walk(x, f"{path}[{i}]")
    walk(cfg.model_dump(), "")
