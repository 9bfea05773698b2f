"""Radiance fields and differentiable volume rendering.

The scene lives in ``[-1, 1]^3``; cameras orbit the origin and look at it,
with +y up. Azimuth 0 places the camera on +z.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

VIEW_AZIMUTHS = (0.0, 20.0, 45.0, 70.0)


@dataclass(frozen=True)
class CameraPose:
    azimuth: float    # radians
    elevation: float  # radians
    radius: float
    fov: float        # radians, vertical == horizontal (square pixels)
    width: int
    height: int

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("radius must be > 0")
        if not 0 < self.fov < math.pi:
            raise ValueError("fov must lie in (0, pi)")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be >= 1")

    def position(self) -> np.ndarray:
        ce = math.cos(self.elevation)
        return self.radius * np.array([ce * math.sin(self.azimuth), math.sin(self.elevation),
                                       ce * math.cos(self.azimuth)])

    @property
    def focal(self) -> float:
        return 0.5 * self.width / math.tan(0.5 * self.fov)

    def to_json(self) -> dict:
        return {"azimuth_deg": round(math.degrees(self.azimuth), 6),
                "elevation_deg": round(math.degrees(self.elevation), 6),
                "radius": self.radius, "fov": self.fov}


@dataclass
class RayBatch:
    origins: torch.Tensor     # [N, 3]
    directions: torch.Tensor  # [N, 3], unit norm
    near: float
    far: float

    def __len__(self) -> int:
        return self.origins.shape[0]


@dataclass
class CameraRanges:
    azimuth: tuple[float, float] = (0.0, 2 * math.pi)
    elevation: tuple[float, float] = (math.radians(-30), math.radians(45))
    radius: tuple[float, float] = (1.8, 2.2)
    fov: float = math.radians(40)
    width: int = 32
    height: int = 32


def _uniform(rng: torch.Generator, lo: float, hi: float) -> float:
    if hi < lo:
        raise ValueError(f"empty range [{lo}, {hi}]")
    u = torch.rand((), generator=rng, dtype=torch.float64).item()
    return lo if hi == lo else lo + (hi - lo) * u


def sample_camera(rng: torch.Generator, ranges: CameraRanges = CameraRanges()) -> CameraPose:
    return CameraPose(azimuth=_uniform(rng, *ranges.azimuth), elevation=_uniform(rng, *ranges.elevation),
                      radius=_uniform(rng, *ranges.radius), fov=ranges.fov,
                      width=ranges.width, height=ranges.height)


def paper_views(size: int = 32, elevation_deg: float = 15.0, radius: float = 2.0,
                fov: float = math.radians(40)) -> list[CameraPose]:
    return [CameraPose(math.radians(a), math.radians(elevation_deg), radius, fov, size, size)
            for a in VIEW_AZIMUTHS]


def make_rays(pose: CameraPose, dtype: torch.dtype | None = None) -> RayBatch:
    """Pinhole rays through pixel centers, row-major from the top-left pixel."""
    dtype = dtype or torch.get_default_dtype()
    pos = pose.position()
    fwd = -pos / np.linalg.norm(pos)
    right = np.cross(fwd, [0.0, 1.0, 0.0])
    right /= np.linalg.norm(right)
    up = np.cross(right, fwd)
    f = pose.focal
    i = (np.arange(pose.width) + 0.5 - pose.width / 2) / f
    j = (np.arange(pose.height) + 0.5 - pose.height / 2) / f
    jj, ii = np.meshgrid(j, i, indexing="ij")
    d = fwd[None, None] + ii[..., None] * right[None, None] - jj[..., None] * up[None, None]
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    dirs = torch.as_tensor(d.reshape(-1, 3), dtype=dtype)
    origins = torch.as_tensor(np.broadcast_to(pos, dirs.shape).copy(), dtype=dtype)
    near = max(pose.radius - math.sqrt(3), 0.05)
    return RayBatch(origins, dirs, near, pose.radius + math.sqrt(3))


# --------------------------------------------------------------------------- fields

class RadianceField(nn.Module):
    """Maps points [N, 3] to (density [N] >= 0, rgb [N, 3] in [0, 1])."""

    def __init__(self, background: Sequence[float] = (1.0, 1.0, 1.0), learn_background: bool = False):
        super().__init__()
        bg = torch.as_tensor(background, dtype=torch.get_default_dtype())
        if learn_background:
            self.bg_logit = nn.Parameter(torch.logit(bg.clamp(1e-3, 1 - 1e-3)))
        else:
            self.register_buffer("bg", bg)

    @property
    def background(self) -> torch.Tensor:
        return torch.sigmoid(self.bg_logit) if hasattr(self, "bg_logit") else self.bg

    def query(self, points: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        raise NotImplementedError


def _inside(points: torch.Tensor) -> torch.Tensor:
    return (points.abs() <= 1.0).all(dim=-1)


def _blob(points: torch.Tensor, strength: float, radius: float) -> torch.Tensor:
    if strength == 0:
        return torch.zeros(points.shape[:-1], dtype=points.dtype)
    return strength * (1 - points.norm(dim=-1) / radius).clamp_min(0)


class DenseGridField(RadianceField):
    """R^3 grid of (density, features) with trilinear lookup and a 2-layer color MLP."""

    def __init__(self, resolution: int = 32, features: int = 8, hidden: int = 32, density_init: float = -3.0,
                 blob_strength: float = 0.0, blob_radius: float = 0.5, init_std: float = 0.1, **kw):
        super().__init__(**kw)
        self.resolution = resolution
        self.grid = nn.Parameter(init_std * torch.randn(1, 1 + features, resolution, resolution, resolution))
        self.density_init = density_init
        self.blob_strength, self.blob_radius = blob_strength, blob_radius
        self.mlp = nn.Sequential(nn.Linear(features, hidden), nn.SiLU(), nn.Linear(hidden, 3))

    def query(self, points):
        # grid_sample wants (x, y, z) ordered as (W, H, D)
        g = points.reshape(1, -1, 1, 1, 3)
        feat = F.grid_sample(self.grid, g, mode="bilinear", align_corners=True).reshape(self.grid.shape[1], -1).T
        raw = feat[:, 0] + self.density_init + _blob(points, self.blob_strength, self.blob_radius)
        sigma = F.softplus(raw) * _inside(points)
        rgb = torch.sigmoid(self.mlp(feat[:, 1:]))
        return sigma, rgb


_PRIMES = (1, 2654435761, 805459861)


class HashGridField(RadianceField):
    """Multi-resolution hashed feature grid + MLP decoding density and color."""

    def __init__(self, levels: int = 8, table_size: int = 2 ** 12, features: int = 2, base_resolution: int = 4,
                 max_resolution: int = 64, hidden: int = 32, density_init: float = -3.0,
                 blob_strength: float = 0.0, blob_radius: float = 0.5, **kw):
        super().__init__(**kw)
        growth = math.exp((math.log(max_resolution) - math.log(base_resolution)) / max(levels - 1, 1))
        self.resolutions = [int(math.floor(base_resolution * growth ** i)) for i in range(levels)]
        self.table_size = table_size
        self.tables = nn.Parameter(1e-4 * (2 * torch.rand(levels, table_size, features) - 1))
        self.density_init = density_init
        self.blob_strength, self.blob_radius = blob_strength, blob_radius
        self.mlp = nn.Sequential(nn.Linear(levels * features, hidden), nn.SiLU(), nn.Linear(hidden, 4))
        corners = torch.tensor([[(c >> k) & 1 for k in range(3)] for c in range(8)])
        self.register_buffer("corners", corners, persistent=False)

    def _hash(self, idx: torch.Tensor, res: int) -> torch.Tensor:
        if (res + 1) ** 3 <= self.table_size:
            return idx[..., 0] + (res + 1) * (idx[..., 1] + (res + 1) * idx[..., 2])
        h = idx[..., 0] * _PRIMES[0] ^ idx[..., 1] * _PRIMES[1] ^ idx[..., 2] * _PRIMES[2]
        return h % self.table_size

    def encode(self, points: torch.Tensor) -> torch.Tensor:
        x = (points.clamp(-1, 1) + 1) / 2
        out = []
        for lvl, res in enumerate(self.resolutions):
            pos = x * res
            base = pos.floor().long().clamp(0, res - 1)
            frac = pos - base
            idx = base[:, None, :] + self.corners[None]                        # [N, 8, 3]
            w = torch.where(self.corners[None].bool(), frac[:, None, :], 1 - frac[:, None, :]).prod(-1)
            feats = self.tables[lvl][self._hash(idx, res)]                     # [N, 8, F]
            out.append((w[..., None] * feats).sum(1))
        return torch.cat(out, dim=-1)

    def query(self, points):
        h = self.mlp(self.encode(points))
        raw = h[:, 0] + self.density_init + _blob(points, self.blob_strength, self.blob_radius)
        return F.softplus(raw) * _inside(points), torch.sigmoid(h[:, 1:])


class HomogeneousField(RadianceField):
    """Constant density and color everywhere (no scene bounds)."""

    def __init__(self, density: float, color: Sequence[float] = (0.2, 0.4, 0.6), **kw):
        super().__init__(**kw)
        self.register_buffer("density", torch.tensor(float(density)))
        self.register_buffer("color", torch.as_tensor(color, dtype=torch.get_default_dtype()))

    def query(self, points):
        n = points.shape[0]
        return self.density.to(points.dtype).expand(n), self.color.to(points.dtype).expand(n, 3)


class SphereField(RadianceField):
    """Solid sphere of constant density and color; analytic silhouette."""

    def __init__(self, radius: float = 1.0, density: float = 50.0, center: Sequence[float] = (0.0, 0.0, 0.0),
                 color: Sequence[float] = (0.9, 0.1, 0.1), **kw):
        super().__init__(**kw)
        self.radius = radius
        self.register_buffer("density", torch.tensor(float(density)))
        self.register_buffer("center", torch.as_tensor(center, dtype=torch.get_default_dtype()))
        self.register_buffer("color", torch.as_tensor(color, dtype=torch.get_default_dtype()))

    def query(self, points):
        inside = ((points - self.center.to(points.dtype)).norm(dim=-1) < self.radius).to(points.dtype)
        return self.density.to(points.dtype) * inside, self.color.to(points.dtype).expand(points.shape[0], 3)


# --------------------------------------------------------------------------- compositing

def render(field: RadianceField, rays: RayBatch, n_samples: int, rng: torch.Generator | None = None
           ) -> dict[str, torch.Tensor]:
    """Stratified ray marching with alpha compositing over a background color.

    Samples are jittered inside equal bins of ``[near, far]`` (bin midpoints
    when ``rng`` is None); each sample's interval length is the bin width,
    so the intervals tile the ray segment exactly.
    """
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    n = len(rays)
    dtype = rays.origins.dtype
    edges = torch.linspace(rays.near, rays.far, n_samples + 1, dtype=dtype)
    width = (rays.far - rays.near) / n_samples
    if rng is None:
        u = torch.full((n, n_samples), 0.5, dtype=dtype)
    else:
        u = torch.rand((n, n_samples), generator=rng, dtype=torch.float64).to(dtype)
    t = edges[:-1] + u * width
    pts = rays.origins[:, None, :] + t[..., None] * rays.directions[:, None, :]
    sigma, rgb = field.query(pts.reshape(-1, 3))
    sigma = sigma.reshape(n, n_samples)
    rgb = rgb.reshape(n, n_samples, 3)
    tau = sigma * width
    alpha = 1 - torch.exp(-tau)
    acc = torch.cumsum(tau, dim=1)
    trans = torch.exp(-torch.cat([torch.zeros_like(acc[:, :1]), acc[:, :-1]], dim=1))
    weights = trans * alpha
    opacity = weights.sum(1)
    color = (weights[..., None] * rgb).sum(1) + (1 - opacity)[:, None] * field.background.to(dtype)
    depth = (weights * t).sum(1)
    return {"rgb": color, "opacity": opacity, "depth": depth, "weights": weights,
            "transmittance": torch.exp(-acc[:, -1])}


def render_image(field: RadianceField, pose: CameraPose, n_samples: int = 32, rng: torch.Generator | None = None,
                 dtype: torch.dtype | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Image [3, H, W] and opacity map [H, W]."""
    out = render(field, make_rays(pose, dtype), n_samples, rng)
    img = out["rgb"].T.reshape(3, pose.height, pose.width)
    return img, out["opacity"].reshape(pose.height, pose.width)


def rotate_y(points: np.ndarray | Sequence[float], angle: float) -> np.ndarray:
    """Rotation about +y that maps a camera at azimuth a to azimuth a + angle."""
    x, y, z = np.asarray(points, dtype=float)
    c, s = math.cos(angle), math.sin(angle)
    return np.array([x * c + z * s, y, -x * s + z * c])


def build_field(kind: str = "dense", **kw) -> RadianceField:
    if kind == "dense":
        return DenseGridField(**kw)
    if kind == "hash":
        return HashGridField(**kw)
    raise ValueError(f"unknown field kind {kind!r}")
