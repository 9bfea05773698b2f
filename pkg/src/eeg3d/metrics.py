"""Image-quality and retrieval metrics over pluggable feature extractors."""

from __future__ import annotations

import math
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import BaseModel, Field, field_validator, model_validator

from .style import FeatureExtractor, VersionMismatch, extract_features


def _as_chw(x) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(x) if not isinstance(x, torch.Tensor) else x, dtype=torch.float64)
    if t.dim() == 2:
        t = t[None]
    elif t.dim() == 3 and t.shape[-1] == 3 and t.shape[0] != 3:
        t = t.permute(2, 0, 1)
    return t


def _gaussian_window(size: int, sigma: float) -> torch.Tensor:
    ax = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(ax ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def ssim(x, y, window: int = 11, sigma: float = 1.5, data_range: float = 1.0) -> float:
    """Mean SSIM over all valid Gaussian windows and channels."""
    a, b = _as_chw(x), _as_chw(y)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    if window % 2 == 0 or window < 1:
        raise ValueError("window must be odd")
    if window > min(a.shape[-2:]):
        raise ValueError(f"window {window} larger than image {tuple(a.shape[-2:])}")
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    g = _gaussian_window(window, sigma)
    k = (g[:, None] * g[None, :])[None, None].expand(a.shape[0], 1, window, window)

    def filt(t):
        return F.conv2d(t[None], k, groups=a.shape[0])[0]

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    return float(s.mean())


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def fid(features_a, features_b) -> float:
    """Frechet distance between Gaussian fits of two feature sets.

    The cross term uses the symmetric form sqrt(S_a^1/2 S_b S_a^1/2), with
    negative eigenvalues clipped to zero.
    """
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    a = a[:, None] if a.ndim == 1 else a
    b = b[:, None] if b.ndim == 1 else b
    if a.shape[1] != b.shape[1] or a.shape[1] < 1:
        raise ValueError("feature dimensions differ or are empty")
    if len(a) < 2 or len(b) < 2:
        raise ValueError("need at least 2 samples per set")
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise ValueError("non-finite features")
    mu_a, mu_b = a.mean(0), b.mean(0)
    cov_a = np.atleast_2d(np.cov(a, rowvar=False))
    cov_b = np.atleast_2d(np.cov(b, rowvar=False))
    sa = _psd_sqrt(cov_a)
    cross = _psd_sqrt(sa @ cov_b @ sa)
    val = float(((mu_a - mu_b) ** 2).sum() + np.trace(cov_a) + np.trace(cov_b) - 2 * np.trace(cross))
    return max(val, 0.0)


def inception_score(class_probs) -> float:
    """exp(mean_i KL(p(y|x_i) || p(y)))."""
    p = np.asarray(class_probs, dtype=np.float64)
    if p.ndim != 2 or len(p) == 0:
        raise ValueError("class_probs must be a nonempty [n x K] matrix")
    if (p < 0).any() or not np.allclose(p.sum(1), 1.0, atol=1e-6, rtol=0):
        raise ValueError("rows must be probability distributions")
    marginal = p.mean(0)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(marginal)), 0.0)
    return float(np.exp(terms.sum(1).mean()))


def _unit(f: torch.Tensor, eps: float = 1e-10) -> torch.Tensor:
    return f / (f.norm(dim=1, keepdim=True) + eps)


def perceptual_distance(extractor: FeatureExtractor, x: torch.Tensor, y: torch.Tensor) -> float:
    """LPIPS-style: mean over layers of the mean squared distance of channel-normalized features."""
    if x.shape != y.shape:
        raise ValueError("shape mismatch")
    with torch.no_grad():
        fx, fy = extract_features(extractor, x), extract_features(extractor, y)
    if fx.version != fy.version:
        raise VersionMismatch("mixed extractor versions")
    per_layer = [((_unit(a) - _unit(b)) ** 2).sum(1).mean() for a, b in zip(fx.features, fy.features)]
    return float(torch.stack(per_layer).mean())


def contextual_from_features(fx: torch.Tensor, fy: torch.Tensor, bandwidth: float = 0.5,
                             eps: float = 1e-5) -> float:
    """Contextual dissimilarity between feature sets [N, C] and [M, C].

    ``fy`` is treated as a set (exact duplicate rows collapse, so repeated
    background features cannot split a match). Both sets are centred on the
    mean of ``fy``; d_ij is the cosine distance,
    normalised by each x-feature's nearest distance, turned into affinities
    exp((1 - d~_ij) / h) and softmax-normalised over j. The score is
    -log(mean_i max_j CX_ij).
    """
    fx = torch.as_tensor(fx, dtype=torch.float64)
    fy = torch.unique(torch.as_tensor(fy, dtype=torch.float64), dim=0)
    mu = fy.mean(0, keepdim=True)
    x, y = fx - mu, fy - mu
    if x.norm(dim=1).max() < 1e-12 or y.norm(dim=1).max() < 1e-12:
        raise ValueError("degenerate all-zero features")
    x = x / x.norm(dim=1, keepdim=True).clamp_min(1e-12)
    y = y / y.norm(dim=1, keepdim=True).clamp_min(1e-12)
    d = (1 - x @ y.T).clamp_min(0)
    d_rel = d / (d.min(dim=1, keepdim=True).values + eps)
    cx = torch.softmax((1 - d_rel) / bandwidth, dim=1)
    score = cx.max(dim=1).values.mean()
    return float(-torch.log(score))


def contextual_distance(extractor: FeatureExtractor, x: torch.Tensor, y: torch.Tensor, bandwidth: float = 0.5,
                        layer: int = 2) -> float:
    with torch.no_grad():
        fx, fy = extract_features(extractor, x), extract_features(extractor, y)
    if fx.version != fy.version:
        raise VersionMismatch("mixed extractor versions")
    a, b = fx.features[layer][0], fy.features[layer][0]
    return contextual_from_features(a.flatten(1).T, b.flatten(1).T, bandwidth)


def acc_nway_embeddings(queries: torch.Tensor, candidates: torch.Tensor, n_way: int, trials: int,
                        rng: torch.Generator) -> float:
    """Top-1 accuracy: query i must score its own candidate i above n_way - 1 random others."""
    q = F.normalize(torch.as_tensor(queries, dtype=torch.float64), dim=-1)
    c = F.normalize(torch.as_tensor(candidates, dtype=torch.float64), dim=-1)
    n = len(q)
    if len(c) != n:
        raise ValueError("queries and candidates must pair up one-to-one")
    if not 1 <= n_way <= n:
        raise ValueError(f"n_way must lie in [1, {n}]")
    if n_way == 1:
        return 1.0
    sims = q @ c.T
    hits = 0
    for _ in range(trials):
        i = int(torch.randint(0, n, (1,), generator=rng))
        others = torch.randperm(n - 1, generator=rng)[: n_way - 1]
        others = others + (others >= i).long()
        hits += bool(sims[i, i] > sims[i, others].max())
    return hits / trials


def acc_nway(embedder, codes, images: torch.Tensor, n_way: int, trials: int, rng: torch.Generator) -> float:
    with torch.no_grad():
        return acc_nway_embeddings(embedder.project_eeg(codes), embedder.embed_image(images), n_way, trials, rng)


# --------------------------------------------------------------------------- report

class ViewRow(BaseModel):
    azimuth_deg: float
    perceptual: float = Field(ge=0)
    contextual: float = Field(ge=0)
    acc_3d: float = Field(ge=-1, le=1)


class SelfCheck(BaseModel):
    ssim: float
    fid: float

    @model_validator(mode="after")
    def _identity(self):
        if abs(self.ssim - 1.0) > 1e-9 or abs(self.fid) > 1e-6:
            raise ValueError(f"identity self-check failed: ssim={self.ssim}, fid={self.fid}")
        return self


class MetricReport(BaseModel):
    schema_version: int = 1
    split: str
    n_way: int = Field(ge=1)
    sample_counts: dict[str, int]
    extractor_versions: dict[str, str]
    metrics: dict[str, float]
    per_view: dict[str, list[ViewRow]] = Field(default_factory=dict)
    per_view_mean: dict[str, dict[str, float]] = Field(default_factory=dict)
    self_check: Optional[SelfCheck] = None

    @field_validator("metrics")
    @classmethod
    def _bounds(cls, m: dict[str, float]) -> dict[str, float]:
        for k, v in m.items():
            if not math.isfinite(v):
                raise ValueError(f"{k} is not finite")
        if "ssim" in m and not -1 <= m["ssim"] <= 1:
            raise ValueError("ssim outside [-1, 1]")
        if "fid" in m and m["fid"] < 0:
            raise ValueError("fid < 0")
        if "inception_score" in m and m["inception_score"] < 1 - 1e-9:
            raise ValueError("inception_score < 1")
        if "acc_nway" in m and not 0 <= m["acc_nway"] <= 1:
            raise ValueError("acc_nway outside [0, 1]")
        return m
