"""Color matching: a frozen conv feature extractor with content and Gram-style losses."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .archive import load_checkpoint, load_module, module_tensors, save_checkpoint, tensor_digest
from .common import freeze, generator

CONTENT_LAYERS = {2: 1.0}                 # block 3
STYLE_WEIGHTS = (1.0, 1.0, 1.0, 1.0)      # blocks 1-4


class VersionMismatch(ValueError):
    pass


@dataclass
class FeatureStack:
    features: list[torch.Tensor]  # per block, [B, c, h, w]
    version: str

    def __len__(self) -> int:
        return len(self.features)


def _block(cin: int, cout: int, stride: int) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride=stride, padding=1), nn.SiLU(),
                         nn.Conv2d(cout, cout, 3, padding=1), nn.SiLU())


class FeatureExtractor(nn.Module):
    """Four conv blocks (32, 16, 8, 4 px at 32 px input) plus a classification head for pretraining."""

    def __init__(self, num_classes: int = 4, widths: Sequence[int] = (16, 32, 64, 64)):
        super().__init__()
        self.blocks = nn.ModuleList()
        cin = 3
        for i, w in enumerate(widths):
            self.blocks.append(_block(cin, w, 1 if i == 0 else 2))
            cin = w
        self.head = nn.Linear(cin, num_classes)
        self.version = "untrained"

    def features(self, images: torch.Tensor) -> list[torch.Tensor]:
        h = images * 2 - 1
        out = []
        for blk in self.blocks:
            h = blk(h)
            out.append(h)
        return out

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(images)[-1].mean(dim=(2, 3)))

    def pooled(self, images: torch.Tensor) -> torch.Tensor:
        """Global-average block-4 features, used as the FID embedding."""
        return self.features(images)[-1].mean(dim=(2, 3))

    def stamp(self) -> str:
        self.version = "fx-" + tensor_digest(self.state_dict().values())
        return self.version


def extract_features(extractor: FeatureExtractor, images: torch.Tensor) -> FeatureStack:
    if images.dim() == 3:
        images = images.unsqueeze(0)
    return FeatureStack(extractor.features(images), extractor.version)


def _check(a: FeatureStack, b: FeatureStack) -> None:
    if a.version != b.version:
        raise VersionMismatch(f"feature stacks from different extractors: {a.version} vs {b.version}")
    if len(a) != len(b):
        raise VersionMismatch("feature stacks have different layer counts")


def content_loss(f_o: FeatureStack, f_c: FeatureStack, layers: dict[int, float] = CONTENT_LAYERS) -> torch.Tensor:
    _check(f_o, f_c)
    return sum(w * F.mse_loss(f_o.features[l], f_c.features[l]) for l, w in layers.items())


def gram(feat: torch.Tensor) -> torch.Tensor:
    b, c, h, w = feat.shape
    flat = feat.reshape(b, c, h * w)
    return flat @ flat.transpose(1, 2) / (h * w)


def style_loss(f_o: FeatureStack, f_s: FeatureStack, weights: Sequence[float] = STYLE_WEIGHTS) -> torch.Tensor:
    """Sum over layers of squared Frobenius Gram distance (batch-averaged)."""
    _check(f_o, f_s)
    total = 0.0
    for w, a, b in zip(weights, f_o.features, f_s.features):
        total = total + w * ((gram(a) - gram(b)) ** 2).sum(dim=(1, 2)).mean()
    return total


def color_loss(extractor: FeatureExtractor, render: torch.Tensor, content_ref: torch.Tensor,
               style_ref: torch.Tensor, lam: float = 10.0) -> torch.Tensor:
    """content(render, content_ref) + lam * style(render, style_ref); differentiable in ``render``."""
    if lam < 0:
        raise ValueError("lam must be >= 0")
    f_o = extract_features(extractor, render)
    with torch.no_grad():
        f_c = extract_features(extractor, content_ref)
        f_s = extract_features(extractor, style_ref)
    return content_loss(f_o, f_c) + lam * style_loss(f_o, f_s)


def train_extractor(images: torch.Tensor, labels: torch.Tensor, num_classes: int, *, steps: int = 300,
                    batch_size: int = 32, lr: float = 2e-3, seed: int = 0) -> FeatureExtractor:
    """Pretrain on stimulus classification, then freeze and version-stamp."""
    torch.manual_seed(seed)
    g = generator(seed)
    fx = FeatureExtractor(num_classes)
    opt = torch.optim.Adam(fx.parameters(), lr=lr)
    for _ in range(steps):
        idx = torch.randint(0, len(images), (batch_size,), generator=g)
        loss = F.cross_entropy(fx(images[idx]), labels[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
    freeze(fx)
    fx.stamp()
    return fx


def save_extractor(path: str | Path, fx: FeatureExtractor) -> Path:
    return save_checkpoint(path, module_tensors("extractor", fx), version=fx.version,
                           num_classes=fx.head.out_features, kind="feature_extractor")


def load_extractor(path: str | Path) -> FeatureExtractor:
    tensors, header = load_checkpoint(path)
    fx = FeatureExtractor(header["num_classes"])
    load_module("extractor", fx, tensors)
    freeze(fx)
    if fx.stamp() != header["version"]:
        raise VersionMismatch(f"{path}: weights do not match stamped version {header['version']}")
    return fx
