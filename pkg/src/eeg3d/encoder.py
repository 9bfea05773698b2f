"""Stage A: masked EEG reconstruction + temporal-transformer classification.

A segment ``[channels x timesteps]`` is cut into non-overlapping time patches
spanning all channels (tail samples that do not fill a patch are dropped);
each flattened patch is linearly embedded into a token. The masked
autoencoder reconstructs raw patch values at masked positions. The temporal
transformer reads the encoder's latent tokens behind a learned class token.
Latent tokens and the class token are concatenated per position and passed
through one linear layer to give the EEG code used as conditioning context.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .archive import JsonlLog, load_checkpoint, load_module, module_tensors, save_checkpoint
from .common import NumericalAbort, generator
from .data import EEGSegment, preprocess
from .layers import TransformerBlock, sinusoidal

logger = logging.getLogger(__name__)


@dataclass
class EncoderConfig:
    channels: int = 8
    timesteps: int = 128
    patch_len: int = 8
    token_dim: int = 64
    depth: int = 2
    heads: int = 4
    decoder_dim: int = 32
    decoder_depth: int = 1
    cls_depth: int = 1
    code_dim: int = 128
    num_classes: int = 4
    mlp_ratio: float = 2.0

    @property
    def n_tokens(self) -> int:
        return self.timesteps // self.patch_len

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_len

    def __post_init__(self):
        if not 1 <= self.patch_len <= self.timesteps:
            raise ValueError(f"patch_len {self.patch_len} must lie in [1, timesteps={self.timesteps}]")


@dataclass
class TokenSequence:
    tokens: torch.Tensor   # [n_tokens, token_dim] (or batched [B, n, d])
    patches: torch.Tensor  # raw patch values [n_tokens, channels * patch_len]
    patch_len: int
    source_segment: str | None = None


@dataclass
class MaskPlan:
    masked: torch.Tensor  # bool [n_tokens] or [B, n_tokens]
    ratio: float

    @property
    def n_masked(self) -> int:
        return int(self.masked.sum(-1).flatten()[0])


@dataclass
class LatentEEGCode:
    """Conditioning context ``y``. Tensors carry a leading batch dimension."""

    context: torch.Tensor      # [B, L, D]
    class_token: torch.Tensor  # [B, token_dim]
    logits: torch.Tensor       # [B, num_classes]

    def __getitem__(self, idx) -> "LatentEEGCode":
        if isinstance(idx, int):
            idx = slice(idx, idx + 1)
        return LatentEEGCode(self.context[idx], self.class_token[idx], self.logits[idx])

    def __len__(self) -> int:
        return self.context.shape[0]

    def detach(self) -> "LatentEEGCode":
        return LatentEEGCode(self.context.detach(), self.class_token.detach(), self.logits.detach())

    @staticmethod
    def cat(codes: list["LatentEEGCode"]) -> "LatentEEGCode":
        return LatentEEGCode(torch.cat([c.context for c in codes]), torch.cat([c.class_token for c in codes]),
                             torch.cat([c.logits for c in codes]))


def patchify(x: torch.Tensor, patch_len: int) -> torch.Tensor:
    """[B, C, T] -> [B, floor(T / p), C * p], each row a channel-major [C x p] slice."""
    b, c, t = x.shape
    if not 1 <= patch_len <= t:
        raise ValueError(f"patch_len {patch_len} must lie in [1, timesteps={t}]")
    n = t // patch_len
    x = x[:, :, : n * patch_len].reshape(b, c, n, patch_len)
    return x.permute(0, 2, 1, 3).reshape(b, n, c * patch_len)


def sample_mask(n_tokens: int, ratio: float, rng: torch.Generator, batch: int | None = None) -> MaskPlan:
    """Mask exactly ``round(ratio * n_tokens)`` positions, uniformly without replacement."""
    if not 0 < ratio < 1:
        raise ValueError(f"mask ratio must lie in (0, 1), got {ratio}")
    if n_tokens < 2:
        raise ValueError("need at least 2 tokens to mask")
    k = math.floor(ratio * n_tokens + 0.5)
    if k == 0 or k == n_tokens:
        raise ValueError(f"ratio {ratio} masks {k} of {n_tokens} tokens; need 0 < k < n")
    rows = 1 if batch is None else batch
    scores = torch.rand(rows, n_tokens, generator=rng)
    order = scores.argsort(dim=1)
    masked = torch.zeros(rows, n_tokens, dtype=torch.bool)
    masked.scatter_(1, order[:, :k], True)
    return MaskPlan(masked[0] if batch is None else masked, ratio)


def mae_loss(reconstructed: torch.Tensor, target: torch.Tensor, masked: torch.Tensor | MaskPlan) -> torch.Tensor:
    """Mean squared error over masked positions only."""
    if isinstance(masked, MaskPlan):
        masked = masked.masked
    if reconstructed.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(reconstructed.shape)} vs {tuple(target.shape)}")
    m = masked.to(reconstructed.dtype).unsqueeze(-1)
    sq = (reconstructed - target) ** 2 * m
    return sq.sum() / (m.sum() * reconstructed.shape[-1])


class EEGEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        d, n = cfg.token_dim, cfg.n_tokens
        self.embed = nn.Linear(cfg.patch_dim, d)
        self.register_buffer("pos", sinusoidal(torch.arange(n), d), persistent=False)
        self.blocks = nn.ModuleList(TransformerBlock(d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(d)

        dd = cfg.decoder_dim
        self.dec_embed = nn.Linear(d, dd)
        self.mask_token = nn.Parameter(torch.zeros(dd))
        self.register_buffer("dec_pos", sinusoidal(torch.arange(n), dd), persistent=False)
        self.dec_blocks = nn.ModuleList(TransformerBlock(dd, max(1, cfg.heads // 2), cfg.mlp_ratio)
                                        for _ in range(cfg.decoder_depth))
        self.dec_norm = nn.LayerNorm(dd)
        self.dec_pred = nn.Linear(dd, cfg.patch_dim)

        self.cls_token = nn.Parameter(torch.randn(d) * 0.02)
        self.cls_blocks = nn.ModuleList(TransformerBlock(d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.cls_depth))
        self.cls_norm = nn.LayerNorm(d)
        self.head = nn.Linear(d, cfg.num_classes)

        self.fuse = nn.Linear(2 * d, cfg.code_dim)

    # parameter groups used by gradient-decoupling checks
    def decoder_parameters(self):
        for mod in (self.dec_embed, self.dec_blocks, self.dec_norm, self.dec_pred):
            yield from mod.parameters()
        yield self.mask_token

    def classifier_parameters(self):
        for mod in (self.cls_blocks, self.cls_norm, self.head):
            yield from mod.parameters()
        yield self.cls_token

    def tokenize(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        patches = patchify(x, self.cfg.patch_len)
        return self.embed(patches), patches

    def encode(self, tokens: torch.Tensor, visible: torch.Tensor | None = None) -> torch.Tensor:
        """Encoder over the tokens at ``visible`` indices ([B, n_vis]); all tokens if None."""
        h = tokens + self.pos
        if visible is not None:
            h = torch.gather(h, 1, visible.unsqueeze(-1).expand(-1, -1, h.shape[-1]))
        for blk in self.blocks:
            h = blk(h)
        return self.norm(h)

    def decode(self, latent: torch.Tensor, visible: torch.Tensor) -> torch.Tensor:
        b, n = latent.shape[0], self.cfg.n_tokens
        h = self.mask_token.expand(b, n, -1).clone()
        h = h.scatter(1, visible.unsqueeze(-1).expand(-1, -1, h.shape[-1]), self.dec_embed(latent))
        h = h + self.dec_pos
        for blk in self.dec_blocks:
            h = blk(h)
        return self.dec_pred(self.dec_norm(h))

    def reconstruct(self, tokens: torch.Tensor, masked: torch.Tensor,
                    visible_order: torch.Tensor | None = None) -> torch.Tensor:
        """Predict raw patches at every position from the unmasked tokens only.

        ``visible_order`` optionally reorders the visible index list (per
        batch row); positions travel with their tokens so the result is
        unchanged up to float rounding.
        """
        if masked.shape != tokens.shape[:2]:
            raise ValueError(f"mask shape {tuple(masked.shape)} != token grid {tuple(tokens.shape[:2])}")
        n_vis = int((~masked[0]).sum())
        visible = torch.argsort(masked.to(torch.int8), dim=1, stable=True)[:, :n_vis]
        if visible_order is not None:
            visible = torch.gather(visible, 1, visible_order)
        return self.decode(self.encode(tokens, visible), visible)

    def classify(self, latent: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        b = latent.shape[0]
        h = torch.cat([self.cls_token.expand(b, 1, -1), latent], dim=1)
        for blk in self.cls_blocks:
            h = blk(h)
        cls = self.cls_norm(h[:, 0])
        return self.head(cls), cls

    def fuse_codes(self, latent: torch.Tensor, class_token: torch.Tensor) -> torch.Tensor:
        cls = class_token.unsqueeze(1).expand(-1, latent.shape[1], -1)
        return self.fuse(torch.cat([latent, cls], dim=-1))

    def forward(self, x: torch.Tensor) -> LatentEEGCode:
        tokens, _ = self.tokenize(x)
        latent = self.encode(tokens)
        logits, cls = self.classify(latent)
        return LatentEEGCode(self.fuse_codes(latent, cls), cls, logits)


# --------------------------------------------------------------------------- single-segment API

def _as_batch(segment: EEGSegment) -> torch.Tensor:
    return torch.as_tensor(segment.data, dtype=torch.get_default_dtype()).unsqueeze(0)


def tokenize(model: EEGEncoder, segment: EEGSegment, patch_len: int | None = None) -> TokenSequence:
    p = model.cfg.patch_len if patch_len is None else patch_len
    if p != model.cfg.patch_len:
        raise ValueError(f"model was built for patch_len {model.cfg.patch_len}, got {p}")
    if p > segment.timesteps:
        raise ValueError(f"patch_len {p} exceeds timesteps {segment.timesteps}")
    tokens, patches = model.tokenize(_as_batch(segment))
    return TokenSequence(tokens[0], patches[0], p, segment.segment_id)


def mae_reconstruct(model: EEGEncoder, tokens: TokenSequence, plan: MaskPlan) -> torch.Tensor:
    if plan.masked.shape[-1] != tokens.tokens.shape[-2]:
        raise ValueError("mask plan length does not match token count")
    return model.reconstruct(tokens.tokens.unsqueeze(0), plan.masked.reshape(1, -1))[0]


def classify(model: EEGEncoder, tokens: TokenSequence) -> tuple[torch.Tensor, torch.Tensor]:
    logits, cls = model.classify(model.encode(tokens.tokens.unsqueeze(0)))
    return logits[0], cls[0]


def encode_segments(model: EEGEncoder, x: np.ndarray | torch.Tensor, batch_size: int = 64) -> LatentEEGCode:
    """Frozen-inference helper: EEG codes for a stack of preprocessed segments."""
    x = torch.as_tensor(x, dtype=torch.get_default_dtype())
    was = model.training
    model.eval()
    with torch.no_grad():
        out = LatentEEGCode.cat([model(x[i:i + batch_size]) for i in range(0, len(x), batch_size)])
    model.train(was)
    return out


# --------------------------------------------------------------------------- training

@dataclass
class StageAConfig:
    epochs: int = 5
    batch_size: int = 16
    lr: float = 1e-3
    mask_ratio: float = 0.75
    w_mae: float = 1.0
    w_cls: float = 1.0
    checkpoint_every: int = 0
    normalize: str = "per_channel_z"
    model: EncoderConfig = field(default_factory=EncoderConfig)


def joint_loss(model: EEGEncoder, x: torch.Tensor, y: torch.Tensor, masked: torch.Tensor,
               w_mae: float, w_cls: float) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Returns (total, mae, cross-entropy) for one batch and one mask draw."""
    tokens, patches = model.tokenize(x)
    recon = model.reconstruct(tokens, masked)
    mae = mae_loss(recon, patches, masked)
    logits, _ = model.classify(model.encode(tokens))
    ce = F.cross_entropy(logits, y)
    return w_mae * mae + w_cls * ce, mae, ce


@torch.no_grad()
def evaluate_stage_a(model: EEGEncoder, x: torch.Tensor, y: torch.Tensor, mask_ratio: float,
                     seed: int = 0) -> dict[str, float]:
    was = model.training
    model.eval()
    tokens, patches = model.tokenize(x)
    plan = sample_mask(model.cfg.n_tokens, mask_ratio, generator(seed), batch=len(x))
    recon = model.reconstruct(tokens, plan.masked)
    logits, _ = model.classify(model.encode(tokens))
    model.train(was)
    return {
        "acc": float((logits.argmax(-1) == y).float().mean()),
        "masked_mse": float(mae_loss(recon, patches, plan.masked)),
        "input_var": float(patches.var()),
    }


def fit_stage_a(model: EEGEncoder, x_train: torch.Tensor, y_train: torch.Tensor, cfg: StageAConfig, *,
                seed: int = 0, x_val: torch.Tensor | None = None, y_val: torch.Tensor | None = None,
                log: JsonlLog | None = None, on_checkpoint: Callable[[int], None] | None = None,
                ) -> list[dict[str, float]]:
    """Adam on ``w_mae * mae_loss + w_cls * cross_entropy``. Returns per-epoch summaries."""
    torch.manual_seed(seed)
    g = generator(seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    log = log if log is not None else JsonlLog()
    history = []
    step = 0
    n = len(x_train)
    model.train()
    for epoch in range(1, cfg.epochs + 1):
        perm = torch.randperm(n, generator=g)
        sums = {"mae_loss": 0.0, "cls_loss": 0.0}
        batches = 0
        for i in range(0, n, cfg.batch_size):
            idx = perm[i:i + cfg.batch_size]
            plan = sample_mask(model.cfg.n_tokens, cfg.mask_ratio, g, batch=len(idx))
            total, mae, ce = joint_loss(model, x_train[idx], y_train[idx], plan.masked, cfg.w_mae, cfg.w_cls)
            if not torch.isfinite(total):
                raise NumericalAbort("stage A loss diverged", step=step, mae=mae.item(), ce=ce.item())
            opt.zero_grad()
            total.backward()
            opt.step()
            step += 1
            log.write({"step": step, "mae_loss": mae.item(), "cls_loss": ce.item(),
                       "total": total.item(), "lr": cfg.lr})
            sums["mae_loss"] += mae.item()
            sums["cls_loss"] += ce.item()
            batches += 1
            if on_checkpoint is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                on_checkpoint(step)
        summary = {"epoch": epoch, "step": step, **{k: v / batches for k, v in sums.items()}}
        if x_val is not None and y_val is not None:
            ev = evaluate_stage_a(model, x_val, y_val, cfg.mask_ratio, seed=seed)
            summary.update({f"val_{k}": v for k, v in ev.items()})
        history.append(summary)
        log_msg = ", ".join(f"{k}={v:.4g}" for k, v in summary.items() if isinstance(v, float))
        logger.info("stage A epoch %d: %s", epoch, log_msg)
    return history


def load_split_arrays(manifest, split: str, normalize: str = "per_channel_z") -> tuple[np.ndarray, np.ndarray, list[str]]:
    from .data import read_segment

    ids = manifest.split[split]
    segs = [preprocess(read_segment(manifest, sid), normalize) for sid in ids]
    x = np.stack([s.data for s in segs]) if segs else np.zeros((0, manifest.channels, manifest.timesteps), np.float32)
    y = np.asarray([s.label for s in segs], dtype=np.int64)
    return x, y, ids


def train_stage_a(manifest, cfg: StageAConfig, *, seed: int = 0, checkpoint_path: str | Path | None = None,
                  log_path: str | Path | None = None) -> tuple[EEGEncoder, JsonlLog, list[dict[str, float]]]:
    """Train the Stage-A encoder on a manifest's train split, validating on val."""
    mcfg = cfg.model
    mcfg.channels, mcfg.timesteps, mcfg.num_classes = manifest.channels, manifest.timesteps, manifest.num_classes
    xt, yt, _ = load_split_arrays(manifest, "train", cfg.normalize)
    xv, yv, _ = load_split_arrays(manifest, "val", cfg.normalize)
    torch.manual_seed(seed)
    model = EEGEncoder(mcfg)
    log = JsonlLog(log_path)

    def _save(step: int) -> None:
        if checkpoint_path is not None:
            save_encoder(checkpoint_path, model, cfg, step=step)

    history = fit_stage_a(model, torch.from_numpy(xt), torch.from_numpy(yt), cfg, seed=seed,
                          x_val=torch.from_numpy(xv) if len(xv) else None,
                          y_val=torch.from_numpy(yv) if len(yv) else None,
                          log=log, on_checkpoint=_save)
    _save(log.records[-1]["step"] if log.records else 0)
    return model, log, history


def stage_a_config_dict(cfg: StageAConfig) -> dict[str, Any]:
    return asdict(cfg)


def save_encoder(path: str | Path, model: EEGEncoder, cfg: StageAConfig | None = None, step: int = 0) -> Path:
    return save_checkpoint(path, module_tensors("encoder", model),
                           config=stage_a_config_dict(cfg) if cfg else None,
                           step=step, model=asdict(model.cfg), kind="eeg_encoder")


def load_encoder(path: str | Path) -> tuple[EEGEncoder, dict[str, Any]]:
    tensors, header = load_checkpoint(path)
    model = EEGEncoder(EncoderConfig(**header["model"]))
    load_module("encoder", model, tensors)
    model.eval()
    return model, header
