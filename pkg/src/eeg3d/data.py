"""Paired EEG / stimulus-image datasets.

On-disk layout (one directory per dataset)::

    manifest.json
    segments/<segment_id>.f32      little-endian float32, row-major [channels x timesteps]
    images/<image_id>.png          8-bit RGB
    images/<image_id>.seg.png      optional 8-bit class-index map

``manifest.json`` holds exactly ``schema_version, num_classes, channels,
timesteps, segments, images, splits``.
"""

from __future__ import annotations

import colorsys
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterator, Literal

import numpy as np
from PIL import Image

BANDS = ("band_14_70", "band_5_95", "band_55_95", "synthetic")
SPLITS = ("train", "val", "test")
MANIFEST_KEYS = {"schema_version", "num_classes", "channels", "timesteps", "segments", "images", "splits"}
SEGMENT_KEYS = {"segment_id", "subject_id", "label", "band", "image_id"}
IMAGE_KEYS = {"image_id", "category", "file"}

SHAPES = ("circle", "square", "triangle", "diamond")
BACKGROUND = 1.0


class DatasetError(Exception):
    """The dataset cannot be loaded at all (missing or unreadable manifest)."""


class ValidationError(DatasetError):
    """The dataset is readable but violates an invariant."""

    def __init__(self, message: str, segment_id: str | None = None):
        if segment_id is not None:
            message = f"segment {segment_id!r}: {message}"
        super().__init__(message)
        self.segment_id = segment_id


@dataclass(frozen=True, eq=False)
class EEGSegment:
    data: np.ndarray
    subject_id: int
    label: int
    band: str
    segment_id: str
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.data.ndim != 2 or min(self.data.shape) < 1:
            raise ValidationError(f"data must be a nonempty [channels x timesteps] matrix, got {self.data.shape}",
                                  self.segment_id)
        if not np.all(np.isfinite(self.data)):
            raise ValidationError("non-finite values", self.segment_id)
        if self.band not in BANDS:
            raise ValidationError(f"unknown band {self.band!r}", self.segment_id)
        if self.subject_id < 0 or self.label < 0:
            raise ValidationError("subject_id and label must be >= 0", self.segment_id)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def timesteps(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True, eq=False)
class StimulusImage:
    pixels: np.ndarray  # [H, W, 3] float32 in [0, 1]
    category: int
    image_id: str
    segmentation: np.ndarray | None = None  # [H, W] integer class map

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValidationError(f"image {self.image_id!r}: expected [H, W, 3], got {self.pixels.shape}")
        if self.pixels.min() < 0 or self.pixels.max() > 1:
            raise ValidationError(f"image {self.image_id!r}: pixels outside [0, 1]")
        if self.segmentation is not None and self.segmentation.shape != self.pixels.shape[:2]:
            raise ValidationError(f"image {self.image_id!r}: segmentation shape {self.segmentation.shape} "
                                  f"!= image shape {self.pixels.shape[:2]}")


@dataclass
class DatasetManifest:
    num_classes: int
    channels: int
    timesteps: int
    segments: list[dict[str, Any]]
    images: list[dict[str, Any]]
    split: dict[str, list[str]]
    root: Path | None = None
    class_names: list[str] | None = None

    @property
    def num_segments(self) -> int:
        return len(self.segments)

    @property
    def pairing(self) -> dict[str, str]:
        return {s["segment_id"]: s["image_id"] for s in self.segments}

    def segment_record(self, segment_id: str) -> dict[str, Any]:
        for s in self.segments:
            if s["segment_id"] == segment_id:
                return s
        raise KeyError(segment_id)

    def image_record(self, image_id: str) -> dict[str, Any]:
        for im in self.images:
            if im["image_id"] == image_id:
                return im
        raise KeyError(image_id)

    def split_images(self, name: str) -> list[str]:
        pairing = self.pairing
        return sorted({pairing[s] for s in self.split[name]})

    def class_name(self, k: int) -> str:
        if self.class_names is not None:
            return self.class_names[k]
        return f"class_{k}"

    def to_json(self) -> dict[str, Any]:
        return {
            "schema_version": 1,
            "num_classes": self.num_classes,
            "channels": self.channels,
            "timesteps": self.timesteps,
            "segments": self.segments,
            "images": self.images,
            "splits": {k: list(self.split[k]) for k in SPLITS},
        }

    def validate(self) -> None:
        if self.num_classes < 1:
            raise ValidationError(f"num_classes must be >= 1, got {self.num_classes}")
        if self.channels < 1 or self.timesteps < 1:
            raise ValidationError("channels and timesteps must be >= 1")
        image_ids = [im["image_id"] for im in self.images]
        if len(set(image_ids)) != len(image_ids):
            raise ValidationError("duplicated image_id in manifest")
        known_images = set(image_ids)
        seen: set[str] = set()
        for s in self.segments:
            sid = s["segment_id"]
            if set(s) != SEGMENT_KEYS:
                raise ValidationError(f"segment fields {sorted(s)} != {sorted(SEGMENT_KEYS)}", sid)
            if sid in seen:
                raise ValidationError("duplicated segment_id", sid)
            seen.add(sid)
            if not 0 <= s["label"] < self.num_classes:
                raise ValidationError(f"label {s['label']} outside [0, {self.num_classes})", sid)
            if s["band"] not in BANDS:
                raise ValidationError(f"unknown band {s['band']!r}", sid)
            if s["image_id"] not in known_images:
                raise ValidationError(f"references unknown image {s['image_id']!r}", sid)
        for im in self.images:
            if set(im) != IMAGE_KEYS:
                raise ValidationError(f"image fields {sorted(im)} != {sorted(IMAGE_KEYS)}")
            if not 0 <= im["category"] < self.num_classes:
                raise ValidationError(f"image {im['image_id']!r}: category outside range")
        if set(self.split) != set(SPLITS):
            raise ValidationError(f"splits must be exactly {SPLITS}")
        covered: list[str] = [sid for k in SPLITS for sid in self.split[k]]
        if len(covered) != len(set(covered)):
            raise ValidationError("splits are not disjoint")
        if set(covered) != seen:
            missing = sorted(seen - set(covered))[:3]
            raise ValidationError(f"splits do not cover all segments (e.g. {missing})")


# --------------------------------------------------------------------------- loading

def _read_manifest(root: Path) -> DatasetManifest:
    path = root / "manifest.json"
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} is not a directory")
    if not path.is_file():
        raise DatasetError(f"no manifest.json under {root}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise DatasetError(f"{path}: {e}") from e
    if not isinstance(raw, dict) or set(raw) != MANIFEST_KEYS:
        got = sorted(raw) if isinstance(raw, dict) else type(raw).__name__
        raise ValidationError(f"manifest fields {got} != {sorted(MANIFEST_KEYS)}")
    if raw["schema_version"] != 1:
        raise ValidationError(f"unsupported schema_version {raw['schema_version']}")
    manifest = DatasetManifest(
        num_classes=int(raw["num_classes"]),
        channels=int(raw["channels"]),
        timesteps=int(raw["timesteps"]),
        segments=list(raw["segments"]),
        images=list(raw["images"]),
        split={k: list(v) for k, v in raw["splits"].items()},
        root=root,
    )
    names_file = root / "class_names.json"
    if names_file.is_file():
        manifest.class_names = json.loads(names_file.read_text())
    manifest.validate()
    return manifest


def _segment_path(root: Path, segment_id: str) -> Path:
    return root / "segments" / f"{segment_id}.f32"


def _check_records(manifest: DatasetManifest) -> None:
    expected = 4 * manifest.channels * manifest.timesteps
    for s in manifest.segments:
        p = _segment_path(manifest.root, s["segment_id"])
        if not p.is_file():
            raise ValidationError(f"missing record {p.name}", s["segment_id"])
        size = p.stat().st_size
        if size != expected:
            raise ValidationError(
                f"record holds {size // 4} values, manifest expects "
                f"{manifest.channels} x {manifest.timesteps} = {expected // 4}", s["segment_id"])


def read_segment(manifest: DatasetManifest, segment_id: str) -> EEGSegment:
    rec = manifest.segment_record(segment_id)
    p = _segment_path(manifest.root, segment_id)
    raw = np.fromfile(p, dtype="<f4")
    if raw.size != manifest.channels * manifest.timesteps:
        raise ValidationError(f"record holds {raw.size} values, expected "
                              f"{manifest.channels * manifest.timesteps}", segment_id)
    data = raw.reshape(manifest.channels, manifest.timesteps).astype(np.float32)
    return EEGSegment(data=data, subject_id=int(rec["subject_id"]), label=int(rec["label"]),
                      band=rec["band"], segment_id=segment_id)


def read_image(manifest: DatasetManifest, image_id: str) -> StimulusImage:
    rec = manifest.image_record(image_id)
    path = manifest.root / rec["file"]
    if not path.is_file():
        raise ValidationError(f"image {image_id!r}: missing file {rec['file']}")
    pixels = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    seg_path = path.with_name(path.stem + ".seg.png")
    seg = np.asarray(Image.open(seg_path), dtype=np.int64) if seg_path.is_file() else None
    return StimulusImage(pixels=pixels, category=int(rec["category"]), image_id=image_id, segmentation=seg)


def iter_segments(manifest: DatasetManifest, ids: list[str] | None = None) -> Iterator[EEGSegment]:
    for sid in ids if ids is not None else [s["segment_id"] for s in manifest.segments]:
        yield read_segment(manifest, sid)


def load_dataset(root: str | Path, *, band: str | None = None,
                 expected_channels: int | None = None) -> tuple[DatasetManifest, Iterator[EEGSegment]]:
    """Load any dataset in the shared container format.

    Every record is size-checked before the iterator is returned, so a corrupt
    tree fails here rather than half-way through iteration.
    """
    manifest = _read_manifest(Path(root))
    if expected_channels is not None and manifest.channels != expected_channels:
        raise ValidationError(f"layout requires {expected_channels} channels, manifest declares {manifest.channels}")
    _check_records(manifest)
    ids = None
    if band is not None:
        if band not in BANDS:
            raise ValueError(f"unknown band {band!r}")
        ids = [s["segment_id"] for s in manifest.segments if s["band"] == band]
    return manifest, iter_segments(manifest, ids)


def load_eeg_imagenet(root: str | Path, band: str = "band_5_95") -> tuple[DatasetManifest, Iterator[EEGSegment]]:
    """EEG-ImageNet layout: 128-channel recordings tagged with one of three bands."""
    return load_dataset(root, band=band, expected_channels=128)


def load_things_eeg2(root: str | Path) -> tuple[DatasetManifest, Iterator[EEGSegment]]:
    """Things-EEG2 layout; channel and timestep counts come from the manifest."""
    return load_dataset(root)


def write_dataset(root: str | Path, manifest: DatasetManifest, segments: list[EEGSegment],
                  images: list[StimulusImage]) -> Path:
    root = Path(root)
    (root / "segments").mkdir(parents=True, exist_ok=True)
    (root / "images").mkdir(parents=True, exist_ok=True)
    for seg in segments:
        seg.data.astype("<f4").tofile(_segment_path(root, seg.segment_id))
    for im in images:
        rec = manifest.image_record(im.image_id)
        path = root / rec["file"]
        Image.fromarray(np.round(im.pixels * 255).astype(np.uint8), "RGB").save(path)
        if im.segmentation is not None:
            Image.fromarray(im.segmentation.astype(np.uint8), "L").save(path.with_name(path.stem + ".seg.png"))
    (root / "manifest.json").write_text(json.dumps(manifest.to_json(), indent=1, sort_keys=True) + "\n")
    if manifest.class_names is not None:
        (root / "class_names.json").write_text(json.dumps(manifest.class_names) + "\n")
    manifest.root = root
    return root


# --------------------------------------------------------------------------- synthetic

def class_color(k: int, num_classes: int) -> np.ndarray:
    rgb = colorsys.hsv_to_rgb(k / num_classes, 0.85, 0.85)
    return np.round(np.asarray(rgb) * 255) / 255


def _shape_mask(kind: str, size: int, cx: float, cy: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dx, dy = xx - cx, yy - cy
    if kind == "circle":
        return dx ** 2 + dy ** 2 <= r ** 2
    if kind == "square":
        return (np.abs(dx) <= 0.85 * r) & (np.abs(dy) <= 0.85 * r)
    if kind == "diamond":
        return np.abs(dx) + np.abs(dy) <= 1.2 * r
    # upward triangle, apex at top
    top, bottom = cy - r, cy + 0.8 * r
    frac = (yy - top) / (bottom - top)
    return (frac >= 0) & (frac <= 1) & (np.abs(dx) <= frac * 1.05 * r)


def render_stimulus(category: int, num_classes: int, size: int, *, dx: float = 0.0, dy: float = 0.0,
                    scale: float = 1.0, color: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Class-specific colored shape on a white background, plus its exact mask."""
    kind = SHAPES[category % len(SHAPES)]
    mask = _shape_mask(kind, size, size / 2 + dx * size, size / 2 + dy * size, 0.3 * size * scale)
    rgb = class_color(category, num_classes) if color is None else np.asarray(color)
    pixels = np.full((size, size, 3), BACKGROUND, dtype=np.float32)
    pixels[mask] = rgb
    return pixels, mask.astype(np.int64)


def _eeg_signature(rng: np.random.Generator, num_classes: int, channels: int, timesteps: int):
    nyquist = timesteps // 2
    width = max(1, (nyquist - 2) // num_classes)
    sigs = []
    for k in range(num_classes):
        lo = 2 + (k * width) % max(1, nyquist - 2 - width + 1)
        freqs = np.linspace(lo, lo + width - 1, num=min(3, width))
        gains = rng.uniform(0.5, 1.5, size=(channels, len(freqs)))
        phases = rng.uniform(0, 2 * np.pi, size=(channels, len(freqs)))
        sigs.append((freqs, gains, phases))
    return sigs


def _split_indices(rng: np.random.Generator, n: int, fracs: tuple[float, float, float]) -> list[str]:
    n_val = max(1, round(n * fracs[1])) if n >= 2 else 0
    n_test = max(1, round(n * fracs[2])) if n >= 3 else 0
    order = rng.permutation(n)
    names = ["train"] * n
    for i in order[:n_val]:
        names[i] = "val"
    for i in order[n_val:n_val + n_test]:
        names[i] = "test"
    return names


def generate_synthetic_dataset(num_classes: int, segments_per_class: int, channels: int, timesteps: int,
                               image_size: int, seed: int, *, noise: float = 0.5, phase_jitter: float = 0.3, n_subjects: int = 2,
                               split_fracs: tuple[float, float, float] = (0.6, 0.2, 0.2),
                               ) -> tuple[DatasetManifest, list[EEGSegment], list[StimulusImage]]:
    """Deterministic desk-scale stand-in for a paired EEG/image dataset.

    Class k gets a sinusoid bank in its own frequency band (per-channel gains
    and phases fixed per class, phases jittered per segment) plus white noise, and a
    stimulus showing a class-colored shape with small per-segment jitter.
    """
    if min(num_classes, segments_per_class, channels, timesteps) < 1:
        raise ValueError("all counts must be >= 1")
    if image_size < 16:
        raise ValueError("image_size must be >= 16")
    rng = np.random.default_rng(seed)
    sigs = _eeg_signature(rng, num_classes, channels, timesteps)
    t = np.arange(timesteps) / timesteps
    seg_recs, img_recs, segments, images = [], [], [], []
    split: dict[str, list[str]] = {k: [] for k in SPLITS}
    for k in range(num_classes):
        freqs, gains, phases = sigs[k]
        names = _split_indices(rng, segments_per_class, split_fracs)
        for j in range(segments_per_class):
            sid = f"syn_c{k:03d}_{j:04d}"
            iid = f"img_c{k:03d}_{j:04d}"
            phase = phases + phase_jitter * rng.standard_normal(phases.shape)
            wave = np.sin(2 * np.pi * freqs[None, :, None] * t[None, None, :] + phase[:, :, None])
            x = (gains[:, :, None] * wave).sum(axis=1) + noise * rng.standard_normal((channels, timesteps))
            data = (10.0 * x).astype(np.float32)
            segments.append(EEGSegment(data=data, subject_id=j % n_subjects, label=k,
                                       band="synthetic", segment_id=sid))
            jx, jy = rng.uniform(-0.06, 0.06, size=2)
            sc = rng.uniform(0.9, 1.1)
            pixels, mask = render_stimulus(k, num_classes, image_size, dx=jx, dy=jy, scale=sc)
            images.append(StimulusImage(pixels=pixels, category=k, image_id=iid, segmentation=mask))
            seg_recs.append({"segment_id": sid, "subject_id": j % n_subjects, "label": k,
                             "band": "synthetic", "image_id": iid})
            img_recs.append({"image_id": iid, "category": k, "file": f"images/{iid}.png"})
            split[names[j]].append(sid)
    manifest = DatasetManifest(num_classes=num_classes, channels=channels, timesteps=timesteps,
                               segments=seg_recs, images=img_recs, split=split,
                               class_names=[f"{SHAPES[k % len(SHAPES)]}_{k}" for k in range(num_classes)])
    manifest.validate()
    return manifest, segments, images


# --------------------------------------------------------------------------- preprocessing

Normalize = Literal["per_channel_z", "global_z", "none"]


def preprocess(segment: EEGSegment, normalize: Normalize = "per_channel_z",
               crop: tuple[int, int] | None = None) -> EEGSegment:
    x = segment.data.astype(np.float64)
    if crop is not None:
        start, length = crop
        if start < 0 or length < 1 or start + length > x.shape[1]:
            raise ValueError(f"crop {crop} outside [0, {x.shape[1]})")
        x = x[:, start:start + length]
    meta = dict(segment.meta)
    if normalize == "per_channel_z":
        mu = x.mean(axis=1, keepdims=True)
        sd = x.std(axis=1, keepdims=True)
        flat = sd[:, 0] == 0
        sd[flat] = 1.0
        x = (x - mu) / sd
        meta["zero_variance"] = flat.tolist()
    elif normalize == "global_z":
        sd = x.std()
        flat = sd == 0
        x = (x - x.mean()) / (1.0 if flat else sd)
        meta["zero_variance"] = [bool(flat)] * x.shape[0]
    elif normalize != "none":
        raise ValueError(f"unknown normalization {normalize!r}")
    if normalize == "none" and crop is None:
        return segment
    return replace(segment, data=x.astype(np.float32), meta=meta)


def stack_segments(segments: list[EEGSegment]) -> np.ndarray:
    return np.stack([s.data for s in segments]).astype(np.float32)


def image_to_tensor_layout(pixels: np.ndarray) -> np.ndarray:
    """[H, W, 3] -> [3, H, W]."""
    return np.ascontiguousarray(pixels.transpose(2, 0, 1))


def oracle_classify(pixels: np.ndarray, num_classes: int, threshold: float = 0.1) -> int:
    """Label of a synthetic-style image: nearest class color to the mean foreground color.

    ``pixels`` is [H, W, 3] or [3, H, W]; returns -1 if nothing is foreground.
    """
    x = np.asarray(pixels, dtype=np.float64)
    if x.shape[0] == 3 and x.shape[-1] != 3:
        x = x.transpose(1, 2, 0)
    fg = np.abs(1.0 - x).max(axis=-1) > threshold
    if not fg.any():
        return -1
    mean = x[fg].mean(axis=0)
    palette = np.stack([class_color(k, num_classes) for k in range(num_classes)])
    return int(np.argmin(((palette - mean) ** 2).sum(axis=1)))
