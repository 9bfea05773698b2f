"""Stage orchestration over a run directory.

Layout of a run directory::

    config.snapshot.toml      effective config of the latest command
    data/                     synthetic dataset (unless dataset.path is set)
    checkpoints/*.safetensors
    logs/*.jsonl
    renders/2d/, renders/3d/<tag>/
    reports/*.json            stage reports, run records, metric reports

Every command takes the run lock, so two writers can never share a run.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

import numpy as np
import torch
from filelock import FileLock, Timeout
from PIL import Image
from pydantic import BaseModel

from . import __version__
from .archive import CheckpointError, JsonlLog, read_jsonl, tensor_digest, write_json
from .common import generator, set_deterministic
from .config import PipelineConfig, dumps
from .data import (DatasetError, DatasetManifest, generate_synthetic_dataset, load_dataset, oracle_classify,
                   preprocess, read_image, read_segment, write_dataset)
from .diffusion import (DiffusionBundle, Denoiser, OracleSegmenter, finetune_ldm, load_diffusion, make_schedule,
                        psnr, sample, save_diffusion, train_autoencoder, train_segmenter)
from .distill import (Embedder, histogram_l1, load_embedder, run_stage_b, save_embedder, save_field,
                      retrieval_top1, train_embedder)
from .encoder import EEGEncoder, encode_segments, load_encoder, train_stage_a
from .metrics import (MetricReport, SelfCheck, ViewRow, acc_nway, contextual_distance, fid, inception_score,
                      perceptual_distance, ssim)
from .render import VIEW_AZIMUTHS
from .style import FeatureExtractor, load_extractor, save_extractor, train_extractor

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERICAL = 0, 2, 3, 4


class StageError(Exception):
    exit_code = EXIT_CONFIG


class PreconditionError(StageError):
    """Invalid configuration or a missing upstream stage."""


class MissingArtifact(StageError):
    """Unknown segment id or missing render set."""

    exit_code = EXIT_MISSING


class RunRecord(BaseModel):
    run_id: str
    stage: str
    command: list[str]
    version: str
    seed: int
    config_snapshot: str
    checkpoints: dict[str, str] = {}
    logs: list[str] = []
    reports: list[str] = []
    outputs: list[str] = []


@dataclass
class Run:
    root: Path
    cfg: PipelineConfig

    @property
    def seed(self) -> int:
        return self.cfg.seed

    def sub(self, *parts: str) -> Path:
        return self.root.joinpath(*parts)

    def ckpt(self, name: str) -> Path:
        return self.sub("checkpoints", f"{name}.safetensors")

    def log_path(self, name: str) -> Path:
        return self.sub("logs", f"{name}.jsonl")

    def report(self, name: str) -> Path:
        return self.sub("reports", f"{name}.json")

    def rel(self, p: Path) -> str:
        return p.relative_to(self.root).as_posix()

    def lock(self) -> FileLock:
        self.root.mkdir(parents=True, exist_ok=True)
        return FileLock(str(self.sub(".lock")), timeout=0)

    def record(self, stage: str, command: list[str], **paths: Any) -> RunRecord:
        conv = {k: ({n: self.rel(p) for n, p in v.items()} if isinstance(v, dict) else [self.rel(p) for p in v])
                for k, v in paths.items()}
        rec = RunRecord(run_id=self.root.name, stage=stage, command=command, version=f"eeg3d {__version__}",
                        seed=self.seed, config_snapshot=dumps(self.cfg), **conv)
        write_json(self.report(f"{stage}.record"), rec.model_dump())
        return rec


def open_run(root: str | Path, cfg: PipelineConfig) -> Run:
    run = Run(Path(root), cfg)
    run.root.mkdir(parents=True, exist_ok=True)
    return run


def locked(fn):
    """Run a stage under the run-directory lock, with deterministic torch state."""

    def wrapper(run: Run, *args, **kw):
        try:
            with run.lock():
                set_deterministic(1)
                torch.manual_seed(run.seed)
                run.sub("config.snapshot.toml").write_text(dumps(run.cfg))
                return fn(run, *args, **kw)
        except Timeout:
            raise PreconditionError(f"run directory {run.root} is locked by another command") from None

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


# --------------------------------------------------------------------------- data access

def dataset_root(run: Run) -> Path:
    return Path(run.cfg.dataset.path) if run.cfg.dataset.path else run.sub("data")


def open_dataset(run: Run) -> DatasetManifest:
    root = dataset_root(run)
    try:
        manifest, _ = load_dataset(root, band=run.cfg.dataset.band)
    except DatasetError as e:
        raise PreconditionError(f"dataset unavailable at {root}: {e}") from None
    return manifest


@dataclass
class SplitData:
    ids: list[str]
    eeg: torch.Tensor      # [N, C, T]
    labels: torch.Tensor   # [N]
    images: torch.Tensor   # [N, 3, H, W]
    masks: torch.Tensor    # [N, H, W]


def _image_tensor(manifest: DatasetManifest, image_id: str, size: int) -> tuple[np.ndarray, np.ndarray]:
    im = read_image(manifest, image_id)
    pix = im.pixels
    if pix.shape[0] != size or pix.shape[1] != size:
        pix = np.asarray(Image.fromarray(np.round(pix * 255).astype(np.uint8)).resize((size, size), Image.BILINEAR),
                         dtype=np.float32) / 255.0
    img = np.ascontiguousarray(pix.transpose(2, 0, 1))
    if im.segmentation is not None and im.segmentation.shape == (size, size):
        mask = im.segmentation.astype(np.int64)
    else:
        mask = OracleSegmenter().labels(torch.from_numpy(img)[None])[0].numpy()
    return img, mask


def split_data(run: Run, manifest: DatasetManifest, split: str, ids: Optional[list[str]] = None) -> SplitData:
    ids = list(manifest.split[split]) if ids is None else ids
    size = run.cfg.dataset.synthetic.image_size
    pairing = manifest.pairing
    xs, ys, ims, ms = [], [], [], []
    for sid in ids:
        seg = preprocess(read_segment(manifest, sid), run.cfg.stage_a.normalize)
        xs.append(seg.data)
        ys.append(seg.label)
        img, mask = _image_tensor(manifest, pairing[sid], size)
        ims.append(img)
        ms.append(mask)
    c, t = manifest.channels, manifest.timesteps
    return SplitData(ids,
                     torch.from_numpy(np.stack(xs)) if xs else torch.zeros(0, c, t),
                     torch.tensor(ys, dtype=torch.long),
                     torch.from_numpy(np.stack(ims)) if ims else torch.zeros(0, 3, size, size),
                     torch.from_numpy(np.stack(ms)) if ms else torch.zeros(0, size, size, dtype=torch.long))


def _require(run: Run, *names: str) -> None:
    missing = [n for n in names if not run.ckpt(n).is_file()]
    if missing:
        raise PreconditionError(f"missing upstream checkpoint(s): {', '.join(missing)} in {run.sub('checkpoints')}")


def _load_encoder(run: Run) -> EEGEncoder:
    _require(run, "stage_a")
    try:
        enc, _ = load_encoder(run.ckpt("stage_a"))
    except CheckpointError as e:
        raise PreconditionError(str(e)) from None
    return enc


def _save_png(path: Path, image: torch.Tensor) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = (image.detach().clamp(0, 1).permute(1, 2, 0).numpy() * 255).round().astype(np.uint8)
    Image.fromarray(arr, "RGB").save(path)
    return path


def _load_png(path: Path) -> torch.Tensor:
    return torch.from_numpy(np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0).permute(2, 0, 1)


def _segment_index(manifest: DatasetManifest, segment_id: str) -> tuple[str, int]:
    try:
        rec = manifest.segment_record(segment_id)
    except KeyError:
        raise MissingArtifact(f"unknown segment id {segment_id!r}") from None
    for split, ids in manifest.split.items():
        if segment_id in ids:
            return split, int(rec["label"])
    raise MissingArtifact(f"segment {segment_id!r} is not in any split")


# --------------------------------------------------------------------------- stages

@locked
def cmd_gen_data(run: Run) -> RunRecord:
    s = run.cfg.dataset.synthetic
    manifest, segments, images = generate_synthetic_dataset(
        s.num_classes, s.segments_per_class, s.channels, s.timesteps, s.image_size, run.seed,
        noise=s.noise, phase_jitter=s.phase_jitter, n_subjects=s.n_subjects)
    root = write_dataset(dataset_root(run), manifest, segments, images)
    logger.info("wrote %d segments / %d images to %s", len(segments), len(images), root)
    out = [root / "manifest.json"] if root.is_relative_to(run.root) else []
    return run.record("gen_data", ["gen-data"], outputs=out)


@locked
def cmd_train_stage_a(run: Run) -> RunRecord:
    manifest = open_dataset(run)
    cfg = run.cfg.stage_a_config()
    _, log, history = train_stage_a(manifest, cfg, seed=run.seed, checkpoint_path=run.ckpt("stage_a"),
                                    log_path=run.log_path("stage_a"))
    write_json(run.report("stage_a"), {"epochs": history, "steps": len(log.records)})
    return run.record("train_stage_a", ["train-stage-a"], checkpoints={"stage_a": run.ckpt("stage_a")},
                      logs=[run.log_path("stage_a")], reports=[run.report("stage_a")])


def conditioning_accuracy(bundle: DiffusionBundle, encoder: EEGEncoder, data: SplitData, num_classes: int,
                          seed: int, guidance: float | None) -> float:
    code = encode_segments(encoder, data.eeg)
    out = sample(bundle.denoiser, bundle.ae, bundle.schedule, code, bundle.cfg.sample_steps, generator(seed),
                 guidance)
    pred = np.array([oracle_classify(o.numpy(), num_classes) for o in out])
    return float(np.mean(pred == data.labels.numpy()))


@locked
def cmd_finetune_ldm(run: Run) -> RunRecord:
    encoder = _load_encoder(run)
    manifest = open_dataset(run)
    cfg = run.cfg.ldm_config()
    train, val = split_data(run, manifest, "train"), split_data(run, manifest, "val")
    ae = train_autoencoder(train.images, cfg.ae, steps=cfg.ae_steps, lr=cfg.ae_lr,
                           seed=run.seed, log=JsonlLog(run.log_path("autoencoder")))
    segmenter = None
    if cfg.region_enabled:
        segmenter = train_segmenter(train.images, train.masks, steps=cfg.segmenter_steps, seed=run.seed)
    denoiser = Denoiser(cfg.denoiser)
    epochs: list[dict[str, float]] = []
    finetune_ldm(denoiser, encoder, ae, segmenter, train.eeg, train.images, cfg, seed=run.seed,
                 log=JsonlLog(run.log_path("ldm")), epoch_log=epochs)
    bundle = DiffusionBundle(ae, denoiser, make_schedule(cfg.T, cfg.beta_start, cfg.beta_end), segmenter, cfg)
    save_diffusion(run.ckpt("ldm"), bundle, step=len(epochs))
    with torch.no_grad():
        val_psnr = psnr(ae.decode(ae.encode(val.images)), val.images) if len(val.ids) else float("nan")
    report = {"epochs": epochs, "ae_val_psnr": val_psnr, "lambda_ldm": cfg.lambda_ldm,
              "lambda_region": cfg.lambda_region,
              "val_conditioning_acc": conditioning_accuracy(bundle, encoder, val, manifest.num_classes, run.seed,
                                                            cfg.guidance) if len(val.ids) else None}
    write_json(run.report("ldm"), report)
    return run.record("finetune_ldm", ["finetune-ldm"], checkpoints={"ldm": run.ckpt("ldm")},
                      logs=[run.log_path("autoencoder"), run.log_path("ldm")], reports=[run.report("ldm")])


def _class_names(manifest: DatasetManifest) -> list[str]:
    return [manifest.class_name(k) for k in range(manifest.num_classes)]


@locked
def cmd_train_embedder(run: Run) -> RunRecord:
    encoder = _load_encoder(run)
    manifest = open_dataset(run)
    train, val = split_data(run, manifest, "train"), split_data(run, manifest, "val")
    s = run.cfg.embedder
    fx = train_extractor(train.images, train.labels, manifest.num_classes, steps=s.extractor_steps, seed=run.seed)
    save_extractor(run.ckpt("extractor"), fx)
    codes = encode_segments(encoder, train.eeg)
    emb = train_embedder(train.images, codes, train.labels, _class_names(manifest), steps=s.steps, seed=run.seed,
                         log=JsonlLog(run.log_path("embedder")))
    save_embedder(run.ckpt("embedder"), emb)
    report = {"extractor_version": fx.version}
    if len(val.ids):
        report["val_retrieval_top1"] = retrieval_top1(emb, encode_segments(encoder, val.eeg), val.images,
                                                      val.labels)
        with torch.no_grad():
            report["extractor_val_acc"] = float((fx(val.images).argmax(1) == val.labels).double().mean())
    write_json(run.report("embedder"), report)
    return run.record("train_embedder", ["train-embedder"],
                      checkpoints={"extractor": run.ckpt("extractor"), "embedder": run.ckpt("embedder")},
                      logs=[run.log_path("embedder")], reports=[run.report("embedder")])


def _load_models(run: Run, *names: str) -> dict[str, Any]:
    _require(run, *names)
    out: dict[str, Any] = {}
    try:
        for n in names:
            if n == "stage_a":
                out[n] = _load_encoder(run)
            elif n == "ldm":
                out[n] = load_diffusion(run.ckpt("ldm"))
            elif n == "embedder":
                out[n] = load_embedder(run.ckpt("embedder"))
            elif n == "extractor":
                out[n] = load_extractor(run.ckpt("extractor"))
    except (CheckpointError, KeyError, ValueError) as e:
        raise PreconditionError(f"cannot load checkpoint: {e}") from None
    return out


@locked
def cmd_reconstruct_2d(run: Run, segment_id: str) -> RunRecord:
    m = _load_models(run, "stage_a", "ldm")
    manifest = open_dataset(run)
    split, label = _segment_index(manifest, segment_id)
    data = split_data(run, manifest, split, [segment_id])
    bundle: DiffusionBundle = m["ldm"]
    code = encode_segments(m["stage_a"], data.eeg)
    img = sample(bundle.denoiser, bundle.ae, bundle.schedule, code, bundle.cfg.sample_steps, generator(run.seed),
                 bundle.cfg.guidance)[0]
    stem = f"{segment_id}_seed{run.seed}"
    png = _save_png(run.sub("renders", "2d", f"{stem}.png"), img)
    side = write_json(run.sub("renders", "2d", f"{stem}.json"),
                      {"segment_id": segment_id, "seed": run.seed, "steps": bundle.cfg.sample_steps,
                       "guidance": bundle.cfg.guidance, "label": label,
                       "oracle_label": oracle_classify(img.numpy(), manifest.num_classes)})
    return run.record(f"reconstruct_2d.{segment_id}", ["reconstruct-2d", "--segment", segment_id],
                      outputs=[png, side])


def choose_reference(bundle: DiffusionBundle, embedder: Embedder, code, n_seeds: int, seed: int
                     ) -> tuple[torch.Tensor, int, list[float]]:
    """Sample ``n_seeds`` candidates and keep the one the embedder scores closest to the EEG code."""
    cands = torch.cat([sample(bundle.denoiser, bundle.ae, bundle.schedule, code, bundle.cfg.sample_steps,
                              generator(seed + k), bundle.cfg.guidance) for k in range(n_seeds)])
    with torch.no_grad():
        scores = (embedder.embed_image(cands) @ embedder.project_eeg(code).T)[:, 0]
    best = int(torch.argmax(scores))
    return cands[best], seed + best, [float(s) for s in scores]


def stage_b_tag(run: Run, segment_id: str) -> str:
    s = run.cfg.stage_b
    return segment_id + ("-no-color" if s.w_color == 0 else "") + ("-no-eeg-text" if s.w_align == 0 else "")


def view_name(azimuth_deg: float) -> str:
    return f"view_{int(round(azimuth_deg)):03d}.png"


@locked
def cmd_reconstruct_3d(run: Run, segment_id: str) -> RunRecord:
    m = _load_models(run, "stage_a", "ldm", "embedder", "extractor")
    manifest = open_dataset(run)
    split, label = _segment_index(manifest, segment_id)
    data = split_data(run, manifest, split, [segment_id])
    bundle: DiffusionBundle = m["ldm"]
    code = encode_segments(m["stage_a"], data.eeg)
    ref, ref_seed, ref_scores = choose_reference(bundle, m["embedder"], code, run.cfg.stage_b.reference_seeds,
                                                 run.seed)
    tag = stage_b_tag(run, segment_id)
    cfg = run.cfg.stage_b_config()
    result = run_stage_b(bundle.denoiser, bundle.schedule, bundle.ae, code, ref, cfg, embedder=m["embedder"],
                         extractor=m["extractor"], style_image=data.images[0], seed=run.seed,
                         log=JsonlLog(run.log_path(f"stage_b.{tag}")))
    save_field(run.ckpt(f"field.{tag}"), result.field, cfg, step=cfg.sds.steps)
    out_dir = run.sub("renders", "3d", tag)
    outputs = [_save_png(out_dir / "reference.png", ref)]
    views = []
    for az, img in result.renders.items():
        outputs.append(_save_png(out_dir / view_name(az), img))
        views.append({"azimuth_deg": az, "file": view_name(az),
                      "histogram_l1": histogram_l1(img, data.images[0]),
                      "oracle_label": oracle_classify(img.numpy(), manifest.num_classes)})
    outputs.append(write_json(out_dir / "views.json", {
        "segment_id": segment_id, "tag": tag, "label": label, "seed": run.seed,
        "reference_seed": ref_seed, "reference_scores": ref_scores,
        "w_color": cfg.w_color, "w_align": cfg.w_align, "steps": cfg.sds.steps,
        "views": views, "mean_histogram_l1": float(np.mean([v["histogram_l1"] for v in views])),
        "warnings": result.warnings}))
    return run.record(f"reconstruct_3d.{tag}", ["reconstruct-3d", "--segment", segment_id],
                      checkpoints={"field": run.ckpt(f"field.{tag}")}, logs=[run.log_path(f"stage_b.{tag}")],
                      outputs=outputs)


def _render_sets(run: Run) -> list[Path]:
    base = run.sub("renders", "3d")
    sets = sorted(p for p in base.iterdir() if p.is_dir()) if base.is_dir() else []
    if not sets:
        raise MissingArtifact(f"no 3D renders under {base}; run reconstruct-3d first")
    for s in sets:
        needed = ["views.json", "reference.png"] + [view_name(a) for a in VIEW_AZIMUTHS]
        missing = [n for n in needed if not (s / n).is_file()]
        if missing:
            raise MissingArtifact(f"render set {s.name} is missing {', '.join(missing)}")
    return sets


@torch.no_grad()
def _image_metrics(fx: FeatureExtractor, emb: Embedder, code, samples: torch.Tensor, truth: torch.Tensor,
                   cfg: PipelineConfig, seed: int) -> dict[str, float]:
    n = len(samples)
    win = cfg.metrics.ssim_window
    out = {
        "ssim": float(np.mean([ssim(samples[i], truth[i], window=win) for i in range(n)])),
        "fid": fid(fx.pooled(samples).double().numpy(), fx.pooled(truth).double().numpy()),
        "inception_score": inception_score(torch.softmax(fx(samples).double(), -1).numpy()),
        "perceptual": float(np.mean([perceptual_distance(fx, samples[i], truth[i]) for i in range(n)])),
        "contextual": float(np.mean([contextual_distance(fx, samples[i], truth[i], cfg.metrics.bandwidth)
                                     for i in range(n)])),
        "acc_nway": acc_nway(emb, code, samples, min(cfg.metrics.n_way, n), cfg.metrics.trials, generator(seed)),
    }
    return out


@locked
def cmd_evaluate(run: Run, split: Optional[str] = None) -> RunRecord:
    split = split or run.cfg.metrics.split
    m = _load_models(run, "stage_a", "ldm", "embedder", "extractor")
    manifest = open_dataset(run)
    if split not in manifest.split or not manifest.split[split]:
        raise PreconditionError(f"split {split!r} is empty or unknown")
    sets = _render_sets(run)
    data = split_data(run, manifest, split)
    bundle: DiffusionBundle = m["ldm"]
    fx: FeatureExtractor = m["extractor"]
    emb: Embedder = m["embedder"]
    code = encode_segments(m["stage_a"], data.eeg)
    samples = sample(bundle.denoiser, bundle.ae, bundle.schedule, code, bundle.cfg.sample_steps,
                     generator(run.seed), bundle.cfg.guidance)
    metrics = _image_metrics(fx, emb, code, samples, data.images, run.cfg, run.seed)
    pred = np.array([oracle_classify(s.numpy(), manifest.num_classes) for s in samples])
    metrics["oracle_acc"] = float(np.mean(pred == data.labels.numpy()))

    per_view: dict[str, list[ViewRow]] = {}
    per_view_mean: dict[str, dict[str, float]] = {}
    hist: list[float] = []
    with torch.no_grad():
        for s in sets:
            info = read_views(s)
            gt = split_data(run, manifest, _segment_index(manifest, info["segment_id"])[0],
                            [info["segment_id"]]).images[0]
            ref = _load_png(s / "reference.png")
            e_ref = emb.embed_image(ref)
            rows = []
            for az in VIEW_AZIMUTHS:
                img = _load_png(s / view_name(az))
                rows.append(ViewRow(azimuth_deg=az, perceptual=perceptual_distance(fx, img, gt),
                                    contextual=max(0.0, contextual_distance(fx, img, gt, run.cfg.metrics.bandwidth)),
                                    acc_3d=float((emb.embed_image(img) * e_ref).sum())))
                hist.append(histogram_l1(img, gt))
            per_view[s.name] = rows
            per_view_mean[s.name] = {k: float(np.mean([getattr(r, k) for r in rows]))
                                     for k in ("perceptual", "contextual", "acc_3d")}
    metrics["acc_3d"] = float(np.mean([v["acc_3d"] for v in per_view_mean.values()]))
    metrics["histogram_l1_3d"] = float(np.mean(hist))

    feats = fx.pooled(data.images).double().numpy()
    report = MetricReport(
        split=split, n_way=min(run.cfg.metrics.n_way, len(data.ids)),
        sample_counts={"images_2d": len(data.ids), "render_sets_3d": len(sets),
                       "views_3d": len(sets) * len(VIEW_AZIMUTHS)},
        extractor_versions={"feature_extractor": fx.version,
                            "embedder": "emb-" + tensor_digest(emb.state_dict().values())},
        metrics=metrics, per_view=per_view, per_view_mean=per_view_mean,
        self_check=SelfCheck(ssim=ssim(data.images[0], data.images[0]), fid=fid(feats, feats)))
    path = write_json(run.report(f"metrics_{split}"), report.model_dump())
    return run.record(f"evaluate.{split}", ["evaluate", "--split", split], reports=[path])


def read_views(render_set: Path) -> dict[str, Any]:
    return json.loads((render_set / "views.json").read_text())


def first_segment_per_class(manifest: DatasetManifest, split: str) -> list[str]:
    seen: dict[int, str] = {}
    for sid in manifest.split[split]:
        lab = int(manifest.segment_record(sid)["label"])
        seen.setdefault(lab, sid)
    return [seen[k] for k in sorted(seen)]


def quickstart(run: Run) -> list[RunRecord]:
    """Synthetic data, every stage, one 2D and one 3D reconstruction, then evaluation."""
    records = [cmd_gen_data(run), cmd_train_stage_a(run), cmd_finetune_ldm(run), cmd_train_embedder(run)]
    manifest = open_dataset(run)
    target = first_segment_per_class(manifest, run.cfg.metrics.split)[0]
    records.append(cmd_reconstruct_2d(run, target))
    records.append(cmd_reconstruct_3d(run, target))
    records.append(cmd_evaluate(run, run.cfg.metrics.split))
    return records


def stage_b_log(run: Run, tag: str) -> list[dict[str, Any]]:
    return read_jsonl(run.log_path(f"stage_b.{tag}"))

