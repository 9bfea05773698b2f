import json
from pathlib import Path

import numpy as np
import pytest
import torch

from eeg3d.data import generate_synthetic_dataset, write_dataset

torch.set_num_threads(1)


def write_raw_dataset(root: Path, *, num_classes: int, channels: int, timesteps: int,
                      splits: dict[str, int], band: str = "synthetic", seed: int = 0) -> Path:
    """Write a container-format tree directly (manifest + .f32 records, no PNGs).

    Split ``name -> count``; segment i gets label i % num_classes and its own image.
    """
    rng = np.random.default_rng(seed)
    (root / "segments").mkdir(parents=True, exist_ok=True)
    segments, images, split = [], [], {}
    i = 0
    for name in ("train", "val", "test"):
        split[name] = []
        for _ in range(splits.get(name, 0)):
            sid, iid = f"s{i:05d}", f"i{i:05d}"
            rng.standard_normal((channels, timesteps)).astype("<f4").tofile(root / "segments" / f"{sid}.f32")
            segments.append({"segment_id": sid, "subject_id": 0, "label": i % num_classes, "band": band,
                             "image_id": iid})
            images.append({"image_id": iid, "category": i % num_classes, "file": f"images/{iid}.png"})
            split[name].append(sid)
            i += 1
    manifest = {"schema_version": 1, "num_classes": num_classes, "channels": channels, "timesteps": timesteps,
                "segments": segments, "images": images, "splits": split}
    (root / "manifest.json").write_text(json.dumps(manifest))
    return root


@pytest.fixture
def tiny_synthetic():
    return generate_synthetic_dataset(4, 8, 8, 128, 32, 7)


@pytest.fixture
def tiny_tree(tmp_path, tiny_synthetic):
    manifest, segments, images = tiny_synthetic
    write_dataset(tmp_path / "ds", manifest, segments, images)
    return tmp_path / "ds"


@pytest.fixture(scope="session")
def stage_a_data():
    """4-class synthetic train/val arrays (preprocessed) shared by encoder and diffusion tests."""
    from eeg3d.data import preprocess

    manifest, segments, images = generate_synthetic_dataset(4, 64, 8, 128, 32, 0)
    by_id = {s.segment_id: s for s in segments}
    im = {i.image_id: i for i in images}
    out = {}
    for split in ("train", "val", "test"):
        ids = manifest.split[split]
        out[split] = {
            "x": torch.tensor(np.stack([preprocess(by_id[s]).data for s in ids])),
            "y": torch.tensor([by_id[s].label for s in ids]),
            "images": torch.tensor(np.stack([im[manifest.pairing[s]].pixels.transpose(2, 0, 1) for s in ids])),
            "masks": torch.tensor(np.stack([im[manifest.pairing[s]].segmentation for s in ids])),
        }
    return out


@pytest.fixture(scope="session")
def small_ae(stage_a_data):
    from eeg3d.common import freeze
    from eeg3d.diffusion import AEConfig, train_autoencoder

    return freeze(train_autoencoder(stage_a_data["train"]["images"], AEConfig(width=8), steps=200, lr=4e-3))


def fd_check(loss_fn, x: torch.Tensor, n_coords: int = 8, h: float = 1e-6, seed: int = 0,
             rel: float = 1e-3) -> None:
    """Compare autograd against central differences on a few coordinates of float64 ``x``."""
    x = x.detach().double().requires_grad_(True)
    loss = loss_fn(x)
    (grad,) = torch.autograd.grad(loss, x)
    flat = x.detach().reshape(-1)
    g = torch.Generator().manual_seed(seed)
    idx = torch.randperm(flat.numel(), generator=g)[:n_coords]
    # always include the largest-gradient coordinate so the check is not vacuous
    idx = torch.unique(torch.cat([idx, grad.abs().reshape(-1).argmax()[None]]))
    for i in idx.tolist():
        up, dn = flat.clone(), flat.clone()
        up[i] += h
        dn[i] -= h
        with torch.no_grad():
            num = (loss_fn(up.reshape(x.shape)) - loss_fn(dn.reshape(x.shape))).item() / (2 * h)
        ana = grad.reshape(-1)[i].item()
        assert abs(ana - num) <= rel * max(abs(ana), abs(num), 1e-6), (i, ana, num)


TINY_TOML = """\
seed = 0

[dataset.synthetic]
segments_per_class = 8

[stage_a]
epochs = 1

[ldm]
epochs = 2
region_every = 1
ae_steps = 20
segmenter_steps = 5
sample_steps = 5

[embedder]
steps = 5
extractor_steps = 5

[stage_b]
steps = 100
reference_seeds = 2

[metrics]
trials = 50
"""


@pytest.fixture(scope="session")
def tiny_config(tmp_path_factory) -> Path:
    """Seconds-scale pipeline config: every stage runs, nothing is trained to quality."""
    path = tmp_path_factory.mktemp("cfg") / "tiny.toml"
    path.write_text(TINY_TOML)
    return path


@pytest.fixture(scope="session")
def tiny_run(tmp_path_factory, tiny_config) -> Path:
    from eeg3d.cli import main

    root = tmp_path_factory.mktemp("runs") / "tiny"
    assert main(["quickstart", "--config", str(tiny_config), "--run-dir", str(root)]) == 0
    return root


# acceptance criteria append "criterion N: PASS/FAIL ..." lines here; printed once at the end of the run
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
