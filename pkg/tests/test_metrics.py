import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from pydantic import ValidationError

from eeg3d.common import generator
from eeg3d.metrics import (MetricReport, SelfCheck, ViewRow, acc_nway_embeddings, contextual_distance,
                           contextual_from_features, fid, inception_score, perceptual_distance, ssim)
from eeg3d.style import FeatureExtractor, VersionMismatch


@pytest.fixture(scope="module")
def extractor():
    torch.manual_seed(0)
    return FeatureExtractor(num_classes=4).eval()


def _image(seed, size=32):
    g = torch.Generator().manual_seed(seed)
    img = torch.ones(3, size, size)
    y, x = torch.randint(2, size // 2, (2,), generator=g).tolist()
    img[:, y:y + 10, x:x + 12] = torch.rand(3, 1, 1, generator=g)
    return img


# ----------------------------------------------------------------------------- ssim

def _ssim_loops(x, y, window=11, sigma=1.5):
    """Window-by-window evaluation of the luminance-contrast-structure product."""
    ax = np.arange(window) - (window - 1) / 2
    g = np.exp(-ax ** 2 / (2 * sigma ** 2))
    w = np.outer(g, g) / np.outer(g, g).sum()
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    vals = []
    for c in range(x.shape[0]):
        for i in range(x.shape[1] - window + 1):
            for j in range(x.shape[2] - window + 1):
                a, b = x[c, i:i + window, j:j + window], y[c, i:i + window, j:j + window]
                ma, mb = (w * a).sum(), (w * b).sum()
                va, vb = (w * a * a).sum() - ma ** 2, (w * b * b).sum() - mb ** 2
                cov = (w * a * b).sum() - ma * mb
                vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def test_ssim_identity_and_loop_oracle():
    rng = np.random.default_rng(0)
    x, y = rng.random((3, 16, 16)), rng.random((3, 16, 16))
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)
    assert ssim(x, y) == pytest.approx(_ssim_loops(x, y), abs=1e-10)


def test_ssim_binary_complement_is_negative():
    x = (np.random.default_rng(1).random((1, 16, 16)) > 0.5).astype(float)
    expected = _ssim_loops(x, 1 - x)
    assert expected < 0
    assert ssim(x, 1 - x) == pytest.approx(expected, abs=1e-10)


def test_ssim_accepts_hwc():
    x = np.random.default_rng(2).random((16, 16, 3))
    assert ssim(x, x * 0.5) == pytest.approx(ssim(x.transpose(2, 0, 1), x.transpose(2, 0, 1) * 0.5))


def test_ssim_errors():
    x = np.zeros((3, 16, 16))
    with pytest.raises(ValueError, match="shape"):
        ssim(x, np.zeros((3, 16, 15)))
    with pytest.raises(ValueError):
        ssim(x, x, window=4)
    with pytest.raises(ValueError):
        ssim(x, x, window=17)


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (2, 12, 12), elements=st.floats(0, 1)), arrays(np.float64, (2, 12, 12),
                                                                          elements=st.floats(0, 1)))
def test_ssim_symmetric_and_bounded(x, y):
    a, b = ssim(x, y, window=7), ssim(y, x, window=7)
    assert abs(a - b) <= 1e-9
    assert -1 - 1e-9 <= a <= 1 + 1e-9


# ----------------------------------------------------------------------------- fid

def test_fid_identity_and_symmetry():
    a = np.random.default_rng(0).standard_normal((200, 5))
    b = np.random.default_rng(1).standard_normal((300, 5)) * 1.5 + 0.3
    assert fid(a, a) <= 1e-6
    assert fid(a, b) == pytest.approx(fid(b, a), abs=1e-8)


def test_fid_unit_shift_gaussians():
    rng = np.random.default_rng(0)
    a = rng.standard_normal(100_000)
    b = rng.standard_normal(100_000) + 1.0
    assert abs(fid(a, b) - 1.0) <= 0.05


def test_fid_matches_closed_form_for_diagonal_covariances():
    # FID(N(m1, diag s1^2), N(m2, diag s2^2)) = |m1-m2|^2 + sum (s1 - s2)^2, evaluated on exact moments
    s1, s2 = np.array([1.0, 2.0, 0.5]), np.array([0.5, 1.0, 1.5])
    rng = np.random.default_rng(3)
    a = rng.standard_normal((100_000, 3)) * s1
    b = rng.standard_normal((100_000, 3)) * s2 + np.array([1.0, 0.0, 0.0])
    assert fid(a, b) == pytest.approx(1.0 + ((s1 - s2) ** 2).sum(), abs=0.05)


def test_fid_rank_deficient_is_finite():
    a = np.zeros((10, 4))
    a[:, 0] = np.arange(10)
    val = fid(a, a[::-1] + 1)
    assert math.isfinite(val) and val >= 0


def test_fid_errors():
    with pytest.raises(ValueError):
        fid(np.array([[np.nan, 1.0], [0.0, 1.0]]), np.zeros((3, 2)))
    with pytest.raises(ValueError):
        fid(np.zeros((3, 2)), np.zeros((3, 3)))
    with pytest.raises(ValueError):
        fid(np.zeros((1, 2)), np.zeros((3, 2)))


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(2, 20), st.just(3)), elements=st.floats(-100, 100)),
       arrays(np.float64, st.tuples(st.integers(2, 20), st.just(3)), elements=st.floats(-100, 100)))
def test_fid_finite_nonnegative_property(a, b):
    v = fid(a, b)
    assert math.isfinite(v) and v >= 0


# ----------------------------------------------------------------------------- inception score

def test_is_identical_rows_is_one():
    assert inception_score(np.tile([0.2, 0.3, 0.5], (7, 1))) == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("k", [1, 2, 4, 10])
def test_is_distinct_one_hots_is_k(k):
    assert inception_score(np.eye(k)) == pytest.approx(k, abs=1e-9)


def test_is_smoothed_one_hots_direct_formula():
    p = np.full((4, 4), 0.01) + np.eye(4) * 0.96
    marg = [sum(p[i][j] for i in range(4)) / 4 for j in range(4)]
    kl = [sum(p[i][j] * math.log(p[i][j] / marg[j]) for j in range(4)) for i in range(4)]
    assert inception_score(p) == pytest.approx(math.exp(sum(kl) / 4), abs=1e-12)


def test_is_rejects_invalid_rows():
    with pytest.raises(ValueError):
        inception_score(np.array([[0.5, 0.6]]))
    with pytest.raises(ValueError):
        inception_score(np.array([[1.5, -0.5]]))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 12), st.integers(1, 6)), elements=st.floats(1e-3, 1)))
def test_is_bounds_property(w):
    p = w / w.sum(1, keepdims=True)
    v = inception_score(p)
    assert 1 - 1e-9 <= v <= p.shape[1] + 1e-9


# ----------------------------------------------------------------------------- perceptual

def test_perceptual_identity_and_symmetry(extractor):
    x, y = _image(0), _image(1)
    assert perceptual_distance(extractor, x, x) <= 1e-6
    assert perceptual_distance(extractor, x, y) == pytest.approx(perceptual_distance(extractor, y, x), rel=1e-6)


def test_perceptual_monotone_under_noise(extractor):
    g = torch.Generator().manual_seed(0)
    means = []
    for sigma in (0.05, 0.1, 0.2):
        vals = [perceptual_distance(extractor, _image(i), _image(i) + sigma * torch.randn(3, 32, 32, generator=g))
                for i in range(12)]
        means.append(np.mean(vals))
    assert means[0] <= means[1] <= means[2]


def test_perceptual_version_mismatch(extractor, monkeypatch):
    from eeg3d import metrics, style

    real = style.extract_features
    calls = []

    def fake(fx, images):
        stack = real(fx, images)
        calls.append(1)
        if len(calls) == 2:
            stack.version = "other"
        return stack
    monkeypatch.setattr(metrics, "extract_features", fake)
    with pytest.raises(VersionMismatch):
        perceptual_distance(extractor, _image(0), _image(1))


# ----------------------------------------------------------------------------- contextual

def _contextual_loops(fx, fy, h=0.5, eps=1e-5):
    """Direct double loop over feature pairs."""
    fx, fy = fx.tolist(), [list(r) for r in {tuple(r) for r in fy.tolist()}]
    c = len(fx[0])
    mu = [sum(r[k] for r in fy) / len(fy) for k in range(c)]

    def unit(r):
        v = [r[k] - mu[k] for k in range(c)]
        n = math.sqrt(sum(t * t for t in v))
        return [t / n for t in v]
    xs, ys = [unit(r) for r in fx], [unit(r) for r in fy]
    total = 0.0
    for x in xs:
        d = [max(0.0, 1 - sum(a * b for a, b in zip(x, y))) for y in ys]
        dmin = min(d)
        w = [math.exp((1 - dj / (dmin + eps)) / h) for dj in d]
        total += max(w) / sum(w)
    return -math.log(total / len(xs))


def test_contextual_matches_brute_force_on_8x8_fixture():
    g = torch.Generator().manual_seed(0)
    a, b = torch.rand(3, 8, 8, generator=g, dtype=torch.float64), torch.rand(3, 8, 8, generator=g,
                                                                          dtype=torch.float64)
    fa, fb = a.flatten(1).T, b.flatten(1).T
    assert contextual_from_features(fa, fb) == pytest.approx(_contextual_loops(fa, fb), abs=1e-6)


def test_contextual_identity_and_permutation(extractor):
    x, y = _image(3), _image(4)
    assert abs(contextual_distance(extractor, x, x)) <= 1e-6
    assert contextual_distance(extractor, x, y) >= -1e-9
    f = torch.randn(20, 6, dtype=torch.float64)
    fy = torch.randn(30, 6, dtype=torch.float64)
    perm = torch.randperm(30, generator=torch.Generator().manual_seed(1))
    assert contextual_from_features(f, fy) == pytest.approx(contextual_from_features(f, fy[perm]), abs=1e-12)


def test_contextual_duplicate_features_keep_identity_at_zero():
    a = torch.randn(5, 4, dtype=torch.float64)
    both = torch.cat([a, a])
    assert abs(contextual_from_features(both, both)) <= 1e-6


def test_contextual_rejects_all_zero_features():
    with pytest.raises(ValueError):
        contextual_from_features(torch.zeros(4, 3), torch.zeros(4, 3))


# ----------------------------------------------------------------------------- acc_nway

def test_acc_nway_random_embeddings_is_chance():
    g = torch.Generator().manual_seed(0)
    q, c = torch.randn(200, 16, generator=g), torch.randn(200, 16, generator=g)
    acc = acc_nway_embeddings(q, c, 4, 10_000, generator(1))
    assert abs(acc - 0.25) <= 3 * math.sqrt(0.25 * 0.75 / 10_000)


def test_acc_nway_perfect_pairs_and_one_way():
    q = torch.randn(50, 8, generator=torch.Generator().manual_seed(0))
    assert acc_nway_embeddings(q, q.clone(), 4, 2000, generator(0)) == 1.0
    assert acc_nway_embeddings(q, torch.randn(50, 8), 1, 10, generator(0)) == 1.0


def test_acc_nway_ties_count_as_misses():
    q = torch.ones(10, 4)
    assert acc_nway_embeddings(q, q, 3, 100, generator(0)) == 0.0


def test_acc_nway_preconditions():
    q = torch.randn(5, 3)
    with pytest.raises(ValueError):
        acc_nway_embeddings(q, q, 6, 10, generator(0))
    with pytest.raises(ValueError):
        acc_nway_embeddings(q, q[:4], 2, 10, generator(0))


# ----------------------------------------------------------------------------- report schema

def _report(**metrics):
    base = {"ssim": 0.5, "fid": 1.0, "inception_score": 1.2, "acc_nway": 0.3}
    base.update(metrics)
    return MetricReport(split="test", n_way=4, sample_counts={"images_2d": 4}, extractor_versions={"fx": "a"},
                        metrics=base)


def test_report_round_trips():
    r = _report()
    r.per_view["obj"] = [ViewRow(azimuth_deg=0, perceptual=0.1, contextual=0.2, acc_3d=0.9)]
    r.self_check = SelfCheck(ssim=1.0, fid=0.0)
    assert MetricReport.model_validate(r.model_dump()) == r


@pytest.mark.parametrize("bad", [{"ssim": 1.5}, {"fid": -0.1}, {"inception_score": 0.5}, {"acc_nway": 1.2},
                                 {"perceptual": float("nan")}])
def test_report_rejects_out_of_range(bad):
    with pytest.raises(ValidationError):
        _report(**bad)


def test_self_check_requires_identity_values():
    with pytest.raises(ValidationError):
        SelfCheck(ssim=0.99, fid=0.0)
    with pytest.raises(ValidationError):
        SelfCheck(ssim=1.0, fid=0.1)
