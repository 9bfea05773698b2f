import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from eeg3d.common import generator
from eeg3d.render import (VIEW_AZIMUTHS, CameraPose, CameraRanges, DenseGridField, HashGridField,
                          HomogeneousField, SphereField, build_field, make_rays, paper_views, render, render_image,
                          rotate_y, sample_camera)

from conftest import fd_check


def _pose(az=0.0, el=0.0, radius=2.0, fov=math.radians(40), size=32):
    return CameraPose(az, el, radius, fov, size, size)


# ----------------------------------------------------------------------------- cameras

def test_collapsed_ranges_give_that_pose():
    r = CameraRanges(azimuth=(0.3, 0.3), elevation=(0.1, 0.1), radius=(2.5, 2.5))
    p = sample_camera(generator(0), r)
    assert (p.azimuth, p.elevation, p.radius) == (0.3, 0.1, 2.5)


def test_azimuth_draws_are_uniform_on_the_circle():
    g = generator(0)
    az = np.array([sample_camera(g).azimuth for _ in range(10_000)])
    assert abs(np.exp(1j * az).mean()) < 0.05


def test_sample_camera_reproducible():
    a = [sample_camera(generator(7)) for _ in range(3)]
    b = [sample_camera(generator(7)) for _ in range(3)]
    assert a == b


def test_pose_validation():
    with pytest.raises(ValueError):
        _pose(radius=0)
    with pytest.raises(ValueError):
        _pose(fov=math.pi)
    with pytest.raises(ValueError):
        sample_camera(generator(0), CameraRanges(radius=(2.0, 1.0)))


def test_single_pixel_ray_points_at_origin():
    rays = make_rays(CameraPose(0.7, 0.2, 3.0, math.radians(30), 1, 1), torch.float64)
    o, d = rays.origins[0].numpy(), rays.directions[0].numpy()
    assert np.allclose(d, -o / np.linalg.norm(o), atol=1e-12)


def test_center_ray_passes_through_origin():
    rays = make_rays(_pose(az=1.1, el=0.4, size=33), torch.float64)
    c = 33 * 16 + 16
    o, d = rays.origins[c].numpy(), rays.directions[c].numpy()
    closest = o - (o @ d) * d
    assert np.linalg.norm(closest) < 1e-5


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 2 * math.pi), st.floats(-1.2, 1.2), st.floats(1.5, 4.0), st.integers(1, 9))
def test_ray_directions_unit_norm(az, el, radius, size):
    rays = make_rays(_pose(az, el, radius, size=size), torch.float64)
    assert torch.allclose(rays.directions.norm(dim=-1), torch.ones(size * size, dtype=torch.float64))


def test_azimuth_pi_negates_center_ray_xz():
    a = make_rays(_pose(az=0.3, el=0.2, size=1), torch.float64).directions[0]
    b = make_rays(_pose(az=0.3 + math.pi, el=0.2, size=1), torch.float64).directions[0]
    assert torch.allclose(b, a * torch.tensor([-1.0, 1.0, -1.0], dtype=torch.float64), atol=1e-12)


def test_rotate_y_matches_azimuth():
    p = _pose(az=0.2, el=0.3).position()
    q = _pose(az=0.2 + 0.5, el=0.3).position()
    assert np.allclose(rotate_y(p, 0.5), q)


def test_paper_views():
    views = paper_views(32)
    assert [round(math.degrees(v.azimuth)) for v in views] == [0, 20, 45, 70]
    assert tuple(VIEW_AZIMUTHS) == (0.0, 20.0, 45.0, 70.0)


# ----------------------------------------------------------------------------- compositing

def test_zero_density_is_exact_background():
    bg = (0.25, 0.5, 0.75)
    img, opacity = render_image(HomogeneousField(0.0, background=bg), _pose(size=8), 16, generator(0))
    assert torch.equal(opacity, torch.zeros(8, 8))
    assert torch.equal(img, torch.tensor(bg)[:, None, None].expand(3, 8, 8))


def test_empty_dense_field_renders_background():
    fld = DenseGridField(resolution=4, density_init=-200.0, init_std=0.0)
    img, _ = render_image(fld, _pose(size=8), 8)
    assert torch.allclose(img, torch.ones(3, 8, 8), atol=1e-6)


@pytest.mark.parametrize("s", [0.1, 0.5, 2.0])
def test_homogeneous_medium_opacity(s):
    rays = make_rays(_pose(size=4), torch.float64)
    out = render(HomogeneousField(s), rays, 256, generator(0))
    expected = 1 - math.exp(-s * (rays.far - rays.near))
    assert torch.allclose(out["opacity"], torch.full_like(out["opacity"], expected), atol=1e-3)


def test_opaque_first_sample_takes_its_color():
    class Wall(HomogeneousField):
        def query(self, points):
            sigma, rgb = super().query(points)
            first = torch.zeros(points.shape[0], dtype=points.dtype)
            first[::16] = 1e4
            return first, rgb
    out = render(Wall(0.0, color=(0.1, 0.7, 0.3)), make_rays(_pose(size=2), torch.float64), 16)
    assert torch.allclose(out["opacity"], torch.ones(4, dtype=torch.float64))
    assert torch.allclose(out["rgb"], torch.tensor([0.1, 0.7, 0.3], dtype=torch.float64).expand(4, 3))


def test_opacity_in_unit_interval_and_weights_sum():
    torch.manual_seed(0)
    out = render(DenseGridField(resolution=8, blob_strength=6.0), make_rays(_pose(size=8)), 32, generator(1))
    assert (out["opacity"] >= 0).all() and (out["opacity"] <= 1 + 1e-6).all()
    assert torch.allclose(out["weights"].sum(1), out["opacity"])
    assert torch.allclose(out["opacity"] + out["transmittance"], torch.ones(64), atol=1e-5)


def test_render_requires_two_samples():
    with pytest.raises(ValueError):
        render(HomogeneousField(1.0), make_rays(_pose(size=1)), 1)


def test_render_is_deterministic_under_seed():
    torch.manual_seed(0)
    fld = DenseGridField(resolution=8, blob_strength=4.0)
    a, _ = render_image(fld, _pose(size=8), 16, generator(3))
    b, _ = render_image(fld, _pose(size=8), 16, generator(3))
    assert torch.equal(a, b)


@pytest.mark.parametrize("radius,distance,size", [(0.5, 2.0, 64), (0.8, 3.0, 64), (0.6, 2.5, 48)])
def test_sphere_silhouette_matches_projection(radius, distance, size):
    pose = _pose(el=0.3, radius=distance, size=size)
    _, opacity = render_image(SphereField(radius, density=1e3), pose, 256, dtype=torch.float64)
    measured = math.sqrt(float((opacity > 0.5).sum()) / math.pi)
    predicted = pose.focal * math.tan(math.asin(radius / distance))
    assert abs(measured - predicted) <= 1.0


def test_render_gradient_matches_finite_differences():
    torch.manual_seed(0)
    fld = DenseGridField(resolution=16, blob_strength=4.0).double()
    pose = _pose(az=0.4, el=0.3, size=8)
    grid = fld.grid.detach().clone()
    del fld.grid

    def mean_pixel(g):
        fld.grid = g
        return render_image(fld, pose, 24, dtype=torch.float64)[0].mean()
    fd_check(mean_pixel, grid, n_coords=10)


def test_mlp_gradient_matches_finite_differences():
    torch.manual_seed(1)
    fld = DenseGridField(resolution=16, blob_strength=4.0).double()
    pose = _pose(az=1.0, el=0.2, size=8)
    w = fld.mlp[2].weight.detach().clone()
    del fld.mlp[2].weight

    def mean_pixel(x):
        fld.mlp[2].weight = x
        return render_image(fld, pose, 24, dtype=torch.float64)[0].mean()
    fd_check(mean_pixel, w, n_coords=10)


def test_hash_field_renders_and_backpropagates():
    torch.manual_seed(0)
    fld = HashGridField(levels=4, table_size=2 ** 10, max_resolution=32, blob_strength=4.0)
    img, opacity = render_image(fld, _pose(size=8), 8)
    img.mean().backward()
    assert fld.tables.grad is not None and fld.tables.grad.abs().sum() > 0
    assert opacity.max() > 0.1


def test_build_field():
    assert isinstance(build_field("dense", resolution=4), DenseGridField)
    assert isinstance(build_field("hash", levels=2), HashGridField)
    with pytest.raises(ValueError):
        build_field("mesh")
