import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import ndimage

from mpsfusion.core import CameraIntrinsics, CameraPose, DepthMap, InverseDepthMap, MultispectralImage
from mpsfusion.exceptions import AllInvalid, NonPositiveScale
from mpsfusion.ingest import (
    KeyframeBundle,
    backproject,
    depth_to_prior_normals,
    fill_holes_bilinear,
    invdepth_to_depth,
    rescale_depth,
)
from oracles import angle_between_deg, plane_depth


def masked_depth(values, valid):
    return DepthMap(np.where(valid, values, 0.0), valid)


# depth grids with some holes, at least one valid pixel
holey = st.tuples(
    arrays(np.float64, (7, 9), elements=st.floats(0.1, 20.0)),
    arrays(np.bool_, (7, 9)),
).filter(lambda a: a[1].any())


@pytest.mark.parametrize(
    "inv, depth, valid",
    [(0.5, 2.0, True), (-0.1, 0.0, False), (np.nan, 0.0, False), (0.0, 0.0, False)],
)
def test_invdepth_to_depth_examples(inv, depth, valid):
    out = invdepth_to_depth(InverseDepthMap(np.array([[inv]])))
    assert out.depth[0, 0] == depth
    assert out.valid[0, 0] == valid


@given(arrays(np.float64, (5, 5), elements=st.floats(1e-3, 1e3)))
def test_invdepth_round_trip(inv):
    d = invdepth_to_depth(InverseDepthMap(inv))
    assert d.valid.all()
    np.testing.assert_allclose(1.0 / d.depth, inv, rtol=1e-12)


@pytest.mark.parametrize("scale, expected", [(1.0, 2.0), (3.0, 6.0)])
def test_rescale_examples(scale, expected):
    out = rescale_depth(DepthMap(np.array([[2.0]])), scale)
    assert out.depth[0, 0] == expected


def test_rescale_mean_inverse_depth():
    # valid inverse depths 0.5, 1, 1.5 have mean exactly 1
    d = invdepth_to_depth(InverseDepthMap(np.array([[0.5, 1.0, 1.5, np.nan]])))
    s = 2.5
    out = rescale_depth(d, s)
    assert np.mean(1.0 / out.depth[out.valid]) == pytest.approx(1.0 / s, abs=1e-12)
    np.testing.assert_array_equal(out.valid, d.valid)


@pytest.mark.parametrize("scale", [0.0, -1.0, np.nan])
def test_rescale_rejects_bad_scale(scale):
    with pytest.raises(NonPositiveScale):
        rescale_depth(DepthMap(np.ones((2, 2))), scale)


def test_fill_full_map_unchanged():
    d = DepthMap(np.arange(1.0, 13.0).reshape(3, 4))
    out = fill_holes_bilinear(d)
    np.testing.assert_array_equal(out.depth, d.depth)
    assert not out.interpolated.any()


def test_fill_row_midpoint():
    out = fill_holes_bilinear(masked_depth(np.array([[4.0, 0.0, 8.0]]), np.array([[1, 0, 1]], bool)))
    assert out.depth[0, 1] == pytest.approx(6.0)
    np.testing.assert_array_equal(out.interpolated, [[False, True, False]])


def test_fill_inverse_distance_weighting():
    # a 5-wide map cannot hold a sample 3 pixels right of its centre, so widen to 7
    valid = np.zeros((5, 7), bool)
    values = np.zeros((5, 7))
    valid[2, 2], values[2, 2] = True, 10.0
    valid[2, 6], values[2, 6] = True, 2.0
    out = fill_holes_bilinear(masked_depth(values, valid))
    # pixel (2, 3) has no valid pixel on its column
    expected = (10 * 1 + 2 * (1 / 3)) / (1 + 1 / 3)
    assert expected == pytest.approx(8.0)
    assert out.depth[2, 3] == pytest.approx(expected)


def test_fill_all_invalid_raises():
    with pytest.raises(AllInvalid):
        fill_holes_bilinear(DepthMap(np.zeros((3, 3))))


@given(holey)
def test_fill_keeps_valid_pixels_and_is_idempotent(args):
    values, valid = args
    d = masked_depth(values, valid)
    once = fill_holes_bilinear(d)
    assert once.valid.all()
    np.testing.assert_array_equal(once.depth[valid], d.depth[valid])
    twice = fill_holes_bilinear(once)
    np.testing.assert_array_equal(twice.depth, once.depth)
    # filled values are convex combinations of valid ones
    assert once.depth.min() >= values[valid].min() - 1e-12
    assert once.depth.max() <= values[valid].max() + 1e-12


@pytest.fixture
def intr():
    return CameraIntrinsics.from_fov(40, 30, 60)


def test_prior_normals_fronto_parallel(intr):
    n = depth_to_prior_normals(DepthMap(np.full(intr.shape, 5.0)), intr)
    assert n.valid.all()
    np.testing.assert_allclose(n.normals, np.broadcast_to((0, 0, -1), n.normals.shape), atol=1e-9)


def test_prior_normals_slanted_plane(intr):
    # z = 2 + 0.5 x; camera-facing unit normal is (0.5, 0, -1) normalized
    z = plane_depth(intr.K, intr.shape, (-0.5, 0.0, 1.0), 2.0)
    n = depth_to_prior_normals(DepthMap(z), intr)
    expected = np.array([0.5, 0.0, -1.0]) / np.linalg.norm([0.5, 0.0, -1.0])
    assert n.valid.all()
    np.testing.assert_allclose(n.normals, np.broadcast_to(expected, n.normals.shape), atol=1e-9)


def test_prior_normals_invalid_neighbourhood(intr):
    d = np.full(intr.shape, 3.0)
    d[10, 10] = 0.0
    n = depth_to_prior_normals(DepthMap(d), intr)
    assert not n.valid[10, 10]
    assert not n.valid[10, 11] and not n.valid[9, 10]
    assert n.valid[20, 20]


def test_prior_normals_sphere(sphere_render_512, intr_512):
    r = sphere_render_512
    n = depth_to_prior_normals(r.depth, intr_512)
    interior = ndimage.binary_erosion(r.depth.valid, iterations=3)
    err = angle_between_deg(n.normals[interior], r.normals.normals[interior])
    assert np.percentile(err, 95) < 2.0
    assert err.max() < 2.0


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (8, 8), elements=st.floats(0.5, 5.0)))
def test_prior_normals_unit_and_facing(intr_depth):
    intr = CameraIntrinsics.from_fov(8, 8, 60)
    n = depth_to_prior_normals(DepthMap(intr_depth), intr)
    lengths = np.linalg.norm(n.normals[n.valid], axis=1)
    np.testing.assert_allclose(lengths, 1.0, atol=1e-6)
    rays = intr.pixel_rays()[n.valid]
    assert np.all(np.einsum("ij,ij->i", n.normals[n.valid], rays) <= 0)


def test_backproject_examples():
    intr = CameraIntrinsics(10.0, 10.0, 5.0, 4.0, 20, 10)
    d = np.zeros(intr.shape)
    d[4, 5] = 3.0
    d[4, 15] = 2.0
    cloud = backproject(DepthMap(d), intr, CameraPose())
    np.testing.assert_allclose(cloud.positions, [[0, 0, 3], [2, 0, 2]], atol=1e-15)
    assert len(backproject(DepthMap(np.zeros(intr.shape)), intr, CameraPose())) == 0


@settings(max_examples=25, deadline=None)
@given(
    arrays(np.float64, (6, 7), elements=st.floats(0.5, 10.0)),
    arrays(np.float64, 4, elements=st.floats(-1, 1)).filter(lambda q: np.linalg.norm(q) > 0.1),
    arrays(np.float64, 3, elements=st.floats(-5, 5)),
)
def test_backproject_reprojection_identity(depth, q, t):
    intr = CameraIntrinsics.from_fov(7, 6, 70)
    pose = CameraPose(q / np.linalg.norm(q), t)
    cloud = backproject(DepthMap(depth), intr, pose)
    cam = pose.inverse().apply(cloud.positions)
    u, v = intr.project(cam)
    vv, uu = np.mgrid[0:6, 0:7]
    np.testing.assert_allclose(u, uu.ravel(), atol=1e-9)
    np.testing.assert_allclose(v, vv.ravel(), atol=1e-9)
    np.testing.assert_allclose(cam[:, 2], depth.ravel(), atol=1e-9)


def test_bundle_validation(intr):
    img = MultispectralImage(np.zeros(intr.shape + (3,)))
    inv = InverseDepthMap(np.ones(intr.shape))
    KeyframeBundle(0, img, inv, CameraPose(), 1.0, intr)
    with pytest.raises(ValueError):
        KeyframeBundle(0, img, InverseDepthMap(np.ones((2, 2))), CameraPose(), 1.0, intr)
    with pytest.raises(NonPositiveScale):
        KeyframeBundle(0, img, inv, CameraPose(), 0.0, intr)
