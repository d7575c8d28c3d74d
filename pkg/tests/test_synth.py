import numpy as np
import pytest
from scipy import ndimage

from mpsfusion.core import CameraIntrinsics, CameraPose, DepthMap, MultispectralImage, NormalMap
from mpsfusion.ingest import depth_to_prior_normals
from mpsfusion.mps import MixingModel, recover_normals
from mpsfusion.synth import (
    LightRig,
    SceneSpec,
    generate_trajectory,
    image_gradient,
    make_keyframes,
    make_semidense,
    render_multispectral,
)
from oracles import angle_between_deg


@pytest.fixture(scope="module")
def intr():
    return CameraIntrinsics.from_fov(32, 24, 40.0)


def fronto_plane_scene():
    # plane z = 0 with its normal toward a camera at +z
    return SceneSpec("plane", point=(0, 0, 0), normal=(0, 0, 1.0), albedo=((1, 1, 1),))


def test_plane_full_alignment(intr):
    pose = generate_trajectory(1, 2.0)[0]
    # camera-frame plane normal is (0, 0, -1); light 1 points along +z onto it
    dirs = np.array([[0, 0, 1.0], [1, 0, 0], [0, 1, 0]])
    rig = LightRig(dirs, np.array([1.0, 1.0, 1.0]))
    r = render_multispectral(fronto_plane_scene(), rig, intr, pose)
    assert r.depth.valid.all()
    np.testing.assert_allclose(r.image.data[..., 0], 1.0, atol=1e-12)
    # light 2 and 3 graze the surface
    np.testing.assert_allclose(r.image.data[..., 1:], 0.0, atol=1e-12)
    np.testing.assert_allclose(r.normals.normals, np.broadcast_to([0, 0, -1.0], (24, 32, 3)), atol=1e-12)
    np.testing.assert_allclose(r.depth.depth, 2.0, atol=1e-12)


def test_sphere_nearest_point_shading():
    intr = CameraIntrinsics(100.0, 100.0, 10.0, 10.0, 21, 21)
    rig = LightRig.default()
    r = render_multispectral(SceneSpec(albedo=((1, 1, 1),)), rig, intr, generate_trajectory(1, 3.0)[0])
    # centre pixel looks straight at the sphere's nearest point, normal (0, 0, -1)
    expected = np.maximum(rig.matrix @ [0, 0, -1.0], 0)
    np.testing.assert_allclose(r.image.data[10, 10], expected, atol=1e-12)
    np.testing.assert_allclose(expected, np.cos(np.deg2rad(40.0)), atol=1e-12)
    assert r.depth.depth[10, 10] == pytest.approx(2.0)


def test_render_misses_are_invalid(small_sphere_render):
    r = small_sphere_render
    assert not r.depth.valid.all() and r.depth.valid.any()
    assert np.all(r.image.data[~r.depth.valid] == 0)
    assert np.all(r.regions[~r.depth.valid] == 0)
    np.testing.assert_array_equal(r.normals.valid, r.depth.valid)


def test_render_normals_face_camera(small_sphere_render, small_intr):
    r = small_sphere_render
    rays = small_intr.pixel_rays()[r.normals.valid]
    assert np.all(np.einsum("ij,ij->i", r.normals.normals[r.normals.valid], rays) < 0)


def test_rig_default_full_rank():
    rig = LightRig.default()
    assert np.linalg.matrix_rank(rig.matrix) == 3
    np.testing.assert_allclose(np.linalg.norm(rig.directions, axis=1), 1.0)


@pytest.mark.parametrize("bad", [{"radius": 0.0}, {"albedo": ((1.5, 0, 0),)}, {"shape": "cube"}])
def test_scene_validation(bad):
    with pytest.raises(ValueError):
        SceneSpec(**bad)


def test_semidense_threshold_zero(small_sphere_render):
    r = small_sphere_render
    inv = make_semidense(r.depth, r.image, grad_threshold=0.0, noise_sigma=0.0)
    valid = np.isfinite(inv.values)
    np.testing.assert_array_equal(valid, r.depth.valid)
    np.testing.assert_array_equal(inv.values[valid], 1.0 / r.depth.depth[valid])


def test_semidense_threshold_infinite(small_sphere_render):
    r = small_sphere_render
    inv = make_semidense(r.depth, r.image, grad_threshold=np.inf)
    assert inv.missing.all()


def test_semidense_textured_sphere_fraction(textured_keyframe_512):
    r = textured_keyframe_512.render
    inv = make_semidense(r.depth, r.image)
    frac = np.isfinite(inv.values).sum() / r.depth.valid.sum()
    assert 0.05 < frac < 0.60


def test_semidense_seeded(small_sphere_render):
    r = small_sphere_render
    a = make_semidense(r.depth, r.image, 0.0, 0.01, seed=5)
    b = make_semidense(r.depth, r.image, 0.0, 0.01, seed=5)
    c = make_semidense(r.depth, r.image, 0.0, 0.01, seed=6)
    np.testing.assert_array_equal(a.values, b.values)
    assert not np.array_equal(a.values[~a.missing], c.values[~c.missing])


def test_trajectory_single():
    (pose,) = generate_trajectory(1, 2.0, target=(1.0, 0, 0))
    np.testing.assert_allclose(pose.translation, (1, 0, 2))
    np.testing.assert_allclose(pose.R @ [0, 0, 1.0], (0, 0, -1), atol=1e-12)


def test_trajectory_four_quarter_turns():
    target = np.array([0.5, -0.2, 0.1])
    poses = generate_trajectory(4, 3.0, target)
    pos = np.array([p.translation for p in poses])
    d = np.linalg.norm(pos - target, axis=1)
    np.testing.assert_allclose(d, 3.0, atol=1e-12)
    rel = pos - target
    for a, b in zip(rel, np.roll(rel, -1, axis=0)):
        assert np.dot(a, b) == pytest.approx(0.0, abs=1e-12)
    for p in poses:
        np.testing.assert_allclose(p.R @ [0, 0, 1.0], -(p.translation - target) / 3.0, atol=1e-12)
        assert p.scale == 1.0


@pytest.mark.parametrize("n", [1, 3, 7])
def test_trajectory_orbit_radius(n):
    for p in generate_trajectory(n, 2.5):
        assert np.linalg.norm(p.apply(np.zeros(3))) == pytest.approx(2.5, abs=1e-12)


@pytest.mark.parametrize("layout", ["uniform", "split"])
def test_render_recover_closure(intr_512, rig, layout):
    scene = SceneSpec(albedo=((0.9, 0.5, 0.3), (0.2, 0.6, 0.9)), layout=layout)
    r = render_multispectral(scene, rig, intr_512, generate_trajectory(1, 3.0)[0])
    model = MixingModel(r.regions, dict(r.mixing))
    n = recover_normals(r.image, model, r.depth.valid & ~r.shadow)
    sel = n.valid
    assert sel.sum() > 1000
    np.testing.assert_allclose(n.normals[sel], r.normals.normals[sel], atol=1e-6)


def test_depth_prior_consistency(sphere_render_512, intr_512):
    r = sphere_render_512
    n = depth_to_prior_normals(r.depth, intr_512)
    interior = ndimage.binary_erosion(r.depth.valid, iterations=3) & n.valid
    assert angle_between_deg(n.normals[interior], r.normals.normals[interior]).max() < 2.0


def test_heightfield_render(intr, rig):
    scene = SceneSpec("heightfield", amplitude=0.05, frequency=0.5)
    pose = generate_trajectory(1, 2.0)[0]
    r = render_multispectral(scene, rig, intr, pose)
    assert r.depth.valid.all()
    # hits lie on the surface z = A sin(wx) sin(wy)
    P = pose.apply(intr.pixel_rays() * r.depth.depth[..., None])
    w = 2 * np.pi * 0.5
    np.testing.assert_allclose(P[..., 2], 0.05 * np.sin(w * P[..., 0]) * np.sin(w * P[..., 1]), atol=1e-8)


def test_keyframes_deterministic(sphere_scene, rig, small_intr):
    poses = generate_trajectory(2, 3.0, step_deg=10.0)
    a = make_keyframes(sphere_scene, rig, small_intr, poses, noise=0.01, seed=3)
    b = make_keyframes(sphere_scene, rig, small_intr, poses, noise=0.01, seed=3)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.bundle.inverse_depth.values, y.bundle.inverse_depth.values)
        np.testing.assert_array_equal(x.bundle.image.data, y.bundle.image.data)
        np.testing.assert_array_equal(x.bundle.pose.matrix(), y.bundle.pose.matrix())


def test_keyframe_normalized_inverse_depth(sphere_scene, rig, small_intr):
    (kf,) = make_keyframes(sphere_scene, rig, small_intr, generate_trajectory(1, 3.0))
    v = kf.bundle.inverse_depth.values
    assert np.nanmean(v) == pytest.approx(1.0)
    # rescaling by the bundle scale restores scene depth
    ok = np.isfinite(v)
    np.testing.assert_allclose(kf.bundle.scale / v[ok], kf.render.depth.depth[ok], rtol=1e-12)
    assert kf.bundle.pose.scale == kf.bundle.scale


def test_image_gradient_flat_is_zero():
    assert not image_gradient(MultispectralImage(np.ones((5, 5, 3)))).any()
