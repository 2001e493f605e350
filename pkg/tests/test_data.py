import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from raysurf import data
from raysurf.data import (
    DataError,
    ROPE_RADIUS,
    camera_ring,
    generate_rays,
    generate_synthetic,
    get_scene,
    load_dataset,
    sample_pixel_batch,
    sd_box,
    sd_capsule,
    sd_difference,
    sd_sphere,
    sd_torus,
    sd_union,
    shade,
    sphere_trace,
    write_dataset,
)


# ------------------------------------------------------------- SDF algebra


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_sd_sphere_exact(seed):
    rng = np.random.default_rng(seed)
    c = rng.uniform(0, 1, 3)
    r = rng.uniform(0.05, 0.5)
    p = rng.uniform(-1, 2, (8, 3))
    got = sd_sphere(c, r)(p)
    assert np.allclose(got, np.linalg.norm(p - c, axis=-1) - r)


def test_sd_box_hand_cases():
    f = sd_box((0.0, 0.0, 0.0), (1.0, 1.0, 1.0))
    assert f(np.array([[0.0, 0.0, 0.0]]))[0] == pytest.approx(-1.0)  # center
    assert f(np.array([[2.0, 0.0, 0.0]]))[0] == pytest.approx(1.0)  # face
    # outside a corner: euclidean distance to the corner
    assert f(np.array([[2.0, 2.0, 2.0]]))[0] == pytest.approx(np.sqrt(3.0))
    assert f(np.array([[0.5, 0.0, 0.0]]))[0] == pytest.approx(-0.5)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_sd_box_matches_brute_force_surface_distance(seed):
    rng = np.random.default_rng(seed)
    he = rng.uniform(0.1, 0.4, 3)
    f = sd_box((0.5, 0.5, 0.5), he)
    p = rng.uniform(0.0, 1.0, (4, 3))
    # brute force: distance to a dense sampling of the box surface
    u = rng.uniform(-1, 1, (20000, 3))
    face = rng.integers(0, 3, 20000)
    sgn = rng.choice([-1.0, 1.0], 20000)
    u[np.arange(20000), face] = sgn
    surf = 0.5 + u * he
    d_surf = np.min(
        np.linalg.norm(p[:, None, :] - surf[None, :, :], axis=-1), axis=1
    )
    got = np.abs(f(p))
    # the sampled surface can only overestimate the true distance, and by at
    # most the largest gap between random surface samples (mean lateral
    # spacing ~0.014; allow several times that for unlucky gaps)
    assert (got <= d_surf + 1e-9).all()
    assert (d_surf**2 <= got**2 + 0.08**2).all()


def test_sd_capsule_endpoints_and_middle():
    f = sd_capsule((0.0, 0.0, 0.0), (1.0, 0.0, 0.0), 0.1)
    assert f(np.array([[0.5, 0.3, 0.0]]))[0] == pytest.approx(0.2)
    assert f(np.array([[-0.2, 0.0, 0.0]]))[0] == pytest.approx(0.1)
    assert f(np.array([[0.5, 0.0, 0.0]]))[0] == pytest.approx(-0.1)


def test_sd_torus_closed_form():
    f = sd_torus((0.5, 0.5, 0.5), 0.3, 0.1, axis=1)
    # point on the ring circle: deep inside by the minor radius
    assert f(np.array([[0.8, 0.5, 0.5]]))[0] == pytest.approx(-0.1)
    # at the center: distance to ring minus minor
    assert f(np.array([[0.5, 0.5, 0.5]]))[0] == pytest.approx(0.2)


def test_sdf_csg_combinators():
    a = sd_sphere((0.0, 0.0, 0.0), 1.0)
    b = sd_sphere((1.0, 0.0, 0.0), 1.0)
    u = sd_union(a, b)
    p = np.array([[1.5, 0.0, 0.0], [-0.5, 0.0, 0.0]])
    assert np.allclose(u(p), np.minimum(a(p), b(p)))
    diff = sd_difference(a, b)
    assert np.allclose(diff(p), np.maximum(a(p), -b(p)))
    # carved region is outside the difference
    assert diff(np.array([[0.9, 0.0, 0.0]]))[0] > 0
    assert diff(np.array([[-0.9, 0.0, 0.0]]))[0] < 0


def test_scene_registry():
    for name in ("sphere", "torus", "rope", "holed"):
        scene = get_scene(name)
        assert scene.name == name
        vals = scene.sdf(np.random.default_rng(0).uniform(0, 1, (16, 3)))
        assert np.isfinite(vals).all()
    with pytest.raises(DataError, match="sphere"):
        get_scene("nonexistent")


def test_rope_scene_contains_thin_rope():
    scene = get_scene("rope")
    assert ROPE_RADIUS == 0.01
    # rope midpoint is inside; just above it is outside
    assert scene.sdf(np.array([[0.5, 0.72, 0.5]]))[0] < 0
    assert scene.sdf(np.array([[0.5, 0.72 + 0.05, 0.5]]))[0] > 0


def test_holed_scene_has_through_hole():
    scene = get_scene("holed")
    # the hole axis runs along z through the box center
    assert scene.sdf(np.array([[0.5, 0.5, 0.5]]))[0] > 0
    assert scene.sdf(np.array([[0.5, 0.62, 0.5]]))[0] < 0  # box wall above hole


# ----------------------------------------------------------------- cameras


def test_camera_ring_looks_at_cube_center():
    cams = camera_ring(12, 16, 16, seed=0)
    assert len(cams) == 12
    for cam in cams:
        to_center = np.array([0.5, 0.5, 0.5]) - cam.origin
        dist = np.linalg.norm(to_center)
        assert dist == pytest.approx(1.5)
        assert np.allclose(cam.forward, to_center / dist, atol=1e-9)


def test_camera_ring_seed_changes_azimuth():
    a = camera_ring(4, 8, 8, seed=0)
    b = camera_ring(4, 8, 8, seed=1)
    assert not np.allclose(a[0].origin, b[0].origin)


# ----------------------------------------------------------------- shading


def test_shade_sphere_matches_analytic_normal():
    scene = get_scene("sphere")
    # brightest point: surface point whose normal is the light direction
    light = np.asarray(scene.light_direction)
    light = light / np.linalg.norm(light)
    p_top = 0.5 + 0.3 * light
    p_bottom = 0.5 - 0.3 * light
    c_top = shade(scene, p_top[None])
    c_bottom = shade(scene, p_bottom[None])
    albedo = np.array([0.85, 0.35, 0.25])
    assert np.allclose(c_top[0], albedo, atol=1e-4)  # full lambert + ambient
    assert np.allclose(c_bottom[0], scene.ambient * albedo, atol=1e-4)


def test_sphere_trace_center_hit_and_background():
    scene = get_scene("sphere")
    cams = camera_ring(1, 17, 17, seed=0)
    pixels = np.array([[8, 8], [0, 0]])
    rays = generate_rays(cams[0], pixels)
    colors, unconverged = sphere_trace(scene, rays, background=(0.0, 0.0, 1.0))
    assert unconverged == 0
    assert colors[0, 0] > 0.1 and colors[0, 2] < 0.3  # reddish sphere
    assert np.allclose(colors[1], [0.0, 0.0, 1.0])  # corner ray misses


# ----------------------------------------------------------------- dataset


@pytest.fixture(scope="module")
def sphere_dataset():
    return generate_synthetic(get_scene("sphere"), n_views=3, image_size=20,
                              seed=0, val_views=2)


def test_generate_synthetic_shapes_and_splits(sphere_dataset):
    ds = sphere_dataset
    assert len(ds.images) == 5
    assert ds.indices("train") == [0, 1, 2]
    assert ds.indices("val") == [3, 4]
    for img in ds.images:
        assert img.shape == (20, 20, 3)
        assert (img >= 0).all() and (img <= 1).all()
        # quantized to the 8-bit grid
        assert np.allclose(img * 255, np.round(img * 255), atol=1e-9)


def test_generate_synthetic_deterministic(sphere_dataset):
    again = generate_synthetic(get_scene("sphere"), n_views=3, image_size=20,
                               seed=0, val_views=2)
    for a, b in zip(sphere_dataset.images, again.images):
        assert np.array_equal(a, b)


def test_dataset_round_trip(sphere_dataset, tmp_path):
    write_dataset(sphere_dataset, tmp_path)
    assert (tmp_path / "transforms_train.json").exists()
    assert (tmp_path / "transforms_val.json").exists()
    back = load_dataset(tmp_path)
    assert back.splits == sphere_dataset.splits
    assert back.camera_angle_x == sphere_dataset.camera_angle_x
    for a, b in zip(sphere_dataset.images, back.images):
        assert np.array_equal(a, b)  # bit-exact through the 8-bit PNGs
    for ca, cb in zip(sphere_dataset.cameras, back.cameras):
        assert np.allclose(ca.c2w, cb.c2w)
        assert ca.fx == pytest.approx(cb.fx)


def test_load_dataset_missing_dir(tmp_path):
    with pytest.raises(DataError, match="transforms"):
        load_dataset(tmp_path / "nope")


def test_load_dataset_malformed_json(tmp_path):
    (tmp_path / "transforms_train.json").write_text("{not json")
    with pytest.raises(DataError, match="malformed"):
        load_dataset(tmp_path)


def test_load_dataset_missing_image(sphere_dataset, tmp_path):
    write_dataset(sphere_dataset, tmp_path)
    (tmp_path / "train" / "r_0.png").unlink()
    with pytest.raises(DataError, match="missing image"):
        load_dataset(tmp_path)


def test_load_dataset_bad_transform(sphere_dataset, tmp_path):
    write_dataset(sphere_dataset, tmp_path)
    p = tmp_path / "transforms_train.json"
    payload = json.loads(p.read_text())
    payload["frames"][0]["transform_matrix"] = np.zeros((4, 4)).tolist()
    p.write_text(json.dumps(payload))
    with pytest.raises(DataError, match="non-invertible"):
        load_dataset(tmp_path)


# ----------------------------------------------------------- batch sampling


def test_sample_pixel_batch_matches_images(sphere_dataset):
    rng = np.random.default_rng(0)
    rays, colors = sample_pixel_batch(sphere_dataset, 64, rng)
    assert len(rays) == 64
    assert colors.shape == (64, 3)
    assert np.allclose(np.linalg.norm(rays.directions, axis=-1), 1.0)
    # each color must appear in some train image
    train_pixels = np.concatenate(
        [sphere_dataset.images[i].reshape(-1, 3) for i in sphere_dataset.indices("train")]
    )
    for c in colors[:8]:
        assert (np.abs(train_pixels - c).sum(axis=1) < 1e-12).any()


def test_sample_pixel_batch_exhaustive_covers_everything(sphere_dataset):
    total = 3 * 20 * 20
    rng = np.random.default_rng(0)
    rays, colors = sample_pixel_batch(sphere_dataset, total, rng, exhaustive=True)
    want = np.sort(
        np.concatenate(
            [sphere_dataset.images[i].reshape(-1, 3) for i in sphere_dataset.indices("train")]
        ).view("f8,f8,f8"), axis=0,
    )
    got = np.sort(colors.copy().view("f8,f8,f8"), axis=0)
    assert np.array_equal(want, got)
    with pytest.raises(ValueError):
        sample_pixel_batch(sphere_dataset, total - 1, rng, exhaustive=True)


def test_sample_pixel_batch_deterministic(sphere_dataset):
    a = sample_pixel_batch(sphere_dataset, 32, np.random.default_rng(7))
    b = sample_pixel_batch(sphere_dataset, 32, np.random.default_rng(7))
    assert np.array_equal(a[0].origins, b[0].origins)
    assert np.array_equal(a[1], b[1])
