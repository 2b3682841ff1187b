import numpy as np
import pytest

from satgeo import scenegen
from satgeo.camera import make_rays
from satgeo.evaluation import DsmGrid
from satgeo.regularizers import load_sparse_points
from satgeo.scenegen import (SpecError, empty_spec, gen_scene, generate, make_cameras,
                             render_ground_truth, trace_camera, validate_spec, volume_depth)

from conftest import tiny_spec


def spec_height(spec, x, y):
    """Upper envelope of the spec's primitives, straight from the numbers."""
    lx = np.asarray(x, float) - spec["center_utm"][0]
    ly = np.asarray(y, float) - spec["center_utm"][1]
    h = np.full(np.broadcast(lx, ly).shape, float(spec["ground_height_m"]))
    for b in spec["boxes"]:
        inside = (lx >= b["x0"]) & (lx <= b["x1"]) & (ly >= b["y0"]) & (ly <= b["y1"])
        h = np.where(inside, np.maximum(h, b["height"]), h)
    for r in spec["ramps"]:
        inside = (lx >= r["x0"]) & (lx <= r["x1"]) & (ly >= r["y0"]) & (ly <= r["y1"])
        lo, hi, at = (r["x0"], r["x1"], lx) if r["axis"] == "x" else (r["y0"], r["y1"], ly)
        ramp = r["h0"] + (at - lo) / (hi - lo) * (r["h1"] - r["h0"])
        h = np.where(inside, np.maximum(h, ramp), h)
    return h


def one_box_spec(**cams):
    spec = empty_spec(extent_m=32.0)
    spec["boxes"] = [{"x0": -5.0, "x1": 5.0, "y0": -5.0, "y1": 5.0, "height": 5.0,
                      "color": [0.5, 0.5, 0.5], "texture": "flat"}]
    spec["cameras"] = dict(spec["cameras"], **cams)
    return spec


class TestHeights:
    def test_empty_is_flat(self):
        scene = gen_scene(empty_spec())
        dsm = scene.nadir_dsm()
        assert dsm.altitudes.shape == (64, 64)
        np.testing.assert_array_equal(dsm.altitudes, 0.0)

    def test_one_box(self):
        scene = gen_scene(one_box_spec())
        dsm = scene.nadir_dsm()
        xx, yy = dsm.cell_centers()
        lx, ly = xx - scene.center[0], yy - scene.center[1]
        inside = (np.abs(lx) < 5) & (np.abs(ly) < 5)
        assert inside.sum() == 100
        np.testing.assert_array_equal(dsm.altitudes[inside], 5.0)
        np.testing.assert_array_equal(dsm.altitudes[~inside], 0.0)

    @pytest.mark.parametrize("seed", range(8))
    def test_random_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        spec = scenegen.random_spec(rng, n_boxes=4, n_ramps=2)
        scene = gen_scene(spec)
        x = scene.center[0] + rng.uniform(-32, 32, 5000)
        y = scene.center[1] + rng.uniform(-32, 32, 5000)
        np.testing.assert_allclose(scene.height(x, y), spec_height(spec, x, y), atol=1e-9)

    def test_normals(self):
        spec = tiny_spec()
        spec["ramps"] = [{"x0": 4.5, "x1": 7.5, "y0": -7, "y1": 7, "h0": 0.0, "h1": 3.0, "axis": "x"}]
        scene = gen_scene(spec)
        c = scene.center
        np.testing.assert_allclose(scene.surface_normal(c[0], c[1]), [0, 0, 1])
        np.testing.assert_allclose(scene.surface_normal(c[0] + 6, c[1]), np.array([-1, 0, 1]) / np.sqrt(2))

    def test_density(self):
        scene = gen_scene(one_box_spec())
        f = scene.frame
        p = f.to_normalized(np.array([[*scene.center, 4.9], [*scene.center, 5.1],
                                      [scene.center[0] + 10, scene.center[1], -0.1]]))
        np.testing.assert_array_equal(scene.density(p), [200.0, 0.0, 200.0])


class TestSpecValidation:
    def test_outside_extent(self):
        spec = tiny_spec()
        spec["boxes"][0]["x1"] = 40.0
        with pytest.raises(SpecError, match=r"boxes\[0\]\.x1"):
            validate_spec(spec)

    def test_height_above_bounds(self):
        spec = tiny_spec()
        spec["boxes"][0]["height"] = 30.0
        with pytest.raises(SpecError, match=r"boxes\[0\]"):
            validate_spec(spec)

    def test_missing(self):
        spec = tiny_spec()
        del spec["kappa"]
        with pytest.raises(SpecError, match="kappa"):
            validate_spec(spec)
        spec = tiny_spec()
        del spec["cameras"]["h_max_m"]
        with pytest.raises(SpecError, match="cameras.h_max_m"):
            validate_spec(spec)

    def test_unknown_preset(self):
        with pytest.raises(SpecError):
            scenegen.preset("nowhere")

    def test_toy_jax_layout(self):
        spec = scenegen.preset("toy-jax")
        assert spec["extent_m"] == 64.0 and len(spec["boxes"]) == 2 and len(spec["ramps"]) == 1
        cams = make_cameras(gen_scene(spec), np.random.default_rng(0))
        assert len(cams) == 9
        angles = [np.degrees(np.arccos(-c.view_dir[2])) for c in cams]
        np.testing.assert_allclose(sorted(angles), sorted(np.abs(np.linspace(-20, 20, 9))), atol=1e-9)


class TestRenderGroundTruth:
    def test_nadir_flat(self):
        spec = empty_spec(extent_m=16.0, frame_scale_m=100.0)
        spec["cameras"] = dict(spec["cameras"], count=1, h_min_m=-10.0, h_max_m=100.0)
        scene = gen_scene(spec)
        (cam,) = make_cameras(scene, np.random.default_rng(0))
        _, depth = render_ground_truth(scene, cam)
        np.testing.assert_allclose(depth, 1.0, rtol=1e-12)

    def test_oblique_edge_jump(self):
        spec = one_box_spec(count=2, max_off_nadir_deg=10.0)
        scene = gen_scene(spec)
        cam = make_cameras(scene, np.random.default_rng(0))[0]  # tilted -10 deg along x
        _, depth = render_ground_truth(scene, cam)
        row = depth[cam.height // 2]
        jumps = np.abs(np.diff(row))
        # roof and ground are flat, so the occluding edge jumps by the box height along the ray
        want = 5.0 / np.cos(np.radians(10.0)) / scene.frame.scale
        assert jumps.max() == pytest.approx(want, rel=1e-9)

    def test_identity_color_is_albedo(self):
        scene = gen_scene(tiny_spec())
        cam = make_cameras(scene, np.random.default_rng(0))[1]
        img, _ = render_ground_truth(scene, cam, np.eye(3), np.zeros(3))
        _, pts, prim, face = trace_camera(scene, cam)
        np.testing.assert_allclose(img.reshape(-1, 3), scene.albedo(pts, prim, face), atol=1e-15)

    def test_shadows_darken(self):
        spec = one_box_spec(count=1)
        spec["shadows"] = True
        spec["cameras"]["sun_elevation_deg"] = 30.0
        scene = gen_scene(spec)
        (cam,) = make_cameras(scene, np.random.default_rng(1))
        lit, _ = render_ground_truth(scene, cam, shadows=False)
        shaded, _ = render_ground_truth(scene, cam, shadows=True)
        assert np.all(shaded <= lit + 1e-15) and np.any(shaded < lit - 0.1)

    def test_depths_consistent_across_views(self, tiny_dataset):
        scene = tiny_dataset.scene()
        spec = tiny_dataset.spec
        tol = 1e-6 * tiny_dataset.frame.scale
        box = spec["boxes"][0]
        for cam in tiny_dataset.cams:
            vv, uu = np.mgrid[0:cam.height, 0:cam.width]
            pix = np.stack([uu.ravel(), vv.ravel()], -1)
            rays = make_rays(tiny_dataset.cams, tiny_dataset.frame, np.full(len(pix), cam.image_id),
                             pix, dtype=np.float64)
            d = tiny_dataset.depth_gt[cam.image_id].ravel().astype(np.float64)
            p = tiny_dataset.frame.to_utm(rays.origins + d[:, None] * rays.dirs)
            h = spec_height(spec, p[:, 0], p[:, 1])
            on_top = np.abs(p[:, 2] - h) <= tol
            lx = p[:, 0] - spec["center_utm"][0]
            ly = p[:, 1] - spec["center_utm"][1]
            on_wall = ((np.minimum(np.abs(lx - box["x0"]), np.abs(lx - box["x1"])) <= tol)
                       | (np.minimum(np.abs(ly - box["y0"]), np.abs(ly - box["y1"])) <= tol))
            on_wall &= p[:, 2] <= box["height"] + tol
            assert np.all(on_top | on_wall), cam.image_id
            assert on_top.mean() > 0.8


class TestVolumeDepth:
    def deep_rays(self, scene, cam, surface):
        """Pixels whose ray stays inside solid for 20/kappa past the surface."""
        vv, uu = np.mgrid[0:cam.height, 0:cam.width]
        pix = np.stack([uu.ravel(), vv.ravel()], -1)
        rays = make_rays({cam.image_id: cam}, scene.frame, np.full(len(pix), cam.image_id), pix,
                         dtype=np.float64)
        s = np.linspace(1e-9, 20 / 200.0, 200)
        pts = rays.origins[:, None] + (surface[:, None] + s) [..., None] * rays.dirs[:, None]
        u = scene.frame.to_utm(pts)
        solid = np.all(u[..., 2] < spec_height(scene.spec, u[..., 0], u[..., 1]), axis=1)
        return rays, solid

    def test_matches_opaque_closed_form(self, tiny_dataset):
        scene = tiny_dataset.scene()
        cam = tiny_dataset.cams[2]
        surface = tiny_dataset.depth_gt[2].ravel().astype(np.float64)
        rays, deep = self.deep_rays(scene, cam, surface)
        assert deep.mean() > 0.7
        n = 10_000
        got = volume_depth(scene, rays, n)
        span = rays.t_far - rays.t_near
        # exponential absorption from the surface onward: mean free path 1/kappa
        want = surface + 1.0 / scene.kappa
        np.testing.assert_array_less(np.abs(got - want)[deep], (2 * span / n)[deep])
        # the offset to the surface itself is far beyond the sampling tolerance
        assert np.all(np.abs(got - surface)[deep] > 2 * span[deep] / n)

    def test_large_kappa_hits_surface(self, tiny_dataset):
        spec = dict(tiny_dataset.spec, kappa=1e6)
        scene = scenegen.HeightfieldScene(spec, tiny_dataset.seed)
        cam = tiny_dataset.cams[0]
        surface = tiny_dataset.depth_gt[0].ravel().astype(np.float64)
        rays, _ = self.deep_rays(scene, cam, surface)
        n = 10_000
        got = volume_depth(scene, rays, n)
        np.testing.assert_array_less(np.abs(got - surface), 2 * (rays.t_far - rays.t_near) / n)


class TestSparsePoints:
    def test_on_surface_and_reprojection(self, tiny_dataset):
        spec = tiny_dataset.spec
        rows = scenegen.sample_sparse_points(tiny_dataset.scene(), tiny_dataset.cams, 200, 0.5,
                                             np.random.default_rng(0))
        assert len(rows) == 200
        rows = np.array(rows)
        np.testing.assert_allclose(rows[:, 5], spec_height(spec, rows[:, 3], rows[:, 4]), atol=1e-9)
        for r in rows:
            cam = tiny_dataset.cams[int(r[0])]
            off = np.linalg.norm(cam.project(r[3:6]) - r[1:3])
            assert off <= 0.5 + 1e-9
            assert off == pytest.approx(r[6], abs=1e-9)

    def test_noise_free_weights(self, tmp_path):
        spec = tiny_spec()
        spec["sparse_points"] = {"n": 40, "pixel_noise_px": 0.0}
        scenegen.write_dataset(tmp_path, spec, seed=0)
        pts = load_sparse_points(tmp_path / "sparse_points.csv")
        assert len(pts) == 40 and all(p.weight == 1.0 for p in pts)

    def test_rejects_zero(self, tiny_dataset):
        with pytest.raises(SpecError):
            scenegen.sample_sparse_points(tiny_dataset.scene(), tiny_dataset.cams, 0, 0.5,
                                          np.random.default_rng(0))


class TestDatasetFiles:
    def test_layout(self, tiny_dataset):
        root = tiny_dataset.root
        for name in ("scene.json", "dsm_gt.pfm", "dsm_gt.json", "sparse_points.csv"):
            assert (root / name).is_file()
        for sub in ("cameras", "images", "depth_gt"):
            assert len(list((root / sub).iterdir())) == 3
        assert tiny_dataset.images.shape == (3, 16, 16, 3)
        assert isinstance(tiny_dataset.dsm_gt, DsmGrid)

    def test_seed_determinism(self, tmp_path):
        a = scenegen.write_dataset(tmp_path / "a", tiny_spec(), seed=7)
        b = scenegen.write_dataset(tmp_path / "b", tiny_spec(), seed=7)
        c = scenegen.write_dataset(tmp_path / "c", tiny_spec(), seed=8)
        assert scenegen.dataset_digest(a) == scenegen.dataset_digest(b)
        assert scenegen.dataset_digest(a) != scenegen.dataset_digest(c)

    def test_refuses_non_empty(self, tmp_path):
        (tmp_path / "junk").write_text("x")
        with pytest.raises(FileExistsError):
            scenegen.write_dataset(tmp_path, tiny_spec())

    def test_load_missing(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            scenegen.load_dataset(tmp_path)

    def test_images_match_in_memory(self, tiny_dataset):
        _, _, _, images, _, _ = generate(tiny_spec(), seed=3)
        np.testing.assert_allclose(tiny_dataset.images, np.stack(images), atol=0.5 / 255 + 1e-7)
