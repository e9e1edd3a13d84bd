import json
import os

import numpy as np
import pytest

from xmdistill.geometry import nearest_pixels, project
from xmdistill.scenegen import (CLASS_NAMES, GROUND, NUM_CLASSES, NUM_REFINED,
                                PairedSample, Scene, SceneSpec, build_scene,
                                cast_rays, default_camera, generate_dataset,
                                generate_scene, lidar_pattern, load_dataset,
                                load_sample, raycast_lidar, sample_visibility,
                                save_sample)


@pytest.fixture(scope="module")
def spec():
    return SceneSpec()


@pytest.fixture(scope="module")
def scenes(spec):
    return [generate_scene(spec, s) for s in range(6)]


class TestGenerateScene:
    def test_same_seed_bitwise_identical(self, spec):
        a = generate_scene(spec, 3)
        b = generate_scene(spec, 3)
        assert np.array_equal(a.cloud, b.cloud)
        assert np.array_equal(a.image, b.image)
        assert np.array_equal(a.labels_pt, b.labels_pt)
        assert np.array_equal(a.labels_px, b.labels_px)

    def test_different_seeds_differ(self, spec):
        a = generate_scene(spec, 1)
        b = generate_scene(spec, 2)
        assert not np.array_equal(a.cloud[: min(len(a.cloud), len(b.cloud))],
                                  b.cloud[: min(len(a.cloud), len(b.cloud))])

    def test_ground_occupies_lowest_band(self, scenes):
        for s in scenes:
            ground_z = s.cloud[s.labels_pt == GROUND, 2]
            other_z = s.cloud[s.labels_pt != GROUND, 2]
            assert ground_z.size > 0
            assert np.percentile(ground_z, 95) < 0.1
            assert np.percentile(other_z, 50) > np.percentile(ground_z, 95)

    def test_point_count_in_expected_band(self, scenes):
        for s in scenes:
            assert 4000 <= s.cloud.shape[0] <= 8000

    def test_label_ranges(self, scenes):
        for s in scenes:
            assert 0 <= s.labels_pt.min() and s.labels_pt.max() < NUM_CLASSES
            assert 0 <= s.labels_px_refined.min()
            assert s.labels_px_refined.max() < NUM_REFINED

    def test_pixel_point_frequency_correlation(self, spec):
        """Spearman rank correlation across (scene, class) frequency pairs."""
        px_f, pt_f = [], []
        for seed in range(50):
            s = generate_scene(spec, seed)
            px = np.bincount(s.labels_px.ravel(), minlength=NUM_CLASSES)
            pt = np.bincount(s.labels_pt, minlength=NUM_CLASSES)
            px_f.extend(px / px.sum())
            pt_f.extend(pt / pt.sum())

        def ranks(v):
            order = np.argsort(v)
            out = np.empty(len(v))
            out[order] = np.arange(len(v))
            return out

        rx, ry = ranks(np.array(px_f)), ranks(np.array(pt_f))
        rho = np.corrcoef(rx, ry)[0, 1]
        assert rho > 0.5, "Spearman rho %.3f" % rho

    def test_joint_visibility_nonempty_default_rig(self, scenes):
        for s in scenes:
            _, vis = sample_visibility(s)
            assert vis.size > 0


class TestRaycastLidar:
    def test_ground_only_scene_all_ground(self, spec):
        scene = build_scene(spec, 0)
        scene = Scene(spec, [scene.primitives[0]], scene.sun_dir, 0)
        cloud, labels, refined = raycast_lidar(scene, lidar_pattern(spec),
                                               np.random.default_rng(0))
        assert np.all(labels == GROUND)

    def test_sky_rays_produce_no_points(self, spec):
        scene = build_scene(spec, 0)
        up = np.array([[0.0, 0.0, 1.0], [0.5, 0.0, 0.8]])
        up /= np.linalg.norm(up, axis=1, keepdims=True)
        cloud, labels, _ = raycast_lidar(scene, up, np.random.default_rng(0))
        assert cloud.shape[0] == 0

    def test_sphere_intersection_matches_ray_march(self, spec):
        from xmdistill.scenegen import Primitive
        prim = Primitive("sphere", 4, 4, np.array([0.3, 0.4, 0.2]), 0.5,
                         {"center": np.array([3.0, 0.5, 1.0]), "radius": 0.8})
        scene = Scene(spec, [prim], np.array([0.0, 0.0, 1.0]), 0)
        dirs = lidar_pattern(spec)
        t, idx, _ = cast_rays(scene, np.array([0.0, 0.0, spec.lidar_height]), dirs)
        hits = np.nonzero(idx >= 0)[0]
        assert hits.size > 0
        origin = np.array([0.0, 0.0, spec.lidar_height])
        for ray in hits[::7]:
            lo, hi = 0.0, 20.0
            d = dirs[ray]

            def dist(tt):
                p = origin + tt * d
                return np.linalg.norm(p - prim.params["center"]) - 0.8

            step = 1e-3
            tt = step
            while tt < 20.0 and dist(tt) > 0:
                tt += max(step, dist(tt) * 0.9)
            assert abs(tt - t[ray]) <= 1e-3


class TestRenderCamera:
    def test_empty_scene_background_everywhere(self, spec):
        from xmdistill.scenegen import SKY_CLASS, render_camera
        scene = Scene(spec, [], np.array([0.0, 0.0, 1.0]), 0)
        img, labels, refined, depth = render_camera(scene, default_camera(spec),
                                                    np.random.default_rng(0))
        assert np.all(labels == SKY_CLASS)
        assert np.all(np.isinf(depth))

    def test_single_huge_box_fills_frustum(self, spec):
        from xmdistill.scenegen import Primitive, VEHICLE, render_camera
        prim = Primitive("box", VEHICLE, VEHICLE, np.array([0.2, 0.2, 0.6]), 0.8,
                         {"lo": np.array([2.0, -50.0, -50.0]),
                          "hi": np.array([2.5, 50.0, 50.0])})
        scene = Scene(spec, [prim], np.array([0.0, 0.0, 1.0]), 0)
        _, labels, _, depth = render_camera(scene, default_camera(spec),
                                            np.random.default_rng(0))
        assert np.all(labels == VEHICLE)
        assert np.isfinite(depth).all()

    def test_depth_consistency_at_projections(self, scenes, spec):
        """The z-buffer around each visible point's projection matches its
        depth within 2x jitter plus the local quantization spread.

        Points whose bilinear footprint leaves the image are skipped (their
        footprint is degenerate); the tolerance widens by the local corner
        spread because depth varies within a pixel on sloped surfaces.
        """
        total = ok = 0
        for s in scenes:
            corr, vis = sample_visibility(s)
            u, v = corr.pixels[vis, 0], corr.pixels[vis, 1]
            z = corr.depth[vis]
            h, w = s.depth_px.shape
            interior = (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)
            u, v, z = u[interior], v[interior], z[interior]
            u0 = np.floor(u).astype(int)
            v0 = np.floor(v).astype(int)
            u1, v1 = np.minimum(u0 + 1, w - 1), np.minimum(v0 + 1, h - 1)
            d = s.depth_px.astype(np.float64)
            corners = np.stack([d[v0, u0], d[v0, u1], d[v1, u0], d[v1, u1]])
            finite = np.isfinite(corners)
            best = np.where(finite, np.abs(corners - z), np.inf).min(axis=0)
            cmax = np.where(finite, corners, -np.inf).max(axis=0)
            cmin = np.where(finite, corners, np.inf).min(axis=0)
            spread = np.where(finite.any(axis=0), cmax - cmin, 0.0)
            good = best <= 2 * spec.range_jitter + 0.5 * spread
            ok += good.sum()
            total += good.size
        assert ok / total >= 0.99


class TestCrossModalConsistency:
    def test_label_agreement_on_visible_points(self, scenes):
        agree = total = 0
        for s in scenes:
            corr, vis = sample_visibility(s)
            pix = nearest_pixels(corr)[vis]
            px_labels = s.labels_px[pix[:, 1], pix[:, 0]]
            agree += (px_labels == s.labels_pt[vis]).sum()
            total += vis.size
        assert agree / total >= 0.99


class TestDatasetIO:
    def test_sample_round_trip(self, tmp_path, spec):
        sample = generate_scene(spec, 9)
        path = str(tmp_path / "s")
        save_sample(sample, path, spec)
        loaded = load_sample(path)
        assert np.array_equal(sample.cloud, loaded.cloud)
        assert np.array_equal(sample.image, loaded.image)
        assert np.array_equal(sample.labels_pt, loaded.labels_pt)
        assert np.array_equal(sample.labels_px_refined, loaded.labels_px_refined)
        assert np.array_equal(sample.depth_px, loaded.depth_px)
        assert np.allclose(sample.cam.intrinsics, loaded.cam.intrinsics)

    def test_required_files_present(self, tmp_path, spec):
        sample = generate_scene(spec, 9)
        path = tmp_path / "s"
        save_sample(sample, str(path), spec)
        for name in ("cloud.f32", "image.f32", "labels_pt.i32", "labels_px.i32",
                     "calib.json", "meta.json"):
            assert (path / name).exists()
        meta = json.loads((path / "meta.json").read_text())
        assert meta["seed"] == 9 and "spec_hash" in meta

    def test_dataset_manifest_counts(self, tmp_path, spec):
        small = SceneSpec()
        manifest = generate_dataset(small, str(tmp_path / "d"), 3, 2, seed0=10)
        assert len(manifest["splits"]["train"]) == 3
        assert len(manifest["splits"]["val"]) == 2
        _, samples = load_dataset(str(tmp_path / "d"))
        assert len(samples["train"]) == 3
        assert samples["train"][0].seed == 10
        assert samples["val"][0].seed == 13
