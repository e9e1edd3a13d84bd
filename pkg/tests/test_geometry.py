import numpy as np
import pytest

from xmdistill import autodiff as ad
from xmdistill.autodiff import Tensor, grad_check
from xmdistill.errors import ShapeError
from xmdistill.geometry import (CameraModel, CorrespondenceMap, joint_visible_mask,
                                nearest_pixels, project, sample_image_features)


def make_cam(fx=50.0, fy=50.0, cx=48.0, cy=32.0, width=96, height=64, ext=None):
    k = np.array([[fx, 0, cx], [0, fy, cy], [0, 0, 1.0]])
    return CameraModel(k, np.eye(4) if ext is None else ext, width, height)


class TestCameraModel:
    def test_rejects_negative_focal(self):
        with pytest.raises(ValueError):
            make_cam(fx=-1.0)

    def test_rejects_non_orthonormal_rotation(self):
        ext = np.eye(4)
        ext[0, 0] = 2.0
        with pytest.raises(ValueError):
            make_cam(ext=ext)

    def test_json_round_trip(self):
        cam = make_cam()
        cam2 = CameraModel.from_json(cam.to_json())
        assert np.allclose(cam.intrinsics, cam2.intrinsics)
        assert np.allclose(cam.extrinsics, cam2.extrinsics)
        assert (cam.width, cam.height) == (cam2.width, cam2.height)


class TestProject:
    def test_optical_axis_hits_principal_point(self):
        corr = project(np.array([[0.0, 0.0, 2.0]]), make_cam())
        assert np.allclose(corr.pixels[0], [48.0, 32.0])
        assert corr.valid[0]

    def test_point_behind_camera_invalid(self):
        corr = project(np.array([[0.0, 0.0, -1.0]]), make_cam())
        assert not corr.valid[0]

    def test_direct_pinhole_algebra(self):
        corr = project(np.array([[1.0, 1.0, 2.0]]), make_cam())
        assert np.allclose(corr.pixels[0], [73.0, 57.0])

    def test_scale_consistency_in_camera_frame(self):
        cam = make_cam()
        p = np.array([[0.3, -0.2, 2.0]])
        a = project(p, cam).pixels
        b = project(3.7 * p, cam).pixels
        assert np.allclose(a, b)

    def test_out_of_bounds_masked(self):
        corr = project(np.array([[10.0, 0.0, 1.0]]), make_cam())
        assert not corr.valid[0]


class TestSampling:
    def make_corr(self, pixels, valid=None, width=2, height=2):
        pixels = np.asarray(pixels, dtype=float)
        n = pixels.shape[0]
        valid = np.ones(n, bool) if valid is None else np.asarray(valid)
        return CorrespondenceMap(pixels, np.ones(n), valid, width, height)

    def test_constant_map_returns_constant(self):
        corr = self.make_corr([[0.2, 0.3], [1.4, 0.9]])
        feats, mask = sample_image_features(Tensor(np.full((3, 2, 2), 5.0)), corr)
        assert np.allclose(feats.data, 5.0)
        assert mask.all()

    def test_round_half_up(self):
        corr = self.make_corr([[10.6, 3.2]], width=20, height=10)
        assert np.array_equal(nearest_pixels(corr)[0], [11, 3])
        corr = self.make_corr([[10.5, 3.5]], width=20, height=10)
        assert np.array_equal(nearest_pixels(corr)[0], [11, 4])

    def test_invalid_points_get_zero_rows(self):
        corr = self.make_corr([[0.0, 0.0], [1.0, 1.0]], valid=[True, False])
        feats, mask = sample_image_features(Tensor(np.full((2, 2, 2), 3.0)), corr)
        assert np.allclose(feats.data[0], 3.0)
        assert np.allclose(feats.data[1], 0.0)
        assert list(mask) == [True, False]

    def test_gradient_hits_exactly_one_pixel_per_point(self):
        corr = self.make_corr([[0.2, 0.1], [1.3, 0.8]])
        fmap = Tensor(np.random.default_rng(0).normal(size=(1, 2, 2)),
                      requires_grad=True)
        err = grad_check(
            lambda ts: ad.tsum(sample_image_features(ts[0], corr)[0] ** 2.0), [fmap])
        assert err <= 1e-4
        fmap.zero_grad()
        out, _ = sample_image_features(fmap, corr)
        ad.tsum(out).backward()
        assert (fmap.grad != 0).sum() == 2

    def test_shape_mismatch_raises(self):
        corr = self.make_corr([[0.0, 0.0]], width=4, height=4)
        with pytest.raises(ShapeError):
            sample_image_features(Tensor(np.zeros((1, 2, 2))), corr)


class TestJointVisibility:
    def test_all_behind_camera_empty(self):
        corr = project(np.array([[0.0, 0.0, -z] for z in (1.0, 2.0)]), make_cam())
        assert joint_visible_mask(corr).size == 0

    def test_all_in_frustum_full(self):
        pts = np.array([[0.0, 0.0, 2.0], [0.1, 0.1, 3.0]])
        corr = project(pts, make_cam())
        assert np.array_equal(joint_visible_mask(corr), [0, 1])

    def test_depth_gate_drops_occluded_points(self):
        corr = CorrespondenceMap(np.array([[0.0, 0.0], [1.0, 1.0]]),
                                 np.array([1.0, 5.0]),
                                 np.array([True, True]), 2, 2)
        depth = np.full((2, 2), 1.0, dtype=np.float32)
        vis = joint_visible_mask(corr, depth)
        assert np.array_equal(vis, [0])

    def test_frustum_fraction_matches_solid_angle(self):
        # uniform directions in a ball around the pinhole: expected in-frustum
        # fraction is the rectangular cone solid angle over 4*pi
        cam = make_cam(fx=83.0, fy=83.0, cx=47.5, cy=31.5)
        rng = np.random.default_rng(1)
        pts = rng.normal(size=(50000, 3))
        pts /= np.linalg.norm(pts, axis=1, keepdims=True)
        pts *= rng.uniform(0.5, 5.0, size=(50000, 1))
        frac = joint_visible_mask(project(pts, cam)).size / 50000.0
        ax = np.arctan(48.0 / 83.0)
        ay = np.arctan(32.0 / 83.0)
        expect = np.arcsin(np.sin(ax) * np.sin(ay)) / np.pi
        assert abs(frac - expect) <= 0.02
