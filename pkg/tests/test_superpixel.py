import numpy as np
import pytest

from xmdistill import autodiff as ad
from xmdistill.autodiff import Tensor, grad_check
from xmdistill.geometry import CorrespondenceMap
from xmdistill.superpixel import (SuperpixelPartition, group_superpoints,
                                  load_partition, pool_pixels, pool_points,
                                  rgb_to_lab, save_partition, slic)


def two_tone_image(h=20, w=30, split=15):
    img = np.zeros((3, h, w))
    img[0, :, :split] = 1.0
    img[2, :, split:] = 1.0
    return img


def lloyd_2means_labxy(image, m=10.0, iters=50):
    """Brute-force 2-means in (l,a,b,x,y) with the SLIC distance."""
    lab = rgb_to_lab(image)
    h, w = lab.shape[1:]
    step = np.sqrt(h * w / 2.0)
    ys, xs = np.mgrid[0:h, 0:w]
    centers = np.array([[*lab[:, h // 2, w // 4], h / 2.0, w / 4.0],
                        [*lab[:, h // 2, 3 * w // 4], h / 2.0, 3.0 * w / 4.0]])
    m2 = (m / step) ** 2
    for _ in range(iters):
        d = np.stack([
            ((lab - c[:3, None, None]) ** 2).sum(axis=0)
            + ((ys - c[3]) ** 2 + (xs - c[4]) ** 2) * m2 for c in centers])
        labels = d.argmin(axis=0)
        for i in range(2):
            mask = labels == i
            centers[i, :3] = lab[:, mask].mean(axis=1)
            centers[i, 3] = ys[mask].mean()
            centers[i, 4] = xs[mask].mean()
    return labels


class TestSlic:
    def test_single_segment(self):
        part = slic(np.random.default_rng(0).uniform(size=(3, 10, 12)), 1)
        assert part.num_segments == 1
        assert np.all(part.labels == 0)

    def test_constant_image_near_equal_areas(self):
        part = slic(np.full((3, 12, 12), 0.5), 4, 10.0, 10)
        assert part.num_segments == 4
        sizes = np.bincount(part.labels.ravel())
        target = 12 * 12 / 4
        assert np.all(np.abs(sizes - target) <= 0.2 * target)

    def test_two_tone_boundary_matches_2means_oracle(self):
        img = two_tone_image()
        part = slic(img, 2, 10.0, 10)
        assert part.num_segments == 2
        oracle = lloyd_2means_labxy(img)
        # boundary column of each: first column whose label differs from col 0
        def boundary(labels):
            changes = np.nonzero(labels[0, 1:] != labels[0, :-1])[0]
            return changes[0] + 1
        assert abs(boundary(part.labels) - boundary(oracle)) <= 1
        assert abs(boundary(part.labels) - 15) <= 1

    def test_rejects_more_segments_than_pixels(self):
        with pytest.raises(ValueError):
            slic(np.zeros((3, 2, 2)), 5)

    def test_partition_covers_all_pixels(self):
        rng = np.random.default_rng(1)
        part = slic(rng.uniform(size=(3, 24, 36)), 20, 10.0, 5)
        assert part.labels.min() >= 0
        assert part.labels.max() < part.num_segments
        assert part.num_segments <= 20
        # all segments 4-connected: flood fill from the first pixel of each
        for seg in range(part.num_segments):
            mask = part.labels == seg
            ys, xs = np.nonzero(mask)
            seen = np.zeros_like(mask)
            stack = [(ys[0], xs[0])]
            seen[ys[0], xs[0]] = True
            while stack:
                y, x = stack.pop()
                for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
                    if (0 <= ny < mask.shape[0] and 0 <= nx < mask.shape[1]
                            and mask[ny, nx] and not seen[ny, nx]):
                        seen[ny, nx] = True
                        stack.append((ny, nx))
            assert seen.sum() == mask.sum(), "segment %d disconnected" % seg

    def test_determinism(self):
        rng = np.random.default_rng(2)
        img = rng.uniform(size=(3, 16, 16))
        a = slic(img, 6, 10.0, 5)
        b = slic(img, 6, 10.0, 5)
        assert np.array_equal(a.labels, b.labels)


def make_corr(pixels, valid, width, height):
    pixels = np.asarray(pixels, dtype=float)
    return CorrespondenceMap(pixels, np.ones(len(pixels)),
                             np.asarray(valid, bool), width, height)


class TestGrouping:
    def test_no_valid_points_all_groups_empty(self):
        part = SuperpixelPartition(np.zeros((2, 2), np.int32), 1)
        corr = make_corr([[0, 0]], [False], 2, 2)
        groups = group_superpoints(part, corr)
        assert all(g.size == 0 for g in groups.groups)

    def test_one_point_per_segment(self):
        labels = np.array([[0, 1]], np.int32)
        part = SuperpixelPartition(labels, 2)
        corr = make_corr([[0.1, 0.0], [0.9, 0.0]], [True, True], 2, 1)
        groups = group_superpoints(part, corr)
        assert [g.tolist() for g in groups.groups] == [[0], [1]]

    def test_group_id_matches_pixel_label(self):
        rng = np.random.default_rng(3)
        labels = rng.integers(0, 5, size=(8, 10)).astype(np.int32)
        part = SuperpixelPartition(labels, 5)
        pix = np.stack([rng.uniform(0, 9.49, 30), rng.uniform(0, 7.49, 30)], axis=1)
        corr = make_corr(pix, np.ones(30, bool), 10, 8)
        groups = group_superpoints(part, corr)
        for seg, members in enumerate(groups.groups):
            for p in members:
                col = int(np.floor(pix[p, 0] + 0.5))
                row = int(np.floor(pix[p, 1] + 0.5))
                assert labels[row, col] == seg


class TestPooling:
    def test_pool_pixels_constant(self):
        part = SuperpixelPartition(np.array([[0, 0], [1, 1]], np.int32), 2)
        out = pool_pixels(Tensor(np.full((3, 2, 2), 2.5)), part)
        assert np.allclose(out.data, 2.5)

    def test_pool_pixels_single_pixel_segment(self):
        labels = np.array([[0, 1], [1, 1]], np.int32)
        fmap = np.arange(4, dtype=float).reshape(1, 2, 2)
        out = pool_pixels(Tensor(fmap), SuperpixelPartition(labels, 2))
        assert out.data[0, 0] == pytest.approx(0.0)
        assert out.data[1, 0] == pytest.approx(2.0)

    def test_pool_pixels_gradient_is_inverse_area(self):
        labels = np.array([[0, 0], [1, 0]], np.int32)
        part = SuperpixelPartition(labels, 2)
        fmap = Tensor(np.random.default_rng(4).normal(size=(2, 2, 2)),
                      requires_grad=True)
        ad.tsum(pool_pixels(fmap, part)).backward()
        expect = np.where(labels == 0, 1 / 3.0, 1.0)
        assert np.allclose(fmap.grad[0], expect)
        err = grad_check(lambda ts: ad.tsum(pool_pixels(ts[0], part) ** 2.0), [
            Tensor(np.random.default_rng(5).normal(size=(2, 2, 2)),
                   requires_grad=True)])
        assert err <= 1e-4

    def test_pool_points_only_nonempty_groups(self):
        from xmdistill.superpixel import SuperpointGroups
        groups = SuperpointGroups([np.array([0, 1]), np.array([], np.int64),
                                   np.array([2])], 3)
        feats = Tensor(np.array([[0.0], [4.0], [7.0]]))
        ids, pooled = pool_points(feats, groups)
        assert ids.tolist() == [0, 2]
        assert np.allclose(pooled.data.ravel(), [2.0, 7.0])

    def test_pool_points_permutation_invariant(self):
        from xmdistill.superpixel import SuperpointGroups
        feats = Tensor(np.random.default_rng(6).normal(size=(5, 3)))
        g1 = SuperpointGroups([np.array([0, 1, 4]), np.array([2, 3])], 2)
        g2 = SuperpointGroups([np.array([4, 0, 1]), np.array([3, 2])], 2)
        _, a = pool_points(feats, g1)
        _, b = pool_points(feats, g2)
        assert np.allclose(a.data, b.data)


def test_partition_export_round_trip(tmp_path):
    part = SuperpixelPartition(
        np.random.default_rng(7).integers(0, 4, size=(6, 8)).astype(np.int32), 4)
    prefix = str(tmp_path / "part")
    save_partition(part, prefix)
    loaded = load_partition(prefix)
    assert np.array_equal(part.labels, loaded.labels)
    assert loaded.num_segments == 4
