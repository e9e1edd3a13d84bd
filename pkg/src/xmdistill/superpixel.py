"""SLIC superpixels, point grouping via projection, and region pooling.

The segmentation is the classic local k-means in (l, a, b, x, y) space:
grid-seeded centers perturbed to the lowest-gradient pixel nearby, pixel
assignment restricted to a 2S window per center with distance
sqrt(d_lab^2 + (m * d_xy / S)^2), then a connectivity pass that folds
stray components into their largest neighboring segment. Everything is
deterministic: ties prefer the lowest segment id.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError
from .geometry import CorrespondenceMap, nearest_pixels


@dataclass
class SuperpixelPartition:
    labels: np.ndarray  # (H, W) int32 in [0, num_segments)
    num_segments: int


@dataclass
class SuperpointGroups:
    """Per-segment lists of point indices (jointly visible points only)."""

    groups: list  # list of int64 arrays, index = segment id
    num_segments: int


def rgb_to_lab(image: np.ndarray) -> np.ndarray:
    """Linear RGB (3, H, W) in [0, 1] to CIELAB under D65."""
    m = np.array([[0.4124564, 0.3575761, 0.1804375],
                  [0.2126729, 0.7151522, 0.0721750],
                  [0.0193339, 0.1191920, 0.9503041]])
    rgb = image.reshape(3, -1)
    xyz = m @ rgb
    white = np.array([0.95047, 1.0, 1.08883])
    xyz = xyz / white[:, None]

    def f(t):
        delta = 6.0 / 29.0
        return np.where(t > delta ** 3, np.cbrt(t), t / (3 * delta ** 2) + 4.0 / 29.0)

    fx, fy, fz = f(xyz[0]), f(xyz[1]), f(xyz[2])
    lab = np.stack([116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)])
    return lab.reshape(image.shape)


def _grid_shape(h: int, w: int, k: int):
    step = np.sqrt(h * w / k)
    rows = max(1, int(round(h / step)))
    cols = max(1, int(round(w / step)))
    while rows * cols > k:
        if rows >= cols and rows > 1:
            rows -= 1
        elif cols > 1:
            cols -= 1
        else:
            break
    return rows, cols


def _seed_centers(lab: np.ndarray, k: int):
    """Grid centers nudged to the lowest-gradient pixel in a 3x3 window."""
    h, w = lab.shape[1:]
    rows, cols = _grid_shape(h, w, k)
    grad = np.zeros((h, w))
    d = lab[:, :, 2:] - lab[:, :, :-2]
    grad[:, 1:-1] += (d * d).sum(axis=0)
    d = lab[:, 2:, :] - lab[:, :-2, :]
    grad[1:-1, :] += (d * d).sum(axis=0)
    centers = []
    for r in range(rows):
        for c in range(cols):
            cy = min(h - 1, int((r + 0.5) * h / rows))
            cx = min(w - 1, int((c + 0.5) * w / cols))
            y0, y1 = max(0, cy - 1), min(h, cy + 2)
            x0, x1 = max(0, cx - 1), min(w, cx + 2)
            window = grad[y0:y1, x0:x1]
            flat = int(np.argmin(window))  # scan order breaks ties
            cy = y0 + flat // window.shape[1]
            cx = x0 + flat % window.shape[1]
            centers.append((cy, cx))
    return centers


def _enforce_connectivity(labels: np.ndarray) -> np.ndarray:
    """Fold every non-largest 4-connected component into its biggest neighbor."""
    h, w = labels.shape
    out = labels.copy()
    for _ in range(h * w):  # bounded; each pass resolves the outermost orphans
        comp = -np.ones((h, w), dtype=np.int64)
        comp_label = []
        comp_size = []
        n_comp = 0
        for y in range(h):
            for x in range(w):
                if comp[y, x] >= 0:
                    continue
                lab_id = out[y, x]
                stack = [(y, x)]
                comp[y, x] = n_comp
                size = 0
                while stack:
                    cy, cx = stack.pop()
                    size += 1
                    for ny, nx in ((cy - 1, cx), (cy + 1, cx), (cy, cx - 1), (cy, cx + 1)):
                        if 0 <= ny < h and 0 <= nx < w and comp[ny, nx] < 0 and out[ny, nx] == lab_id:
                            comp[ny, nx] = n_comp
                            stack.append((ny, nx))
                comp_label.append(lab_id)
                comp_size.append(size)
                n_comp += 1
        largest = {}
        for ci in range(n_comp):
            lab_id = comp_label[ci]
            if lab_id not in largest or comp_size[ci] > comp_size[largest[lab_id]]:
                largest[lab_id] = ci
        orphan = np.array([largest[comp_label[ci]] != ci for ci in range(n_comp)])
        if not orphan.any():
            break
        label_area = np.bincount(out.reshape(-1))
        merged_any = False
        for ci in np.nonzero(orphan)[0]:
            ys, xs = np.nonzero(comp == ci)
            neighbors = {}
            for cy, cx in zip(ys, xs):
                for ny, nx in ((cy - 1, cx), (cy + 1, cx), (cy, cx - 1), (cy, cx + 1)):
                    if 0 <= ny < h and 0 <= nx < w:
                        nl = out[ny, nx]
                        nci = comp[ny, nx]
                        if nl != comp_label[ci] and not orphan[nci]:
                            neighbors[nl] = label_area[nl] if nl < label_area.size else 0
            if neighbors:
                target = max(sorted(neighbors), key=lambda l: (neighbors[l], -l))
                out[ys, xs] = target
                merged_any = True
        if not merged_any:
            break
    return out


def _relabel_dense(labels: np.ndarray):
    """Renumber labels by raster first appearance to a dense [0, K') range."""
    flat = labels.reshape(-1)
    uniq, first = np.unique(flat, return_index=True)
    order = uniq[np.argsort(first)]
    remap = np.zeros(int(flat.max()) + 1, dtype=np.int32)
    for new_id, old_id in enumerate(order):
        remap[old_id] = new_id
    return remap[flat].reshape(labels.shape), len(order)


def slic(image: np.ndarray, k: int = 150, compactness: float = 10.0,
         iters: int = 10) -> SuperpixelPartition:
    """Segment a (3, H, W) image into at most k superpixels."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ShapeError("image must be (3, H, W)")
    h, w = image.shape[1:]
    if k < 1 or iters < 1:
        raise ValueError("k and iters must be >= 1")
    if k > h * w:
        raise ValueError("cannot request more segments than pixels")
    lab = rgb_to_lab(image)
    step = np.sqrt(h * w / k)
    centers = _seed_centers(lab, k)
    n_c = len(centers)
    # center state: (l, a, b, y, x)
    state = np.zeros((n_c, 5))
    for i, (cy, cx) in enumerate(centers):
        state[i] = (*lab[:, cy, cx], cy, cx)

    ys, xs = np.mgrid[0:h, 0:w]
    win = int(np.ceil(2 * step))
    m2 = (compactness / step) ** 2
    labels = np.zeros((h, w), dtype=np.int64)
    for _ in range(iters):
        best = np.full((h, w), np.inf)
        labels.fill(0)
        for i in range(n_c):
            lc, ac, bc, cy, cx = state[i]
            y0, y1 = max(0, int(cy) - win), min(h, int(cy) + win + 1)
            x0, x1 = max(0, int(cx) - win), min(w, int(cx) + win + 1)
            sub = lab[:, y0:y1, x0:x1]
            d_col = (sub[0] - lc) ** 2 + (sub[1] - ac) ** 2 + (sub[2] - bc) ** 2
            d_xy = (ys[y0:y1, x0:x1] - cy) ** 2 + (xs[y0:y1, x0:x1] - cx) ** 2
            dist = d_col + d_xy * m2
            better = dist < best[y0:y1, x0:x1]  # strict: ties keep the lower id
            best[y0:y1, x0:x1][better] = dist[better]
            labels[y0:y1, x0:x1][better] = i
        uncovered = ~np.isfinite(best)
        if uncovered.any():
            uy, ux = np.nonzero(uncovered)
            for py, px in zip(uy, ux):
                d = ((lab[:, py, px] - state[:, :3].T) ** 2).sum(axis=0) \
                    + ((py - state[:, 3]) ** 2 + (px - state[:, 4]) ** 2) * m2
                labels[py, px] = int(np.argmin(d))
        for i in range(n_c):
            mask = labels == i
            if mask.any():
                state[i, :3] = lab[:, mask].mean(axis=1)
                state[i, 3] = ys[mask].mean()
                state[i, 4] = xs[mask].mean()

    labels = _enforce_connectivity(labels)
    labels, n_seg = _relabel_dense(labels)
    return SuperpixelPartition(labels.astype(np.int32), n_seg)


def group_superpoints(partition: SuperpixelPartition,
                      corr: CorrespondenceMap) -> SuperpointGroups:
    """Assign each jointly visible point to the segment of its nearest pixel."""
    if partition.labels.shape != (corr.height, corr.width):
        raise ShapeError("partition and correspondences disagree on image size")
    groups = [[] for _ in range(partition.num_segments)]
    vis = np.nonzero(corr.valid)[0]
    if vis.size:
        pix = nearest_pixels(corr)[vis]
        seg = partition.labels[pix[:, 1], pix[:, 0]]
        for point_idx, seg_id in zip(vis, seg):
            groups[seg_id].append(point_idx)
    return SuperpointGroups([np.asarray(g, dtype=np.int64) for g in groups],
                            partition.num_segments)


def pool_pixels(feature_map: Tensor, partition: SuperpixelPartition) -> Tensor:
    """Mean feature over each superpixel: (K, C) rows, differentiable."""
    c, h, w = feature_map.shape
    if partition.labels.shape != (h, w):
        raise ShapeError("feature map and partition disagree on image size")
    flat = ad.transpose(ad.reshape(feature_map, (c, h * w)))
    return ad.segment_mean_rows(flat, partition.labels.reshape(-1), partition.num_segments)


def pool_points(point_features: Tensor, groups: SuperpointGroups):
    """Mean feature over each non-empty superpoint group.

    Returns (segment_ids, (K', C) tensor) where K' counts non-empty groups.
    """
    keep = [i for i, g in enumerate(groups.groups) if g.size > 0]
    if not keep:
        return np.zeros(0, dtype=np.int64), Tensor(
            np.zeros((0, point_features.shape[1]), dtype=point_features.dtype))
    idx = np.concatenate([groups.groups[i] for i in keep])
    seg = np.concatenate([np.full(groups.groups[i].size, j, dtype=np.int64)
                          for j, i in enumerate(keep)])
    rows = ad.gather_rows(point_features, idx)
    pooled = ad.segment_mean_rows(rows, seg, len(keep))
    return np.asarray(keep, dtype=np.int64), pooled


def save_partition(partition: SuperpixelPartition, path_prefix: str) -> None:
    """Raw little-endian int32 label map plus a JSON header (debug overlays)."""
    labels = partition.labels.astype("<i4")
    with open(path_prefix + ".i32", "wb") as fh:
        fh.write(labels.tobytes())
    header = {
        "height": int(labels.shape[0]),
        "width": int(labels.shape[1]),
        "segments": int(partition.num_segments),
        "dtype": "int32-le",
    }
    with open(path_prefix + ".json", "w") as fh:
        json.dump(header, fh)


def load_partition(path_prefix: str) -> SuperpixelPartition:
    with open(path_prefix + ".json") as fh:
        header = json.load(fh)
    labels = np.frombuffer(open(path_prefix + ".i32", "rb").read(), dtype="<i4")
    labels = labels.reshape(header["height"], header["width"]).astype(np.int32)
    return SuperpixelPartition(labels, int(header["segments"]))
