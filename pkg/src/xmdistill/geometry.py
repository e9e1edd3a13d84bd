"""Pinhole camera model, 3D->2D projection and per-point image sampling."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError

Z_MIN = 1e-3  # numerical guard just in front of the focal plane, meters


@dataclass
class CameraModel:
    intrinsics: np.ndarray  # 3x3, [[fx,0,cx],[0,fy,cy],[0,0,1]]
    extrinsics: np.ndarray  # 4x4 rigid world->camera transform
    width: int
    height: int

    def __post_init__(self):
        self.intrinsics = np.asarray(self.intrinsics, dtype=np.float64).reshape(3, 3)
        self.extrinsics = np.asarray(self.extrinsics, dtype=np.float64).reshape(4, 4)
        fx, fy = self.intrinsics[0, 0], self.intrinsics[1, 1]
        if fx <= 0 or fy <= 0:
            raise ValueError("focal lengths must be positive")
        r = self.extrinsics[:3, :3]
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-9):
            raise ValueError("extrinsics rotation block is not orthonormal")
        if not np.isclose(np.linalg.det(r), 1.0, atol=1e-9):
            raise ValueError("extrinsics rotation must have determinant +1")

    def to_json(self) -> str:
        return json.dumps({
            "intrinsics": [float(v) for v in self.intrinsics.reshape(-1)],
            "extrinsics": [float(v) for v in self.extrinsics.reshape(-1)],
            "width": self.width,
            "height": self.height,
        })

    @classmethod
    def from_json(cls, text: str) -> "CameraModel":
        doc = json.loads(text)
        return cls(np.asarray(doc["intrinsics"]), np.asarray(doc["extrinsics"]),
                   int(doc["width"]), int(doc["height"]))


@dataclass
class CorrespondenceMap:
    """Continuous pixel coordinates, camera-frame depth and validity per point."""

    pixels: np.ndarray  # (N, 2) as (u, v)
    depth: np.ndarray   # (N,)
    valid: np.ndarray   # (N,) bool
    width: int
    height: int


def project(points: np.ndarray, cam: CameraModel, z_min: float = Z_MIN) -> CorrespondenceMap:
    """Project world points through the camera; out-of-frustum points are masked."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3:
        raise ShapeError("points must be (N, 3)")
    r = cam.extrinsics[:3, :3]
    t = cam.extrinsics[:3, 3]
    p_cam = points @ r.T + t
    z = p_cam[:, 2]
    safe_z = np.where(z > z_min, z, 1.0)
    fx, fy = cam.intrinsics[0, 0], cam.intrinsics[1, 1]
    cx, cy = cam.intrinsics[0, 2], cam.intrinsics[1, 2]
    u = fx * p_cam[:, 0] / safe_z + cx
    v = fy * p_cam[:, 1] / safe_z + cy
    valid = (z > z_min) & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
    return CorrespondenceMap(np.stack([u, v], axis=1), z, valid, cam.width, cam.height)


def nearest_pixels(corr: CorrespondenceMap) -> np.ndarray:
    """Round-half-up pixel indices (N, 2) as (col, row), clamped to bounds."""
    cols = np.clip(np.floor(corr.pixels[:, 0] + 0.5).astype(np.int64), 0, corr.width - 1)
    rows = np.clip(np.floor(corr.pixels[:, 1] + 0.5).astype(np.int64), 0, corr.height - 1)
    return np.stack([cols, rows], axis=1)


def sample_image_features(feature_map: Tensor, corr: CorrespondenceMap):
    """Per-point features from nearest pixels: (N, C) tensor plus the valid mask.

    Invalid points get zero rows; gradient flows to exactly one pixel per
    valid point.
    """
    if feature_map.ndim != 3:
        raise ShapeError("feature map must be (C, H, W)")
    c, h, w = feature_map.shape
    if h != corr.height or w != corr.width:
        raise ShapeError("feature map %dx%d does not match correspondences %dx%d"
                         % (h, w, corr.height, corr.width))
    n = corr.pixels.shape[0]
    pix = nearest_pixels(corr)
    vis = np.nonzero(corr.valid)[0]
    if vis.size == 0:
        return Tensor(np.zeros((n, c), dtype=feature_map.dtype)), corr.valid.copy()
    flat_idx = pix[vis, 1] * w + pix[vis, 0]
    flat = ad.reshape(feature_map, (c, h * w))
    rows = ad.transpose(ad.gather_cols(flat, flat_idx))
    out = ad.scatter_add_rows(rows, vis, n)
    return out, corr.valid.copy()


def joint_visible_mask(corr: CorrespondenceMap, depth_map: np.ndarray = None,
                       rel_tol: float = 0.06, abs_tol: float = 0.05) -> np.ndarray:
    """Indices of points visible to both sensors (the distillation support).

    With a rendered depth map, points whose camera-frame depth disagrees
    with the surface depth at their pixel are treated as occluded and
    dropped; all losses restrict to the returned set.
    """
    ok = corr.valid.copy()
    if depth_map is not None:
        pix = nearest_pixels(corr)
        zbuf = depth_map[pix[:, 1], pix[:, 0]]
        tol = np.maximum(abs_tol, rel_tol * corr.depth)
        with np.errstate(invalid="ignore"):
            ok &= np.abs(corr.depth - zbuf) <= tol
    return np.nonzero(ok)[0]
