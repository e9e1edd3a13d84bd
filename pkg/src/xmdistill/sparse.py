"""Sparse voxel tensors and the 3D convolution / pooling primitives.

Coordinates live on the original voxel lattice at every level: a tensor of
stride s keeps all of its (x, y, z) coordinates as multiples of s, and a
kernel offset on that tensor steps in units of s. Site lookup packs
(batch, x, y, z) into int64 keys and binary-searches a sorted copy, so all
neighbor enumeration is vectorized and deterministic (kernel offsets are
visited in fixed lexicographic order).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError

_COORD_BITS = 17
_COORD_OFF = 1 << 16
_COORD_LIMIT = 1 << 16


def _pack_coords(coords: np.ndarray) -> np.ndarray:
    c = coords.astype(np.int64)
    if np.any(np.abs(c[:, 1:]) >= _COORD_LIMIT):
        raise ValueError("voxel coordinates exceed packing range")
    key = c[:, 0]
    for axis in (1, 2, 3):
        key = (key << _COORD_BITS) | (c[:, axis] + _COORD_OFF)
    return key


class _SiteLookup:
    """Sorted-key index over a coordinate set, built lazily and shared.

    Also memoizes neighbor-row matrices so repeated convolutions over the
    same site set pay for neighbor search once.
    """

    def __init__(self, coords: np.ndarray):
        keys = _pack_coords(coords)
        order = np.argsort(keys, kind="stable")
        self.sorted_keys = keys[order]
        self.order = order
        self.n = coords.shape[0]
        self.maps = {}

    def find(self, coords: np.ndarray):
        """Row index per query coordinate, -1 where absent."""
        q = _pack_coords(coords)
        pos = np.searchsorted(self.sorted_keys, q)
        pos_c = np.minimum(pos, self.n - 1)
        hit = (pos < self.n) & (self.sorted_keys[pos_c] == q)
        rows = np.where(hit, self.order[pos_c], -1)
        return rows

    def neighbor_rows(self, coords: np.ndarray, offsets: np.ndarray):
        """(M, K^3) row indices of coords+offset in this site set (-1 misses)."""
        m = coords.shape[0]
        k3 = offsets.shape[0]
        q = np.empty((m, k3, 4), dtype=np.int64)
        q[:, :, 0] = coords[:, :1]
        q[:, :, 1:] = coords[:, None, 1:].astype(np.int64) + offsets[None, :, :]
        return self.find(q.reshape(-1, 4)).reshape(m, k3)


@dataclass
class SparseTensor3D:
    """Batched sparse voxel tensor: coords (M,4) as (batch,x,y,z), features (M,C)."""

    coords: np.ndarray
    features: Tensor
    stride: int = 1
    _lookup: _SiteLookup = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.coords = np.ascontiguousarray(self.coords, dtype=np.int32)
        if not isinstance(self.features, Tensor):
            self.features = Tensor(self.features)
        if self.coords.ndim != 2 or self.coords.shape[1] != 4:
            raise ShapeError("coords must be (M, 4)")
        if self.features.ndim != 2 or self.features.shape[0] != self.coords.shape[0]:
            raise ShapeError("features must be (M, C) aligned with coords")
        if self.stride < 1:
            raise ValueError("stride must be positive")

    @property
    def num_sites(self) -> int:
        return self.coords.shape[0]

    @property
    def num_channels(self) -> int:
        return self.features.shape[1]

    def lookup(self) -> _SiteLookup:
        if self._lookup is None:
            self._lookup = _SiteLookup(self.coords)
        return self._lookup

    def with_features(self, features: Tensor) -> "SparseTensor3D":
        """Same site set with new per-site features; shares the lookup index."""
        return SparseTensor3D(self.coords, features, self.stride, self.lookup())

    def validate(self):
        keys = _pack_coords(self.coords)
        if np.unique(keys).size != keys.size:
            raise ValueError("duplicate voxel coordinates within a batch")
        if np.any(self.coords[:, 1:] % self.stride):
            raise ValueError("coordinates must be multiples of the tensor stride")


@dataclass
class VoxelMap:
    """Per-point voxel row indices linking a cloud to its SparseTensor3D."""

    rows: np.ndarray
    voxel_size: float

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.int64)
        if self.voxel_size <= 0:
            raise ValueError("voxel size must be positive")


def voxelize(cloud: np.ndarray, voxel_size: float, batch_index: int = 0):
    """Quantize points to voxels; co-located point features are averaged.

    cloud is (N, D) with x, y, z in the first three columns; all D columns
    become the voxel features. Returns (SparseTensor3D, VoxelMap).
    """
    cloud = np.asarray(cloud)
    if cloud.ndim != 2 or cloud.shape[0] == 0 or cloud.shape[1] < 3:
        raise ValueError("cloud must be a non-empty (N, D>=3) array")
    if voxel_size <= 0:
        raise ValueError("voxel size must be positive")
    vox = np.floor(cloud[:, :3] / voxel_size).astype(np.int64)
    coords4 = np.concatenate(
        [np.full((cloud.shape[0], 1), batch_index, dtype=np.int64), vox], axis=1)
    keys = _pack_coords(coords4)
    uniq, inverse = np.unique(keys, return_inverse=True)
    m = uniq.size
    sums = np.zeros((m, cloud.shape[1]), dtype=np.float64)
    np.add.at(sums, inverse, cloud.astype(np.float64))
    counts = np.bincount(inverse, minlength=m).astype(np.float64)
    feats = (sums / counts[:, None]).astype(cloud.dtype if cloud.dtype in (np.float32, np.float64) else np.float64)
    first = np.zeros(m, dtype=np.int64)
    first[inverse[::-1]] = np.arange(cloud.shape[0] - 1, -1, -1)
    out_coords = coords4[first]
    st = SparseTensor3D(out_coords, Tensor(feats), stride=1)
    return st, VoxelMap(inverse, voxel_size)


def _kernel_offsets(k: int) -> np.ndarray:
    r = k // 2
    rng = np.arange(-r, r + 1)
    dx, dy, dz = np.meshgrid(rng, rng, rng, indexing="ij")
    return np.stack([dx.ravel(), dy.ravel(), dz.ravel()], axis=1)


class _PairPlan:
    """Hit-only (input row, output row) pairs of one neighbor map.

    Pairs are grouped by kernel offset (contiguous slices, so per-offset
    GEMMs run on views). Within one offset the destination rows are unique,
    so the scatter is a plain indexed add per offset, accumulated in fixed
    lexicographic offset order.
    """

    def __init__(self, rows: np.ndarray, num_rows_t: int):
        k3 = rows.shape[1]
        src, dst, bounds = [], [], [0]
        for o in range(k3):
            hit = np.nonzero(rows[:, o] >= 0)[0]
            dst.append(hit)
            src.append(rows[hit, o])
            bounds.append(bounds[-1] + hit.size)
        self.src = np.concatenate(src) if src else np.zeros(0, np.int64)
        self.dst_slices = dst
        self.dst = np.concatenate(dst) if dst else np.zeros(0, np.int64)
        self.bounds = np.asarray(bounds)
        self.num_pairs = self.src.size

    def apply(self, x: np.ndarray, kernels: np.ndarray, num_out: int):
        """sum over offsets of x[src] @ kernels[o], scattered to dst rows."""
        c_out = kernels.shape[2]
        out = np.zeros((num_out, c_out), dtype=x.dtype)
        if self.num_pairs == 0:
            return out, None
        gathered = x[self.src]
        for o in range(kernels.shape[0]):
            lo, hi = self.bounds[o], self.bounds[o + 1]
            if hi > lo:
                out[self.dst_slices[o]] += gathered[lo:hi] @ kernels[o]
        return out, gathered

    def weight_grads(self, gathered: np.ndarray, g_at_dst: np.ndarray,
                     k3: int, c_in: int, c_out: int) -> np.ndarray:
        dw = np.zeros((k3, c_in, c_out), dtype=gathered.dtype)
        for o in range(k3):
            lo, hi = self.bounds[o], self.bounds[o + 1]
            if hi > lo:
                dw[o] = gathered[lo:hi].T @ g_at_dst[lo:hi]
        return dw


def sparse_conv(st: SparseTensor3D, weights: Tensor, stride: int = 1) -> SparseTensor3D:
    """Sparse 3D convolution over occupied sites only (no bias).

    weights is (K^3, C_in, C_out) with kernel offsets enumerated in
    lexicographic (dx, dy, dz) order. stride=1 preserves the site set;
    stride=2 emits the unique downsampled sites. A single fused node works
    on precomputed hit-only pair plans (one forward plan, one transposed
    plan for the input gradient), cached per site set.
    """
    weights = ad.as_tensor(weights)
    feats = st.features
    if weights.ndim != 3:
        raise ShapeError("weights must be (K^3, C_in, C_out)")
    k = round(weights.shape[0] ** (1.0 / 3.0))
    if k ** 3 != weights.shape[0] or k % 2 == 0:
        raise ShapeError("weights first dim must be an odd kernel size cubed")
    if weights.shape[1] != st.num_channels:
        raise ShapeError("channel mismatch: tensor has %d, weights expect %d"
                         % (st.num_channels, weights.shape[1]))
    if stride not in (1, 2):
        raise ValueError("stride must be 1 or 2")
    k3 = k ** 3
    c_in, c_out = weights.shape[1], weights.shape[2]
    in_lookup = st.lookup()

    if k == 1:  # pointwise: a plain per-site linear map
        out = ad.matmul(feats, ad.reshape(weights, (c_in, c_out)))
        return SparseTensor3D(st.coords, out, st.stride, in_lookup)

    offsets = _kernel_offsets(k) * st.stride
    cached = in_lookup.maps.get(("conv", k, stride))
    if cached is None:
        if stride == 1:
            out_coords, out_lookup = st.coords, in_lookup
            rows = in_lookup.neighbor_rows(st.coords, offsets)
            rows_t = rows[:, ::-1]  # offsets are symmetric under negation
        else:
            out_stride0 = st.stride * stride
            down = st.coords.astype(np.int64)
            down = np.concatenate(
                [down[:, :1], (down[:, 1:] // out_stride0) * out_stride0], axis=1)
            keys = _pack_coords(down)
            uniq, first_idx = np.unique(keys, return_index=True)
            out_coords = down[np.sort(first_idx)].astype(np.int32)
            out_lookup = _SiteLookup(out_coords)
            rows = in_lookup.neighbor_rows(out_coords, offsets)
            rows_t = out_lookup.neighbor_rows(st.coords, -offsets)
        cached = (out_coords, _PairPlan(rows, st.num_sites),
                  _PairPlan(rows_t, out_coords.shape[0]), out_lookup)
        in_lookup.maps[("conv", k, stride)] = cached
    out_coords, plan, plan_t, out_lookup = cached
    out_stride = st.stride * stride

    x = feats.data
    m_out = out_coords.shape[0]
    if plan.num_pairs:
        out_data, gathered = plan.apply(x, weights.data, m_out)
    else:
        out_data = np.zeros((m_out, c_out), dtype=x.dtype)
        gathered = None

    def backward(g):
        if plan.num_pairs == 0:
            return
        if weights.requires_grad:
            weights._accumulate(
                plan.weight_grads(gathered, g[plan.dst], k3, c_in, c_out))
        if feats.requires_grad:
            wt = np.ascontiguousarray(weights.data.transpose(0, 2, 1))
            dx, _ = plan_t.apply(g, wt, x.shape[0])
            feats._accumulate(dx)

    out = Tensor._from_op(out_data, (feats, weights), backward)
    return SparseTensor3D(out_coords, out, out_stride, out_lookup)


def sparse_avg_pool(st: SparseTensor3D, r: int) -> SparseTensor3D:
    """Downsample by factor r; each parent averages its occupied children."""
    if r < 2:
        raise ValueError("pooling factor must be >= 2")
    lookup = st.lookup()
    cached = lookup.maps.get(("pool", r))
    if cached is None:
        out_stride = st.stride * r
        parents = st.coords.astype(np.int64).copy()
        parents[:, 1:] = np.floor_divide(parents[:, 1:], out_stride) * out_stride
        keys = _pack_coords(parents)
        uniq, first_idx, inverse = np.unique(keys, return_index=True, return_inverse=True)
        order = np.argsort(first_idx, kind="stable")
        rank = np.empty_like(order)
        rank[order] = np.arange(order.size)
        seg = rank[inverse]
        out_coords = parents[np.sort(first_idx)].astype(np.int32)
        cached = (seg, out_coords, _SiteLookup(out_coords))
        lookup.maps[("pool", r)] = cached
    seg, out_coords, out_lookup = cached
    feats = ad.segment_mean_rows(st.features, seg, out_coords.shape[0])
    return SparseTensor3D(out_coords, feats, st.stride * r, out_lookup)


def sparse_upsample_nearest(st_coarse: SparseTensor3D, target_coords: np.ndarray,
                            r: int) -> SparseTensor3D:
    """Copy each coarse feature to its child target sites; orphans get zeros."""
    if r < 1:
        raise ValueError("upsampling factor must be >= 1")
    if st_coarse.stride % r:
        raise ValueError("coarse stride %d not divisible by factor %d" % (st_coarse.stride, r))
    target_coords = np.ascontiguousarray(target_coords, dtype=np.int32)
    out_stride = st_coarse.stride // r
    parents = target_coords.astype(np.int64).copy()
    parents[:, 1:] = np.floor_divide(parents[:, 1:], st_coarse.stride) * st_coarse.stride
    rows = st_coarse.lookup().find(parents)
    hit = rows >= 0
    n_t = target_coords.shape[0]
    if np.any(hit):
        gathered = ad.gather_rows(st_coarse.features, rows[hit])
        feats = ad.scatter_add_rows(gathered, np.nonzero(hit)[0], n_t)
    else:
        feats = Tensor(np.zeros((n_t, st_coarse.num_channels), dtype=st_coarse.features.dtype))
    return SparseTensor3D(target_coords, feats, out_stride)


def devoxelize(st: SparseTensor3D, vmap: VoxelMap) -> Tensor:
    """Per-point features: point i receives the feature of its voxel row."""
    rows = vmap.rows
    if rows.size and (rows.min() < 0 or rows.max() >= st.num_sites):
        raise IndexError("voxel map rows out of range for this tensor (stale map?)")
    return ad.gather_rows(st.features, rows)
