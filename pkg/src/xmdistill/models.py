"""Learnable components: 2D extractor, sparse 3D U-Net, adapter, classifier.

Four pieces compose the two pipelines:
  * Extractor2D - small conv encoder-decoder backbone plus a 1x1-conv
    projection head; full-resolution feature maps.
  * Extractor3D - 3-level sparse voxel U-Net (16/32/64 channels, kernel 3,
    stride-2 downsamples, skips) evaluated per cloud.
  * DAModule - a 1x1 channel lift followed by stacked 3D self-calibrated
    convolution layers, producing image-width features per voxel.
  * SharedClassifier - per-location MLP applied identically to pixel
    vectors and point vectors (one parameter set serves both paths).

No normalization layers, no dropout: forward passes are pure functions of
(parameters, input), which keeps gradient checks exact and runs bitwise
reproducible.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import sparse as sp
from .autodiff import Parameter, Tensor
from .errors import MissingArtifactError, ShapeError

ROLE_BACKBONE2D = "backbone2d"
ROLE_HEAD2D = "head2d"
ROLE_EXTRACTOR3D = "extractor3d"
ROLE_ADAPTER = "adapter"
ROLE_CLASSIFIER = "classifier"


@dataclass
class ModelConfig:
    image_channels: int = 64   # width of the 2D feature space
    point_channels: int = 32   # width of the 3D feature space
    num_classes: int = 8
    classifier_hidden: int = 128
    da_layers: int = 3
    scconv_pool: int = 2
    voxel_size: float = 0.1
    point_dims: int = 4
    # voxel feature columns fed to the 3D extractor: height and intensity.
    # Absolute x/y would let the network key on position instead of shape
    # and wreck generalization outside the camera frustum.
    feature_cols: tuple = (2, 3)
    dtype: str = "float32"

    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64


def _he_conv2d(rng, c_out, c_in, k, dtype):
    fan_in = c_in * k * k
    return Parameter(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(c_out, c_in, k, k)),
                     dtype=dtype)


# fraction of kernel taps that actually land on occupied voxels; LiDAR
# surfaces are thin shells, so the effective fan-in of a sparse conv is far
# below k^3 * C. He-style init counts only the expected live taps.
SPARSE_TAP_OCCUPANCY = 0.45


def _he_sparse(rng, k, c_in, c_out, dtype, gain: float = 1.0):
    occ = 1.0 if k == 1 else SPARSE_TAP_OCCUPANCY
    fan_in = c_in * k ** 3 * occ
    std = gain * np.sqrt(2.0 / fan_in)
    return Parameter(rng.normal(0.0, std, size=(k ** 3, c_in, c_out)), dtype=dtype)


def _identity_sparse(rng, k, c_in, c_out, dtype, noise: float = 0.25):
    """Identity-dominant sparse kernel: center tap carries a (tiled) identity,
    the rest is scaled-down He noise.

    The adaptation module trains at a tiny learning rate, so at desk scale
    it keeps most of its initial form; starting it near a well-conditioned
    channel map (instead of a deep random scramble) is what makes the
    frozen-ish stack invertible for the extractor behind it.
    """
    w = _he_sparse(rng, k, c_in, c_out, dtype).data * noise
    center = (k ** 3) // 2
    for j in range(c_out):
        w[center, j % c_in, j] += 1.0
    return Parameter(w, dtype=dtype)


def _he_linear(rng, c_in, c_out, dtype):
    return Parameter(rng.normal(0.0, np.sqrt(2.0 / c_in), size=(c_in, c_out)), dtype=dtype)


def _zeros(shape, dtype):
    return Parameter(np.zeros(shape), dtype=dtype)


class _ParamHolder:
    """Minimal parameter registry shared by all model classes."""

    def __init__(self):
        self._params = {}   # name -> (Parameter, role)

    def _register(self, name: str, param: Parameter, role: str) -> Parameter:
        self._params[name] = (param, role)
        return param

    def named_parameters(self):
        return [(name, p) for name, (p, _) in self._params.items()]

    def parameters(self):
        return [p for p, _ in self._params.values()]

    def parameters_by_role(self, role: str):
        return [p for p, r in self._params.values() if r == role]

    def roles(self):
        return {name: role for name, (_, role) in self._params.items()}

    def set_trainable(self, trainable: bool, role: str = None):
        for p, r in self._params.values():
            if role is None or r == role:
                p.trainable = trainable
                p.requires_grad = trainable


class Extractor2D(_ParamHolder):
    """Backbone (encoder-decoder) plus projection head; output (C_img, H, W)."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        dt = cfg.np_dtype()
        reg, B, H = self._register, ROLE_BACKBONE2D, ROLE_HEAD2D
        self.enc1_w = reg("enc1_w", _he_conv2d(rng, 16, 3, 3, dt), B)
        self.enc1_b = reg("enc1_b", _zeros(16, dt), B)
        self.enc2_w = reg("enc2_w", _he_conv2d(rng, 32, 16, 3, dt), B)
        self.enc2_b = reg("enc2_b", _zeros(32, dt), B)
        self.enc3_w = reg("enc3_w", _he_conv2d(rng, 64, 32, 3, dt), B)
        self.enc3_b = reg("enc3_b", _zeros(64, dt), B)
        self.enc4_w = reg("enc4_w", _he_conv2d(rng, 64, 64, 3, dt), B)
        self.enc4_b = reg("enc4_b", _zeros(64, dt), B)
        self.dec1_w = reg("dec1_w", _he_conv2d(rng, 32, 96, 3, dt), B)
        self.dec1_b = reg("dec1_b", _zeros(32, dt), B)
        self.dec2_w = reg("dec2_w", _he_conv2d(rng, 32, 48, 3, dt), B)
        self.dec2_b = reg("dec2_b", _zeros(32, dt), B)
        self.head1_w = reg("head1_w", _he_conv2d(rng, 64, 32, 1, dt), H)
        self.head1_b = reg("head1_b", _zeros(64, dt), H)
        self.head2_w = reg("head2_w", _he_conv2d(rng, cfg.image_channels, 64, 1, dt), H)
        self.head2_b = reg("head2_b", _zeros(cfg.image_channels, dt), H)
        self.out_channels = cfg.image_channels

    def backbone(self, x: Tensor) -> Tensor:
        e1 = ad.relu(ad.conv2d(x, self.enc1_w, self.enc1_b))
        h = ad.avg_pool2d(e1, 2)
        e2 = ad.relu(ad.conv2d(h, self.enc2_w, self.enc2_b))
        h = ad.avg_pool2d(e2, 2)
        h = ad.relu(ad.conv2d(h, self.enc3_w, self.enc3_b))
        h = ad.relu(ad.conv2d(h, self.enc4_w, self.enc4_b))
        h = ad.concat([ad.upsample_bilinear2d(h, 2), e2], axis=1)
        h = ad.relu(ad.conv2d(h, self.dec1_w, self.dec1_b))
        h = ad.concat([ad.upsample_bilinear2d(h, 2), e1], axis=1)
        h = ad.relu(ad.conv2d(h, self.dec2_w, self.dec2_b))
        return h

    def head(self, h: Tensor, out_hw) -> Tensor:
        # rectified output keeps the 2D feature space non-negative, matching
        # the range of the rectified 3D adapter output it is compared against
        h = ad.relu(ad.conv2d(h, self.head1_w, self.head1_b))
        h = ad.relu(ad.conv2d(h, self.head2_w, self.head2_b))
        scale = out_hw[0] // h.shape[2]
        if scale > 1:
            h = ad.upsample_bilinear2d(h, scale)
        return h

    def forward(self, image) -> Tensor:
        """(3, H, W) -> (C_img, H, W); H and W must divide by 4."""
        x = ad.as_tensor(image)
        squeeze = x.ndim == 3
        if squeeze:
            x = ad.reshape(x, (1,) + x.shape)
        if x.shape[1] != 3:
            raise ShapeError("expected a 3-channel image, got %r" % (x.shape,))
        if x.shape[2] % 4 or x.shape[3] % 4:
            raise ShapeError("image sides must be divisible by 4")
        out = self.head(self.backbone(x), x.shape[2:])
        return ad.reshape(out, out.shape[1:]) if squeeze else out


class Extractor3D(_ParamHolder):
    """Sparse voxel U-Net: per-point (N, C_pc) features, order-aligned with input."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        dt = cfg.np_dtype()
        reg, R = self._register, ROLE_EXTRACTOR3D
        d = len(cfg.feature_cols)
        self.feature_cols = tuple(cfg.feature_cols)
        self.stem_w = reg("stem_w", _he_sparse(rng, 3, d, 16, dt), R)
        self.enc1_w = reg("u_enc1_w", _he_sparse(rng, 3, 16, 16, dt), R)
        self.down1_w = reg("u_down1_w", _he_sparse(rng, 3, 16, 32, dt), R)
        self.enc2_w = reg("u_enc2_w", _he_sparse(rng, 3, 32, 32, dt), R)
        self.down2_w = reg("u_down2_w", _he_sparse(rng, 3, 32, 64, dt), R)
        self.bottom_w = reg("u_bottom_w", _he_sparse(rng, 3, 64, 64, dt), R)
        self.up1_w = reg("u_up1_w", _he_sparse(rng, 3, 96, 32, dt), R)
        self.up2_w = reg("u_up2_w", _he_sparse(rng, 3, 48, cfg.point_channels, dt), R)
        self.voxel_size = cfg.voxel_size
        self.out_channels = cfg.point_channels

    def forward_sparse(self, st: sp.SparseTensor3D) -> sp.SparseTensor3D:
        if st.num_channels != len(self.feature_cols):
            st = st.with_features(st.features[:, list(self.feature_cols)])
        relu = lambda t: t.with_features(ad.relu(t.features))
        x0 = relu(sp.sparse_conv(st, self.stem_w))
        skip0 = relu(sp.sparse_conv(x0, self.enc1_w))
        x1 = relu(sp.sparse_conv(skip0, self.down1_w, stride=2))
        skip1 = relu(sp.sparse_conv(x1, self.enc2_w))
        x2 = relu(sp.sparse_conv(skip1, self.down2_w, stride=2))
        x2 = relu(sp.sparse_conv(x2, self.bottom_w))
        u1 = sp.sparse_upsample_nearest(x2, skip1.coords, 2)
        u1 = skip1.with_features(ad.concat([u1.features, skip1.features], axis=1))
        u1 = relu(sp.sparse_conv(u1, self.up1_w))
        u0 = sp.sparse_upsample_nearest(u1, skip0.coords, 2)
        u0 = skip0.with_features(ad.concat([u0.features, skip0.features], axis=1))
        return sp.sparse_conv(u0, self.up2_w)  # linear output features

    def forward(self, cloud: np.ndarray):
        """Returns (per-point features (N, C_pc), voxel tensor, voxel map)."""
        cloud = np.asarray(cloud)
        if cloud.ndim != 2 or cloud.shape[0] < 1:
            raise ValueError("cloud must be a non-empty (N, D) array")
        st, vmap = sp.voxelize(cloud.astype(self.stem_w.dtype), self.voxel_size)
        out = self.forward_sparse(st)
        return sp.devoxelize(out, vmap), out, vmap


class SCConv3dLayer(_ParamHolder):
    """One 3D self-calibrated convolution layer (site-preserving).

    Channels split in halves. The calibrated half gates its kernel-3
    response with a sigmoid of (identity + upsampled coarse response); the
    plain half applies a single kernel-3 conv. Halves are concatenated and
    rectified.
    """

    def __init__(self, channels: int, pool_r: int, rng: np.random.Generator,
                 dtype, name_prefix: str = "sc"):
        super().__init__()
        if channels % 2:
            raise ShapeError("self-calibrated conv needs an even channel count")
        half = channels // 2
        reg, R = self._register, ROLE_ADAPTER
        self.k1_w = reg(name_prefix + "_k1_w",
                        _identity_sparse(rng, 3, half, half, dtype), R)
        self.k2_w = reg(name_prefix + "_k2_w",
                        _he_sparse(rng, 3, half, half, dtype, gain=0.25), R)
        # the sigmoid gate attenuates the calibrated branch; identity-plus-
        # noise taps with a gain keep both halves on comparable energy
        self.k3_w = reg(name_prefix + "_k3_w",
                        _identity_sparse(rng, 3, half, half, dtype), R)
        self.k4_w = reg(name_prefix + "_k4_w",
                        _identity_sparse(rng, 3, half, half, dtype), R)
        self.half = half
        self.pool_r = pool_r

    def forward(self, st: sp.SparseTensor3D) -> sp.SparseTensor3D:
        c = st.num_channels
        if c != 2 * self.half:
            raise ShapeError("expected %d channels, got %d" % (2 * self.half, c))
        x1 = st.with_features(st.features[:, :self.half])
        x2 = st.with_features(st.features[:, self.half:])
        pooled = sp.sparse_avg_pool(x1, self.pool_r)
        coarse = sp.sparse_conv(pooled, self.k2_w)
        calib = sp.sparse_upsample_nearest(coarse, st.coords, self.pool_r)
        gate = ad.sigmoid(ad.add(x1.features, calib.features))
        y1 = ad.mul(sp.sparse_conv(x1, self.k3_w).features, gate)
        y1 = sp.sparse_conv(st.with_features(y1), self.k4_w).features
        y2 = sp.sparse_conv(x2, self.k1_w).features
        return st.with_features(ad.relu(ad.concat([y1, y2], axis=1)))


class DAModule(_ParamHolder):
    """Maps voxel features from point width to image width via SCConv layers."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        dt = cfg.np_dtype()
        self.lift_w = self._register(
            "da_lift_w",
            _identity_sparse(rng, 1, cfg.point_channels, cfg.image_channels, dt),
            ROLE_ADAPTER)
        self.layers = []
        for i in range(cfg.da_layers):
            layer = SCConv3dLayer(cfg.image_channels, cfg.scconv_pool, rng, dt,
                                  name_prefix="da_sc%d" % i)
            for name, (p, role) in layer._params.items():
                self._register(name, p, role)
            self.layers.append(layer)
        self.in_channels = cfg.point_channels
        self.out_channels = cfg.image_channels

    def forward_sparse(self, st: sp.SparseTensor3D) -> sp.SparseTensor3D:
        if st.num_channels != self.in_channels:
            raise ShapeError("adapter expects %d channels, got %d"
                             % (self.in_channels, st.num_channels))
        out = sp.sparse_conv(st, self.lift_w)
        for layer in self.layers:
            out = layer.forward(out)
        return out

    def forward(self, st: sp.SparseTensor3D, vmap: sp.VoxelMap) -> Tensor:
        """Pseudo-2D per-point features (N, C_img)."""
        return sp.devoxelize(self.forward_sparse(st), vmap)


class LinearLift(_ParamHolder):
    """Ablation stand-in for the DA module: a single per-voxel linear map."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        dt = cfg.np_dtype()
        self.lift_w = self._register(
            "da_lift_w",
            _identity_sparse(rng, 1, cfg.point_channels, cfg.image_channels, dt),
            ROLE_ADAPTER)
        self.in_channels = cfg.point_channels
        self.out_channels = cfg.image_channels
        self.layers = []

    def forward_sparse(self, st: sp.SparseTensor3D) -> sp.SparseTensor3D:
        if st.num_channels != self.in_channels:
            raise ShapeError("adapter expects %d channels, got %d"
                             % (self.in_channels, st.num_channels))
        return sp.sparse_conv(st, self.lift_w)

    def forward(self, st: sp.SparseTensor3D, vmap: sp.VoxelMap) -> Tensor:
        return sp.devoxelize(self.forward_sparse(st), vmap)


class SharedClassifier(_ParamHolder):
    """Per-location MLP: feature rows (M, C) -> class probabilities (M, C_cls)."""

    def __init__(self, in_channels: int, num_classes: int, hidden: int,
                 rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        reg, R = self._register, ROLE_CLASSIFIER
        self.w1 = reg("cls_w1", _he_linear(rng, in_channels, hidden, dtype), R)
        self.b1 = reg("cls_b1", _zeros(hidden, dtype), R)
        self.w2 = reg("cls_w2", _he_linear(rng, hidden, hidden, dtype), R)
        self.b2 = reg("cls_b2", _zeros(hidden, dtype), R)
        self.w3 = reg("cls_w3", _he_linear(rng, hidden, num_classes, dtype), R)
        self.b3 = reg("cls_b3", _zeros(num_classes, dtype), R)
        self.in_channels = in_channels
        self.num_classes = num_classes

    def logits(self, features: Tensor) -> Tensor:
        if features.ndim != 2 or features.shape[1] != self.in_channels:
            raise ShapeError("classifier expects (M, %d) rows, got %r"
                             % (self.in_channels, features.shape))
        h = ad.relu(ad.add(ad.matmul(features, self.w1), self.b1))
        h = ad.relu(ad.add(ad.matmul(h, self.w2), self.b2))
        return ad.add(ad.matmul(h, self.w3), self.b3)

    def forward(self, features: Tensor) -> Tensor:
        """Soft labels; each row sums to 1."""
        return ad.softmax(self.logits(features), axis=1)

    def logits_map(self, feature_map: Tensor) -> Tensor:
        """(C, H, W) feature map -> (C_cls, H, W) logits through the same MLP."""
        c, h, w = feature_map.shape
        rows = ad.transpose(ad.reshape(feature_map, (c, h * w)))
        out = ad.transpose(self.logits(rows))
        return ad.reshape(out, (self.num_classes, h, w))

    def forward_map(self, feature_map: Tensor) -> Tensor:
        c, h, w = feature_map.shape
        rows = ad.transpose(ad.reshape(feature_map, (c, h * w)))
        out = ad.transpose(self.forward(rows))
        return ad.reshape(out, (self.num_classes, h, w))


@dataclass
class ModelBundle:
    """Everything learnable, grouped; the classifier is shared by both paths."""

    cfg: ModelConfig
    extractor2d: Extractor2D
    extractor3d: Extractor3D
    adapter: _ParamHolder
    classifier: SharedClassifier

    @classmethod
    def create(cls, cfg: ModelConfig, seed: int, use_da: bool = True) -> "ModelBundle":
        seeds = np.random.SeedSequence(seed).spawn(4)
        e2d = Extractor2D(cfg, np.random.default_rng(seeds[0]))
        e3d = Extractor3D(cfg, np.random.default_rng(seeds[1]))
        adapter_cls = DAModule if use_da else LinearLift
        adapter = adapter_cls(cfg, np.random.default_rng(seeds[2]))
        classifier = SharedClassifier(cfg.image_channels, cfg.num_classes,
                                      cfg.classifier_hidden,
                                      np.random.default_rng(seeds[3]),
                                      dtype=cfg.np_dtype())
        return cls(cfg, e2d, e3d, adapter, classifier)

    def models(self):
        return [self.extractor2d, self.extractor3d, self.adapter, self.classifier]

    def named_parameters(self):
        out = []
        for m in self.models():
            out.extend(m.named_parameters())
        return out

    def roles(self):
        roles = {}
        for m in self.models():
            roles.update(m.roles())
        return roles

    def predict_points(self, cloud: np.ndarray, classifier: SharedClassifier = None):
        """Soft labels per point through extractor -> adapter -> classifier."""
        clf = classifier if classifier is not None else self.classifier
        if clf.in_channels != self.adapter.out_channels:
            raise ShapeError("classifier width %d does not match adapter output %d"
                             % (clf.in_channels, self.adapter.out_channels))
        _, st, vmap = self.extractor3d.forward(cloud)
        pseudo = self.adapter.forward(st, vmap)
        return clf.forward(pseudo)


def swap_classifier(bundle: ModelBundle, new_classifier: SharedClassifier):
    """Composed 3D network with a replacement classifier; 3D weights untouched."""
    if new_classifier.in_channels != bundle.adapter.out_channels:
        raise ShapeError("classifier width %d does not match adapter output %d"
                         % (new_classifier.in_channels, bundle.adapter.out_channels))

    def network(cloud: np.ndarray) -> Tensor:
        return bundle.predict_points(cloud, classifier=new_classifier)

    return network


# -- checkpoints -------------------------------------------------------------


def save_checkpoint(path: str, named_params, roles: dict, extra: dict = None) -> None:
    """Directory of raw little-endian float32 blobs plus a JSON manifest."""
    os.makedirs(path, exist_ok=True)
    manifest = []
    for name, p in named_params:
        fname = name + ".f32"
        with open(os.path.join(path, fname), "wb") as fh:
            fh.write(p.data.astype("<f4").tobytes())
        manifest.append({"name": name, "shape": list(p.shape),
                         "role": roles[name], "file": fname})
    doc = {"params": manifest}
    if extra:
        doc.update(extra)
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)


def save_optim_state(path: str, named_params, next_epoch: int) -> None:
    """Momentum buffers plus the epoch cursor, for exact training resume."""
    optim_dir = os.path.join(path, "optim")
    os.makedirs(optim_dir, exist_ok=True)
    for name, p in named_params:
        with open(os.path.join(optim_dir, name + ".f32"), "wb") as fh:
            fh.write(p.momentum.astype("<f4").tobytes())
    with open(os.path.join(path, "training_state.json"), "w") as fh:
        json.dump({"next_epoch": next_epoch}, fh)


def load_optim_state(path: str, named_params) -> int:
    """Restore momentum buffers; returns the epoch to continue from."""
    state_path = os.path.join(path, "training_state.json")
    if not os.path.exists(state_path):
        raise MissingArtifactError("no training state at %s" % state_path)
    optim_dir = os.path.join(path, "optim")
    for name, p in named_params:
        raw = np.frombuffer(
            open(os.path.join(optim_dir, name + ".f32"), "rb").read(), dtype="<f4")
        p.momentum[...] = raw.reshape(p.momentum.shape).astype(p.momentum.dtype)
    with open(state_path) as fh:
        return int(json.load(fh)["next_epoch"])


def load_checkpoint(path: str, named_params) -> dict:
    """Fill parameters in place from a checkpoint directory; returns the manifest."""
    manifest_path = os.path.join(path, "manifest.json")
    if not os.path.exists(manifest_path):
        raise MissingArtifactError("no checkpoint manifest at %s" % manifest_path)
    with open(manifest_path) as fh:
        doc = json.load(fh)
    by_name = {entry["name"]: entry for entry in doc["params"]}
    for name, p in named_params:
        if name not in by_name:
            raise MissingArtifactError("checkpoint %s lacks parameter %s" % (path, name))
        entry = by_name[name]
        raw = np.frombuffer(open(os.path.join(path, entry["file"]), "rb").read(), dtype="<f4")
        p.data[...] = raw.reshape(entry["shape"]).astype(p.dtype)
    return doc
