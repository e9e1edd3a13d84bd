"""Procedural paired camera/LiDAR scenes with per-pixel and per-point labels.

Both sensors are ray casters over the same analytic primitives (ground
plane, boxes, cylinders, spheres), so occlusion is consistent across
modalities by construction. Modality-specific nuisances are added on top:
the image gets directional sun shading and pixel noise, the cloud gets
range jitter and material-dependent intensity.

Eight base classes; a refined label set splits pedestrians into
adult/worker and the junk class into debris/pushable objects, which is
what the classifier-swap experiment trains against.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from .geometry import CameraModel, joint_visible_mask, nearest_pixels, project

CLASS_NAMES = ["ground", "building", "vehicle", "pole", "vegetation",
               "barrier", "pedestrian", "noise"]
REFINED_NAMES = ["ground", "building", "vehicle", "pole", "vegetation",
                 "barrier", "adult", "worker", "debris", "pushable"]
NUM_CLASSES = len(CLASS_NAMES)
NUM_REFINED = len(REFINED_NAMES)

GROUND, BUILDING, VEHICLE, POLE, VEGETATION, BARRIER, PEDESTRIAN, NOISE = range(8)
R_ADULT, R_WORKER, R_DEBRIS, R_PUSHABLE = 6, 7, 8, 9

# sky pixels carry the junk class (debris in the refined set)
SKY_CLASS = NOISE
SKY_REFINED = R_DEBRIS
SKY_COLOR = np.array([0.65, 0.75, 0.92])

# base albedo / LiDAR reflectivity per (class, refinement); intensities are
# spread so materials are separable from the cloud alone, and workers wear
# hi-vis, so both their color and their intensity stand out
_MATERIALS = {
    "ground": ((0.35, 0.34, 0.31), 0.18),
    "building": ((0.55, 0.46, 0.40), 0.42),
    "vehicle": ((0.16, 0.25, 0.62), 0.85),
    "pole": ((0.46, 0.46, 0.49), 0.62),
    "vegetation": ((0.13, 0.44, 0.16), 0.33),
    "barrier": ((0.72, 0.45, 0.10), 0.72),
    "adult": ((0.50, 0.31, 0.26), 0.50),
    "worker": ((0.92, 0.78, 0.10), 0.95),
    "debris": ((0.21, 0.19, 0.17), 0.10),
    "pushable": ((0.20, 0.55, 0.50), 0.56),
}


@dataclass
class SceneSpec:
    world_extent: float = 16.0
    image_height: int = 64
    image_width: int = 96
    focal: float = 83.0
    cam_height: float = 1.32
    cam_pitch_deg: float = 10.0          # downward pitch
    lidar_height: float = 1.20
    azimuth_steps: int = 360
    elevation_steps: int = 18
    elevation_range_deg: tuple = (-28.0, 6.0)
    range_jitter: float = 0.01
    intensity_noise: float = 0.02
    image_noise: float = 0.015
    ambient: float = 0.45
    diffuse: float = 0.55
    counts: dict = field(default_factory=lambda: {
        "building": (2, 3), "vehicle": (2, 4), "pole": (1, 2),
        "vegetation": (3, 5), "barrier": (2, 4), "pedestrian": (2, 4),
        "noise": (3, 5),
    })

    def to_dict(self) -> dict:
        d = asdict(self)
        d["elevation_range_deg"] = list(d["elevation_range_deg"])
        d["counts"] = {k: list(v) for k, v in d["counts"].items()}
        return d

    def content_hash(self) -> str:
        return hashlib.sha256(
            json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class Primitive:
    kind: str           # plane | box | cylinder | sphere
    class_id: int
    refined_id: int
    albedo: np.ndarray
    intensity: float
    params: dict


@dataclass
class Scene:
    spec: SceneSpec
    primitives: list
    sun_dir: np.ndarray
    seed: int


@dataclass
class PairedSample:
    """One synchronized image + cloud pair with labels and calibration."""

    image: np.ndarray          # (3, H, W) float32 in [0, 1]
    cloud: np.ndarray          # (N, 4) float32: x, y, z, intensity
    labels_px: np.ndarray      # (H, W) int32
    labels_pt: np.ndarray      # (N,) int32
    labels_px_refined: np.ndarray
    labels_pt_refined: np.ndarray
    depth_px: np.ndarray       # (H, W) float32 camera-frame z, inf for sky
    cam: CameraModel
    seed: int


def _material(rng, name):
    base_rgb, base_int = _MATERIALS[name]
    albedo = np.clip(np.asarray(base_rgb) + rng.normal(0, 0.03, 3), 0.02, 0.98)
    intensity = float(np.clip(base_int + rng.normal(0, 0.03), 0.05, 1.0))
    return albedo, intensity


def _place(rng, frustum_bias=0.55, radius_lo=2.5, radius_hi=7.0):
    """Ground position in an annulus, biased toward the camera wedge."""
    radius = rng.uniform(radius_lo, radius_hi)
    if rng.uniform() < frustum_bias:
        azim = rng.uniform(-0.45, 0.45)
    else:
        azim = rng.uniform(-np.pi, np.pi)
    return radius * np.cos(azim), radius * np.sin(azim)


def build_scene(spec: SceneSpec, seed: int) -> Scene:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC0FFEE]))
    prims = []
    half = spec.world_extent / 2.0

    albedo, inten = _material(rng, "ground")
    prims.append(Primitive("plane", GROUND, GROUND, albedo, inten,
                           {"half_extent": half}))

    def rand_count(name):
        lo, hi = spec.counts[name]
        return int(rng.integers(lo, hi + 1))

    for _ in range(rand_count("building")):
        x, y = _place(rng, radius_lo=4.5, radius_hi=7.5)
        sx, sy = rng.uniform(1.8, 3.5, 2)
        h = rng.uniform(2.5, 4.5)
        albedo, inten = _material(rng, "building")
        prims.append(Primitive("box", BUILDING, BUILDING, albedo, inten,
                               {"lo": np.array([x - sx / 2, y - sy / 2, 0.0]),
                                "hi": np.array([x + sx / 2, y + sy / 2, h])}))

    for _ in range(rand_count("vehicle")):
        x, y = _place(rng)
        length, width = rng.uniform(1.9, 2.8), rng.uniform(1.0, 1.4)
        h = rng.uniform(0.9, 1.4)
        if rng.uniform() < 0.5:
            length, width = width, length
        albedo, inten = _material(rng, "vehicle")
        prims.append(Primitive("box", VEHICLE, VEHICLE, albedo, inten,
                               {"lo": np.array([x - length / 2, y - width / 2, 0.0]),
                                "hi": np.array([x + length / 2, y + width / 2, h])}))

    for _ in range(rand_count("pole")):
        x, y = _place(rng)
        prims.append(Primitive("cylinder", POLE, POLE, *_material(rng, "pole"),
                               {"center": np.array([x, y]),
                                "radius": rng.uniform(0.10, 0.16),
                                "z0": 0.0, "z1": rng.uniform(2.5, 4.0)}))

    for _ in range(rand_count("vegetation")):
        x, y = _place(rng)
        r = rng.uniform(0.5, 1.1)
        prims.append(Primitive("sphere", VEGETATION, VEGETATION,
                               *_material(rng, "vegetation"),
                               {"center": np.array([x, y, r * rng.uniform(1.0, 1.4)]),
                                "radius": r}))

    for _ in range(rand_count("barrier")):
        x, y = _place(rng)
        length = rng.uniform(1.5, 3.0)
        width = rng.uniform(0.15, 0.3)
        if rng.uniform() < 0.5:
            length, width = width, length
        h = rng.uniform(0.5, 0.9)
        prims.append(Primitive("box", BARRIER, BARRIER, *_material(rng, "barrier"),
                               {"lo": np.array([x - length / 2, y - width / 2, 0.0]),
                                "hi": np.array([x + length / 2, y + width / 2, h])}))

    for _ in range(rand_count("pedestrian")):
        x, y = _place(rng)
        worker = rng.uniform() < 0.5
        name = "worker" if worker else "adult"
        prims.append(Primitive("cylinder", PEDESTRIAN,
                               R_WORKER if worker else R_ADULT,
                               *_material(rng, name),
                               {"center": np.array([x, y]),
                                "radius": rng.uniform(0.26, 0.36),
                                "z0": 0.0,
                                "z1": rng.uniform(1.8, 2.0) if worker else rng.uniform(1.5, 1.75)}))

    for _ in range(rand_count("noise")):
        x, y = _place(rng)
        pushable = rng.uniform() < 0.5
        if pushable:
            s = rng.uniform(0.45, 0.75)
            prims.append(Primitive("box", NOISE, R_PUSHABLE, *_material(rng, "pushable"),
                                   {"lo": np.array([x - s / 2, y - s / 2, 0.0]),
                                    "hi": np.array([x + s / 2, y + s / 2, s * rng.uniform(1.0, 1.6)])}))
        else:
            r = rng.uniform(0.15, 0.3)
            prims.append(Primitive("sphere", NOISE, R_DEBRIS, *_material(rng, "debris"),
                                   {"center": np.array([x, y, r * 0.8]), "radius": r}))

    sun_azim = rng.uniform(-np.pi, np.pi)
    sun_elev = rng.uniform(np.deg2rad(45), np.deg2rad(70))
    sun = np.array([np.cos(sun_elev) * np.cos(sun_azim),
                    np.cos(sun_elev) * np.sin(sun_azim),
                    np.sin(sun_elev)])
    return Scene(spec, prims, sun, seed)


# -- analytic ray casting ----------------------------------------------------

_T_MIN = 1e-4


def _hit_plane(o, d, half_extent):
    with np.errstate(divide="ignore", invalid="ignore"):
        t = -o[2] / d[:, 2]
        px = o[0] + t * d[:, 0]
        py = o[1] + t * d[:, 1]
        ok = (d[:, 2] < 0) & (t > _T_MIN) & (np.abs(px) <= half_extent) & (np.abs(py) <= half_extent)
    t = np.where(ok, t, np.inf)
    n = np.zeros_like(d)
    n[:, 2] = 1.0
    return t, n


def _hit_box(o, d, lo, hi):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
    t1 = (lo - o) * inv
    t2 = (hi - o) * inv
    t_near_ax = np.minimum(t1, t2)
    t_far_ax = np.maximum(t1, t2)
    t_near = t_near_ax.max(axis=1)
    t_far = t_far_ax.min(axis=1)
    ok = (t_near <= t_far) & (t_near > _T_MIN)
    t = np.where(ok, t_near, np.inf)
    axis = np.argmax(t_near_ax, axis=1)
    n = np.zeros_like(d)
    rows = np.arange(d.shape[0])
    n[rows, axis] = -np.sign(d[rows, axis])
    return t, n


def _hit_cylinder(o, d, center, radius, z0, z1):
    ox, oy = o[0] - center[0], o[1] - center[1]
    a = d[:, 0] ** 2 + d[:, 1] ** 2
    b = 2.0 * (ox * d[:, 0] + oy * d[:, 1])
    c = ox ** 2 + oy ** 2 - radius ** 2
    disc = b * b - 4 * a * c
    with np.errstate(divide="ignore", invalid="ignore"):
        sq = np.sqrt(np.maximum(disc, 0.0))
        t_side = (-b - sq) / (2 * a)
    z = o[2] + t_side * d[:, 2]
    side_ok = (disc > 0) & (a > 0) & (t_side > _T_MIN) & (z >= z0) & (z <= z1)
    t_side = np.where(side_ok, t_side, np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_cap = (z1 - o[2]) / d[:, 2]
        capx = o[0] + t_cap * d[:, 0] - center[0]
        capy = o[1] + t_cap * d[:, 1] - center[1]
        cap_ok = (d[:, 2] < 0) & (t_cap > _T_MIN) & (capx ** 2 + capy ** 2 <= radius ** 2)
    t_cap = np.where(cap_ok, t_cap, np.inf)
    t = np.minimum(t_side, t_cap)
    n = np.zeros_like(d)
    use_cap = t_cap < t_side
    with np.errstate(invalid="ignore"):
        px = o[0] + t * d[:, 0] - center[0]
        py = o[1] + t * d[:, 1] - center[1]
    n[:, 0] = np.where(use_cap | np.isinf(t), 0.0, px / radius)
    n[:, 1] = np.where(use_cap | np.isinf(t), 0.0, py / radius)
    n[:, 2] = np.where(use_cap, 1.0, 0.0)
    return t, n


def _hit_sphere(o, d, center, radius):
    oc = o - center
    b = 2.0 * (d @ oc)
    c = oc @ oc - radius ** 2
    disc = b * b - 4 * c
    sq = np.sqrt(np.maximum(disc, 0.0))
    t = (-b - sq) / 2.0
    ok = (disc > 0) & (t > _T_MIN)
    t = np.where(ok, t, np.inf)
    with np.errstate(invalid="ignore"):
        p = o + t[:, None] * d
        n = np.where(np.isinf(t)[:, None], 0.0, (p - center) / radius)
    return t, n


def cast_rays(scene: Scene, origin: np.ndarray, dirs: np.ndarray):
    """Nearest hit per ray: (t, primitive index (-1 = miss), normal)."""
    n_rays = dirs.shape[0]
    best_t = np.full(n_rays, np.inf)
    best_idx = np.full(n_rays, -1, dtype=np.int64)
    best_n = np.zeros((n_rays, 3))
    for i, prim in enumerate(scene.primitives):
        if prim.kind == "plane":
            t, n = _hit_plane(origin, dirs, prim.params["half_extent"])
        elif prim.kind == "box":
            t, n = _hit_box(origin, dirs, prim.params["lo"], prim.params["hi"])
        elif prim.kind == "cylinder":
            t, n = _hit_cylinder(origin, dirs, prim.params["center"],
                                 prim.params["radius"], prim.params["z0"],
                                 prim.params["z1"])
        elif prim.kind == "sphere":
            t, n = _hit_sphere(origin, dirs, prim.params["center"], prim.params["radius"])
        else:
            raise ValueError("unknown primitive kind %r" % prim.kind)
        closer = t < best_t
        best_t[closer] = t[closer]
        best_idx[closer] = i
        best_n[closer] = n[closer]
    return best_t, best_idx, best_n


def default_camera(spec: SceneSpec) -> CameraModel:
    """Forward-looking pinhole, pitched down, mounted above the LiDAR."""
    w, h = spec.image_width, spec.image_height
    intrinsics = np.array([[spec.focal, 0.0, (w - 1) / 2.0],
                           [0.0, spec.focal, (h - 1) / 2.0],
                           [0.0, 0.0, 1.0]])
    pitch = np.deg2rad(spec.cam_pitch_deg)
    # world: x forward, y left, z up; camera: x right, y down, z forward
    fwd = np.array([np.cos(pitch), 0.0, -np.sin(pitch)])
    right = np.array([0.0, -1.0, 0.0])
    down = np.cross(fwd, right)
    r = np.stack([right, down, fwd])
    center = np.array([0.0, 0.0, spec.cam_height])
    ext = np.eye(4)
    ext[:3, :3] = r
    ext[:3, 3] = -r @ center
    return CameraModel(intrinsics, ext, w, h)


def lidar_pattern(spec: SceneSpec) -> np.ndarray:
    """Unit ray directions for the spinning pattern (azimuth x elevation grid)."""
    azim = np.linspace(-np.pi, np.pi, spec.azimuth_steps, endpoint=False)
    lo, hi = spec.elevation_range_deg
    elev = np.deg2rad(np.linspace(lo, hi, spec.elevation_steps))
    az, el = np.meshgrid(azim, elev, indexing="ij")
    az, el = az.ravel(), el.ravel()
    return np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], axis=1)


def raycast_lidar(scene: Scene, pattern: np.ndarray, rng: np.random.Generator):
    """Labeled cloud: hits only; jittered range, material intensity."""
    origin = np.array([0.0, 0.0, scene.spec.lidar_height])
    t, idx, normal = cast_rays(scene, origin, pattern)
    hit = idx >= 0
    t, idx, normal, dirs = t[hit], idx[hit], normal[hit], pattern[hit]
    jitter = rng.normal(0.0, scene.spec.range_jitter, size=t.shape)
    points = origin + (t + jitter)[:, None] * dirs
    base_int = np.array([scene.primitives[i].intensity for i in idx])
    incidence = np.abs((normal * -dirs).sum(axis=1))
    intensity = np.clip(base_int * (0.75 + 0.25 * incidence)
                        + rng.normal(0.0, scene.spec.intensity_noise, size=t.shape),
                        0.0, 1.0)
    labels = np.array([scene.primitives[i].class_id for i in idx], dtype=np.int32)
    refined = np.array([scene.primitives[i].refined_id for i in idx], dtype=np.int32)
    cloud = np.concatenate([points, intensity[:, None]], axis=1).astype(np.float32)
    return cloud, labels, refined


def render_camera(scene: Scene, cam: CameraModel, rng: np.random.Generator):
    """Shaded image, per-pixel base/refined labels, camera-frame depth."""
    h, w = cam.height, cam.width
    r = cam.extrinsics[:3, :3]
    center = -r.T @ cam.extrinsics[:3, 3]
    fx, fy = cam.intrinsics[0, 0], cam.intrinsics[1, 1]
    cx, cy = cam.intrinsics[0, 2], cam.intrinsics[1, 2]
    us, vs = np.meshgrid(np.arange(w), np.arange(h), indexing="xy")
    d_cam = np.stack([(us.ravel() - cx) / fx, (vs.ravel() - cy) / fy,
                      np.ones(h * w)], axis=1)
    d_world = d_cam @ r
    d_world /= np.linalg.norm(d_world, axis=1, keepdims=True)
    t, idx, normal = cast_rays(scene, center, d_world)
    hit = idx >= 0

    albedo = np.tile(SKY_COLOR, (h * w, 1))
    labels = np.full(h * w, SKY_CLASS, dtype=np.int32)
    refined = np.full(h * w, SKY_REFINED, dtype=np.int32)
    shade = np.ones(h * w)
    if hit.any():
        hit_idx = idx[hit]
        albedo[hit] = np.array([scene.primitives[i].albedo for i in hit_idx])
        labels[hit] = [scene.primitives[i].class_id for i in hit_idx]
        refined[hit] = [scene.primitives[i].refined_id for i in hit_idx]
        lambert = np.clip((normal[hit] * scene.sun_dir).sum(axis=1), 0.0, None)
        shade[hit] = scene.spec.ambient + scene.spec.diffuse * lambert
    img = albedo * shade[:, None]
    img += rng.normal(0.0, scene.spec.image_noise, size=img.shape)
    img = np.clip(img, 0.0, 1.0).T.reshape(3, h, w).astype(np.float32)

    # camera-frame z of the hit (depth used for the cross-modal visibility test)
    z_cam = np.where(hit, t * (d_world @ r[2]), np.inf)
    return (img, labels.reshape(h, w), refined.reshape(h, w),
            z_cam.reshape(h, w).astype(np.float32))


def generate_scene(spec: SceneSpec, seed: int) -> PairedSample:
    """Deterministic paired sample for one seed."""
    scene = build_scene(spec, seed)
    cam = default_camera(spec)
    rng_pt = np.random.default_rng(np.random.SeedSequence([seed, 0x11DA7]))
    rng_px = np.random.default_rng(np.random.SeedSequence([seed, 0x1CA3]))
    cloud, labels_pt, refined_pt = raycast_lidar(scene, lidar_pattern(spec), rng_pt)
    img, labels_px, refined_px, depth = render_camera(scene, cam, rng_px)
    return PairedSample(img, cloud, labels_px, labels_pt, refined_px, refined_pt,
                        depth, cam, seed)


def sample_visibility(sample: PairedSample):
    """(correspondences, jointly visible indices) for a paired sample."""
    corr = project(sample.cloud[:, :3].astype(np.float64), sample.cam)
    vis = joint_visible_mask(corr, sample.depth_px)
    return corr, vis


# -- dataset on disk ---------------------------------------------------------

_SAMPLE_FILES = ("cloud.f32", "image.f32", "labels_pt.i32", "labels_px.i32",
                 "labels_pt_refined.i32", "labels_px_refined.i32",
                 "depth_px.f32", "calib.json", "meta.json")


def save_sample(sample: PairedSample, dir_path: str, spec: SceneSpec) -> None:
    os.makedirs(dir_path, exist_ok=True)

    def raw(name, arr, dt):
        with open(os.path.join(dir_path, name), "wb") as fh:
            fh.write(np.ascontiguousarray(arr, dtype=dt).tobytes())

    raw("cloud.f32", sample.cloud, "<f4")
    raw("image.f32", sample.image, "<f4")
    raw("labels_pt.i32", sample.labels_pt, "<i4")
    raw("labels_px.i32", sample.labels_px, "<i4")
    raw("labels_pt_refined.i32", sample.labels_pt_refined, "<i4")
    raw("labels_px_refined.i32", sample.labels_px_refined, "<i4")
    raw("depth_px.f32", sample.depth_px, "<f4")
    with open(os.path.join(dir_path, "calib.json"), "w") as fh:
        fh.write(sample.cam.to_json())
    meta = {"seed": sample.seed, "spec_hash": spec.content_hash(),
            "n_points": int(sample.cloud.shape[0]),
            "height": spec.image_height, "width": spec.image_width}
    with open(os.path.join(dir_path, "meta.json"), "w") as fh:
        json.dump(meta, fh, sort_keys=True)


def load_sample(dir_path: str) -> PairedSample:
    with open(os.path.join(dir_path, "meta.json")) as fh:
        meta = json.load(fh)
    h, w = meta["height"], meta["width"]
    n = meta["n_points"]

    def raw(name, dt):
        return np.frombuffer(open(os.path.join(dir_path, name), "rb").read(), dtype=dt)

    cloud = raw("cloud.f32", "<f4").reshape(n, 4).astype(np.float32)
    image = raw("image.f32", "<f4").reshape(3, h, w).astype(np.float32)
    cam = CameraModel.from_json(open(os.path.join(dir_path, "calib.json")).read())
    return PairedSample(
        image, cloud,
        raw("labels_px.i32", "<i4").reshape(h, w).astype(np.int32),
        raw("labels_pt.i32", "<i4").astype(np.int32),
        raw("labels_px_refined.i32", "<i4").reshape(h, w).astype(np.int32),
        raw("labels_pt_refined.i32", "<i4").astype(np.int32),
        raw("depth_px.f32", "<f4").reshape(h, w).astype(np.float32),
        cam, int(meta["seed"]))


def generate_dataset(spec: SceneSpec, out_dir: str, num_train: int = 64,
                     num_val: int = 16, seed0: int = 0) -> dict:
    """Write train/val samples (seeded by range) plus a manifest; returns it."""
    os.makedirs(out_dir, exist_ok=True)
    splits = {"train": range(seed0, seed0 + num_train),
              "val": range(seed0 + num_train, seed0 + num_train + num_val)}
    manifest = {"spec": spec.to_dict(), "spec_hash": spec.content_hash(),
                "splits": {}, "seed0": seed0}
    for split, seeds in splits.items():
        names = []
        for s in seeds:
            sample = generate_scene(spec, s)
            name = "%s_%05d" % (split, s)
            save_sample(sample, os.path.join(out_dir, name), spec)
            names.append(name)
        manifest["splits"][split] = names
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return manifest


def load_dataset(data_dir: str):
    """(manifest, {split: [PairedSample]}) for a generated dataset directory."""
    path = os.path.join(data_dir, "manifest.json")
    with open(path) as fh:
        manifest = json.load(fh)
    samples = {}
    for split, names in manifest["splits"].items():
        samples[split] = [load_sample(os.path.join(data_dir, n)) for n in names]
    return manifest, samples
