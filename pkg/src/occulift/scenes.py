"""Synthetic scenes, ground-truth rendering, and the posed-dataset format.

Ground truth comes from sphere tracing the analytic SDF union with Lambertian
shading under one directional light. Datasets persist as a directory with
``cameras.json`` plus ``images/`` (and optional per-view masks / feature
maps); synthetic datasets additionally carry ``scene.json`` so the oracle
segmenter can be rebuilt from disk.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .features import FEATURE_MAP_SIZE, FeatureMap, save_feature_map
from .fields import AnalyticScene, Primitive
from .geometry import Camera, generate_rays_batch, look_at_rotation

LIGHT_DIR = np.array([0.4, 0.8, -0.45])
SPHERE_TRACE_STEPS = 128
HIT_THRESHOLD = 1e-4


class DatasetError(Exception):
    pass


@dataclass
class SceneView:
    view_id: int
    camera: Camera
    image_path: str | None = None
    mask_path: str | None = None
    feature_path: str | None = None


@dataclass
class SceneDataset:
    views: list
    bounds_min: np.ndarray
    bounds_max: np.ndarray
    root: str | None = None
    target_object_id: int | None = None

    def view(self, view_id: int) -> SceneView:
        for v in self.views:
            if v.view_id == view_id:
                return v
        raise KeyError(f"no view {view_id}")

    def _resolve(self, rel):
        return rel if self.root is None else os.path.join(self.root, rel)

    def load_image(self, view: SceneView) -> np.ndarray:
        arr = np.asarray(Image.open(self._resolve(view.image_path)))
        return arr.astype(np.float64) / 255.0

    def load_mask(self, view: SceneView) -> np.ndarray:
        arr = np.asarray(Image.open(self._resolve(view.mask_path)))
        return arr >= 128

    def image_path_of(self, view: SceneView) -> str:
        return self._resolve(view.image_path)


# -- ground-truth rendering -------------------------------------------------


def sphere_trace(scene: AnalyticScene, origins, directions, t_near, t_far):
    """Vectorized sphere tracing. Returns (hit (N,), t (N,), object_id (N,),
    color (N,3)). Misses have object_id -1 and t = t_far."""
    n = len(origins)
    t = t_near.astype(np.float64).copy()
    hit = np.zeros(n, dtype=bool)
    alive = t < t_far
    for _ in range(SPHERE_TRACE_STEPS):
        if not alive.any():
            break
        idx = np.nonzero(alive)[0]
        p = origins[idx] + t[idx, None] * directions[idx]
        d = scene.sdf(p)
        just_hit = d < HIT_THRESHOLD
        hit_idx = idx[just_hit]
        hit[hit_idx] = True
        alive[hit_idx] = False
        move = idx[~just_hit]
        t[move] += d[~just_hit]
        dead = move[t[move] > t_far[move]]
        alive[dead] = False
    obj = np.full(n, -1, dtype=np.int64)
    col = np.zeros((n, 3))
    if hit.any():
        p = origins[hit] + t[hit, None] * directions[hit]
        _, obj_hit, col_hit = scene.sdf_full(p)
        obj[hit] = obj_hit
        col[hit] = col_hit
    t = np.where(hit, t, t_far)
    return hit, t, obj, col


def _shade(scene, origins, directions, t, hit, albedo):
    img = np.zeros((len(origins), 3))
    if hit.any():
        p = origins[hit] + t[hit, None] * directions[hit]
        n = scene.normal(p)
        l = -LIGHT_DIR / np.linalg.norm(LIGHT_DIR)
        lambert = np.maximum(n @ l, 0.0)
        img[hit] = albedo[hit] * (0.25 + 0.75 * lambert[:, None])
    return np.clip(img, 0.0, 1.0)


def render_ground_truth(scene: AnalyticScene, camera: Camera, supersample: int = 2):
    """Sphere-traced reference render.

    Returns (image (H,W,3), silhouettes {object_id: bool (H,W)},
    depth (H,W), object_map (H,W) int with -1 background). Silhouettes are
    per-object subpixel coverage thresholded at 0.5; depth is the mean hit
    distance over covered subpixels (0 where nothing hits).
    """
    ss = int(supersample)
    cam_ss = scale_camera(camera, ss) if ss > 1 else camera
    W, H = cam_ss.width, cam_ss.height
    xs, ys = np.meshgrid(np.arange(W), np.arange(H))
    o, d, t0, t1, valid = generate_rays_batch(
        cam_ss, xs.ravel(), ys.ravel(), scene.bounds_min, scene.bounds_max
    )
    hit = np.zeros(W * H, dtype=bool)
    t = np.where(valid, t1, 0.0)
    obj = np.full(W * H, -1, dtype=np.int64)
    col = np.zeros((W * H, 3))
    if valid.any():
        h_, t_, obj_, col_ = sphere_trace(scene, o[valid], d[valid], t0[valid], t1[valid])
        hit[valid] = h_
        t[valid] = t_
        obj[valid] = obj_
        col[valid] = col_
    img = _shade(scene, o, d, t, hit, col).reshape(H, W, 3)
    hit = hit.reshape(H, W)
    obj = obj.reshape(H, W)
    t = t.reshape(H, W)

    Ho, Wo = camera.height, camera.width
    ids = sorted({int(p.object_id) for p in scene.primitives})
    if ss == 1:
        silhouettes = {k: (obj == k) for k in ids}
        depth = np.where(hit, t, 0.0)
        object_map = np.where(hit, obj, -1)
        return img, silhouettes, depth, object_map

    def pool(a):
        return a.reshape(Ho, ss, Wo, ss).mean(axis=(1, 3))

    image = img.reshape(Ho, ss, Wo, ss, 3).mean(axis=(1, 3))
    coverage = {k: pool((obj == k).astype(np.float64)) for k in ids}
    silhouettes = {k: coverage[k] >= 0.5 for k in ids}
    hit_cov = pool(hit.astype(np.float64))
    depth_sum = pool(np.where(hit, t, 0.0))
    depth = np.where(hit_cov > 0, depth_sum / np.maximum(hit_cov, 1e-12), 0.0)
    # argmax-coverage object where at least half the subpixels hit anything
    stack = np.stack([coverage[k] for k in ids])
    best = np.argmax(stack, axis=0)
    object_map = np.where(hit_cov >= 0.5, np.array(ids)[best], -1)
    return image, silhouettes, depth, object_map


def scale_camera(camera: Camera, factor: int) -> Camera:
    return Camera(
        fx=camera.fx * factor, fy=camera.fy * factor,
        cx=camera.cx * factor, cy=camera.cy * factor,
        rotation=camera.rotation, translation=camera.translation,
        width=camera.width * factor, height=camera.height * factor,
    )


def resize_camera(camera: Camera, width: int, height: int) -> Camera:
    sx, sy = width / camera.width, height / camera.height
    return Camera(
        fx=camera.fx * sx, fy=camera.fy * sy,
        cx=camera.cx * sx, cy=camera.cy * sy,
        rotation=camera.rotation, translation=camera.translation,
        width=width, height=height,
    )


def generate_camera_ring(count, radius, elevation, look_at, width=200, height=150,
                         focal=180.0):
    """Evenly spaced azimuths at fixed elevation angle, all looking at
    ``look_at`` (y-up world)."""
    if count < 1:
        raise ValueError("count >= 1")
    look_at = np.asarray(look_at, dtype=np.float64)
    cams = []
    for i in range(count):
        az = 2 * np.pi * i / count
        center = look_at + radius * np.array(
            [np.cos(elevation) * np.cos(az), np.sin(elevation), np.cos(elevation) * np.sin(az)]
        )
        R = look_at_rotation(center, look_at)
        cams.append(Camera(fx=focal, fy=focal, cx=width / 2, cy=height / 2,
                           rotation=R, translation=center, width=width, height=height))
    return cams


# -- presets -----------------------------------------------------------------


def make_duo_scene() -> AnalyticScene:
    """Standard test scene: target sphere + distractor box + ground slab."""
    prims = [
        Primitive(shape="sphere", center=(0.25, 0.0, 0.0), size=0.35,
                  color=(0.80, 0.25, 0.20), object_id=1),
        Primitive(shape="box", center=(-0.55, -0.27, 0.05), size=(0.15, 0.15, 0.15),
                  color=(0.20, 0.30, 0.80), object_id=2),
        Primitive(shape="box", center=(0.0, -0.62, 0.0), size=(0.95, 0.20, 0.95),
                  color=(0.50, 0.50, 0.45), object_id=3),
    ]
    return AnalyticScene(primitives=prims,
                         bounds_min=np.array([-1.0, -1.0, -1.0]),
                         bounds_max=np.array([1.0, 1.0, 1.0]))


PRESETS = {"duo": make_duo_scene}
PRESET_TARGET_ID = {"duo": 1}


def sample_primitive_surface(prim: Primitive, count: int, seed: int = 0) -> np.ndarray:
    """Uniform surface samples of one primitive (the chamfer ground truth)."""
    rng = np.random.default_rng(seed)
    c = np.asarray(prim.center, dtype=np.float64)
    if prim.shape == "sphere":
        v = rng.standard_normal((count, 3))
        v /= np.linalg.norm(v, axis=-1, keepdims=True)
        return c + float(prim.size) * v
    if prim.shape == "box":
        h = np.asarray(prim.size, dtype=np.float64)
        # area-weighted face selection, then uniform in-face placement
        areas = np.array([h[1] * h[2], h[1] * h[2], h[0] * h[2],
                          h[0] * h[2], h[0] * h[1], h[0] * h[1]])
        face = rng.choice(6, size=count, p=areas / areas.sum())
        pts = (rng.random((count, 3)) * 2.0 - 1.0) * h
        axis = face // 2
        sign = np.where(face % 2 == 0, 1.0, -1.0)
        pts[np.arange(count), axis] = sign * h[axis]
        return c + pts
    raise ValueError(f"unknown primitive shape {prim.shape!r}")


def oracle_feature_map(scene: AnalyticScene, camera: Camera, channels=32, seed=1234):
    """Synthetic distillation target: a fixed random linear projection of
    per-pixel (object one-hot, normal, depth) attributes at 256x256."""
    cam = resize_camera(camera, FEATURE_MAP_SIZE, FEATURE_MAP_SIZE)
    _, _, depth, obj = render_ground_truth(scene, cam, supersample=1)
    H = W = FEATURE_MAP_SIZE
    xs, ys = np.meshgrid(np.arange(W), np.arange(H))
    o, d, _, _, _ = generate_rays_batch(cam, xs.ravel(), ys.ravel(),
                                        scene.bounds_min, scene.bounds_max)
    normal = np.zeros((H * W, 3))
    hit = (obj.ravel() >= 0)
    if hit.any():
        p = o[hit] + depth.ravel()[hit, None] * d[hit]
        normal[hit] = scene.normal(p)
    ids = sorted({int(p.object_id) for p in scene.primitives})
    onehot = np.stack([(obj.ravel() == k).astype(np.float64) for k in ids], axis=-1)
    attrs = np.concatenate([onehot, normal, depth.reshape(-1, 1)], axis=-1)
    rng = np.random.default_rng(seed)
    proj = rng.standard_normal((attrs.shape[1], channels)) / np.sqrt(attrs.shape[1])
    feats = (attrs @ proj).reshape(H, W, channels)
    return FeatureMap(values=feats.astype(np.float32))


# -- dataset persistence ------------------------------------------------------


def save_image_u8(path, array01):
    arr = np.clip(np.asarray(array01) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def save_mask_u8(path, binary):
    Image.fromarray(np.where(binary, 255, 0).astype(np.uint8), mode="L").save(path)


def generate_synthetic_dataset(preset: str, out_dir: str, views=16, width=200,
                               height=150, supersample=2, radius=2.8,
                               elevation=0.5, focal=None, feature_channels=32,
                               feature_seed=1234, with_features=True):
    """Render a preset scene into a posed dataset on disk."""
    if preset not in PRESETS:
        raise DatasetError(f"unknown preset {preset!r}")
    scene = PRESETS[preset]()
    target_id = PRESET_TARGET_ID[preset]
    if focal is None:
        focal = 0.9 * max(width, height)
    cams = generate_camera_ring(views, radius, elevation, (0.0, 0.0, 0.0),
                                width=width, height=height, focal=focal)
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "masks"), exist_ok=True)
    if with_features:
        os.makedirs(os.path.join(out_dir, "features"), exist_ok=True)

    view_entries = []
    ds_views = []
    for i, cam in enumerate(cams):
        image, silhouettes, _, _ = render_ground_truth(scene, cam, supersample)
        img_rel = f"images/{i:04d}.png"
        mask_rel = f"masks/{i:04d}.png"
        save_image_u8(os.path.join(out_dir, img_rel), image)
        save_mask_u8(os.path.join(out_dir, mask_rel), silhouettes[target_id])
        feat_rel = None
        if with_features:
            feat_rel = f"features/{i:04d}.olfeat"
            fmap = oracle_feature_map(scene, cam, channels=feature_channels,
                                      seed=feature_seed)
            save_feature_map(fmap, os.path.join(out_dir, feat_rel))
        ds_views.append(SceneView(view_id=i, camera=cam, image_path=img_rel,
                                  mask_path=mask_rel, feature_path=feat_rel))
        view_entries.append(_view_to_json(ds_views[-1]))

    meta = {
        "bounds": [*scene.bounds_min.tolist(), *scene.bounds_max.tolist()],
        "views": view_entries,
    }
    with open(os.path.join(out_dir, "cameras.json"), "w") as f:
        json.dump(meta, f, indent=1)
    with open(os.path.join(out_dir, "scene.json"), "w") as f:
        json.dump(scene_to_json(scene, target_id), f, indent=1)
    return SceneDataset(views=ds_views, bounds_min=scene.bounds_min,
                        bounds_max=scene.bounds_max, root=out_dir,
                        target_object_id=target_id)


def scene_to_json(scene: AnalyticScene, target_id=None):
    return {
        "bounds": [*scene.bounds_min.tolist(), *scene.bounds_max.tolist()],
        "target_object_id": target_id,
        "primitives": [
            {
                "shape": p.shape,
                "center": list(p.center),
                "size": list(p.size) if np.ndim(p.size) else float(p.size),
                "color": list(p.color),
                "object_id": p.object_id,
            }
            for p in scene.primitives
        ],
    }


def scene_from_json(data) -> AnalyticScene:
    prims = [
        Primitive(shape=p["shape"], center=tuple(p["center"]),
                  size=tuple(p["size"]) if isinstance(p["size"], list) else p["size"],
                  color=tuple(p["color"]), object_id=p["object_id"])
        for p in data["primitives"]
    ]
    b = data["bounds"]
    return AnalyticScene(primitives=prims, bounds_min=np.array(b[:3]),
                         bounds_max=np.array(b[3:]))


def load_scene(dataset_dir: str):
    path = os.path.join(dataset_dir, "scene.json")
    if not os.path.exists(path):
        return None, None
    with open(path) as f:
        data = json.load(f)
    return scene_from_json(data), data.get("target_object_id")


def _view_to_json(v: SceneView):
    c = v.camera
    return {
        "id": v.view_id,
        "fx": c.fx, "fy": c.fy, "cx": c.cx, "cy": c.cy,
        "rotation": [float(x) for x in c.rotation.ravel()],
        "translation": [float(x) for x in c.translation],
        "width": c.width, "height": c.height,
        "image": v.image_path,
        "mask": v.mask_path,
        "features": v.feature_path,
    }


def save_dataset(dataset: SceneDataset, path: str):
    os.makedirs(path, exist_ok=True)
    meta = {
        "bounds": [*np.asarray(dataset.bounds_min, dtype=float).tolist(),
                   *np.asarray(dataset.bounds_max, dtype=float).tolist()],
        "views": [_view_to_json(v) for v in dataset.views],
    }
    with open(os.path.join(path, "cameras.json"), "w") as f:
        json.dump(meta, f, indent=1)


def load_dataset(path: str) -> SceneDataset:
    meta_path = os.path.join(path, "cameras.json")
    if not os.path.exists(meta_path):
        raise DatasetError(f"{path}: cameras.json missing")
    with open(meta_path) as f:
        meta = json.load(f)
    if "bounds" not in meta or len(meta["bounds"]) != 6:
        raise DatasetError("cameras.json: bad or missing 'bounds'")
    views = []
    for i, entry in enumerate(meta.get("views", [])):
        views.append(_view_from_json(entry, i, path))
    _, target_id = load_scene(path)
    return SceneDataset(
        views=views,
        bounds_min=np.array(meta["bounds"][:3], dtype=np.float64),
        bounds_max=np.array(meta["bounds"][3:], dtype=np.float64),
        root=path,
        target_object_id=target_id,
    )


def _view_from_json(entry, index, root):
    required = ["id", "fx", "fy", "cx", "cy", "rotation", "translation",
                "width", "height", "image"]
    for key in required:
        if key not in entry:
            raise DatasetError(f"view {index}: missing field '{key}'")
    R = np.array(entry["rotation"], dtype=np.float64).reshape(3, 3)
    if np.linalg.det(R) < 0:
        raise DatasetError(f"view {index}: improper-rotation")
    try:
        cam = Camera(
            fx=entry["fx"], fy=entry["fy"], cx=entry["cx"], cy=entry["cy"],
            rotation=R, translation=np.array(entry["translation"], dtype=np.float64),
            width=int(entry["width"]), height=int(entry["height"]),
        )
    except ValueError as e:
        raise DatasetError(f"view {index}: {e}") from e
    img = entry["image"]
    if not os.path.exists(os.path.join(root, img)):
        raise DatasetError(f"view {entry['id']}: image file '{img}' missing")
    for key in ("mask", "features"):
        rel = entry.get(key)
        if rel is not None and not os.path.exists(os.path.join(root, rel)):
            raise DatasetError(f"view {entry['id']}: {key} file '{rel}' missing")
    return SceneView(view_id=int(entry["id"]), camera=cam, image_path=img,
                     mask_path=entry.get("mask"), feature_path=entry.get("features"))
