"""Synthetic scene generator for desk-scale end-to-end runs.

Scenes contain 1-2 box objects in front of a pinhole camera. The image is
a smooth background plus one anisotropic blob per object (sized with the
projected box, so apparent size encodes depth); the depth raster holds the
per-pixel depth of the nearest covering box and a far-plane constant
elsewhere. Geometry, labels and calibration follow the KITTI conventions
used by the rest of the package, which makes the fixtures consumable by
``infer`` and ``evaluate`` without a real dataset.
"""

import os
from dataclasses import dataclass, field

import numpy as np

from .autograd.tensorio import save_tensor
from .head import Calibration, project_center
from .kitti import LabelRecord, write_calib, write_labels


@dataclass
class SynthConfig:
    image_hw: tuple = (64, 96)
    focal: float = 280.0
    boxes_min: int = 1
    boxes_max: int = 2
    z_range: tuple = (16.2, 18.3)
    dims_mean: tuple = (3.0, 2.9, 3.1)     # (h, w, l) meters
    dims_std: tuple = (0.06, 0.08, 0.08)
    yaw_limit: float = 0.15
    bottom_y: float = 1.5                  # camera sits near box mid-height
    far_plane: float = 26.0
    noise: float = 0.02
    class_names: tuple = ("Car",)

    def __post_init__(self):
        self.image_hw = tuple(self.image_hw)
        if any(s % 16 for s in self.image_hw):
            raise ValueError("synthetic image size must be divisible by 16")


@dataclass
class SceneObject:
    cls_id: int
    location: tuple     # bottom-face center (x, y, z)
    dims: tuple         # (h, w, l)
    yaw: float
    bbox: tuple         # clipped projected 2D box
    full_bbox: tuple    # unclipped projected 2D box
    center_proj: tuple  # projected geometric center (u, v)
    truncation: float
    occlusion: int


@dataclass
class Scene:
    image: np.ndarray   # (3, H, W)
    depth: np.ndarray   # (1, H, W)
    objects: list
    calib: Calibration
    config: SynthConfig

    def labels(self):
        recs = []
        for obj in self.objects:
            x, y, z = obj.location
            alpha = obj.yaw - np.arctan2(x, z)
            recs.append(LabelRecord(
                type_name=self.config.class_names[obj.cls_id],
                truncation=obj.truncation, occlusion=obj.occlusion,
                alpha=alpha, bbox=obj.bbox, dims=obj.dims,
                location=obj.location, rotation_y=obj.yaw))
        return recs


def make_camera(config):
    h, w = config.image_hw
    f = config.focal
    return Calibration(np.array([[f, 0.0, w / 2.0, 0.0],
                                 [0.0, f, h / 2.0, 0.0],
                                 [0.0, 0.0, 1.0, 0.0]]))


def _box_corners3d(location, dims, yaw):
    x, y, z = location
    h, w, l = dims
    c, s = np.cos(yaw), np.sin(yaw)
    dx = np.array([l / 2, l / 2, -l / 2, -l / 2, l / 2, l / 2, -l / 2, -l / 2])
    dz = np.array([w / 2, -w / 2, -w / 2, w / 2, w / 2, -w / 2, -w / 2, w / 2])
    dy = np.array([0, 0, 0, 0, -h, -h, -h, -h])
    xs = x + c * dx + s * dz
    zs = z - s * dx + c * dz
    ys = y + dy
    return np.stack([xs, ys, zs], axis=1)


def _project_box(location, dims, yaw, calib, image_hw):
    corners = _box_corners3d(location, dims, yaw)
    uv = np.array([project_center(c, calib) for c in corners])
    full = (uv[:, 0].min(), uv[:, 1].min(), uv[:, 0].max(), uv[:, 1].max())
    h, w = image_hw
    clipped = (max(full[0], 0.0), max(full[1], 0.0),
               min(full[2], float(w)), min(full[3], float(h)))
    full_area = (full[2] - full[0]) * (full[3] - full[1])
    clip_area = max(0.0, clipped[2] - clipped[0]) * max(0.0, clipped[3] - clipped[1])
    trunc = 0.0 if full_area <= 0 else 1.0 - clip_area / full_area
    return full, clipped, trunc


def generate_scene(rng, config):
    h, w = config.image_hw
    calib = make_camera(config)
    n_boxes = int(rng.integers(config.boxes_min, config.boxes_max + 1))
    # split the horizontal field of view so objects do not pile up
    slots = np.linspace(0.25 * w, 0.75 * w, max(n_boxes, 1) + 1)
    objects = []
    for i in range(n_boxes):
        z = rng.uniform(*config.z_range)
        dims = tuple(np.maximum(
            rng.normal(config.dims_mean, config.dims_std), 0.4))
        yaw = rng.uniform(-config.yaw_limit, config.yaw_limit)
        y = config.bottom_y + rng.normal(0.0, 0.02)
        u_center = rng.uniform(slots[i] + 0.02 * w, slots[i + 1] - 0.02 * w)
        x = (u_center - w / 2.0) * z / config.focal
        loc = (x, y, z)
        full, clipped, trunc = _project_box(loc, dims, yaw, calib, (h, w))
        if clipped[2] - clipped[0] < 6 or clipped[3] - clipped[1] < 6:
            continue
        u, v = project_center((x, y - dims[0] / 2.0, z), calib)
        cls_id = int(rng.integers(0, len(config.class_names)))
        objects.append(SceneObject(
            cls_id=cls_id, location=loc, dims=dims, yaw=yaw,
            bbox=clipped, full_bbox=full, center_proj=(u, v),
            truncation=trunc, occlusion=0))

    # occlusion flags from 2D overlap with strictly closer boxes
    for i, obj in enumerate(objects):
        covered = 0.0
        area = ((obj.bbox[2] - obj.bbox[0]) * (obj.bbox[3] - obj.bbox[1]))
        for other in objects:
            if other is obj or other.location[2] >= obj.location[2]:
                continue
            lx = max(obj.bbox[0], other.bbox[0])
            ly = max(obj.bbox[1], other.bbox[1])
            hx = min(obj.bbox[2], other.bbox[2])
            hy = min(obj.bbox[3], other.bbox[3])
            covered += max(0.0, hx - lx) * max(0.0, hy - ly)
        frac = covered / area if area > 0 else 0.0
        obj.occlusion = 2 if frac > 0.5 else (1 if frac > 0.15 else 0)

    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    image = np.empty((3, h, w))
    image[0] = 0.15 + 0.08 * np.sin(2.0 * np.pi * xs / w)
    image[1] = 0.15 + 0.08 * np.cos(2.0 * np.pi * ys / h)
    image[2] = 0.12 + 0.05 * np.sin(2.0 * np.pi * (xs + ys) / (w + h))
    image += rng.normal(0.0, config.noise, size=image.shape)

    depth = np.full((1, h, w), config.far_plane)
    palette = np.array([(0.9, 0.35, 0.1), (0.1, 0.6, 0.9), (0.4, 0.9, 0.3)])
    for obj in sorted(objects, key=lambda o: -o.location[2]):
        u, v = obj.center_proj
        su = max((obj.full_bbox[2] - obj.full_bbox[0]) / 4.0, 2.0)
        sv = max((obj.full_bbox[3] - obj.full_bbox[1]) / 4.0, 2.0)
        blob = np.exp(-((xs - u) ** 2 / (2 * su ** 2)
                        + (ys - v) ** 2 / (2 * sv ** 2)))
        color = palette[obj.cls_id % len(palette)]
        image += color[:, None, None] * blob[None]
        l, t, r, b = obj.bbox
        li, ti = int(np.floor(l)), int(np.floor(t))
        ri, bi = int(np.ceil(r)), int(np.ceil(b))
        region = depth[0, ti:bi, li:ri]
        np.minimum(region, obj.location[2], out=region)

    return Scene(image=image, depth=depth, objects=objects, calib=calib,
                 config=config)


def generate_dataset(config, count, seed, salt=0):
    rng = np.random.default_rng(np.random.SeedSequence([seed, salt, 0x5ce9e]))
    scenes = []
    while len(scenes) < count:
        scene = generate_scene(rng, config)
        if scene.objects:
            scenes.append(scene)
    return scenes


def write_scene_files(scene, frame_id, out_dir):
    """Materialize one scene as KITTI-style per-frame files plus DDMPT1
    rasters: image/, depth/, calib/, label/ under ``out_dir``."""
    for sub in ("image", "depth", "calib", "label"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
    name = f"{frame_id:06d}"
    save_tensor(os.path.join(out_dir, "image", name + ".ddt"),
                scene.image[None])
    save_tensor(os.path.join(out_dir, "depth", name + ".ddt"),
                scene.depth[None])
    write_calib(scene.calib, os.path.join(out_dir, "calib", name + ".txt"))
    write_labels(scene.labels(), os.path.join(out_dir, "label", name + ".txt"))


def dataset_statistics(scenes):
    """(w2d, h2d) sizes and (z, w3, h3, l3, yaw) priors over all objects,
    for anchor statistics and the center-depth prior."""
    sizes, priors = [], []
    for scene in scenes:
        for obj in scene.objects:
            l, t, r, b = obj.bbox
            sizes.append((r - l, b - t))
            h3, w3, l3 = obj.dims
            priors.append((obj.location[2], w3, h3, l3, obj.yaw))
    return np.array(sizes), np.array(priors)
