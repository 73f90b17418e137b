"""Anchor machinery, box codec, detection heads and NMS.

Anchors are 2D box templates (12 heights on a geometric ladder crossed
with 3 aspect ratios = 36 per cell) augmented with per-template 3D priors
(center depth, physical dims, yaw) taken from ground-truth statistics.
The regression head emits 11 offsets per anchor; decoding follows the
shared-anchor parameterization:

    [x,y]_2d = anchor + t * [w,h]_2d        [w,h]_2d = anchor * exp(t)
    [u,v]_p  = anchor_p + t_p * [w,h]_2d    [w,h,l]_3d = anchor * exp(t)
    [z,yaw]  = anchor + t

and encoding is its exact algebraic inverse.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor, ops
from .ddmp import ConvParams

# regression channel layout, fixed across head, losses and codec
TARGET_FIELDS = ("tx", "ty", "tw", "th", "txp", "typ",
                 "tz", "tw3", "th3", "tl3", "tyaw")
NUM_TARGETS = len(TARGET_FIELDS)


@dataclass
class Calibration:
    """Camera projection matrix, 3x4, KITTI camera-2 convention."""

    p2: np.ndarray

    def __post_init__(self):
        self.p2 = np.asarray(self.p2, dtype=np.float64)
        if self.p2.shape != (3, 4):
            raise ValueError(f"P2 must be 3x4, got {self.p2.shape}")
        if self.p2[0, 0] <= 0 or self.p2[1, 1] <= 0:
            raise ValueError("P2 focal lengths must be positive")


@dataclass
class Detection:
    """One decoded box: the unit passed between head, NMS, writer and eval.

    ``center3d`` is the geometric box center in camera coordinates; the
    KITTI file location (bottom-face center) is derived at write time.
    """

    cls_id: int
    score: float
    box2d: tuple          # (left, top, right, bottom) pixels
    center_proj: tuple    # (u, v) projected 3D center, pixels
    center3d: tuple       # (x, y, z) meters
    dims: tuple           # (h, w, l) meters
    yaw: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")
        if any(d <= 0 for d in self.dims):
            raise ValueError(f"dims {self.dims} must be positive")

    @property
    def alpha(self):
        x, _, z = self.center3d
        return self.yaw - math.atan2(x, z)


@dataclass
class AnchorConfig:
    base_height: float = 30.0
    height_ratio: float = 1.265
    num_heights: int = 12
    aspect_ratios: tuple = (0.5, 1.0, 1.5)
    stride: int = 16
    # per-template (z, w3, h3, l3, yaw) priors; filled from data statistics
    stats: np.ndarray = None

    @property
    def num_templates(self):
        return self.num_heights * len(self.aspect_ratios)


def template_sizes(config):
    """(w, h) of each 2D template; heights follow base * ratio**n."""
    heights = config.base_height * config.height_ratio ** np.arange(
        config.num_heights, dtype=np.float64)
    ws, hs = [], []
    for h in heights:
        for ar in config.aspect_ratios:
            ws.append(h * ar)
            hs.append(h)
    return np.array(ws), np.array(hs)


@dataclass
class AnchorGrid:
    """Dense anchor set for one feature map, cell-major then template."""

    x: np.ndarray
    y: np.ndarray
    w: np.ndarray
    h: np.ndarray
    z: np.ndarray
    w3: np.ndarray
    h3: np.ndarray
    l3: np.ndarray
    yaw: np.ndarray
    template_id: np.ndarray
    feature_hw: tuple
    stride: int

    def __len__(self):
        return self.x.size

    def corners(self):
        return np.stack([self.x - self.w / 2, self.y - self.h / 2,
                         self.x + self.w / 2, self.y + self.h / 2], axis=1)

    def select(self, idx):
        return AnchorGrid(self.x[idx], self.y[idx], self.w[idx], self.h[idx],
                          self.z[idx], self.w3[idx], self.h3[idx],
                          self.l3[idx], self.yaw[idx], self.template_id[idx],
                          self.feature_hw, self.stride)


def generate_anchors(feature_hw, stride, config):
    """Tile the 36 templates at every cell center of the head feature map.
    The projected-center prior shares the 2D center."""
    fh, fw = feature_hw
    tw, th = template_sizes(config)
    t = config.num_templates
    if config.stats is None:
        stats = np.zeros((t, 5))
        stats[:, 0] = 20.0
        stats[:, 1:4] = (1.6, 1.5, 3.9)
    else:
        stats = np.asarray(config.stats, dtype=np.float64)
        if stats.shape != (t, 5):
            raise ValueError(f"anchor stats shape {stats.shape} != ({t}, 5)")
    cy, cx = np.mgrid[0:fh, 0:fw]
    cx = ((cx + 0.5) * stride).reshape(-1)
    cy = ((cy + 0.5) * stride).reshape(-1)
    n_cells = cx.size
    rep = np.repeat
    tile = np.tile
    return AnchorGrid(
        x=rep(cx, t), y=rep(cy, t),
        w=tile(tw, n_cells), h=tile(th, n_cells),
        z=tile(stats[:, 0], n_cells),
        w3=tile(stats[:, 1], n_cells),
        h3=tile(stats[:, 2], n_cells),
        l3=tile(stats[:, 3], n_cells),
        yaw=tile(stats[:, 4], n_cells),
        template_id=tile(np.arange(t), n_cells),
        feature_hw=(fh, fw), stride=stride)


def iou_corners(a, b):
    """Pairwise axis-aligned IoU between corner boxes (M,4) x (G,4)."""
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    lx = np.maximum(a[:, None, 0], b[None, :, 0])
    ly = np.maximum(a[:, None, 1], b[None, :, 1])
    hx = np.minimum(a[:, None, 2], b[None, :, 2])
    hy = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(hx - lx, 0, None) * np.clip(hy - ly, 0, None)
    area_a = np.clip(a[:, 2] - a[:, 0], 0, None) * np.clip(a[:, 3] - a[:, 1], 0, None)
    area_b = np.clip(b[:, 2] - b[:, 0], 0, None) * np.clip(b[:, 3] - b[:, 1], 0, None)
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


@dataclass
class AnchorAssignment:
    positive: np.ndarray     # bool mask
    ignored: np.ndarray      # bool mask (overlaps DontCare, dropped from loss)
    gt_index: np.ndarray     # argmax GT per anchor (ties -> lower index)
    max_iou: np.ndarray


def match_anchors(anchors, gt_boxes, iou_threshold=0.5, dontcare_boxes=None):
    """Anchor is positive iff its best IoU with a projected GT box reaches
    the threshold (inclusive); it is assigned to the argmax GT. Negatives
    overlapping a DontCare region at the threshold are marked ignored."""
    m = len(anchors)
    if gt_boxes is None or len(gt_boxes) == 0:
        pos = np.zeros(m, dtype=bool)
        ign = np.zeros(m, dtype=bool)
        return AnchorAssignment(pos, ign, np.zeros(m, dtype=np.int64),
                                np.zeros(m))
    corners = anchors.corners()
    iou = iou_corners(corners, np.asarray(gt_boxes, dtype=np.float64))
    gt_index = iou.argmax(axis=1)
    max_iou = iou[np.arange(m), gt_index]
    positive = max_iou >= iou_threshold
    ignored = np.zeros(m, dtype=bool)
    if dontcare_boxes is not None and len(dontcare_boxes):
        dc = iou_corners(corners, np.asarray(dontcare_boxes, dtype=np.float64))
        ignored = (~positive) & (dc.max(axis=1) >= iou_threshold)
    return AnchorAssignment(positive, ignored, gt_index, max_iou)


@dataclass
class GtBoxes:
    """Per-object regression ground truth, projected-box parameterization."""

    cx: np.ndarray
    cy: np.ndarray
    w: np.ndarray
    h: np.ndarray
    u: np.ndarray
    v: np.ndarray
    z: np.ndarray
    w3: np.ndarray
    h3: np.ndarray
    l3: np.ndarray
    yaw: np.ndarray


def encode_targets(anchors, gt):
    """Exact inverse of ``decode_boxes`` for matched anchor/GT rows."""
    if np.any(gt.w <= 0) or np.any(gt.h <= 0) or np.any(gt.w3 <= 0) \
            or np.any(gt.h3 <= 0) or np.any(gt.l3 <= 0):
        raise ValueError("encode_targets: GT sizes must be positive")
    t = np.empty((len(anchors), NUM_TARGETS))
    t[:, 0] = (gt.cx - anchors.x) / anchors.w
    t[:, 1] = (gt.cy - anchors.y) / anchors.h
    t[:, 2] = np.log(gt.w / anchors.w)
    t[:, 3] = np.log(gt.h / anchors.h)
    t[:, 4] = (gt.u - anchors.x) / anchors.w
    t[:, 5] = (gt.v - anchors.y) / anchors.h
    t[:, 6] = gt.z - anchors.z
    t[:, 7] = np.log(gt.w3 / anchors.w3)
    t[:, 8] = np.log(gt.h3 / anchors.h3)
    t[:, 9] = np.log(gt.l3 / anchors.l3)
    t[:, 10] = gt.yaw - anchors.yaw
    return t


def decode_boxes(anchors, t):
    t = np.asarray(t, dtype=np.float64)
    return GtBoxes(
        cx=anchors.x + t[:, 0] * anchors.w,
        cy=anchors.y + t[:, 1] * anchors.h,
        w=anchors.w * np.exp(t[:, 2]),
        h=anchors.h * np.exp(t[:, 3]),
        u=anchors.x + t[:, 4] * anchors.w,
        v=anchors.y + t[:, 5] * anchors.h,
        z=anchors.z + t[:, 6],
        w3=anchors.w3 * np.exp(t[:, 7]),
        h3=anchors.h3 * np.exp(t[:, 8]),
        l3=anchors.l3 * np.exp(t[:, 9]),
        yaw=anchors.yaw + t[:, 10])


def project_center(center3d, calib):
    """Homogeneous pinhole projection of a camera-space point to pixels."""
    x, y, z = center3d
    if z <= 0:
        raise ValueError(f"project_center: point behind camera (z={z})")
    p = calib.p2 @ np.array([x, y, z, 1.0])
    return p[0] / p[2], p[1] / p[2]


def backproject_center(u, v, z, calib):
    """Invert the projection at known depth. Assumes the conventional
    P2 layout [f 0 cx t0; 0 f cy t1; 0 0 1 t2]."""
    p = calib.p2
    wph = z + p[2, 3]
    x = (u * wph - p[0, 2] * z - p[0, 3]) / p[0, 0]
    y = (v * wph - p[1, 2] * z - p[1, 3]) / p[1, 1]
    return x, y, z


@dataclass
class HeadParams:
    tower: ConvParams
    cls: ConvParams
    reg: ConvParams

    def named(self, prefix="head"):
        yield from self.tower.named(f"{prefix}.tower")
        yield from self.cls.named(f"{prefix}.cls")
        yield from self.reg.named(f"{prefix}.reg")


def init_head_params(rng, in_channels, tower_channels, num_anchors,
                     num_classes):
    """Regression head starts at zero so decoded boxes equal the anchors."""
    bound = math.sqrt(6.0 / (in_channels * 9))
    tower = ConvParams(
        Tensor(rng.uniform(-bound, bound,
                           size=(tower_channels, in_channels, 3, 3)),
               requires_grad=True),
        Tensor(np.zeros(tower_channels), requires_grad=True))
    cb = 1.0 / math.sqrt(tower_channels)
    cls = ConvParams(
        Tensor(rng.uniform(-cb, cb,
                           size=(num_anchors * (num_classes + 1),
                                 tower_channels, 1, 1)) * 0.1,
               requires_grad=True),
        Tensor(np.zeros(num_anchors * (num_classes + 1)), requires_grad=True))
    reg = ConvParams(
        Tensor(np.zeros((num_anchors * NUM_TARGETS, tower_channels, 1, 1)),
               requires_grad=True),
        Tensor(np.zeros(num_anchors * NUM_TARGETS), requires_grad=True))
    return HeadParams(tower=tower, cls=cls, reg=reg)


@dataclass
class HeadOutput:
    cls_map: Tensor   # (N, A*(nc+1), H, W)
    reg_map: Tensor   # (N, A*11, H, W)
    cls_rows: Tensor  # (N*H*W*A, nc+1), row order matches the anchor grid
    reg_rows: Tensor  # (N*H*W*A, 11)


def _to_rows(tensor_map, num_anchors, width):
    n, _, h, w = tensor_map.shape
    t = ops.reshape(tensor_map, (n, num_anchors, width, h, w))
    t = ops.transpose(t, (0, 3, 4, 1, 2))
    return ops.reshape(t, (n * h * w * num_anchors, width))


def head_forward(feature, params, num_anchors, num_classes):
    """Shared 3x3 tower, then 1x1 class and regression heads. Row tensors
    are ordered cell-major then template, matching ``generate_anchors``."""
    t = ops.relu(ops.conv2d(feature, params.tower.weight, params.tower.bias))
    cls_map = ops.conv2d(t, params.cls.weight, params.cls.bias)
    reg_map = ops.conv2d(t, params.reg.weight, params.reg.bias)
    return HeadOutput(
        cls_map=cls_map, reg_map=reg_map,
        cls_rows=_to_rows(cls_map, num_anchors, num_classes + 1),
        reg_rows=_to_rows(reg_map, num_anchors, NUM_TARGETS))


@dataclass
class CdeParams:
    tower: ConvParams
    out: ConvParams

    def named(self, prefix="cde"):
        yield from self.tower.named(f"{prefix}.tower")
        yield from self.out.named(f"{prefix}.out")


def init_cde_params(rng, in_channels, tower_channels):
    bound = math.sqrt(6.0 / (in_channels * 9))
    tower = ConvParams(
        Tensor(rng.uniform(-bound, bound,
                           size=(tower_channels, in_channels, 3, 3)),
               requires_grad=True),
        Tensor(np.zeros(tower_channels), requires_grad=True))
    out = ConvParams(Tensor(np.zeros((3, tower_channels, 1, 1)),
                            requires_grad=True),
                     Tensor(np.zeros(3), requires_grad=True))
    return CdeParams(tower=tower, out=out)


def cde_head_forward(depth_feature, params):
    """Anchor-free center head on the depth branch: per cell, offsets of
    the projected 3D center from the cell center (in strides) and the
    center depth residual. Supervision touches only cells that contain a
    ground-truth projected center."""
    t = ops.relu(ops.conv2d(depth_feature, params.tower.weight,
                            params.tower.bias))
    return ops.conv2d(t, params.out.weight, params.out.bias)


def nms_2d(boxes, scores, iou_threshold=0.4):
    """Greedy descending-score suppression; kept boxes have pairwise IoU
    at or below the threshold. Ties keep the lower original index."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    order = np.lexsort((np.arange(scores.size), -scores))
    alive = np.ones(scores.size, dtype=bool)
    kept = []
    for idx in order:
        if not alive[idx]:
            continue
        kept.append(int(idx))
        rest = alive.nonzero()[0]
        ious = iou_corners(boxes[idx:idx + 1], boxes[rest])[0]
        alive[rest[ious > iou_threshold]] = False
        alive[idx] = False
    return kept


def nms_detections(detections, iou_threshold=0.4):
    """Class-wise NMS over Detection objects, preserving score order."""
    out = []
    for cls_id in sorted({d.cls_id for d in detections}):
        group = [d for d in detections if d.cls_id == cls_id]
        boxes = np.array([d.box2d for d in group])
        scores = np.array([d.score for d in group])
        out.extend(group[i] for i in nms_2d(boxes, scores, iou_threshold))
    out.sort(key=lambda d: -d.score)
    return out


def anchor_statistics(gt_sizes, gt_priors, config):
    """Mean 3D statistics per template over matched ground truth.

    Each GT is matched to the template with the best co-centered size IoU;
    templates that never match fall back to the global mean."""
    tw, th = template_sizes(config)
    t = config.num_templates
    stats = np.zeros((t, 5))
    counts = np.zeros(t)
    gt_sizes = np.asarray(gt_sizes, dtype=np.float64).reshape(-1, 2)
    gt_priors = np.asarray(gt_priors, dtype=np.float64).reshape(-1, 5)
    for (w, h), prior in zip(gt_sizes, gt_priors):
        inter = np.minimum(w, tw) * np.minimum(h, th)
        union = w * h + tw * th - inter
        best = int(np.argmax(inter / union))
        stats[best] += prior
        counts[best] += 1
    matched = counts > 0
    if matched.any():
        global_mean = stats[matched].sum(axis=0) / counts.sum()
        stats[matched] /= counts[matched, None]
        stats[~matched] = global_mean
    else:
        stats[:, 0] = 20.0
        stats[:, 1:4] = (1.6, 1.5, 3.9)
    return stats


def write_anchor_stats(path, stats):
    with open(path, "w") as f:
        for i, row in enumerate(np.asarray(stats)):
            f.write(f"{i} " + " ".join(f"{v:.6f}" for v in row) + "\n")


def read_anchor_stats(path):
    rows = {}
    with open(path) as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            rows[int(parts[0])] = [float(v) for v in parts[1:6]]
    if not rows:
        raise ValueError(f"{path}: empty anchor statistics file")
    t = max(rows) + 1
    stats = np.zeros((t, 5))
    for i, row in rows.items():
        stats[i] = row
    return stats
