"""KITTI-protocol evaluation: difficulty tiers, 2D / bird's-eye-view / 3D
IoU (rotated boxes via convex polygon clipping), and average precision at
11 or 40 recall positions.

Matching semantics: detections are taken in descending score order; each
one may claim the best-overlapping unmatched valid ground truth of its
class if the IoU reaches the class threshold. Ground truths outside the
current difficulty tier (and DontCare regions) are "ignored": they are
not counted as recallable and detections overlapping them are dropped
without a false-positive penalty.
"""

import enum
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .kitti import parse_calib_file, parse_labels_file

MIN_HEIGHT = (40.0, 25.0, 25.0)
MAX_OCCLUSION = (0, 1, 2)
MAX_TRUNCATION = (0.15, 0.30, 0.50)

R11_POINTS = np.linspace(0.0, 1.0, 11)
R40_POINTS = np.arange(1, 41) / 40.0


class Difficulty(enum.IntEnum):
    EASY = 0
    MODERATE = 1
    HARD = 2
    IGNORED = 3


TIER_ORDER = (Difficulty.MODERATE, Difficulty.EASY, Difficulty.HARD)


@dataclass
class EvalConfig:
    iou_thresholds: dict = field(default_factory=lambda: {
        "Car": 0.7, "Pedestrian": 0.5, "Cyclist": 0.5})
    recall_mode: str = "R40"

    def __post_init__(self):
        if self.recall_mode not in ("R11", "R40"):
            raise ValueError(f"recall_mode must be R11 or R40")
        for cls, thr in self.iou_thresholds.items():
            if not 0.0 < thr <= 1.0:
                raise ValueError(f"IoU threshold for {cls} outside (0, 1]")


def qualifies(record, tier):
    return (record.box_height >= MIN_HEIGHT[tier]
            and record.occlusion <= MAX_OCCLUSION[tier]
            and record.truncation <= MAX_TRUNCATION[tier])


def assign_difficulty(record):
    """Easiest tier the object qualifies for; tiers are cumulative, so a
    Moderate evaluation also admits Easy objects."""
    if record.is_dontcare:
        return Difficulty.IGNORED
    for tier in (Difficulty.EASY, Difficulty.MODERATE, Difficulty.HARD):
        if qualifies(record, tier):
            return tier
    return Difficulty.IGNORED


def iou_2d(a, b):
    """Axis-aligned rectangle IoU over (left, top, right, bottom)."""
    lx, ly = max(a[0], b[0]), max(a[1], b[1])
    hx, hy = min(a[2], b[2]), min(a[3], b[3])
    inter = max(0.0, hx - lx) * max(0.0, hy - ly)
    area_a = max(0.0, a[2] - a[0]) * max(0.0, a[3] - a[1])
    area_b = max(0.0, b[2] - b[0]) * max(0.0, b[3] - b[1])
    union = area_a + area_b - inter
    return inter / union if union > 0 else 0.0


def bev_corners(x, z, w, l, yaw):
    """Ground-plane footprint corners (counter-clockwise in the x-z plane);
    the box length runs along local x, width along local z, rotated by yaw
    about the vertical axis."""
    c, s = math.cos(yaw), math.sin(yaw)
    local = ((l / 2, w / 2), (-l / 2, w / 2), (-l / 2, -w / 2), (l / 2, -w / 2))
    return [(x + c * dx + s * dz, z - s * dx + c * dz) for dx, dz in local]


def clip_polygon(subject, clip):
    """Sutherland-Hodgman clip of a polygon against a convex CCW polygon."""
    def inside(p, a, b):
        return ((b[0] - a[0]) * (p[1] - a[1])
                - (b[1] - a[1]) * (p[0] - a[0])) >= 0.0

    def intersect(p, q, a, b):
        dx1, dy1 = q[0] - p[0], q[1] - p[1]
        dx2, dy2 = b[0] - a[0], b[1] - a[1]
        denom = dx1 * dy2 - dy1 * dx2
        t = ((a[0] - p[0]) * dy2 - (a[1] - p[1]) * dx2) / denom
        return (p[0] + t * dx1, p[1] + t * dy1)

    output = list(subject)
    n = len(clip)
    for i in range(n):
        a, b = clip[i], clip[(i + 1) % n]
        inputs, output = output, []
        if not inputs:
            break
        prev = inputs[-1]
        for cur in inputs:
            if inside(cur, a, b):
                if not inside(prev, a, b):
                    output.append(intersect(prev, cur, a, b))
                output.append(cur)
            elif inside(prev, a, b):
                output.append(intersect(prev, cur, a, b))
            prev = cur
    return output


def polygon_area(points):
    """Shoelace area (absolute)."""
    n = len(points)
    if n < 3:
        return 0.0
    acc = 0.0
    for i in range(n):
        x0, y0 = points[i]
        x1, y1 = points[(i + 1) % n]
        acc += x0 * y1 - x1 * y0
    return abs(acc) / 2.0


def _bev_tuple(rec):
    x, _, z = rec.location
    h, w, l = rec.dims
    return (x, z, w, l, rec.rotation_y)


def iou_bev(a, b):
    """Rotated-rectangle IoU of two (x, z, w, l, yaw) footprints."""
    xa, za, wa, la, ya = a
    xb, zb, wb, lb, yb = b
    if wa <= 0 or la <= 0 or wb <= 0 or lb <= 0:
        return 0.0
    ca = bev_corners(xa, za, wa, la, ya)
    cb = bev_corners(xb, zb, wb, lb, yb)
    inter = polygon_area(clip_polygon(ca, cb))
    union = wa * la + wb * lb - inter
    return inter / union if union > 0 else 0.0


def iou_3d(a, b):
    """Volume IoU of two upright boxes (x, y, z, h, w, l, yaw) with y at
    the bottom face (y-down): intersection is the footprint overlap times
    the vertical extent overlap."""
    xa, ya, za, ha, wa, la, ra = a
    xb, yb, zb, hb, wb, lb, rb = b
    if min(ha, wa, la, hb, wb, lb) <= 0:
        return 0.0
    inter_bev = polygon_area(clip_polygon(bev_corners(xa, za, wa, la, ra),
                                          bev_corners(xb, zb, wb, lb, rb)))
    y_overlap = max(0.0, min(ya, yb) - max(ya - ha, yb - hb))
    inter = inter_bev * y_overlap
    union = ha * wa * la + hb * wb * lb - inter
    return inter / union if union > 0 else 0.0


def _iou_3d_records(d, g):
    return iou_3d(tuple(d.location) + tuple(d.dims) + (d.rotation_y,),
                  tuple(g.location) + tuple(g.dims) + (g.rotation_y,))


METRIC_FNS = {
    "2d": lambda d, g: iou_2d(d.bbox, g.bbox),
    "bev": lambda d, g: iou_bev(_bev_tuple(d), _bev_tuple(g)),
    "3d": lambda d, g: _iou_3d_records(d, g),
}


@dataclass
class ApResult:
    ap: float
    recalls: np.ndarray
    precisions: np.ndarray
    num_gt: int
    no_gt: bool = False


def _interp_ap(recalls, precisions, points):
    ap = 0.0
    for r in points:
        mask = recalls >= r - 1e-12
        ap += precisions[mask].max() if mask.any() else 0.0
    return ap / len(points)


def compute_ap(detections, gts, iou_fn, iou_threshold, recall_mode="R40"):
    """Greedy score-descending matching and interpolated AP.

    detections: list of (frame_id, score, record).
    gts: frame_id -> list of (record, is_ignored); ignored entries absorb
         overlapping detections without counting toward recall.
    """
    num_gt = sum(1 for frame in gts.values() for _, ign in frame if not ign)
    if num_gt == 0:
        return ApResult(0.0, np.zeros(0), np.zeros(0), 0, no_gt=True)
    order = sorted(range(len(detections)),
                   key=lambda i: (-detections[i][1], i))
    matched = {f: [False] * len(v) for f, v in gts.items()}
    tps, fps = [], []
    tp = fp = 0
    for i in order:
        frame, _, det = detections[i]
        cands = gts.get(frame, [])
        best_iou, best_j = 0.0, -1
        best_ign = 0.0
        for j, (gt, ignored) in enumerate(cands):
            iou = iou_fn(det, gt)
            if ignored:
                best_ign = max(best_ign, iou)
            elif not matched[frame][j] and iou > best_iou:
                best_iou, best_j = iou, j
        if best_j >= 0 and best_iou >= iou_threshold:
            matched[frame][best_j] = True
            tp += 1
        elif best_ign >= iou_threshold:
            continue  # overlaps an ignored GT: no penalty
        else:
            fp += 1
        tps.append(tp)
        fps.append(fp)
    tps = np.array(tps, dtype=np.float64)
    fps = np.array(fps, dtype=np.float64)
    recalls = tps / num_gt
    precisions = tps / np.maximum(tps + fps, 1.0)
    points = R11_POINTS if recall_mode == "R11" else R40_POINTS
    return ApResult(_interp_ap(recalls, precisions, points),
                    recalls, precisions, num_gt)


@dataclass
class EvalReport:
    rows: list            # (class, tier name, metric, mode, ApResult)
    warnings: list
    mode: str

    def machine_rows(self):
        return [f"{c},{t},{m},{self.mode},{r.ap:.6f}"
                for c, t, m, _, r in self.rows]

    def table(self):
        lines = []
        classes = sorted({c for c, *_ in self.rows})
        for cls in classes:
            lines.append(f"{cls}  (AP, {self.mode})")
            lines.append(f"  {'metric':<6} {'Mod.':>9} {'Easy':>9} {'Hard':>9}")
            for metric in ("2d", "bev", "3d"):
                vals = {t: r.ap for c, t, m, _, r in self.rows
                        if c == cls and m == metric}
                lines.append("  {:<6} {:>9.4f} {:>9.4f} {:>9.4f}".format(
                    metric, vals.get("moderate", 0.0), vals.get("easy", 0.0),
                    vals.get("hard", 0.0)))
        for w in self.warnings:
            lines.append(f"warning: {w}")
        return "\n".join(lines)


def _frame_ids(directory):
    return sorted(os.path.splitext(f)[0] for f in os.listdir(directory)
                  if f.endswith(".txt"))


def evaluate(pred_dir, gt_dir, calib_dir=None, config=None):
    """Evaluate a prediction directory against ground truth.

    The frame universe is the set of ground-truth files; a missing
    prediction file is an empty detection set, while prediction files
    without ground truth are listed as warnings and skipped.
    """
    config = config or EvalConfig()
    warnings = []
    gt_frames = _frame_ids(gt_dir)
    if not gt_frames:
        raise ValueError(f"{gt_dir}: no ground-truth label files")
    pred_frames = set(_frame_ids(pred_dir)) if os.path.isdir(pred_dir) else set()
    for extra in sorted(pred_frames - set(gt_frames)):
        warnings.append(f"prediction frame {extra} has no ground truth; skipped")

    gt_all, det_all = {}, {}
    for frame in gt_frames:
        gt_all[frame] = parse_labels_file(os.path.join(gt_dir, f"{frame}.txt"))
        pred_path = os.path.join(pred_dir, f"{frame}.txt")
        det_all[frame] = (parse_labels_file(pred_path)
                          if os.path.exists(pred_path) else [])
        if calib_dir is not None:
            calib_path = os.path.join(calib_dir, f"{frame}.txt")
            if os.path.exists(calib_path):
                parse_calib_file(calib_path)
            else:
                warnings.append(f"frame {frame} has no calibration file")

    rows = []
    for cls, thr in sorted(config.iou_thresholds.items()):
        dets = [(frame, rec.score if rec.score is not None else 0.0, rec)
                for frame in gt_frames
                for rec in det_all[frame] if rec.type_name == cls]
        for tier in TIER_ORDER:
            gts = {}
            for frame in gt_frames:
                entries = []
                for rec in gt_all[frame]:
                    if rec.is_dontcare:
                        entries.append((rec, True))
                    elif rec.type_name == cls:
                        entries.append((rec, not qualifies(rec, tier)))
                gts[frame] = entries
            for metric, fn in METRIC_FNS.items():
                rows.append((cls, tier.name.lower(), metric, config.recall_mode,
                             compute_ap(dets, gts, fn, thr,
                                        config.recall_mode)))
    return EvalReport(rows=rows, warnings=warnings, mode=config.recall_mode)
