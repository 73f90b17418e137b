"""KITTI-convention text IO: object labels, calibration files and
prediction files, plus raster loading in the DDMPT1 tensor format.

Label lines carry 15 whitespace-separated fields for ground truth
(type, truncation, occlusion, alpha, 2D bbox, 3D dims h/w/l, location
x/y/z, rotation_y) and 16 for predictions (trailing score). ``DontCare``
rows keep their -1 sentinels and are never matched as ground truth.

Images and depth maps are consumed as DDMPT1 tensors rather than encoded
images (depth: one channel, meters); convert external rasters by dumping
float32/64 arrays through ``ddmp3d.autograd.save_tensor``.
"""

from dataclasses import dataclass

import numpy as np

from .autograd.tensorio import load_tensor, save_tensor  # noqa: F401
from .head import Calibration, backproject_center

DONTCARE = "DontCare"


@dataclass
class LabelRecord:
    type_name: str
    truncation: float
    occlusion: int
    alpha: float
    bbox: tuple          # (left, top, right, bottom)
    dims: tuple          # (h, w, l)
    location: tuple      # (x, y, z), bottom-face center, camera coords
    rotation_y: float
    score: float = None

    @property
    def is_dontcare(self):
        return self.type_name == DONTCARE

    @property
    def box_height(self):
        return self.bbox[3] - self.bbox[1]


def parse_labels(text):
    """Parse a KITTI label/prediction file; malformed lines raise with
    their line number, arbitrary garbage never escapes as another error
    class."""
    records = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        fields = line.split()
        if not fields:
            continue
        if len(fields) not in (15, 16):
            raise ValueError(
                f"line {lineno}: expected 15 or 16 fields, got {len(fields)}")
        try:
            values = [float(v) for v in fields[1:]]
        except ValueError:
            raise ValueError(f"line {lineno}: non-numeric field") from None
        records.append(LabelRecord(
            type_name=fields[0],
            truncation=values[0],
            occlusion=int(values[1]),
            alpha=values[2],
            bbox=tuple(values[3:7]),
            dims=tuple(values[7:10]),
            location=tuple(values[10:13]),
            rotation_y=values[13],
            score=values[14] if len(fields) == 16 else None))
    return records


def parse_labels_file(path):
    with open(path) as f:
        return parse_labels(f.read())


def format_label(rec):
    parts = [rec.type_name,
             f"{rec.truncation:.2f}", str(int(rec.occlusion)),
             f"{rec.alpha:.2f}"]
    parts += [f"{v:.2f}" for v in rec.bbox]
    parts += [f"{v:.2f}" for v in rec.dims]
    parts += [f"{v:.2f}" for v in rec.location]
    parts.append(f"{rec.rotation_y:.2f}")
    if rec.score is not None:
        parts.append(f"{rec.score:.4f}")
    return " ".join(parts)


def write_labels(records, path):
    with open(path, "w") as f:
        for rec in records:
            f.write(format_label(rec) + "\n")


def parse_calib(text):
    """Extract the P2 projection matrix (12 row-major numbers)."""
    for line in text.splitlines():
        if line.startswith("P2:"):
            fields = line.split()[1:]
            if len(fields) != 12:
                raise ValueError(
                    f"P2 line has {len(fields)} numbers, expected 12")
            try:
                values = [float(v) for v in fields]
            except ValueError:
                raise ValueError("P2 line has a non-numeric field") from None
            return Calibration(np.array(values).reshape(3, 4))
    raise ValueError("calibration text has no P2 line")


def parse_calib_file(path):
    with open(path) as f:
        return parse_calib(f.read())


def format_calib(calib):
    return "P2: " + " ".join(repr(float(v)) for v in calib.p2.reshape(-1)) + "\n"


def write_calib(calib, path):
    with open(path, "w") as f:
        f.write(format_calib(calib))


def write_predictions(detections, calib, path, class_names=None):
    """Emit one 16-field KITTI prediction line per detection.

    The file location is the bottom-face center recovered by
    back-projecting the predicted (u, v, z) through the calibration;
    alpha is yaw - atan2(x, z). Geometry keeps 2 decimals, scores 4.
    """
    lines = []
    for det in detections:
        u, v = det.center_proj
        z = det.center3d[2]
        x, y, _ = backproject_center(u, v, z, calib)
        h = det.dims[0]
        alpha = det.yaw - np.arctan2(x, z)
        rec = LabelRecord(
            type_name=(class_names[det.cls_id] if class_names
                       else f"Class{det.cls_id}"),
            truncation=0.0, occlusion=0, alpha=alpha,
            bbox=det.box2d, dims=det.dims,
            location=(x, y + h / 2.0, z),
            rotation_y=det.yaw, score=det.score)
        lines.append(format_label(rec))
    with open(path, "w") as f:
        for line in lines:
            f.write(line + "\n")
