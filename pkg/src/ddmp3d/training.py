"""Toy training on synthetic scenes: target assembly, SGD with momentum,
the optimization loop, and inference back to KITTI prediction files."""

from dataclasses import dataclass

import numpy as np

from .autograd import Tape, Tensor, backward, ops
from .head import (Detection, GtBoxes, anchor_statistics, backproject_center,
                   decode_boxes, encode_targets, match_anchors,
                   nms_detections)
from .losses import (auxiliary_depth_loss, cde_rows, detection_loss,
                     total_loss)
from .pipeline import forward_model


@dataclass
class SceneTargets:
    sample_idx: np.ndarray      # non-ignored anchor rows entering the loss
    assigned: np.ndarray        # class per sampled row (background = last)
    pos_global: np.ndarray      # positive rows in the full anchor grid
    pos_in_sample: np.ndarray   # positions of positives within sample_idx
    reg_targets: np.ndarray     # (P, 11)
    cde_cells: np.ndarray       # flat cell indices into the head grid
    cde_targets: np.ndarray     # (Pc, 3)
    num_objects: int


def _scene_gt(scene):
    objs = scene.objects
    boxes = np.array([o.bbox for o in objs], dtype=np.float64)
    gt = GtBoxes(
        cx=(boxes[:, 0] + boxes[:, 2]) / 2.0,
        cy=(boxes[:, 1] + boxes[:, 3]) / 2.0,
        w=boxes[:, 2] - boxes[:, 0],
        h=boxes[:, 3] - boxes[:, 1],
        u=np.array([o.center_proj[0] for o in objs]),
        v=np.array([o.center_proj[1] for o in objs]),
        z=np.array([o.location[2] for o in objs]),
        w3=np.array([o.dims[1] for o in objs]),
        h3=np.array([o.dims[0] for o in objs]),
        l3=np.array([o.dims[2] for o in objs]),
        yaw=np.array([o.yaw for o in objs]))
    classes = np.array([o.cls_id for o in objs], dtype=np.int64)
    return boxes, gt, classes


def build_targets(scene, anchors, model_config, positive_iou=0.5):
    """Precompute the per-scene supervision: anchor assignment, encoded
    regression targets and center-head cells (anchors are static, so this
    is independent of the predictions)."""
    fh, fw = model_config.head_feature_hw()
    stride = 16
    boxes, gt, classes = _scene_gt(scene)
    assign = match_anchors(anchors, boxes, iou_threshold=positive_iou)
    sample_idx = np.nonzero(~assign.ignored)[0]
    pos_global = np.nonzero(assign.positive)[0]
    background = model_config.num_classes
    assigned = np.full(sample_idx.size, background, dtype=np.int64)
    pos_in_sample = np.searchsorted(sample_idx, pos_global)
    assigned[pos_in_sample] = classes[assign.gt_index[pos_global]]

    sel = anchors.select(pos_global)
    gsel = assign.gt_index[pos_global]
    gt_sel = GtBoxes(**{f: getattr(gt, f)[gsel] for f in
                        ("cx", "cy", "w", "h", "u", "v", "z",
                         "w3", "h3", "l3", "yaw")})
    reg_targets = (encode_targets(sel, gt_sel) if pos_global.size
                   else np.zeros((0, 11)))

    cells, ctargets = {}, {}
    order = np.argsort(gt.z)  # nearer objects win contested cells
    for i in order[::-1]:
        u, v, z = gt.u[i], gt.v[i], gt.z[i]
        cc = int(np.clip(u // stride, 0, fw - 1))
        cr = int(np.clip(v // stride, 0, fh - 1))
        flat = cr * fw + cc
        cells[flat] = flat
        ctargets[flat] = ((u - (cc + 0.5) * stride) / stride,
                          (v - (cr + 0.5) * stride) / stride,
                          z - model_config.cde_depth_prior)
    cde_cells = np.array(sorted(cells), dtype=np.int64)
    cde_targets = (np.array([ctargets[c] for c in sorted(cells)])
                   if cells else np.zeros((0, 3)))
    return SceneTargets(sample_idx=sample_idx, assigned=assigned,
                        pos_global=pos_global, pos_in_sample=pos_in_sample,
                        reg_targets=reg_targets, cde_cells=cde_cells,
                        cde_targets=cde_targets, num_objects=len(scene.objects))


def anchor_stats_from_scenes(scenes, anchor_config):
    from .synth import dataset_statistics
    sizes, priors = dataset_statistics(scenes)
    stats = anchor_statistics(sizes, priors, anchor_config)
    z_mean = float(priors[:, 0].mean()) if len(priors) else 20.0
    return stats, z_mean


class SGD:
    """Plain gradient descent with momentum over a named parameter dict."""

    def __init__(self, named_params, lr, momentum=0.9):
        self.params = dict(named_params)
        self.lr = lr
        self.momentum = momentum
        self.velocity = {k: np.zeros_like(p.data)
                         for k, p in self.params.items()}

    def step(self):
        for name, p in self.params.items():
            if p.grad is None:
                continue
            v = self.velocity[name]
            v *= self.momentum
            v += p.grad
            p.data = p.data - self.lr * v

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration, message):
        super().__init__(f"training diverged at iteration {iteration}: {message}")
        self.iteration = iteration


def scene_loss(params, model_config, loss_config, scene, targets):
    """Forward one scene and assemble the joint objective. Returns the
    loss breakdown as tape tensors."""
    image = Tensor(scene.image[None])
    depth = Tensor(scene.depth[None])
    out = forward_model(params, model_config, image, depth,
                        with_cde=model_config.use_cde)
    cls_sel = ops.gather_rows(out.head.cls_rows, targets.sample_idx)
    reg_sel = ops.gather_rows(out.head.reg_rows, targets.pos_global)
    det = detection_loss(cls_sel, targets.assigned, reg_sel,
                         targets.reg_targets, targets.pos_in_sample)
    if model_config.use_cde and targets.cde_cells.size:
        pred = cde_rows(out.cde_map, targets.cde_cells)
        dep = auxiliary_depth_loss(pred, targets.cde_targets,
                                   loss_config.cde_mode)
    else:
        dep = Tensor(np.array(0.0))
    total = total_loss(det.per_sample, dep, det.scores, loss_config)
    return det, dep, total


def train(params, model_config, loss_config, scenes, targets, iters, lr,
          momentum=0.9, batch_size=4, log=None):
    """Round-robin mini-batch SGD: each iteration averages the objective
    over ``batch_size`` consecutive scenes. Emits one history row per
    iteration: (iter, L_cls, L_2d, L_3d, L_dep, total)."""
    opt = SGD(params.tensors(), lr=lr, momentum=momentum)
    batch_size = min(batch_size, len(scenes))
    history = []
    cursor = 0
    for it in range(1, iters + 1):
        try:
            with Tape() as tape:
                terms = []
                for _ in range(batch_size):
                    terms.append(scene_loss(params, model_config, loss_config,
                                            scenes[cursor], targets[cursor]))
                    cursor = (cursor + 1) % len(scenes)
                total = terms[0][2]
                for _, _, t in terms[1:]:
                    total = ops.add(total, t)
                total = ops.scale(total, 1.0 / batch_size)
            value = float(total.data)
            if not np.isfinite(value):
                raise ValueError("non-finite loss")
            backward(tape, total)
        except ValueError as e:
            raise TrainingDiverged(it, str(e)) from e
        opt.step()
        opt.zero_grad()
        comps = [np.mean([float(getattr(d, f).data) for d, _, _ in terms])
                 for f in ("l_cls", "l_2d", "l_3d")]
        dep_mean = np.mean([float(d2.data) for _, d2, _ in terms])
        history.append((it, comps[0], comps[1], comps[2], float(dep_mean),
                        value))
        if log is not None and (it == 1 or it % 50 == 0):
            log(f"iter {it:4d}  total {value:.4f}")
    return history


def history_csv(history):
    lines = ["iter,L_cls,L_2d,L_3d,L_dep,total"]
    for row in history:
        it, *vals = row
        lines.append(str(it) + "," + ",".join(repr(v) for v in vals))
    return "\n".join(lines) + "\n"


def run_inference(params, model_config, anchors, image, depth, calib,
                  max_detections=50):
    """Forward without the auxiliary head, decode, threshold, class-wise
    NMS, and back-project centers to camera space."""
    out = forward_model(params, model_config, Tensor(image[None]),
                        Tensor(depth[None]), with_cde=False)
    probs = np.exp(out.head.cls_rows.data
                   - out.head.cls_rows.data.max(axis=1, keepdims=True))
    probs /= probs.sum(axis=1, keepdims=True)
    fg = probs[:, :model_config.num_classes]
    scores = fg.max(axis=1)
    cls_ids = fg.argmax(axis=1)
    keep = np.nonzero(scores >= model_config.score_threshold)[0]
    if keep.size == 0:
        return []
    decoded = decode_boxes(anchors.select(keep), out.head.reg_rows.data[keep])
    h_img, w_img = model_config.image_hw
    detections = []
    for i, row in enumerate(keep):
        z = decoded.z[i]
        if z <= 0.5:
            continue
        left = max(decoded.cx[i] - decoded.w[i] / 2.0, 0.0)
        top = max(decoded.cy[i] - decoded.h[i] / 2.0, 0.0)
        right = min(decoded.cx[i] + decoded.w[i] / 2.0, float(w_img))
        bottom = min(decoded.cy[i] + decoded.h[i] / 2.0, float(h_img))
        if right - left < 1.0 or bottom - top < 1.0:
            continue
        u, v = decoded.u[i], decoded.v[i]
        detections.append(Detection(
            cls_id=int(cls_ids[row]), score=float(scores[row]),
            box2d=(left, top, right, bottom),
            center_proj=(u, v),
            center3d=backproject_center(u, v, z, calib),
            dims=(decoded.h3[i], decoded.w3[i], decoded.l3[i]),
            yaw=float(decoded.yaw[i])))
    detections = nms_detections(detections, model_config.nms_iou)
    return detections[:max_detections]
