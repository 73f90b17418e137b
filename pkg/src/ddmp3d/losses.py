"""Training objectives: cross-entropy classification, smooth-L1 box
regression, the auxiliary center-depth loss, and the score-balanced total

    L = mean_i (1 - s_i)^gamma * (alpha * l_det_i + beta * L_dep)

where s_i is the predicted probability of sample i's assigned class. The
auxiliary term sits inside the focal parentheses as a shared scalar, so
depth supervision is modulated by the detection scores.
"""

from dataclasses import dataclass

import numpy as np

from .autograd import Tensor, ops

CDE_MODES = ("z", "xy", "xyz")


@dataclass
class LossConfig:
    gamma: float = 0.5
    det_weight: float = 1.0
    aux_weight: float = 1.0
    positive_iou: float = 0.5
    cde_mode: str = "xyz"

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.det_weight < 0 or self.aux_weight < 0:
            raise ValueError("loss weights must be >= 0")
        if self.cde_mode not in CDE_MODES:
            raise ValueError(f"cde_mode must be one of {CDE_MODES}")


def _zero():
    return Tensor(np.array(0.0))


def smooth_l1(pred, target, reduction="mean"):
    """0.5 d^2 below unit error, |d| - 0.5 beyond, averaged over the
    supervised elements; an empty supervision set contributes 0."""
    if isinstance(target, Tensor):
        target = target.data
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"smooth_l1: shapes differ {pred.shape} vs {target.shape}")
    if pred.size == 0:
        return _zero()
    h = ops.huber(ops.sub(pred, Tensor(target)))
    if reduction == "mean":
        return ops.mean(h)
    if reduction == "rows":
        return ops.mean(h, axis=1)
    if reduction == "none":
        return h
    raise ValueError(f"unknown reduction {reduction!r}")


def cross_entropy_rows(logits, assigned):
    """Per-row cross-entropy against integer class labels."""
    assigned = np.asarray(assigned, dtype=np.int64)
    return ops.scale(ops.gather_per_row(ops.log_softmax(logits, axis=1),
                                        assigned), -1.0)


def classification_loss(logits, assigned):
    """Mean cross-entropy over the sampled anchors (positives with their
    matched class, negatives as background)."""
    if logits.shape[0] == 0:
        return _zero()
    return ops.mean(cross_entropy_rows(logits, assigned))


@dataclass
class DetectionLoss:
    l_cls: Tensor
    l_2d: Tensor
    l_3d: Tensor
    total: Tensor        # l_cls + l_2d + l_3d
    per_sample: Tensor   # (M,) per-anchor loss, regression only on positives
    scores: Tensor       # (M,) probability of the assigned class


def detection_loss(cls_logits, assigned, reg_pred, reg_target, positive_rows):
    """Detection branch loss: classification plus 2D, projected-center and
    3D smooth-L1 regression on positive anchors.

    cls_logits: (M, num_classes+1) rows for all sampled anchors.
    assigned:   (M,) class index per row (background for negatives).
    reg_pred:   (P, 11) regression rows of the positive anchors.
    reg_target: (P, 11) encoded targets.
    positive_rows: indices of the positives within the M sampled rows.
    """
    m = cls_logits.shape[0]
    ce_rows = cross_entropy_rows(cls_logits, assigned)
    scores = ops.gather_per_row(ops.softmax(cls_logits, axis=1), assigned)
    l_cls = ops.mean(ce_rows) if m else _zero()

    p = reg_pred.shape[0]
    if p:
        h = ops.huber(ops.sub(reg_pred, Tensor(np.asarray(reg_target))))
        rows_2d = ops.mean(ops.narrow(h, 1, 0, 4), axis=1)
        rows_proj = ops.mean(ops.narrow(h, 1, 4, 2), axis=1)
        rows_3d = ops.mean(ops.narrow(h, 1, 6, 5), axis=1)
        l_2d = ops.mean(rows_2d)
        l_3d = ops.add(ops.mean(rows_proj), ops.mean(rows_3d))
        reg_rows = ops.add(ops.add(rows_2d, rows_proj), rows_3d)
        per_sample = ops.add(ce_rows,
                             ops.scatter_rows(reg_rows, positive_rows, m))
    else:
        l_2d = _zero()
        l_3d = _zero()
        per_sample = ce_rows
    total = ops.add(ops.add(l_cls, l_2d), l_3d)
    return DetectionLoss(l_cls=l_cls, l_2d=l_2d, l_3d=l_3d, total=total,
                         per_sample=per_sample, scores=scores)


def cde_rows(cde_map, cell_index):
    """Flatten a (N, 3, H, W) center-head map to (N*H*W, 3) rows and pick
    the supervised cells."""
    n, c, h, w = cde_map.shape
    rows = ops.reshape(ops.transpose(cde_map, (0, 2, 3, 1)), (n * h * w, c))
    return ops.gather_rows(rows, np.asarray(cell_index, dtype=np.int64))


def auxiliary_depth_loss(cde_pred, targets, mode="xyz"):
    """Center regression loss of the depth branch at positive cells.

    cde_pred: (P, 3) rows (u-offset, v-offset, depth residual).
    targets:  (P, 3) matching ground truth.
    mode:     which channels supervise ('z', 'xy', or their sum 'xyz').
    """
    if mode not in CDE_MODES:
        raise ValueError(f"unknown cde mode {mode!r}")
    targets = np.asarray(targets, dtype=np.float64).reshape(-1, 3)
    if cde_pred.shape[0] == 0:
        return _zero()
    terms = []
    if mode in ("xy", "xyz"):
        terms.append(smooth_l1(ops.narrow(cde_pred, 1, 0, 2), targets[:, 0:2]))
    if mode in ("z", "xyz"):
        terms.append(smooth_l1(ops.narrow(cde_pred, 1, 2, 1), targets[:, 2:3]))
    out = terms[0]
    for t in terms[1:]:
        out = ops.add(out, t)
    return out


def total_loss(det_per_sample, dep_loss, scores, config):
    """Score-balanced joint objective; see the module docstring. ``scores``
    must already be probabilities in [0, 1]."""
    if np.any(scores.data < 0.0) or np.any(scores.data > 1.0):
        raise ValueError("classification scores outside [0, 1]")
    if det_per_sample.shape != scores.shape:
        raise ValueError("per-sample losses and scores must align")
    w = ops.power(ops.sub(Tensor(np.ones(scores.shape)), scores), config.gamma)
    inner = ops.add(ops.scale(det_per_sample, config.det_weight),
                    ops.scale(dep_loss, config.aux_weight))
    return ops.mean(ops.mul(w, inner))
