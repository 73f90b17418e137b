"""Depth-conditioned dynamic message propagation.

The operator treats a feature map as a graph with one node per pixel. For
every receiver node it predicts a 2-d walk for each of the K regular field
positions, bilinearly samples the walked image nodes, derives per-slot
affinities (via a deformable convolution over the depth features, walked
with their own predicted offsets) and per-slot filter scalars from each
configured depth stage, aggregates the sampled nodes with those weights,
fuses the per-stage messages, and applies a scaled residual update.

Canonical wiring: affinity deformable + filter plain, message fusion by
channel-concat followed by a 3x3 convolution, one propagation iteration.
The weighted-sum fusion mode (per-stage scalar balance weights) is kept as
a configuration for the scale-reduction identity, and a flag switches the
filter generator to the deformable variant.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor
from .autograd import ops


@dataclass
class GraphConfig:
    """Shape and mode knobs of one propagation block.

    channels: working width C of the block (inputs must be projected to it).
    sample_count: K sampled nodes per receiver, an odd square (3x3 field).
    filter_groups: G groups partitioning channels; one filter scalar per
        (slot, group).
    iterations: number of full message-passing rounds.
    depth_stages: which depth-backbone stages feed this block.
    """

    channels: int = 256
    sample_count: int = 9
    filter_groups: int = 1
    iterations: int = 1
    depth_stages: tuple = (2, 3, 4)
    affinity_mode: str = "raw"          # raw | softmax
    fusion_mode: str = "concat_conv"    # concat_conv | weighted_sum
    filter_deformable: bool = False
    concat_input: bool = True           # block output = concat(input, updated)

    def __post_init__(self):
        side = math.isqrt(self.sample_count)
        if side * side != self.sample_count or side % 2 == 0:
            raise ValueError(f"sample_count {self.sample_count} is not an odd square")
        if self.channels % self.filter_groups:
            raise ValueError(f"filter_groups {self.filter_groups} does not "
                             f"divide channels {self.channels}")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.affinity_mode not in ("raw", "softmax"):
            raise ValueError(f"unknown affinity_mode {self.affinity_mode!r}")
        if self.fusion_mode not in ("concat_conv", "weighted_sum"):
            raise ValueError(f"unknown fusion_mode {self.fusion_mode!r}")
        self.depth_stages = tuple(self.depth_stages)

    @property
    def field_side(self):
        return math.isqrt(self.sample_count)


@dataclass
class ConvParams:
    weight: Tensor
    bias: Tensor = None

    def named(self, prefix):
        yield f"{prefix}.weight", self.weight
        if self.bias is not None:
            yield f"{prefix}.bias", self.bias


@dataclass
class DdmpParams:
    """Learnable state of one block: image/depth walk kernels, per-stage
    affinity and filter generators, the fusion kernel or balance weights,
    and the residual message scale."""

    walk_img: ConvParams
    walk_dep: dict
    affinity: dict
    filters: dict
    alpha: Tensor
    fusion: ConvParams = None
    beta: dict = field(default_factory=dict)

    def named(self, prefix="ddmp"):
        yield from self.walk_img.named(f"{prefix}.walk_img")
        for l in sorted(self.walk_dep):
            yield from self.walk_dep[l].named(f"{prefix}.walk_dep{l}")
        for l in sorted(self.affinity):
            yield from self.affinity[l].named(f"{prefix}.affinity{l}")
        for l in sorted(self.filters):
            yield from self.filters[l].named(f"{prefix}.filter{l}")
        if self.fusion is not None:
            yield from self.fusion.named(f"{prefix}.fusion")
        for l in sorted(self.beta):
            yield f"{prefix}.beta{l}", self.beta[l]
        yield f"{prefix}.alpha", self.alpha


def field_offsets(sample_count):
    """Regular dilation-1 field offsets (dy, dx), row-major, centered."""
    side = math.isqrt(sample_count)
    half = side // 2
    return [(j // side - half, j % side - half) for j in range(sample_count)]


def _conv_init(rng, out_ch, in_ch, k, weight_scale=None, bias_value=0.0):
    fan_in = in_ch * k * k
    if weight_scale is None:
        w = np.zeros((out_ch, in_ch, k, k))
    else:
        bound = weight_scale / math.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(out_ch, in_ch, k, k))
    b = np.full(out_ch, bias_value, dtype=np.float64)
    return ConvParams(Tensor(w, requires_grad=True), Tensor(b, requires_grad=True))


def init_ddmp_params(config, rng, alpha_init=0.25):
    """Identity-at-start initialization with live gradients.

    Walk kernels and affinity generators (kernels and biases, raw mode)
    start at zero, so the message is exactly zero and the residual update
    is a passthrough at step 0. The message scale starts nonzero: with
    both the scale and the affinities at zero the product form blocks its
    own gradients (d scale ~ message = 0, d affinity ~ scale = 0) and the
    block never wakes up. In softmax mode affinities cannot be zero (they
    normalize to 1/K), so there the scale starts at zero instead and the
    passthrough comes from the scale alone.
    """
    c = config.channels
    k = config.sample_count
    side = config.field_side
    walk_img = _conv_init(rng, 2 * k, c, 3)
    walk_dep, affinity, filters, beta = {}, {}, {}, {}
    for l in config.depth_stages:
        walk_dep[l] = _conv_init(rng, 2 * k, c, 3)
        affinity[l] = _conv_init(rng, k, c, side)
        filters[l] = _conv_init(rng, k * config.filter_groups, c, side,
                                weight_scale=1.0, bias_value=1.0)
    fusion = None
    if config.fusion_mode == "concat_conv":
        fusion = _conv_init(rng, c, c * len(config.depth_stages), 3,
                            weight_scale=1.0)
    else:
        for l in config.depth_stages:
            beta[l] = Tensor(np.array(1.0 / len(config.depth_stages)),
                             requires_grad=True)
    if config.affinity_mode == "softmax":
        alpha_init = 0.0
    alpha = Tensor(np.array(alpha_init), requires_grad=True)
    return DdmpParams(walk_img=walk_img, walk_dep=walk_dep, affinity=affinity,
                      filters=filters, alpha=alpha, fusion=fusion, beta=beta)


def randomized_params(config, rng, walk_band=(0.2, 0.45)):
    """Randomized parameters for gradient probing: every kernel is active
    and the walk biases shift all sampling coordinates into a fractional
    band away from the bilinear lattice (and its kinks)."""
    c = config.channels
    k = config.sample_count
    side = config.field_side

    def walks():
        p = _conv_init(rng, 2 * k, c, 3, weight_scale=0.02)
        p.bias = Tensor(rng.uniform(*walk_band, size=2 * k), requires_grad=True)
        return p

    walk_dep, affinity, filters, beta = {}, {}, {}, {}
    for l in config.depth_stages:
        walk_dep[l] = walks()
        affinity[l] = _conv_init(rng, k, c, side, weight_scale=0.5,
                                 bias_value=1.0 / k)
        filters[l] = _conv_init(rng, k * config.filter_groups, c, side,
                                weight_scale=0.5, bias_value=1.0)
        beta[l] = Tensor(np.array(rng.uniform(0.3, 0.9)), requires_grad=True)
    fusion = _conv_init(rng, c, c * len(config.depth_stages), 3, weight_scale=0.5)
    if config.fusion_mode != "concat_conv":
        fusion = None
    else:
        beta = {}
    return DdmpParams(walk_img=walks(), walk_dep=walk_dep, affinity=affinity,
                      filters=filters,
                      alpha=Tensor(np.array(0.7), requires_grad=True),
                      fusion=fusion, beta=beta)


def predict_walks(latent, conv):
    """Per-position (dy, dx) offsets for each sample slot, relative to the
    regular dilation-1 field centered at the position. Channel layout:
    2j = dy of slot j, 2j+1 = dx of slot j, slots row-major."""
    out = ops.conv2d(latent, conv.weight, conv.bias)
    if out.shape[1] % 2:
        raise ValueError("walk kernel must emit 2 channels per sample slot")
    return out


def _base_grid(n, h, w, dy, dx, dtype):
    ys = np.arange(h, dtype=dtype) + dy
    xs = np.arange(w, dtype=dtype) + dx
    grid = np.empty((n, 2, h, w), dtype=dtype)
    grid[:, 0] = ys[:, None]
    grid[:, 1] = xs[None, :]
    return grid


def sample_nodes(feature, walks):
    """Bilinearly sample the K walked nodes for every receiver.

    Returns (N, C, K, H, W). With zero walks this reproduces the plain
    im2col unfold of the regular field at interior positions (borders
    follow the clamp rule rather than zero padding).
    """
    n, c, h, w = feature.shape
    k2 = walks.shape[1]
    if walks.shape[0] != n or walks.shape[2:] != (h, w):
        raise ValueError(f"walks {walks.shape} do not match feature {feature.shape}")
    offsets = field_offsets(k2 // 2)
    slots = []
    for j, (dy, dx) in enumerate(offsets):
        off = ops.narrow(walks, 1, 2 * j, 2)
        base = Tensor(_base_grid(n, h, w, dy, dx, feature.data.dtype))
        coords = ops.add(off, base)
        node = ops.bilinear_sample(feature, coords)
        slots.append(ops.reshape(node, (n, c, 1, h, w)))
    return ops.concat(slots, axis=2)


def deformable_conv(sampled, conv):
    """Contraction of sampled node slots against an s x s kernel: exactly a
    deformable convolution once the slots came from walked coordinates."""
    n, c, k, h, w = sampled.shape
    out_ch, in_ch, kh, kw = conv.weight.shape
    if in_ch != c or kh * kw != k:
        raise ValueError(f"kernel {conv.weight.shape} does not contract "
                         f"{c} channels x {k} slots")
    flat = ops.reshape(sampled, (n, c * k, h, w))
    w2 = ops.reshape(conv.weight, (out_ch, c * k, 1, 1))
    return ops.conv2d(flat, w2, conv.bias)


def generate_affinity_filters(depth_feat, depth_walks, affinity_conv,
                              filter_conv, config):
    """Per-stage affinity matrix (deformable conv over walked depth nodes)
    and filter scalars (plain conv, or deformable when configured)."""
    sampled = sample_nodes(depth_feat, depth_walks)
    aff = deformable_conv(sampled, affinity_conv)
    if config.affinity_mode == "softmax":
        aff = ops.softmax(aff, axis=1)
    if config.filter_deformable:
        filt = deformable_conv(sampled, filter_conv)
    else:
        filt = ops.conv2d(depth_feat, filter_conv.weight, filter_conv.bias)
    return aff, filt


def propagate_message(sampled, affinities, filters, params, config):
    """Per-stage affinity- and filter-weighted aggregation of the sampled
    image nodes, fused across stages by the configured mode."""
    n, c, k, h, w = sampled.shape
    messages = []
    for l in config.depth_stages:
        if l not in affinities or l not in filters:
            raise ValueError(f"missing affinity/filters for depth stage {l}")
        filt = ops.reshape(filters[l], (n, k, config.filter_groups, h, w))
        messages.append(ops.aggregate_nodes(sampled, affinities[l], filt))
    if config.fusion_mode == "weighted_sum":
        total = ops.mul(messages[0], params.beta[config.depth_stages[0]])
        for l, m in zip(config.depth_stages[1:], messages[1:]):
            total = ops.add(total, ops.mul(m, params.beta[l]))
        return total
    fused = ops.concat(messages, axis=1)
    return ops.conv2d(fused, params.fusion.weight, params.fusion.bias)


def update_nodes(h, message, alpha):
    """Residual update h' = relu(h + alpha * message)."""
    if h.shape != message.shape:
        raise ValueError(f"update_nodes: shapes differ {h.shape} vs {message.shape}")
    return ops.relu(ops.add(h, ops.mul(message, alpha)))


def align_depth_features(depth_feat, target_hw):
    """Align a depth stage to the block's grid: integer-factor downscale by
    stride maxpool, anything else by corner-aligned bilinear resize."""
    th, tw = target_hw
    if th < 1 or tw < 1:
        raise ValueError(f"align target {target_hw} must be positive")
    h, w = depth_feat.shape[2], depth_feat.shape[3]
    if (h, w) == (th, tw):
        return depth_feat
    if h >= th and w >= tw and h % th == 0 and w % tw == 0:
        fh, fw = h // th, w // tw
        return ops.maxpool2d(depth_feat, (fh, fw), (fh, fw))
    return ops.resize(depth_feat, (th, tw), mode="bilinear")


def ddmp_forward(image_feat, depth_feats, params, config):
    """Full block: align depth stages, derive per-stage affinities/filters,
    walk and sample the image nodes, aggregate, fuse, residual-update.

    Inputs must already be projected to ``config.channels``. The output is
    concat(input, updated) at 2C channels unless ``concat_input`` is off.
    """
    n, c, h, w = image_feat.shape
    if c != config.channels:
        raise ValueError(f"image feature has {c} channels, config says "
                         f"{config.channels}")
    affinities, filters = {}, {}
    for l in config.depth_stages:
        if l not in depth_feats:
            raise ValueError(f"missing depth stage {l}")
        aligned = align_depth_features(depth_feats[l], (h, w))
        dwalks = predict_walks(aligned, params.walk_dep[l])
        affinities[l], filters[l] = generate_affinity_filters(
            aligned, dwalks, params.affinity[l], params.filters[l], config)
    hidden = image_feat
    for _ in range(config.iterations):
        walks = predict_walks(hidden, params.walk_img)
        sampled = sample_nodes(hidden, walks)
        message = propagate_message(sampled, affinities, filters, params, config)
        hidden = update_nodes(hidden, message, params.alpha)
    if config.concat_input:
        return ops.concat([image_feat, hidden], axis=1)
    return hidden


def baseline_fuse(image_feat, depth_feat):
    """Non-propagating fusion arm: plain elementwise product of image and
    depth features."""
    if image_feat.shape != depth_feat.shape:
        raise ValueError(f"baseline_fuse: shapes differ {image_feat.shape} "
                         f"vs {depth_feat.shape}")
    return ops.mul(image_feat, depth_feat)
