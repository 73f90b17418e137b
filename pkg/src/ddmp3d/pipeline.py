"""Model assembly: two-branch backbone, fusion blocks at stages II and
III, detection head on stage IV, optional center-depth head on the depth
branch, plus checkpoint save/load.

Every parameter group draws from its own name-seeded RNG stream, so two
configurations that share a component initialize it identically; this is
what makes the one-hot-balance multi-scale run bitwise-reproduce the
single-scale run.
"""

import os
import zlib
from dataclasses import dataclass, fields

import numpy as np

from .autograd import Tensor, ops
from .autograd.tensorio import load_tensor, save_tensor
from . import backbone as bb
from .ddmp import (GraphConfig, baseline_fuse, align_depth_features,
                   ddmp_forward, init_ddmp_params)
from .head import (AnchorConfig, HeadOutput, cde_head_forward,
                   generate_anchors, head_forward, init_cde_params,
                   init_head_params, read_anchor_stats, write_anchor_stats)

FUSION_ARMS = ("none", "baseline", "ddmp")


@dataclass
class ModelConfig:
    image_hw: tuple = (64, 96)
    stage_channels: tuple = (8, 16, 32, 64, 64)
    fusion: str = "ddmp"
    ddmp_single_scale: bool = False
    sample_count: int = 9
    filter_groups: int = 1
    iterations: int = 1
    affinity_mode: str = "raw"
    fusion_mode: str = "concat_conv"
    filter_deformable: bool = False
    beta_one_hot_self: bool = False
    beta_learnable: bool = True
    use_cde: bool = True
    num_classes: int = 1
    class_names: tuple = ("Car",)
    tower_channels: int = 32
    score_threshold: float = 0.1
    nms_iou: float = 0.4
    cde_depth_prior: float = 16.0

    def __post_init__(self):
        self.image_hw = tuple(self.image_hw)
        self.stage_channels = tuple(self.stage_channels)
        self.class_names = tuple(self.class_names)
        if self.fusion not in FUSION_ARMS:
            raise ValueError(f"fusion must be one of {FUSION_ARMS}")
        for s in (2, 3):
            if self.stage_channels[s] % 2:
                raise ValueError("stage II/III widths must be even (the "
                                 "propagation block works at half width)")

    def backbone_config(self):
        return bb.BackboneConfig(stage_channels=self.stage_channels,
                                 input_hw=self.image_hw)

    def block_channels(self, stage):
        return self.stage_channels[stage] // 2

    def block_depth_stages(self, stage):
        return (stage,) if self.ddmp_single_scale else (2, 3, 4)

    def graph_config(self, stage):
        return GraphConfig(
            channels=self.block_channels(stage),
            sample_count=self.sample_count,
            filter_groups=self.filter_groups,
            iterations=self.iterations,
            depth_stages=self.block_depth_stages(stage),
            affinity_mode=self.affinity_mode,
            fusion_mode=self.fusion_mode,
            filter_deformable=self.filter_deformable,
            concat_input=True)

    def head_feature_hw(self):
        return (self.image_hw[0] // 16, self.image_hw[1] // 16)


@dataclass
class ModelParams:
    bb_img: object
    bb_dep: object
    proj_img: dict     # stage -> ConvParams
    proj_dep: dict     # (block stage, depth stage) -> ConvParams
    blocks: dict       # stage -> DdmpParams
    head: object
    cde: object        # CdeParams or None

    def named(self):
        yield from self.bb_img.named("bb_img")
        yield from self.bb_dep.named("bb_dep")
        for s in sorted(self.proj_img):
            yield from self.proj_img[s].named(f"proj_img{s}")
        for key in sorted(self.proj_dep):
            b, l = key
            yield from self.proj_dep[key].named(f"proj_dep{b}_{l}")
        for s in sorted(self.blocks):
            yield from self.blocks[s].named(f"ddmp{s}")
        yield from self.head.named("head")
        if self.cde is not None:
            yield from self.cde.named("cde")

    def tensors(self):
        return dict(self.named())


def component_rng(seed, name):
    return np.random.default_rng(
        np.random.SeedSequence([seed, zlib.crc32(name.encode())]))


def init_model_params(config, seed):
    crng = lambda name: component_rng(seed, name)
    bcfg = config.backbone_config()
    bb_img = bb.init_backbone_params(bcfg, 3, crng("bb_img"))
    bb_dep = bb.init_backbone_params(bcfg, 1, crng("bb_dep"))
    proj_img, proj_dep, blocks = {}, {}, {}
    if config.fusion == "ddmp":
        for s in (2, 3):
            c = config.block_channels(s)
            proj_img[s] = bb.init_projection(crng(f"proj_img{s}"),
                                             config.stage_channels[s], c)
            gc = config.graph_config(s)
            for l in gc.depth_stages:
                proj_dep[(s, l)] = bb.init_projection(
                    crng(f"proj_dep{s}_{l}"), config.stage_channels[l], c)
            blocks[s] = init_ddmp_params(gc, crng(f"ddmp{s}"))
            if config.fusion_mode == "weighted_sum" and config.beta_one_hot_self:
                for l in gc.depth_stages:
                    blocks[s].beta[l] = Tensor(
                        np.array(1.0 if l == s else 0.0),
                        requires_grad=config.beta_learnable)
            elif config.fusion_mode == "weighted_sum":
                for l in gc.depth_stages:
                    blocks[s].beta[l].requires_grad = config.beta_learnable
    head_in = config.stage_channels[4]
    head = init_head_params(crng("head"), head_in, config.tower_channels,
                            num_anchors=36, num_classes=config.num_classes)
    cde = None
    if config.use_cde:
        cde = init_cde_params(crng("cde"), config.stage_channels[4],
                              config.tower_channels)
    return ModelParams(bb_img=bb_img, bb_dep=bb_dep, proj_img=proj_img,
                       proj_dep=proj_dep, blocks=blocks, head=head, cde=cde)


def _fuse_stage(stage, img_feat, dep_stages, params, config):
    if config.fusion == "none":
        return img_feat
    if config.fusion == "baseline":
        aligned = align_depth_features(dep_stages[stage],
                                       (img_feat.shape[2], img_feat.shape[3]))
        return baseline_fuse(img_feat, aligned)
    gc = config.graph_config(stage)
    h = bb.project_channels(img_feat, params.proj_img[stage])
    dfeats = {l: bb.project_channels(dep_stages[l], params.proj_dep[(stage, l)])
              for l in gc.depth_stages}
    return ddmp_forward(h, dfeats, params.blocks[stage], gc)


@dataclass
class ForwardOutput:
    head: HeadOutput
    cde_map: object      # Tensor or None
    image_stage4: Tensor
    depth_stage4: Tensor


# input normalization constants (rasters stay in raw units on disk: image
# in [0, ~1], depth in meters; depth is centered on the dataset depth prior
# so object-range variation spans the unit scale)
IMAGE_SHIFT = 0.4
DEPTH_SCALE = 2.0


def forward_model(params, config, image, depth, with_cde=True):
    """Full pipeline forward. Stage II and III features are refined by the
    configured fusion arm and feed the subsequent stages, so the refined
    representation reaches the stage-IV head."""
    bcfg = config.backbone_config()
    image = ops.add(image, Tensor(np.array(-IMAGE_SHIFT)))
    depth = ops.scale(ops.add(depth, Tensor(np.array(-config.cde_depth_prior))),
                      1.0 / DEPTH_SCALE)
    dep_stages = bb.extract_stages(depth, params.bb_dep, bcfg)

    t = ops.conv2d(image, params.bb_img.stem_conv.weight,
                   params.bb_img.stem_conv.bias, stride=2)
    t = bb._norm_relu(t, params.bb_img.stem_norm)
    s1 = bb.run_stage(t, params.bb_img.stages[0], stride=2)
    s2 = bb.run_stage(s1, params.bb_img.stages[1], stride=2)
    r2 = _fuse_stage(2, s2, dep_stages, params, config)
    s3 = bb.run_stage(r2, params.bb_img.stages[2], stride=2)
    r3 = _fuse_stage(3, s3, dep_stages, params, config)
    s4 = bb.run_stage(r3, params.bb_img.stages[3], stride=1,
                      dilation=2 if bcfg.dilated_final else 1)

    head_out = head_forward(s4, params.head, num_anchors=36,
                            num_classes=config.num_classes)
    cde_map = None
    if with_cde and params.cde is not None:
        cde_map = cde_head_forward(dep_stages[4], params.cde)
    return ForwardOutput(head=head_out, cde_map=cde_map,
                         image_stage4=s4, depth_stage4=dep_stages[4])


def pipeline_shape_plan(config):
    """Analytic shape walk of the pipeline, usable at any scale without
    allocating tensors. Raises if any stage wiring is inconsistent."""
    bcfg = config.backbone_config()
    shapes = bb.stage_shapes(bcfg)
    plan = {f"img_stage{i}": shapes[i] for i in shapes}
    plan.update({f"dep_stage{i}": shapes[i] for i in shapes})
    for s in (2, 3):
        c, h, w = shapes[s]
        if config.fusion == "ddmp":
            cb = config.block_channels(s)
            refined = (2 * cb, h, w)
        else:
            refined = (c, h, w)
        if refined[0] != c:
            raise ValueError(f"stage {s} refinement width {refined[0]} does "
                             f"not match the stage width {c}")
        plan[f"refined_stage{s}"] = refined
    fh, fw = config.head_feature_hw()
    if (shapes[4][1], shapes[4][2]) != (fh, fw):
        raise ValueError("head feature size does not match stage IV")
    plan["head_cls"] = (36 * (config.num_classes + 1), fh, fw)
    plan["head_reg"] = (36 * 11, fh, fw)
    if config.use_cde:
        plan["cde"] = (3, fh, fw)
    return plan


# ---------------------------------------------------------------------------
# checkpoint format: a directory of DDMPT1 tensors plus a text manifest

_TUPLE_FIELDS = {"image_hw", "stage_channels", "class_names"}
_BOOL_FIELDS = {"ddmp_single_scale", "filter_deformable", "beta_one_hot_self",
                "beta_learnable", "use_cde"}


def config_to_items(config):
    items = {}
    for f in fields(config):
        v = getattr(config, f.name)
        if f.name in _TUPLE_FIELDS:
            items[f.name] = ",".join(str(x) for x in v)
        elif f.name in _BOOL_FIELDS:
            items[f.name] = "true" if v else "false"
        else:
            items[f.name] = str(v)
    return items


def config_from_items(items):
    kwargs = {}
    for f in fields(ModelConfig):
        if f.name not in items:
            continue
        raw = items[f.name]
        if f.name in _TUPLE_FIELDS:
            parts = raw.split(",") if raw else ()
            kwargs[f.name] = tuple(
                p if f.name == "class_names" else int(p) for p in parts)
        elif f.name in _BOOL_FIELDS:
            kwargs[f.name] = raw.lower() in ("1", "true", "yes")
        elif f.name in ("sample_count", "filter_groups", "iterations",
                        "num_classes", "tower_channels"):
            kwargs[f.name] = int(raw)
        elif f.name in ("score_threshold", "nms_iou", "cde_depth_prior"):
            kwargs[f.name] = float(raw)
        else:
            kwargs[f.name] = raw
    return ModelConfig(**kwargs)


def _as_4d(arr):
    a = np.asarray(arr)
    if a.ndim > 4:
        raise ValueError(f"cannot store {a.ndim}-d tensor in a DDMPT1 file")
    return a.reshape((1,) * (4 - a.ndim) + a.shape)


def save_checkpoint(directory, params, config, anchor_stats=None):
    os.makedirs(directory, exist_ok=True)
    named = params.tensors() if isinstance(params, ModelParams) else dict(params)
    lines = []
    for i, (name, tensor) in enumerate(sorted(named.items())):
        fname = f"p{i:04d}.ddt"
        save_tensor(os.path.join(directory, fname), _as_4d(tensor.data))
        shape_txt = ",".join(str(s) for s in tensor.shape) or "scalar"
        lines.append(f"param {name} {fname} {shape_txt}")
    for key, val in config_to_items(config).items():
        lines.append(f"config {key} {val}")
    if anchor_stats is not None:
        write_anchor_stats(os.path.join(directory, "anchor_stats.txt"),
                           anchor_stats)
        lines.append("config anchor_stats anchor_stats.txt")
    with open(os.path.join(directory, "manifest.txt"), "w") as f:
        f.write("\n".join(lines) + "\n")


def load_checkpoint(directory):
    """Rebuild (config, params, anchor config) from a checkpoint directory.
    Center-head tensors may be absent (inference checkpoints)."""
    manifest = os.path.join(directory, "manifest.txt")
    param_lines, config_items = [], {}
    with open(manifest) as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "param":
                param_lines.append(parts[1:])
            elif parts[0] == "config":
                config_items[parts[1]] = parts[2] if len(parts) > 2 else ""
    config = config_from_items(config_items)
    loaded = {}
    for name, fname, shape_txt in param_lines:
        arr = load_tensor(os.path.join(directory, fname))
        shape = (() if shape_txt == "scalar"
                 else tuple(int(s) for s in shape_txt.split(",")))
        loaded[name] = arr.reshape(shape)
    has_cde = any(n.startswith("cde.") for n in loaded)
    config.use_cde = config.use_cde and has_cde
    params = init_model_params(config, seed=0)
    if not has_cde:
        params.cde = None
    missing, structure = [], params.tensors()
    for name, tensor in structure.items():
        if name not in loaded:
            missing.append(name)
            continue
        if loaded[name].shape != tensor.shape:
            raise ValueError(f"checkpoint tensor {name} has shape "
                             f"{loaded[name].shape}, expected {tensor.shape}")
        tensor.data = loaded[name].astype(tensor.dtype)
    if missing:
        raise ValueError(f"checkpoint is missing tensors: {missing[:5]}")
    anchor = AnchorConfig()
    if "anchor_stats" in config_items:
        anchor.stats = read_anchor_stats(
            os.path.join(directory, config_items["anchor_stats"]))
    return config, params, anchor


def make_anchors(config, anchor_config):
    return generate_anchors(config.head_feature_hw(), 16, anchor_config)
