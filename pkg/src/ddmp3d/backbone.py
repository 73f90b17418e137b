"""Small multi-stage feature extractor for the image and depth branches.

Reproduces the stage geometry of the full-scale network (strides 4, 8, 16
for stages I-III, then a dilated stride-1 stage IV) at configurable widths.
Stages are plain conv-norm-ReLU stacks, two convolutions each; the
"norm" is a per-channel learned scale + shift with no batch statistics,
which keeps runs deterministic at desk scale.
"""

import math
from dataclasses import dataclass

import numpy as np

from .autograd import Tensor, ops
from .ddmp import ConvParams


@dataclass
class BackboneConfig:
    """stage_channels: stem width followed by the four stage widths."""

    stage_channels: tuple = (8, 16, 32, 64, 64)
    input_hw: tuple = (64, 96)
    dilated_final: bool = True

    def __post_init__(self):
        self.stage_channels = tuple(self.stage_channels)
        if len(self.stage_channels) != 5:
            raise ValueError("stage_channels must list stem + 4 stage widths")
        if any(c < 1 for c in self.stage_channels):
            raise ValueError("stage widths must be positive")
        self.input_hw = tuple(self.input_hw)
        if any(s % 16 for s in self.input_hw):
            raise ValueError(f"input size {self.input_hw} not divisible by 16")


FULL_SCALE = dict(stage_channels=(64, 256, 512, 1024, 2048),
                  input_hw=(512, 1760))


@dataclass
class NormParams:
    gain: Tensor   # (C, 1, 1, 1), used as a grouped 1x1 conv weight
    bias: Tensor   # (C,)

    def named(self, prefix):
        yield f"{prefix}.gain", self.gain
        yield f"{prefix}.bias", self.bias


@dataclass
class StageParams:
    conv_a: ConvParams
    norm_a: NormParams
    conv_b: ConvParams
    norm_b: NormParams

    def named(self, prefix):
        yield from self.conv_a.named(f"{prefix}.conv_a")
        yield from self.norm_a.named(f"{prefix}.norm_a")
        yield from self.conv_b.named(f"{prefix}.conv_b")
        yield from self.norm_b.named(f"{prefix}.norm_b")


@dataclass
class BackboneParams:
    stem_conv: ConvParams
    stem_norm: NormParams
    stages: list

    def named(self, prefix="backbone"):
        yield from self.stem_conv.named(f"{prefix}.stem.conv")
        yield from self.stem_norm.named(f"{prefix}.stem.norm")
        for i, st in enumerate(self.stages, start=1):
            yield from st.named(f"{prefix}.stage{i}")


def _conv(rng, out_ch, in_ch, k=3):
    # He-style bound: keeps activation scale constant through conv+ReLU
    bound = math.sqrt(6.0 / (in_ch * k * k))
    w = rng.uniform(-bound, bound, size=(out_ch, in_ch, k, k))
    return ConvParams(Tensor(w, requires_grad=True),
                      Tensor(np.zeros(out_ch), requires_grad=True))


def _norm(out_ch):
    return NormParams(Tensor(np.ones((out_ch, 1, 1, 1)), requires_grad=True),
                      Tensor(np.zeros(out_ch), requires_grad=True))


def init_backbone_params(config, in_channels, rng):
    widths = config.stage_channels
    stem = _conv(rng, widths[0], in_channels)
    stages = []
    prev = widths[0]
    for w in widths[1:]:
        stages.append(StageParams(_conv(rng, w, prev), _norm(w),
                                  _conv(rng, w, w), _norm(w)))
        prev = w
    return BackboneParams(stem_conv=stem, stem_norm=_norm(widths[0]),
                          stages=stages)


def _norm_relu(t, norm):
    c = t.shape[1]
    scaled = ops.conv2d(t, norm.gain, norm.bias, groups=c)
    return ops.relu(scaled)


def run_stage(t, stage, stride, dilation=1):
    """conv(stride)+norm+relu then conv(1)+norm+relu; dilation applies to
    both convolutions (the dilated final stage keeps stride 1)."""
    t = ops.conv2d(t, stage.conv_a.weight, stage.conv_a.bias,
                   stride=stride, dilation=dilation)
    t = _norm_relu(t, stage.norm_a)
    t = ops.conv2d(t, stage.conv_b.weight, stage.conv_b.bias,
                   dilation=dilation)
    return _norm_relu(t, stage.norm_b)


def stage_strides(config):
    return {1: 4, 2: 8, 3: 16, 4: 16}


def stage_shapes(config):
    """Analytic (channels, h, w) per stage for a divisible input; lets
    shape-consistency checks run without touching full-scale tensors."""
    h, w = config.input_hw
    widths = config.stage_channels
    out = {}
    for i, s in stage_strides(config).items():
        out[i] = (widths[i], h // s, w // s)
    return out


def extract_stages(x, params, config):
    """Stages 1..4 of the input at strides 4/8/16/16; stage 4 runs with
    dilation 2 at stride 1 when ``dilated_final`` is set."""
    if x.shape[2] % 16 or x.shape[3] % 16:
        raise ValueError(f"input {x.shape[2]}x{x.shape[3]} not divisible by 16")
    t = ops.conv2d(x, params.stem_conv.weight, params.stem_conv.bias, stride=2)
    t = _norm_relu(t, params.stem_norm)
    out = {}
    out[1] = run_stage(t, params.stages[0], stride=2)
    out[2] = run_stage(out[1], params.stages[1], stride=2)
    out[3] = run_stage(out[2], params.stages[2], stride=2)
    if config.dilated_final:
        out[4] = run_stage(out[3], params.stages[3], stride=1, dilation=2)
    else:
        out[4] = run_stage(out[3], params.stages[3], stride=1)
    return out


def project_channels(stage_feat, conv):
    """1x1 projection of a stage feature to the block working width."""
    return ops.conv2d(stage_feat, conv.weight, conv.bias)


def init_projection(rng, in_ch, out_ch):
    # unit-gain linear init (no ReLU follows the projection)
    bound = math.sqrt(3.0 / in_ch)
    w = rng.uniform(-bound, bound, size=(out_ch, in_ch, 1, 1))
    return ConvParams(Tensor(w, requires_grad=True),
                      Tensor(np.zeros(out_ch), requires_grad=True))
