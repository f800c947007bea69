"""Multiply-accumulate accounting for static and dynamic bottleneck blocks.

Counts are exact integers for static blocks and expected (real-valued)
multiply-accumulates once activation rates enter.  The convention is
1 MAC = 1 FLOP; callers that want the multiply+add convention can double
the reported numbers (see ``NetworkFlopsReport.scaled``).  Bias, batch-norm,
and activation costs are excluded throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

from .core import (
    ActivationProfile,
    BlockSpec,
    ConvLayerSpec,
    DynamicConfig,
    Paradigm,
    TensorShape,
    validate_config,
)
from .errors import ShapeMismatch


@dataclass(frozen=True)
class FlopsBreakdown:
    """Per-operator MACs of one block; ``total`` is the sum of all parts."""

    conv1: float
    conv2: float
    conv3: float
    masker: float = 0.0
    se: float = 0.0
    downsample: float = 0.0

    @property
    def total(self) -> float:
        return self.conv1 + self.conv2 + self.conv3 + self.masker + self.se + self.downsample

    @property
    def conv_total(self) -> float:
        """The three trunk convolutions only (the speedup-formula numerator)."""
        return self.conv1 + self.conv2 + self.conv3

    def csv_row(self, block_id: str, static: "FlopsBreakdown") -> str:
        ratio = self.total / static.total if static.total else 0.0
        return ",".join(
            [
                block_id,
                f"{self.conv1:.0f}",
                f"{self.conv2:.0f}",
                f"{self.conv3:.0f}",
                f"{self.masker:.0f}",
                f"{self.se:.0f}",
                f"{static.total:.0f}",
                f"{self.total:.2f}",
                f"{ratio:.6f}",
            ]
        )


FLOPS_CSV_HEADER = "block,conv1,conv2,conv3,masker,se,total_static,total_dynamic,ratio"


@dataclass(frozen=True)
class NetworkFlopsReport:
    """Expected dynamic vs static MACs of a whole network."""

    f_dyn: float
    f_stat: float

    @property
    def ratio(self) -> float:
        return self.f_dyn / self.f_stat

    def scaled(self, flops_per_mac: int = 1) -> "NetworkFlopsReport":
        return NetworkFlopsReport(self.f_dyn * flops_per_mac, self.f_stat * flops_per_mac)


def conv_macs(layer: ConvLayerSpec, out_shape: TensorShape) -> int:
    """H_out * W_out * C_out * (C_in/groups) * k^2, bias ignored."""
    if out_shape.channels != layer.out_channels:
        raise ShapeMismatch(
            f"output shape has {out_shape.channels} channels, layer makes {layer.out_channels}"
        )
    per_out = (layer.in_channels // layer.groups) * layer.kernel ** 2
    return out_shape.elements * per_out


def masker_macs(block: BlockSpec, cfg: DynamicConfig) -> int:
    """MACs of the decision module itself.

    Spatial/layer masker: adaptive average pool (one accumulate per input
    element) plus a 1x1 convolution to 2 logits on the coarse grid.  Channel
    masker: global average pool is free here by convention; the 2-layer MLP
    costs C*h + h*2D with D = conv2_width/G and h = max(D//16, 16).
    """
    c_in = block.input_shape.channels
    out = block.output_shape
    if cfg.paradigm is Paradigm.STATIC:
        return 0
    if cfg.paradigm is Paradigm.CHANNEL:
        d = block.conv2.out_channels // cfg.channel_granularity
        h = max(d // 16, 16)
        return c_in * h + h * 2 * d
    if cfg.paradigm is Paradigm.LAYER:
        coarse = 1  # one decision for the whole block
    else:
        s = cfg.spatial_granularity
        coarse = (out.height // s) * (out.width // s)
    pool = block.input_shape.elements
    return pool + coarse * 2 * c_in


def _static_parts(block: BlockSpec) -> FlopsBreakdown:
    out = block.output_shape
    mid1 = TensorShape(
        block.conv1.out_channels, block.input_shape.height, block.input_shape.width
    )
    mid2 = TensorShape(block.conv2.out_channels, out.height, out.width)
    f1 = conv_macs(block.conv1, mid1)
    f2 = conv_macs(block.conv2, mid2)
    f3 = conv_macs(block.conv3, TensorShape(block.conv3.out_channels, out.height, out.width))
    se = 0
    if block.se_reduction is not None:
        h = block.se_hidden
        w = block.conv2.out_channels
        se = mid2.elements + 2 * w * h  # pool accumulates + two FC layers
    down = 0
    if block.has_downsample:
        down_layer = ConvLayerSpec(block.input_shape.channels, out.channels, 1, block.stride)
        down = conv_macs(down_layer, TensorShape(out.channels, out.height, out.width))
    return FlopsBreakdown(f1, f2, f3, 0, se, down)


def block_flops_static(block: BlockSpec) -> FlopsBreakdown:
    """Dense block cost; exact integers, no masker."""
    return _static_parts(block)


def block_flops_dynamic(
    block: BlockSpec, cfg: DynamicConfig, prof: ActivationProfile
) -> FlopsBreakdown:
    """Expected block cost under an activation profile.

    Spatial scales conv1 by the dilated rate and conv2/conv3 by the plain
    rate; channel scales conv1/conv3 linearly and conv2 quadratically; layer
    scales the whole block.  SE and downsample follow the block rate for
    spatial/layer and stay dense for channel (the mask only touches the
    first two convolutions).  The masker itself is always paid in full.
    """
    validate_config(block, cfg)
    stat = _static_parts(block)
    mask = masker_macs(block, cfg)
    if cfg.paradigm is Paradigm.STATIC:
        return stat
    if cfg.paradigm is Paradigm.SPATIAL:
        r = prof.r_spatial
        r_dil = prof.dilated_or_default(cfg.spatial_granularity)
        return FlopsBreakdown(
            r_dil * stat.conv1, r * stat.conv2, r * stat.conv3, mask, r * stat.se, r * stat.downsample
        )
    if cfg.paradigm is Paradigm.CHANNEL:
        r = prof.r_channel
        return FlopsBreakdown(
            r * stat.conv1, r * r * stat.conv2, r * stat.conv3, mask, stat.se, stat.downsample
        )
    r = prof.r_layer
    return FlopsBreakdown(
        r * stat.conv1, r * stat.conv2, r * stat.conv3, mask, r * stat.se, r * stat.downsample
    )


def theoretical_speedup(static: FlopsBreakdown, dynamic: FlopsBreakdown) -> float:
    """Ratio of dynamic to static trunk-conv MACs (masker excluded)."""
    if static.conv_total == 0:
        raise ZeroDivisionError("static block has no convolution MACs")
    return dynamic.conv_total / static.conv_total


def spatial_speedup(f1: float, f2: float, f3: float, r: float, r_dil: float) -> float:
    """(r_dil*F1 + r*F2 + r*F3) / (F1 + F2 + F3)."""
    total = f1 + f2 + f3
    if total == 0:
        raise ZeroDivisionError("F1 + F2 + F3 must be positive")
    return (r_dil * f1 + r * f2 + r * f3) / total


def channel_speedup(f1: float, f2: float, f3: float, r: float) -> float:
    """(r*F1 + r^2*F2 + r*F3) / (F1 + F2 + F3); never exceeds r."""
    total = f1 + f2 + f3
    if total == 0:
        raise ZeroDivisionError("F1 + F2 + F3 must be positive")
    return (r * f1 + r * r * f2 + r * f3) / total
