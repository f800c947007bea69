"""Analytical latency prediction for dynamic convolution blocks.

The device executes one operator at a time.  Each operator's output is split
into 4-D tiles (patch, channel, two spatial dims); tiles are assigned to
processing engines and executed in waves.  Predicted latency is the sum of a
data-movement term and a computation term:

* data movement crosses two links.  Off-chip <-> on-chip carries each unique
  input/weight/output byte once at the off-chip bandwidth.  On-chip global ->
  PE-local is charged per tile: a tile recomputes nothing but re-reads
  whatever its outputs need, so convolution halos overlap between adjacent
  tiles and weights are re-read by every tile that consumes them.  This
  re-read amplification is the mechanism that penalizes tiny tiles and small
  patch granularities.
* computation divides an operator's MACs evenly over its tiles; a PE retires
  one MAC per FP32 lane per cycle, and waves = ceil(tiles / #PE).

The tile-shape search evaluates every power-of-two candidate per dimension
and keeps the cheapest (ties go to the lexicographically smallest tile), so
repeated runs - parallel or not - return identical plans.
"""

from __future__ import annotations

import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

from .core import (
    ELEMENT_BYTES,
    ActivationProfile,
    BlockSpec,
    DynamicConfig,
    HardwareSpec,
    Paradigm,
    validate_config,
)

LATENCY_CSV_HEADER = (
    "device,block,paradigm,S,G,r,batch,tile,waves,data_us,compute_us,total_us,r_ell"
)


@dataclass(frozen=True, order=True)
class TileShape:
    """Per-PE output tile, T_P x T_C x T_S1 x T_S2; every entry a power of 2."""

    t_p: int
    t_c: int
    t_s1: int
    t_s2: int

    def __post_init__(self):
        for t in (self.t_p, self.t_c, self.t_s1, self.t_s2):
            if t < 1 or t & (t - 1):
                raise ValueError(f"tile dims must be powers of two, got {self}")

    def __str__(self):
        return f"{self.t_p}x{self.t_c}x{self.t_s1}x{self.t_s2}"


@dataclass(frozen=True)
class Workload:
    """One operator instance, described by its output geometry and traffic.

    ``dims`` is (P, C, S1, S2): patches (or batch), output channels, and two
    spatial extents.  Byte fields are unique off-chip totals.  Operators with
    ``tiled_reduction`` set are convolution-like: their on-chip traffic is
    derived per tile from ``in_channels``/``kernel``/``stride`` (halo model)
    and their weights are re-read once per consuming tile.  Memory-bound
    operators (gather, scatter, add, maskers) move each byte to a PE once.

    ``latency_weight`` scales the operator's contribution to the block total;
    layer skipping uses it for expected-latency semantics.
    """

    kind: str
    dims: tuple[int, int, int, int]
    macs: float
    input_bytes: float
    output_bytes: float
    weight_bytes: float = 0.0
    in_channels: float = 0.0
    kernel: int = 1
    stride: int = 1
    groups: int = 1
    tiled_reduction: bool = False
    latency_weight: float = 1.0

    def padded_dims(self) -> tuple[int, int, int, int]:
        return tuple(max(1, d) for d in self.dims)  # type: ignore[return-value]


@dataclass(frozen=True)
class LatencyBreakdown:
    """data + compute + const seconds for a block or an operator."""

    data_s: float
    compute_s: float
    const_s: float = 0.0

    @property
    def total_s(self) -> float:
        return self.data_s + self.compute_s + self.const_s


@dataclass(frozen=True)
class SchedulePlan:
    """A tile choice with its wave count and predicted operator latency."""

    tile: TileShape
    tile_count: int
    waves: int
    predicted: LatencyBreakdown


@dataclass(frozen=True)
class FusionFlags:
    """Which of the three spatial-pipeline fusions are enabled."""

    fuse_masker_conv1: bool = True
    fuse_gather_conv: bool = True
    fuse_scatter_add: bool = True

    @staticmethod
    def none() -> "FusionFlags":
        return FusionFlags(False, False, False)

    @staticmethod
    def all() -> "FusionFlags":
        return FusionFlags(True, True, True)

    @staticmethod
    def combinations() -> tuple["FusionFlags", ...]:
        return tuple(
            FusionFlags(*bits)
            for bits in itertools.product((False, True), repeat=3)
        )


@dataclass(frozen=True)
class BlockPrediction:
    """predict_block result: block breakdown plus per-workload plans."""

    breakdown: LatencyBreakdown
    plans: tuple[tuple[Workload, SchedulePlan], ...]
    static_total_s: float

    @property
    def total_s(self) -> float:
        return self.breakdown.total_s

    @property
    def r_ell(self) -> float:
        return self.breakdown.total_s / self.static_total_s

    def dominant(self) -> tuple[Workload, SchedulePlan]:
        """The workload contributing the most weighted latency."""
        return max(
            self.plans,
            key=lambda wp: (wp[0].latency_weight * wp[1].predicted.total_s, wp[0].kind),
        )


def _pow2_candidates(dim: int) -> list[int]:
    dim = max(1, dim)
    out = []
    t = 1
    while t <= dim:
        out.append(t)
        t *= 2
    return out


def enumerate_tile_shapes(dims: tuple[int, int, int, int]) -> list[TileShape]:
    """Power-of-two candidates per dimension, capped by the dimension itself.

    Deterministic lexicographic order over (t_p, t_c, t_s1, t_s2).
    """
    axes = [_pow2_candidates(d) for d in dims]
    return [TileShape(*combo) for combo in itertools.product(*axes)]


def _tile_counts(dims, tile):
    n_p = math.ceil(max(1, dims[0]) / tile.t_p)
    n_c = math.ceil(max(1, dims[1]) / tile.t_c)
    n_s1 = math.ceil(max(1, dims[2]) / tile.t_s1)
    n_s2 = math.ceil(max(1, dims[3]) / tile.t_s2)
    return n_p, n_c, n_s1, n_s2


def data_latency(w: Workload, tile: TileShape, hw: HardwareSpec) -> float:
    """Seconds spent moving data for one operator under one tile choice."""
    bw_off = hw.offchip_bandwidth_bytes_per_s
    bw_on = hw.onchip_bandwidth_bytes_per_s
    off2on = (w.input_bytes + w.weight_bytes) / bw_off
    on2off = w.output_bytes / bw_off
    if w.tiled_reduction:
        n_p, n_c, n_s1, n_s2 = _tile_counts(w.dims, tile)
        tiles = n_p * n_c * n_s1 * n_s2
        halo1 = (tile.t_s1 - 1) * w.stride + w.kernel
        halo2 = (tile.t_s2 - 1) * w.stride + w.kernel
        out_per_group = max(1, w.dims[1] // w.groups)
        groups_spanned = min(w.groups, math.ceil(tile.t_c / out_per_group))
        in_extent = (w.in_channels / w.groups) * groups_spanned
        g2l_in = tiles * tile.t_p * in_extent * halo1 * halo2 * ELEMENT_BYTES
        g2l_w = n_p * n_s1 * n_s2 * w.weight_bytes
        global2local = (g2l_in + g2l_w) / bw_on
    else:
        global2local = (w.input_bytes + w.weight_bytes) / bw_on
    local2global = w.output_bytes / bw_on
    return off2on + global2local + local2global + on2off


def compute_latency(w: Workload, tile: TileShape, hw: HardwareSpec) -> float:
    """Seconds of arithmetic: waves * (MACs per tile) / per-PE MAC rate."""
    if w.macs == 0:
        return 0.0
    n_p, n_c, n_s1, n_s2 = _tile_counts(w.dims, tile)
    tiles = n_p * n_c * n_s1 * n_s2
    waves = math.ceil(tiles / hw.pe_count)
    return waves * (w.macs / tiles) / hw.macs_per_s_per_pe


def _evaluate(w: Workload, tile: TileShape, hw: HardwareSpec) -> SchedulePlan:
    n = _tile_counts(w.dims, tile)
    tiles = n[0] * n[1] * n[2] * n[3]
    waves = math.ceil(tiles / hw.pe_count)
    breakdown = LatencyBreakdown(data_latency(w, tile, hw), compute_latency(w, tile, hw))
    return SchedulePlan(tile, tiles, waves, breakdown)


def _plan_key(plan: SchedulePlan):
    return (plan.predicted.total_s, plan.tile)


def search_schedule(w: Workload, hw: HardwareSpec, workers: int = 1) -> SchedulePlan:
    """Cheapest tile shape over the power-of-two candidate set.

    Ties break toward the lexicographically smallest tile, which makes the
    result independent of evaluation order; ``workers`` > 1 evaluates
    candidate chunks on a thread pool and must return the same plan.
    """
    candidates = enumerate_tile_shapes(w.padded_dims())
    if workers <= 1 or len(candidates) < 2 * workers:
        return min((_evaluate(w, t, hw) for t in candidates), key=_plan_key)
    chunk = math.ceil(len(candidates) / workers)
    slices = [candidates[i : i + chunk] for i in range(0, len(candidates), chunk)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        partial = pool.map(
            lambda part: min((_evaluate(w, t, hw) for t in part), key=_plan_key),
            slices,
        )
        return min(partial, key=_plan_key)


# ---------------------------------------------------------------------------
# block pipelines
# ---------------------------------------------------------------------------


def _conv_dense(kind, batch, layer, h_in, w_in, scale_macs=1.0, scale_in=1.0,
                scale_w=1.0, scale_out=1.0, in_extent=None, weight=1.0):
    """Dense convolution workload at the layer's own resolution."""
    h_out, w_out = layer.out_hw(h_in, w_in)
    dense_macs = batch * h_out * w_out * layer.out_channels \
        * (layer.in_channels // layer.groups) * layer.kernel ** 2
    in_bytes = batch * layer.in_channels * h_in * w_in * ELEMENT_BYTES
    weight_bytes = layer.out_channels * (layer.in_channels // layer.groups) \
        * layer.kernel ** 2 * ELEMENT_BYTES
    out_bytes = batch * layer.out_channels * h_out * w_out * ELEMENT_BYTES
    return Workload(
        kind=kind,
        dims=(batch, layer.out_channels, h_out, w_out),
        macs=scale_macs * dense_macs,
        input_bytes=scale_in * in_bytes,
        output_bytes=scale_out * out_bytes,
        weight_bytes=scale_w * weight_bytes,
        in_channels=layer.in_channels if in_extent is None else in_extent,
        kernel=layer.kernel,
        stride=layer.stride,
        groups=layer.groups,
        tiled_reduction=True,
        latency_weight=weight,
    )


def _se_workload(block, batch, feature_bytes, pooled_elems, weight=1.0):
    w = block.conv2.out_channels
    h = block.se_hidden
    fc_bytes = 2 * w * h * ELEMENT_BYTES
    return Workload(
        kind="se",
        dims=(batch, w, 1, 1),
        macs=pooled_elems + batch * 2 * w * h,
        input_bytes=feature_bytes + fc_bytes,
        output_bytes=feature_bytes,
        weight_bytes=0.0,
        latency_weight=weight,
    )


def _add_workload(batch, channels, h, w, weight=1.0):
    full = batch * channels * h * w * ELEMENT_BYTES
    return Workload(
        kind="add",
        dims=(batch, channels, h, w),
        macs=0.0,
        input_bytes=2 * full,
        output_bytes=full,
        latency_weight=weight,
    )


def _static_workloads(block: BlockSpec, batch: int, weight: float = 1.0) -> list[Workload]:
    shp = block.input_shape
    out = block.output_shape
    loads = [
        _conv_dense("conv1", batch, block.conv1, shp.height, shp.width, weight=weight),
        _conv_dense("conv2", batch, block.conv2, shp.height, shp.width, weight=weight),
    ]
    if block.se_reduction is not None:
        feat = batch * block.conv2.out_channels * out.height * out.width * ELEMENT_BYTES
        loads.append(_se_workload(block, batch, feat, batch * block.conv2.out_channels
                                  * out.height * out.width, weight=weight))
    loads.append(_conv_dense("conv3", batch, block.conv3, out.height, out.width, weight=weight))
    if block.has_downsample:
        down = _downsample_workload(block, batch, weight=weight)
        loads.append(down)
    loads.append(_add_workload(batch, out.channels, out.height, out.width, weight=weight))
    return loads


def _downsample_workload(block: BlockSpec, batch: int, weight: float = 1.0) -> Workload:
    shp = block.input_shape
    out = block.output_shape
    macs = batch * out.height * out.width * out.channels * shp.channels
    return Workload(
        kind="downsample",
        dims=(batch, out.channels, out.height, out.width),
        macs=macs,
        input_bytes=batch * shp.elements * ELEMENT_BYTES,
        output_bytes=batch * out.channels * out.height * out.width * ELEMENT_BYTES,
        weight_bytes=out.channels * shp.channels * ELEMENT_BYTES,
        in_channels=shp.channels,
        kernel=1,
        stride=block.stride,
        tiled_reduction=True,
        latency_weight=weight,
    )


def _spatial_workloads(block, cfg, prof, flags, batch):
    shp = block.input_shape
    out = block.output_shape
    s_gran = cfg.spatial_granularity
    stride = block.stride
    c_in, c1 = shp.channels, block.conv1.out_channels
    c2, c3 = block.conv2.out_channels, block.conv3.out_channels
    cells = (out.height // s_gran) * (out.width // s_gran)
    p = round(prof.r_spatial * cells) * batch
    r_dil = prof.dilated_or_default(s_gran)

    full_in = batch * shp.elements * ELEMENT_BYTES
    conv1_out_full = batch * c1 * shp.height * shp.width * ELEMENT_BYTES
    loads = []

    if flags.fuse_masker_conv1:
        # one dense pass producing conv1's channels plus the mask logit
        loads.append(Workload(
            kind="masker-conv-fused",
            dims=(batch, c1 + 1, shp.height, shp.width),
            macs=batch * shp.height * shp.width * ((c1 + 1) * c_in + 1),
            input_bytes=full_in,
            output_bytes=batch * (c1 + 1) * shp.height * shp.width * ELEMENT_BYTES,
            weight_bytes=(c1 + 1) * c_in * ELEMENT_BYTES,
            in_channels=c_in,
            kernel=1,
            tiled_reduction=True,
        ))
    else:
        # masker and conv1 each read the full input
        loads.append(Workload(
            kind="spatial-masker",
            dims=(batch, 2, out.height // s_gran, out.width // s_gran),
            macs=batch * (shp.elements + cells * 2 * c_in),
            input_bytes=full_in,
            output_bytes=batch * 2 * cells * ELEMENT_BYTES,
            weight_bytes=2 * c_in * ELEMENT_BYTES,
        ))
        loads.append(_conv_dense("conv1", batch, block.conv1, shp.height, shp.width))

    halo_edge = (s_gran - 1) * stride + block.conv2.kernel
    per_patch_in = c1 * halo_edge * halo_edge * ELEMENT_BYTES
    gathered = p * per_patch_in
    unique_src = min(r_dil * conv1_out_full, conv1_out_full)
    conv2_macs = p * s_gran * s_gran * c2 * (c1 // block.conv2.groups) \
        * block.conv2.kernel ** 2
    conv2_weights = c2 * (c1 // block.conv2.groups) * block.conv2.kernel ** 2 * ELEMENT_BYTES
    if not flags.fuse_gather_conv:
        # explicit gather pass: overlapping halo loads, packed store
        loads.append(Workload(
            kind="gather",
            dims=(p, c1, halo_edge, halo_edge),
            macs=0.0,
            input_bytes=gathered,
            output_bytes=gathered,
        ))
        conv2_in = gathered
    else:
        conv2_in = unique_src
    loads.append(Workload(
        kind="gather-conv",
        dims=(p, c2, s_gran, s_gran),
        macs=conv2_macs,
        input_bytes=conv2_in,
        output_bytes=p * c2 * s_gran * s_gran * ELEMENT_BYTES,
        weight_bytes=conv2_weights,
        in_channels=c1,
        kernel=block.conv2.kernel,
        stride=stride,
        groups=block.conv2.groups,
        tiled_reduction=True,
    ))

    patch_feat = p * c2 * s_gran * s_gran * ELEMENT_BYTES
    if block.se_reduction is not None:
        loads.append(_se_workload(block, batch, patch_feat, p * c2 * s_gran * s_gran))

    loads.append(Workload(
        kind="pointwise-conv",
        dims=(p, c3, s_gran, s_gran),
        macs=p * s_gran * s_gran * c3 * c2,
        input_bytes=patch_feat,
        output_bytes=p * c3 * s_gran * s_gran * ELEMENT_BYTES,
        weight_bytes=c3 * c2 * ELEMENT_BYTES,
        in_channels=c2,
        kernel=1,
        tiled_reduction=True,
    ))

    if block.has_downsample:
        loads.append(_downsample_workload(block, batch))

    patches_out = p * c3 * s_gran * s_gran * ELEMENT_BYTES
    if flags.fuse_scatter_add:
        # indexed read-modify-write against the residual tensor
        loads.append(Workload(
            kind="scatter-add",
            dims=(p, c3, s_gran, s_gran),
            macs=0.0,
            input_bytes=2 * patches_out,
            output_bytes=patches_out,
        ))
    else:
        full_out = batch * out.elements * ELEMENT_BYTES
        loads.append(Workload(
            kind="scatter",
            dims=(p, c3, s_gran, s_gran),
            macs=0.0,
            input_bytes=patches_out,
            output_bytes=full_out,
        ))
        loads.append(_add_workload(batch, out.channels, out.height, out.width))
    return loads


def _channel_workloads(block, cfg, prof, batch):
    shp = block.input_shape
    out = block.output_shape
    r = prof.r_channel
    c_in = shp.channels
    c1, c2 = block.conv1.out_channels, block.conv2.out_channels
    d = c2 // cfg.channel_granularity
    h = max(d // 16, 16)
    full_in = batch * shp.elements * ELEMENT_BYTES

    mlp_weights = (c_in * h + h * 2 * d) * ELEMENT_BYTES
    loads = [Workload(
        kind="channel-masker-mlp",
        dims=(batch, d, 1, 1),
        macs=batch * (shp.elements + c_in * h + h * 2 * d),
        input_bytes=full_in + mlp_weights,
        output_bytes=batch * 2 * d * ELEMENT_BYTES,
    )]
    # kernel gathering is folded into the convolutions: weight traffic and
    # MACs scale with the surviving filters, geometry stays dense
    loads.append(_conv_dense(
        "conv1", batch, block.conv1, shp.height, shp.width,
        scale_macs=r, scale_w=r, scale_out=r,
    ))
    loads.append(_conv_dense(
        "conv2", batch, block.conv2, shp.height, shp.width,
        scale_macs=r * r, scale_in=r, scale_w=r * r, scale_out=r,
        in_extent=r * c1,
    ))
    if block.se_reduction is not None:
        feat = batch * c2 * out.height * out.width * ELEMENT_BYTES
        loads.append(_se_workload(block, batch, feat,
                                  batch * c2 * out.height * out.width))
    loads.append(_conv_dense(
        "conv3", batch, block.conv3, out.height, out.width,
        scale_macs=r, scale_in=r, scale_w=r,
        in_extent=r * c2,
    ))
    if block.has_downsample:
        loads.append(_downsample_workload(block, batch))
    loads.append(_add_workload(batch, out.channels, out.height, out.width))
    return loads


def _layer_workloads(block, prof, batch):
    shp = block.input_shape
    c_in = shp.channels
    masker = Workload(
        kind="layer-masker",
        dims=(batch, 2, 1, 1),
        macs=batch * (shp.elements + 2 * c_in),
        input_bytes=batch * shp.elements * ELEMENT_BYTES,
        output_bytes=batch * 2 * ELEMENT_BYTES,
        weight_bytes=2 * c_in * ELEMENT_BYTES,
    )
    return [masker] + _static_workloads(block, batch, weight=prof.r_layer)


def block_workloads(
    block: BlockSpec,
    cfg: DynamicConfig,
    prof: ActivationProfile,
    flags: FusionFlags,
    batch: int,
) -> list[Workload]:
    """Operator sequence a block executes under the given paradigm.

    Spatial: (fused) masker/conv1, gather(-fused) conv2, optional SE, the
    pointwise conv3 on gathered patches, optional dense downsample, and
    scatter(-add).  Channel: masker MLP plus the three convolutions with
    filter-gathered weights.  Layer: masker plus the full static block with
    its latency weighted by the execution rate.  Static: the dense block.
    """
    if batch < 1:
        raise ValueError("batch must be >= 1")
    validate_config(block, cfg)
    if cfg.paradigm is Paradigm.STATIC:
        return _static_workloads(block, batch)
    if cfg.paradigm is Paradigm.SPATIAL:
        return _spatial_workloads(block, cfg, prof, flags, batch)
    if cfg.paradigm is Paradigm.CHANNEL:
        return _channel_workloads(block, cfg, prof, batch)
    return _layer_workloads(block, prof, batch)


_STATIC_CFG = DynamicConfig(Paradigm.STATIC)
_FULL_PROFILE = ActivationProfile()


def predict_block(
    block: BlockSpec,
    cfg: DynamicConfig,
    prof: ActivationProfile,
    flags: FusionFlags,
    hw: HardwareSpec,
    batch: int,
    workers: int = 1,
) -> BlockPrediction:
    """Predicted latency of one block, with the static baseline alongside.

    The block total is the sum of per-workload schedule-search results plus
    the device's constant overhead, applied once per block.
    """
    loads = block_workloads(block, cfg, prof, flags, batch)
    plans = tuple((w, search_schedule(w, hw, workers=workers)) for w in loads)
    data = sum(w.latency_weight * p.predicted.data_s for w, p in plans)
    compute = sum(w.latency_weight * p.predicted.compute_s for w, p in plans)
    breakdown = LatencyBreakdown(data, compute, hw.const_overhead_s)
    if cfg.paradigm is Paradigm.STATIC:
        static_total = breakdown.total_s
    else:
        static_total = predict_block(
            block, _STATIC_CFG, _FULL_PROFILE, flags, hw, batch, workers=workers
        ).total_s
    return BlockPrediction(breakdown, plans, static_total)


def ablate_fusion(
    block: BlockSpec,
    cfg: DynamicConfig,
    prof: ActivationProfile,
    hw: HardwareSpec,
    batch: int,
) -> list[tuple[FusionFlags, BlockPrediction]]:
    """One prediction per fusion-flag combination, in flag-tuple order."""
    return [
        (flags, predict_block(block, cfg, prof, flags, hw, batch))
        for flags in FusionFlags.combinations()
    ]
