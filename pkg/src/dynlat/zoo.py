"""Architecture zoo: shipped networks, granularity plans, network-level reports.

Architectures load from plain-text .net files (see the packaged data files
for the schema):

    name = resnet50
    input = 224x224
    stem_width = 64         stem_kernel = 7       stem_stride = 2
    stem_pool = yes         classes = 1000
    stage = depth width bottleneck group_width se_reduction stride

``group_width`` 0 means ordinary convolution; ``se_reduction`` 0 disables
squeeze-excite.  The first block of a stage carries the stage stride and a
downsample path whenever shape changes; the stem and classifier are always
static.
"""

from __future__ import annotations

import importlib.resources
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

from .core import (
    ELEMENT_BYTES,
    ActivationProfile,
    BlockSpec,
    ConvLayerSpec,
    DynamicConfig,
    HardwareSpec,
    Paradigm,
    TensorShape,
    profile_for,
)
from .errors import (
    GranularityMismatch,
    PlanLengthMismatch,
    ProfileCountMismatch,
    SpecFileError,
    UnknownNetwork,
)
from .flops import NetworkFlopsReport, block_flops_dynamic, block_flops_static, conv_macs
from .latency import (
    BlockPrediction,
    FusionFlags,
    Workload,
    predict_block,
    search_schedule,
)

_NETWORK_PRESETS = {
    "resnet50": "resnet50.net",
    "resnet101": "resnet101.net",
    "regnety-400mf": "regnety-400mf.net",
    "regnety-800mf": "regnety-800mf.net",
}

SWEEP_CSV_HEADER = "net,device,paradigm,stage,block,S,G,r,batch,flops_ratio,r_ell,total_us"


@dataclass(frozen=True)
class StageSpec:
    """One stage: how many blocks, the repeated block, and the entry stride."""

    block_count: int
    block_template: BlockSpec
    stride_first: bool


@dataclass(frozen=True)
class BlockInstance:
    """A concrete block at its position in the network."""

    stage: int  # 1-based
    index: int  # 0-based within the stage
    block: BlockSpec

    @property
    def block_id(self) -> str:
        return f"s{self.stage}b{self.index}"


@dataclass(frozen=True)
class NetworkSpec:
    """A full network: stem, staged bottleneck trunk, linear classifier."""

    name: str
    stem: ConvLayerSpec
    stem_pool: bool
    stages: tuple[StageSpec, ...]
    blocks: tuple[BlockInstance, ...]
    classifier_features: int
    num_classes: int
    input_shape: TensorShape

    @property
    def block_count(self) -> int:
        return len(self.blocks)

    def stage_feature(self, stage: int) -> TensorShape:
        return self.stages[stage - 1].block_template.output_shape

    def template_block(self, stage: int) -> BlockSpec:
        return self.stages[stage - 1].block_template

    def stem_output(self) -> TensorShape:
        h, w = self.stem.out_hw(self.input_shape.height, self.input_shape.width)
        if self.stem_pool:
            h, w = (h + 2 - 3) // 2 + 1, (w + 2 - 3) // 2 + 1
        return TensorShape(self.stem.out_channels, h, w)


@dataclass(frozen=True)
class GranularityPlan:
    """Per-stage S (spatial) or G (channel) values, one entry per stage."""

    paradigm: Paradigm
    values: tuple[int, ...]

    @property
    def text(self) -> str:
        return "-".join(str(v) for v in self.values)


def network_preset_names() -> tuple[str, ...]:
    return tuple(sorted(_NETWORK_PRESETS))


def _parse_net_text(text: str, path: str):
    fields: dict[str, str] = {}
    stages: list[tuple[int, ...]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SpecFileError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key == "stage":
            parts = value.split()
            if len(parts) != 6:
                raise SpecFileError(
                    f"{path}:{lineno}: stage needs 6 fields "
                    "(depth width bottleneck group_width se_reduction stride)"
                )
            stages.append(tuple(int(p) for p in parts))
        else:
            fields[key] = value
    required = ("name", "input", "stem_width", "stem_kernel", "stem_stride",
                "stem_pool", "classes")
    missing = [k for k in required if k not in fields]
    if missing:
        raise SpecFileError(f"{path}: missing keys {missing}")
    if not stages:
        raise SpecFileError(f"{path}: no stages")
    return fields, stages


def _build(fields, stage_rows, path, input_hw=None) -> NetworkSpec:
    if input_hw is None:
        h, w = (int(v) for v in fields["input"].split("x"))
    else:
        h, w = input_hw
    input_shape = TensorShape(3, h, w)
    stem = ConvLayerSpec(3, int(fields["stem_width"]), int(fields["stem_kernel"]),
                         int(fields["stem_stride"]))
    stem_pool = fields["stem_pool"].lower() in ("yes", "true", "1")
    fh, fw = stem.out_hw(h, w)
    if stem_pool:
        fh, fw = (fh + 2 - 3) // 2 + 1, (fw + 2 - 3) // 2 + 1

    blocks: list[BlockInstance] = []
    stages: list[StageSpec] = []
    prev_width = stem.out_channels
    prev_shape = None
    for stage_idx, (depth, width, bottleneck, group_width, se, stride) in enumerate(
        stage_rows, start=1
    ):
        mid = width // bottleneck
        groups = mid // group_width if group_width else 1
        se_reduction = se or None
        stage_blocks = []
        for b in range(depth):
            s = stride if b == 0 else 1
            in_ch = prev_width if b == 0 else width
            block = BlockSpec(
                conv1=ConvLayerSpec(in_ch, mid, 1),
                conv2=ConvLayerSpec(mid, mid, 3, s, groups),
                conv3=ConvLayerSpec(mid, width, 1),
                input_shape=TensorShape(in_ch, fh, fw),
                se_reduction=se_reduction,
                has_downsample=(b == 0 and (s > 1 or in_ch != width)),
            )
            if prev_shape is not None and block.input_shape != prev_shape:
                raise SpecFileError(
                    f"{path}: block chaining broken entering stage {stage_idx}"
                )
            out = block.output_shape
            fh, fw = out.height, out.width
            prev_shape = out
            stage_blocks.append(BlockInstance(stage_idx, b, block))
        template = stage_blocks[1].block if depth > 1 else stage_blocks[0].block
        stages.append(StageSpec(depth, template, stride_first=stride > 1))
        blocks.extend(stage_blocks)
        prev_width = width
    return NetworkSpec(
        name=fields["name"],
        stem=stem,
        stem_pool=stem_pool,
        stages=tuple(stages),
        blocks=tuple(blocks),
        classifier_features=prev_width,
        num_classes=int(fields["classes"]),
        input_shape=input_shape,
    )


def build_network(
    source: Union[str, Path], input_hw: Optional[tuple[int, int]] = None
) -> NetworkSpec:
    """Load an architecture by preset name or .net file path.

    ``input_hw`` overrides the file's nominal input resolution (useful for
    dense-prediction backbones).
    """
    if isinstance(source, Path) or str(source).endswith(".net") or "/" in str(source):
        path = Path(source)
        if not path.exists():
            raise UnknownNetwork(f"no architecture file at {path}")
        fields, stages = _parse_net_text(path.read_text(), str(path))
        return _build(fields, stages, str(path), input_hw)
    key = str(source).lower()
    if key not in _NETWORK_PRESETS:
        raise UnknownNetwork(
            f"unknown network {source!r}; presets: {', '.join(network_preset_names())}"
        )
    name = _NETWORK_PRESETS[key]
    text = importlib.resources.files("dynlat.data.networks").joinpath(name).read_text()
    fields, stages = _parse_net_text(text, name)
    return _build(fields, stages, name, input_hw)


def parse_plan(text: str, net: NetworkSpec, paradigm: Paradigm) -> GranularityPlan:
    """Parse dash notation like "4-4-2-1" and validate it against the net."""
    try:
        values = tuple(int(part) for part in text.split("-"))
    except ValueError as exc:
        raise PlanLengthMismatch(f"bad plan {text!r}: {exc}") from exc
    if len(values) != len(net.stages):
        raise PlanLengthMismatch(
            f"plan {text!r} has {len(values)} entries, network has {len(net.stages)} stages"
        )
    if any(v < 1 for v in values):
        raise PlanLengthMismatch(f"plan {text!r} has non-positive entries")
    for stage_no, value in enumerate(values, start=1):
        feat = net.stage_feature(stage_no)
        if paradigm is Paradigm.SPATIAL:
            if feat.height % value or feat.width % value:
                raise GranularityMismatch(
                    f"stage {stage_no}: S={value} does not divide "
                    f"{feat.height}x{feat.width}"
                )
        elif paradigm is Paradigm.CHANNEL:
            width = net.template_block(stage_no).conv2.out_channels
            if width % value:
                raise GranularityMismatch(
                    f"stage {stage_no}: G={value} does not divide width {width}"
                )
    return GranularityPlan(paradigm, values)


def default_plan(net: NetworkSpec, paradigm: Paradigm) -> GranularityPlan:
    """S = full feature size per stage (layer-equivalent), or G = 1."""
    if paradigm is Paradigm.CHANNEL:
        return GranularityPlan(paradigm, tuple(1 for _ in net.stages))
    values = tuple(net.stage_feature(i + 1).height for i in range(len(net.stages)))
    return GranularityPlan(paradigm, values)


def config_for_stage(
    net: NetworkSpec, stage: int, paradigm: Paradigm, plan: Optional[GranularityPlan]
) -> DynamicConfig:
    if paradigm is Paradigm.SPATIAL:
        if plan is None:
            raise GranularityMismatch("spatial paradigm needs a plan")
        return DynamicConfig(paradigm, spatial_granularity=plan.values[stage - 1])
    if paradigm is Paradigm.CHANNEL:
        g = 1 if plan is None else plan.values[stage - 1]
        return DynamicConfig(paradigm, channel_granularity=g)
    return DynamicConfig(paradigm)


# ---------------------------------------------------------------------------
# whole-network accounting
# ---------------------------------------------------------------------------


def stem_classifier_macs(net: NetworkSpec) -> int:
    """Static stem conv plus the final linear layer (pooling excluded)."""
    h, w = net.stem.out_hw(net.input_shape.height, net.input_shape.width)
    stem = conv_macs(net.stem, TensorShape(net.stem.out_channels, h, w))
    return stem + net.classifier_features * net.num_classes


def _broadcast_rates(rates, n_blocks) -> list[float]:
    if isinstance(rates, (int, float)):
        return [float(rates)] * n_blocks
    rates = [float(r) for r in rates]
    if len(rates) != n_blocks:
        raise ProfileCountMismatch(
            f"{len(rates)} rates for {n_blocks} blocks"
        )
    return rates


def network_flops(
    net: NetworkSpec,
    paradigm: Paradigm,
    plan: Optional[GranularityPlan],
    rates: Union[float, Sequence[float]],
) -> NetworkFlopsReport:
    """Expected dynamic vs static MACs over the whole network."""
    per_block = _broadcast_rates(rates, net.block_count)
    fixed = stem_classifier_macs(net)
    f_stat = float(fixed)
    f_dyn = float(fixed)
    for inst, rate in zip(net.blocks, per_block):
        cfg = config_for_stage(net, inst.stage, paradigm, plan)
        f_stat += block_flops_static(inst.block).total
        f_dyn += block_flops_dynamic(inst.block, cfg, profile_for(paradigm, rate)).total
    return NetworkFlopsReport(f_dyn, f_stat)


def network_static_macs(net: NetworkSpec) -> int:
    """Exact static MAC count: stem + every block + classifier."""
    total = stem_classifier_macs(net)
    for inst in net.blocks:
        total += block_flops_static(inst.block).total
    return total


def _stem_classifier_workloads(net: NetworkSpec, batch: int) -> list[Workload]:
    shp = net.input_shape
    h, w = net.stem.out_hw(shp.height, shp.width)
    stem_out = batch * net.stem.out_channels * h * w * ELEMENT_BYTES
    loads = [Workload(
        kind="stem-conv",
        dims=(batch, net.stem.out_channels, h, w),
        macs=batch * h * w * net.stem.out_channels * 3 * net.stem.kernel**2,
        input_bytes=batch * shp.elements * ELEMENT_BYTES,
        output_bytes=stem_out,
        weight_bytes=net.stem.out_channels * 3 * net.stem.kernel**2 * ELEMENT_BYTES,
        in_channels=3,
        kernel=net.stem.kernel,
        stride=net.stem.stride,
        tiled_reduction=True,
    )]
    if net.stem_pool:
        ph, pw = (h + 2 - 3) // 2 + 1, (w + 2 - 3) // 2 + 1
        loads.append(Workload(
            kind="stem-pool",
            dims=(batch, net.stem.out_channels, ph, pw),
            macs=0.0,
            input_bytes=stem_out,
            output_bytes=batch * net.stem.out_channels * ph * pw * ELEMENT_BYTES,
        ))
    feat = net.stage_feature(len(net.stages))
    feat_bytes = batch * feat.elements * ELEMENT_BYTES
    loads.append(Workload(
        kind="global-pool",
        dims=(batch, net.classifier_features, 1, 1),
        macs=batch * feat.elements,
        input_bytes=feat_bytes,
        output_bytes=batch * net.classifier_features * ELEMENT_BYTES,
    ))
    loads.append(Workload(
        kind="classifier",
        dims=(batch, net.num_classes, 1, 1),
        macs=batch * net.classifier_features * net.num_classes,
        input_bytes=batch * net.classifier_features * ELEMENT_BYTES,
        output_bytes=batch * net.num_classes * ELEMENT_BYTES,
        weight_bytes=net.classifier_features * net.num_classes * ELEMENT_BYTES,
        in_channels=net.classifier_features,
        kernel=1,
        tiled_reduction=True,
    ))
    return loads


@dataclass(frozen=True)
class NetworkPrediction:
    """predict_network result: per-block predictions and network totals."""

    net: str
    device: str
    paradigm: Paradigm
    batch: int
    block_predictions: tuple[tuple[BlockInstance, BlockPrediction], ...]
    stem_classifier_s: float
    flops: NetworkFlopsReport

    @property
    def total_s(self) -> float:
        return self.stem_classifier_s + sum(
            p.total_s for _, p in self.block_predictions
        )

    @property
    def static_total_s(self) -> float:
        return self.stem_classifier_s + sum(
            p.static_total_s for _, p in self.block_predictions
        )

    @property
    def r_ell(self) -> float:
        return self.total_s / self.static_total_s

    @property
    def per_image_s(self) -> float:
        return self.total_s / self.batch


def predict_network(
    net: NetworkSpec,
    plan: Optional[GranularityPlan],
    paradigm: Paradigm,
    rates: Union[float, Sequence[float]],
    hw: HardwareSpec,
    batch: int,
    flags: FusionFlags = FusionFlags.all(),
) -> NetworkPrediction:
    """Whole-network latency: dynamic blocks plus the static stem/classifier."""
    per_block = _broadcast_rates(rates, net.block_count)
    fixed_loads = _stem_classifier_workloads(net, batch)
    fixed_s = sum(
        search_schedule(wl, hw).predicted.total_s for wl in fixed_loads
    )
    preds = []
    for inst, rate in zip(net.blocks, per_block):
        cfg = config_for_stage(net, inst.stage, paradigm, plan)
        prof = profile_for(paradigm, rate)
        preds.append((inst, predict_block(inst.block, cfg, prof, flags, hw, batch)))
    report = network_flops(net, paradigm, plan, per_block)
    return NetworkPrediction(
        net=net.name,
        device=hw.name,
        paradigm=paradigm,
        batch=batch,
        block_predictions=tuple(preds),
        stem_classifier_s=fixed_s,
        flops=report,
    )


def _sweep_row(net_name, device, paradigm, stage, block_id, s_val, g_val, rate,
               batch, flops_ratio, r_ell, total_s) -> str:
    return ",".join([
        net_name,
        device,
        paradigm.value,
        str(stage),
        block_id,
        str(s_val),
        str(g_val),
        f"{rate:.4f}",
        str(batch),
        f"{flops_ratio:.6f}",
        f"{r_ell:.6f}",
        f"{total_s * 1e6:.4f}",
    ])


def sweep_block(
    net: NetworkSpec,
    stage: int,
    paradigm: Paradigm,
    granularities: Sequence[int],
    rates: Sequence[float],
    hw: HardwareSpec,
    batch: int,
    flags: FusionFlags = FusionFlags.all(),
) -> list[str]:
    """CSV rows for one stage's template block over a granularity/rate grid.

    Rows are ordered granularity-ascending then rate-ascending, so repeated
    invocations produce identical output.
    """
    block = net.template_block(stage)
    rows = []
    for gran in sorted(granularities):
        if paradigm is Paradigm.SPATIAL:
            cfg = DynamicConfig(paradigm, spatial_granularity=gran)
        elif paradigm is Paradigm.CHANNEL:
            cfg = DynamicConfig(paradigm, channel_granularity=gran)
        else:
            cfg = DynamicConfig(paradigm)
        static = block_flops_static(block)
        for rate in sorted(rates):
            prof = profile_for(paradigm, rate)
            pred = predict_block(block, cfg, prof, flags, hw, batch)
            dyn = block_flops_dynamic(block, cfg, prof)
            s_val = gran if paradigm in (Paradigm.SPATIAL, Paradigm.LAYER) else "-"
            g_val = gran if paradigm is Paradigm.CHANNEL else "-"
            rows.append(_sweep_row(
                net.name, hw.name, paradigm, stage, f"s{stage}", s_val, g_val,
                rate, batch, dyn.total / static.total, pred.r_ell, pred.total_s,
            ))
    return rows


def sweep_network(
    net: NetworkSpec,
    paradigm: Paradigm,
    plans: Sequence[str],
    rates: Sequence[float],
    hw: HardwareSpec,
    batch: int,
    flags: FusionFlags = FusionFlags.all(),
) -> list[str]:
    """CSV rows for whole-network predictions over a plan/rate grid."""
    rows = []
    for plan_text in plans:
        plan = parse_plan(plan_text, net, paradigm) if plan_text != "-" else None
        for rate in sorted(rates):
            pred = predict_network(net, plan, paradigm, rate, hw, batch, flags)
            s_val = plan_text if paradigm is Paradigm.SPATIAL else "-"
            g_val = plan_text if paradigm is Paradigm.CHANNEL else "-"
            rows.append(_sweep_row(
                net.name, hw.name, paradigm, 0, "net", s_val, g_val, rate,
                batch, pred.flops.ratio, pred.r_ell, pred.total_s,
            ))
    return rows
