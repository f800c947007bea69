"""dynlat: latency and FLOPs modeling for dynamic convolution blocks.

The library models three mask-and-compute inference paradigms (spatial patch
skipping, channel-group skipping, layer skipping) on simple multi-PE
hardware descriptions, searches tile schedules for each operator, accounts
exact and expected MACs, and ships a float64 reference executor that proves
the sparse pipelines numerically equivalent to their dense-masked forms.
"""

from .core import (
    ActivationProfile,
    BlockSpec,
    ConvLayerSpec,
    DynamicConfig,
    HardwareSpec,
    Paradigm,
    TensorShape,
    enumerate_granularities,
    hardware_preset_names,
    load_hardware,
    profile_for,
    validate_config,
)
from .flops import (
    FlopsBreakdown,
    NetworkFlopsReport,
    block_flops_dynamic,
    block_flops_static,
    channel_speedup,
    conv_macs,
    masker_macs,
    spatial_speedup,
    theoretical_speedup,
)
from .latency import (
    BlockPrediction,
    FusionFlags,
    LatencyBreakdown,
    SchedulePlan,
    TileShape,
    Workload,
    ablate_fusion,
    block_workloads,
    compute_latency,
    data_latency,
    enumerate_tile_shapes,
    predict_block,
    search_schedule,
)
from .training import (
    TrainingConfig,
    bounds_loss,
    flops_loss,
    kd_loss,
    tau_schedule,
    total_loss,
)
from .zoo import (
    GranularityPlan,
    NetworkPrediction,
    NetworkSpec,
    StageSpec,
    build_network,
    network_flops,
    network_preset_names,
    network_static_macs,
    parse_plan,
    predict_network,
    sweep_block,
    sweep_network,
)

__version__ = "0.1.0"
