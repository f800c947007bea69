"""Domain types for hardware, blocks, and dynamic-inference configuration.

The model of a device is deliberately small: a number of identical processing
engines (PEs), each with a fixed count of FP32 lanes running at a fixed clock,
fed by an off-chip memory link and a faster on-chip one.  Everything else
(tile mapping, wave counts, halo traffic) is derived from these numbers by the
latency module.

All types are frozen dataclasses: immutable after construction and safe to
share across threads.
"""

from __future__ import annotations

import enum
import importlib.resources
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Optional, Union

from .errors import (
    GranularityMismatch,
    ParadigmFieldMissing,
    ShapeMismatch,
    SpecFileError,
    UnknownDevice,
)

ELEMENT_BYTES = 4  # all traffic accounting is single precision

#: preset name -> packaged .hw file
_HARDWARE_PRESETS = {
    "v100": "v100.hw",
    "rtx3090": "rtx3090.hw",
    "rtx3060": "rtx3060.hw",
    "tx2": "tx2.hw",
    "nano": "nano.hw",
}


class Paradigm(enum.Enum):
    """The supported dynamic-inference paradigms.

    SPATIAL skips square feature patches, CHANNEL skips groups of channels in
    the first two convolutions of a block, LAYER skips whole blocks, and
    STATIC is the dense baseline every dynamic prediction is compared to.
    """

    SPATIAL = "spatial"
    CHANNEL = "channel"
    LAYER = "layer"
    STATIC = "static"


@dataclass(frozen=True)
class HardwareSpec:
    """Properties of a multi-PE device.

    ``onchip_bandwidth_factor`` scales the off-chip bandwidth to obtain the
    on-chip global-to-local link, and ``movement_efficiency`` derates it;
    both are calibration knobs (defaults 10.0 and 1.0).  ``const_overhead_s``
    is a fixed per-block launch cost, default 0.
    """

    name: str
    pe_count: int
    fp32_per_pe: int
    frequency_hz: float
    offchip_bandwidth_bytes_per_s: float
    onchip_bandwidth_factor: float = 10.0
    movement_efficiency: float = 1.0
    const_overhead_s: float = 0.0

    def __post_init__(self):
        if self.pe_count < 1 or self.fp32_per_pe < 1:
            raise ValueError("pe_count and fp32_per_pe must be positive")
        if self.frequency_hz <= 0 or self.offchip_bandwidth_bytes_per_s <= 0:
            raise ValueError("frequency and bandwidth must be positive")
        if self.onchip_bandwidth_factor <= 0:
            raise ValueError("onchip_bandwidth_factor must be positive")
        if not 0.0 < self.movement_efficiency <= 1.0:
            raise ValueError("movement_efficiency must lie in (0, 1]")
        if self.const_overhead_s < 0:
            raise ValueError("const_overhead_s must be nonnegative")

    @property
    def macs_per_s_per_pe(self) -> float:
        """One MAC per FP32 lane per cycle (no FMA doubling)."""
        return self.fp32_per_pe * self.frequency_hz

    @property
    def onchip_bandwidth_bytes_per_s(self) -> float:
        return (
            self.offchip_bandwidth_bytes_per_s
            * self.onchip_bandwidth_factor
            * self.movement_efficiency
        )


@dataclass(frozen=True)
class TensorShape:
    """Channels x height x width of a feature map (batch dim kept separate)."""

    channels: int
    height: int
    width: int

    def __post_init__(self):
        if min(self.channels, self.height, self.width) < 1:
            raise ValueError("all dims must be >= 1")

    @property
    def elements(self) -> int:
        return self.channels * self.height * self.width


@dataclass(frozen=True)
class ConvLayerSpec:
    """A single convolution layer (bias is carried but never counted)."""

    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    groups: int = 1
    has_bias: bool = False

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError("kernel must be a positive odd integer")
        if self.stride not in (1, 2):
            raise ValueError("stride must be 1 or 2")
        if self.groups < 1:
            raise ValueError("groups must be positive")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ShapeMismatch(
                "in/out channels must be divisible by groups "
                f"({self.in_channels}/{self.out_channels} by {self.groups})"
            )

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        """Output spatial size with the standard k//2 zero padding."""
        p = self.kernel // 2
        return (
            (h + 2 * p - self.kernel) // self.stride + 1,
            (w + 2 * p - self.kernel) // self.stride + 1,
        )


@dataclass(frozen=True)
class BlockSpec:
    """A bottleneck block: 1x1 -> 3x3 -> 1x1, optional SE and downsample.

    The block stride, when present, lives on conv2 (the torchvision
    convention); conv1 and conv3 are always stride 1.
    """

    conv1: ConvLayerSpec
    conv2: ConvLayerSpec
    conv3: ConvLayerSpec
    input_shape: TensorShape
    se_reduction: Optional[int] = None
    has_downsample: bool = False

    def __post_init__(self):
        if self.conv1.kernel != 1 or self.conv3.kernel != 1:
            raise ShapeMismatch("conv1 and conv3 must be 1x1")
        if self.conv2.kernel != 3:
            raise ShapeMismatch("conv2 must be 3x3")
        if self.conv1.stride != 1 or self.conv3.stride != 1:
            raise ShapeMismatch("block stride must live on conv2")
        if self.conv1.out_channels != self.conv2.in_channels:
            raise ShapeMismatch("conv1.out must equal conv2.in")
        if self.conv2.out_channels != self.conv3.in_channels:
            raise ShapeMismatch("conv2.out must equal conv3.in")
        if self.conv1.in_channels != self.input_shape.channels:
            raise ShapeMismatch("conv1.in must match the input shape")
        if self.se_reduction is not None and self.se_reduction < 1:
            raise ValueError("se_reduction must be positive")
        if self.stride > 1 and not self.has_downsample:
            raise ShapeMismatch("a strided block needs a downsample path")

    @property
    def stride(self) -> int:
        return self.conv2.stride

    @property
    def output_shape(self) -> TensorShape:
        h, w = self.conv2.out_hw(self.input_shape.height, self.input_shape.width)
        return TensorShape(self.conv3.out_channels, h, w)

    @property
    def se_hidden(self) -> int:
        """Hidden width of the squeeze-excite bottleneck, 0 if absent."""
        if self.se_reduction is None:
            return 0
        return max(1, self.conv2.out_channels // self.se_reduction)


@dataclass(frozen=True)
class DynamicConfig:
    """Paradigm plus its granularity.

    ``spatial_granularity`` (S) is the edge of the square patch one mask bit
    governs and must divide both sides of the block's output feature;
    setting S to the full feature size degenerates to layer skipping.
    ``channel_granularity`` (G) is the number of consecutive channels one
    mask bit governs and must divide conv2's output width.
    """

    paradigm: Paradigm
    spatial_granularity: Optional[int] = None
    channel_granularity: Optional[int] = None

    def __post_init__(self):
        if self.paradigm is Paradigm.SPATIAL and self.spatial_granularity is None:
            raise ParadigmFieldMissing("spatial paradigm requires spatial_granularity")
        if self.paradigm is Paradigm.CHANNEL and self.channel_granularity is None:
            raise ParadigmFieldMissing("channel paradigm requires channel_granularity")
        for g in (self.spatial_granularity, self.channel_granularity):
            if g is not None and g < 1:
                raise ValueError("granularities must be positive")


@dataclass(frozen=True)
class ActivationProfile:
    """Activation rates of one block.

    ``r_spatial_dilated`` is the rate seen by the first convolution once the
    spatial mask is grown by the conv halo; when left as None the accounting
    modules substitute the one-ring estimate min(1, r * ((S+2)/S)^2).
    """

    r_spatial: float = 1.0
    r_spatial_dilated: Optional[float] = None
    r_channel: float = 1.0
    r_layer: float = 1.0

    def __post_init__(self):
        for r in (self.r_spatial, self.r_channel, self.r_layer):
            if not 0.0 <= r <= 1.0:
                raise ValueError("activation rates must lie in [0, 1]")
        if self.r_spatial_dilated is not None:
            if not 0.0 <= self.r_spatial_dilated <= 1.0:
                raise ValueError("activation rates must lie in [0, 1]")
            if self.r_spatial_dilated < self.r_spatial:
                raise ValueError("r_spatial_dilated must be >= r_spatial")

    def dilated_or_default(self, granularity: int) -> float:
        if self.r_spatial_dilated is not None:
            return self.r_spatial_dilated
        s = granularity
        return min(1.0, self.r_spatial * ((s + 2) / s) ** 2)


def profile_for(paradigm: Paradigm, rate: float) -> ActivationProfile:
    """Profile with ``rate`` on the field the paradigm reads, 1.0 elsewhere."""
    if paradigm is Paradigm.SPATIAL:
        return ActivationProfile(r_spatial=rate)
    if paradigm is Paradigm.CHANNEL:
        return ActivationProfile(r_channel=rate)
    if paradigm is Paradigm.LAYER:
        return ActivationProfile(r_layer=rate)
    return ActivationProfile()


def enumerate_granularities(feature_size: int) -> tuple[int, ...]:
    """Every valid patch granularity for a square feature, ascending.

    Valid granularities are exactly the positive divisors of the feature
    size, e.g. 56 -> (1, 2, 4, 7, 8, 14, 28, 56).
    """
    if feature_size < 1:
        raise ValueError("feature_size must be >= 1")
    return tuple(d for d in range(1, feature_size + 1) if feature_size % d == 0)


def validate_config(block: BlockSpec, cfg: DynamicConfig) -> DynamicConfig:
    """Check a DynamicConfig against a block's shapes; return it unchanged.

    Raises GranularityMismatch when S does not divide both sides of the
    block's output feature, or G does not divide conv2's width.
    """
    out = block.output_shape
    if cfg.paradigm is Paradigm.SPATIAL:
        s = cfg.spatial_granularity
        if out.height % s or out.width % s:
            raise GranularityMismatch(
                f"S={s} does not divide the {out.height}x{out.width} output feature"
            )
    elif cfg.paradigm is Paradigm.CHANNEL:
        g = cfg.channel_granularity
        if block.conv2.out_channels % g:
            raise GranularityMismatch(
                f"G={g} does not divide conv2 width {block.conv2.out_channels}"
            )
    return cfg


# ---------------------------------------------------------------------------
# hardware spec files
#
# Plain key = value text, '#' comments.  Units follow the convention of
# device datasheets: MHz for frequency, G (10^9 bytes/s, decimal) for
# bandwidth; everything is converted to Hz and bytes/s on load.
#
#   name = v100
#   pe_count = 80
#   fp32_per_pe = 64
#   frequency_mhz = 1500
#   bandwidth_g = 700
#   onchip_bandwidth_factor = 10.0   (optional)
#   movement_efficiency = 1.0        (optional)
#   const_overhead_us = 0            (optional)
# ---------------------------------------------------------------------------

_REQUIRED_HW_KEYS = ("name", "pe_count", "fp32_per_pe", "frequency_mhz", "bandwidth_g")


def _parse_kv_file(text: str, path: str) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SpecFileError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key or not value:
            raise SpecFileError(f"{path}:{lineno}: empty key or value")
        values[key] = value
    return values


def parse_hardware_text(text: str, path: str = "<hardware>") -> HardwareSpec:
    values = _parse_kv_file(text, path)
    missing = [k for k in _REQUIRED_HW_KEYS if k not in values]
    if missing:
        raise SpecFileError(f"{path}: missing keys {missing}")
    try:
        return HardwareSpec(
            name=values["name"],
            pe_count=int(values["pe_count"]),
            fp32_per_pe=int(values["fp32_per_pe"]),
            frequency_hz=float(values["frequency_mhz"]) * 1e6,
            offchip_bandwidth_bytes_per_s=float(values["bandwidth_g"]) * 1e9,
            onchip_bandwidth_factor=float(values.get("onchip_bandwidth_factor", 10.0)),
            movement_efficiency=float(values.get("movement_efficiency", 1.0)),
            const_overhead_s=float(values.get("const_overhead_us", 0.0)) * 1e-6,
        )
    except ValueError as exc:
        raise SpecFileError(f"{path}: {exc}") from exc


def format_hardware(spec: HardwareSpec) -> str:
    """Spec-file text for a HardwareSpec; round-trips bit-exactly."""
    lines = [
        f"name = {spec.name}",
        f"pe_count = {spec.pe_count}",
        f"fp32_per_pe = {spec.fp32_per_pe}",
        f"frequency_mhz = {spec.frequency_hz / 1e6!r}",
        f"bandwidth_g = {spec.offchip_bandwidth_bytes_per_s / 1e9!r}",
        f"onchip_bandwidth_factor = {spec.onchip_bandwidth_factor!r}",
        f"movement_efficiency = {spec.movement_efficiency!r}",
        f"const_overhead_us = {spec.const_overhead_s * 1e6!r}",
    ]
    return "\n".join(lines) + "\n"


def hardware_preset_names() -> tuple[str, ...]:
    return tuple(sorted(_HARDWARE_PRESETS))


def load_hardware(source: Union[str, Path, Mapping, HardwareSpec]) -> HardwareSpec:
    """Resolve a device: preset name, spec-file path, mapping, or spec.

    Preset names are case-insensitive ("V100", "TX2", ...).  Anything with a
    path separator or a .hw suffix is read as a spec file.
    """
    if isinstance(source, HardwareSpec):
        return source
    if isinstance(source, Mapping):
        return HardwareSpec(**source)
    if isinstance(source, Path) or str(source).endswith(".hw") or "/" in str(source):
        path = Path(source)
        if not path.exists():
            raise UnknownDevice(f"no hardware spec file at {path}")
        return parse_hardware_text(path.read_text(), str(path))
    key = str(source).lower()
    if key not in _HARDWARE_PRESETS:
        raise UnknownDevice(
            f"unknown device {source!r}; presets: {', '.join(hardware_preset_names())}"
        )
    resource = importlib.resources.files("dynlat.data.hardware").joinpath(
        _HARDWARE_PRESETS[key]
    )
    return parse_hardware_text(resource.read_text(), _HARDWARE_PRESETS[key])


def with_overrides(spec: HardwareSpec, **kwargs) -> HardwareSpec:
    """Copy of a HardwareSpec with some fields replaced."""
    return replace(spec, **kwargs)
