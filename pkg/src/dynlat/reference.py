"""Dense numerical executor for the mask-and-compute block semantics.

This module is an oracle, not a fast path.  It runs bottleneck blocks two
ways - the inference-style sparse pipeline (gather / compute / scatter, or
filter selection for channel skipping) and the training-style dense-masked
form - so the two can be checked against each other to float64 tolerance.
Batch-norm and nonlinearities are folded out: only the conv/mask/residual
algebra is verified.

Everything is float64 and seeded; any case can be replayed from its
(shape, paradigm, granularity, seed) descriptor.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.ndimage import binary_dilation

from .core import BlockSpec, ConvLayerSpec, DynamicConfig, Paradigm, TensorShape
from .errors import GranularityMismatch, MaskShapeMismatch, ShapeMismatch, SpecFileError


# ---------------------------------------------------------------------------
# convolution primitives
# ---------------------------------------------------------------------------


def _conv_raw(x, w, stride=1, pad=0, groups=1):
    """Direct convolution on (N, C, H, W) with explicit zero padding."""
    n, c, _, _ = x.shape
    c_out, c_in_g, kh, kw = w.shape
    if c != c_in_g * groups:
        raise ShapeMismatch(f"input has {c} channels, weights expect {c_in_g * groups}")
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    windows = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    if groups == 1:
        return np.einsum("nchwij,ocij->nohw", windows, w, optimize=True)
    out_per_g = c_out // groups
    parts = []
    for g in range(groups):
        xg = windows[:, g * c_in_g : (g + 1) * c_in_g]
        wg = w[g * out_per_g : (g + 1) * out_per_g]
        parts.append(np.einsum("nchwij,ocij->nohw", xg, wg, optimize=True))
    return np.concatenate(parts, axis=1)


def conv2d_direct(x: np.ndarray, layer: ConvLayerSpec, weights: np.ndarray) -> np.ndarray:
    """Standard direct convolution with k//2 zero padding, bias-free."""
    if x.ndim != 4:
        raise ShapeMismatch("expected (N, C, H, W) input")
    if x.shape[1] != layer.in_channels:
        raise ShapeMismatch(
            f"input has {x.shape[1]} channels, layer expects {layer.in_channels}"
        )
    expected = (
        layer.out_channels,
        layer.in_channels // layer.groups,
        layer.kernel,
        layer.kernel,
    )
    if weights.shape != expected:
        raise ShapeMismatch(f"weights {weights.shape} != expected {expected}")
    return _conv_raw(x, weights, stride=layer.stride, pad=layer.kernel // 2,
                     groups=layer.groups)


# ---------------------------------------------------------------------------
# masks and maskers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SpatialMask:
    """Coarse patch decisions plus their nearest-neighbor upsampling.

    ``coarse`` is (N, H/S, W/S) boolean; ``upsampled`` replicates every cell
    over its S x S patch.  ``soft`` carries the relaxed coarse mask in
    training mode.
    """

    coarse: np.ndarray
    upsampled: np.ndarray
    granularity: int
    soft: Optional[np.ndarray] = None

    @property
    def rate(self) -> float:
        return float(self.upsampled.mean())


@dataclass(frozen=True)
class ChannelMask:
    """Per-group channel decisions; ``expanded`` replicates them G-fold."""

    coarse: np.ndarray
    expanded: np.ndarray
    granularity: int
    soft: Optional[np.ndarray] = None

    @property
    def rate(self) -> float:
        return float(self.expanded.mean())


@dataclass(frozen=True)
class LayerMask:
    """One execute/skip decision per sample."""

    decisions: np.ndarray
    soft: Optional[np.ndarray] = None

    @property
    def rate(self) -> float:
        return float(self.decisions.mean())


@dataclass(frozen=True)
class GatherPlan:
    """(sample, cell-row, cell-col) for every active patch, row-major order."""

    indices: tuple[tuple[int, int, int], ...]

    @property
    def patch_count(self) -> int:
        return len(self.indices)


def build_gather_plan(coarse: np.ndarray) -> GatherPlan:
    idx = np.argwhere(coarse)
    return GatherPlan(tuple((int(n), int(i), int(j)) for n, i, j in idx))


def upsample_coarse(coarse: np.ndarray, s: int) -> np.ndarray:
    return np.repeat(np.repeat(coarse, s, axis=-2), s, axis=-1)


def gumbel_softmax_pair(logits: np.ndarray, tau: float,
                        noise: Optional[np.ndarray] = None) -> np.ndarray:
    """Relaxed probability of the compute decision for 2-way logits.

    ``logits`` has the pair on its last axis; ``noise`` is standard Gumbel
    of the same shape (zeros when omitted).
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    z = logits if noise is None else logits + noise
    gap = (z[..., 1] - z[..., 0]) / tau
    return 1.0 / (1.0 + np.exp(gap))


def spatial_masker_forward(
    x: np.ndarray,
    weights: np.ndarray,
    s: int,
    mode: str = "inference",
    tau: Optional[float] = None,
    rng: Optional[np.random.Generator] = None,
) -> SpatialMask:
    """Adaptive average pool to the coarse grid, 1x1 conv to 2 logits, decide.

    Inference picks argmax per cell (channel 0, "compute", wins ties).
    Training mode perturbs the logits with seeded Gumbel noise and keeps the
    relaxed mask alongside the hard straight-through decisions.
    """
    n, c, h, w = x.shape
    if h % s or w % s:
        raise GranularityMismatch(f"S={s} does not divide {h}x{w}")
    pooled = x.reshape(n, c, h // s, s, w // s, s).mean(axis=(3, 5))
    logits = np.einsum("nchw,oc->nohw", pooled, weights.reshape(2, c))
    logits = np.moveaxis(logits, 1, -1)  # (n, hc, wc, 2)
    soft = None
    if mode == "train":
        noise = rng.gumbel(size=logits.shape) if rng is not None else None
        soft = gumbel_softmax_pair(logits, tau, noise)
        z = logits if noise is None else logits + noise
        coarse = z[..., 0] >= z[..., 1]
    elif mode == "inference":
        coarse = logits[..., 0] >= logits[..., 1]
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return SpatialMask(coarse, upsample_coarse(coarse, s), s, soft)


def channel_masker_forward(
    x: np.ndarray,
    weights: tuple[np.ndarray, np.ndarray],
    g: int,
    mode: str = "inference",
    tau: Optional[float] = None,
    rng: Optional[np.random.Generator] = None,
) -> ChannelMask:
    """Global average pool, 2-layer ReLU MLP, one keep/skip pair per group."""
    w1, w2 = weights
    hidden_w, c = w1.shape
    if x.shape[1] != c:
        raise ShapeMismatch(f"input has {x.shape[1]} channels, masker expects {c}")
    if w2.shape[1] != hidden_w or w2.shape[0] % 2:
        raise ShapeMismatch("second MLP layer must map hidden -> 2*D")
    d = w2.shape[0] // 2
    gap = x.mean(axis=(2, 3))
    hidden = np.maximum(gap @ w1.T, 0.0)
    logits = (hidden @ w2.T).reshape(-1, d, 2)
    soft = None
    if mode == "train":
        noise = rng.gumbel(size=logits.shape) if rng is not None else None
        soft = gumbel_softmax_pair(logits, tau, noise)
        z = logits if noise is None else logits + noise
        coarse = z[..., 0] >= z[..., 1]
    elif mode == "inference":
        coarse = logits[..., 0] >= logits[..., 1]
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return ChannelMask(coarse, np.repeat(coarse, g, axis=1), g, soft)


def masker_hidden_width(d: int) -> int:
    """Hidden units of the channel masker MLP: max(D//16, 16)."""
    return max(d // 16, 16)


def dilate_and_rates(mask: SpatialMask, kernel: int) -> tuple[float, float, np.ndarray]:
    """Exact activation rates before and after growing by the conv halo.

    The upsampled mask is dilated by (kernel-1)//2 in Chebyshev distance
    (a k x k square structuring element), clipped at the borders.  Returns
    (r_spatial, r_spatial_dilated, dilated_mask).
    """
    if kernel % 2 == 0:
        raise ValueError("kernel must be odd")
    up = mask.upsampled
    if kernel == 1:
        dilated = up.copy()
    else:
        structure = np.ones((kernel, kernel), dtype=bool)
        dilated = np.stack([binary_dilation(m, structure=structure) for m in up])
    return float(up.mean()), float(dilated.mean()), dilated


def fused_masker_weight_identity(weights: np.ndarray) -> np.ndarray:
    """Collapse 2-logit 1x1 masker weights to a single decision channel.

    Convolution is linear, so argmax between the two output channels equals
    the sign test of a single channel convolved with W0 - W1 (ties taken as
    "compute", matching the argmax rule).
    """
    if weights.shape[0] != 2 or weights.shape[-2:] != (1, 1):
        raise ShapeMismatch("expected (2, C, 1, 1) masker weights")
    return weights[0:1] - weights[1:2]


# ---------------------------------------------------------------------------
# block execution
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BlockWeights:
    """Bias-free weights of one bottleneck block."""

    w1: np.ndarray
    w2: np.ndarray
    w3: np.ndarray
    w_down: Optional[np.ndarray] = None


def make_block_weights(block: BlockSpec, rng: np.random.Generator) -> BlockWeights:
    """Random spherical weights scaled by 1/sqrt(fan_in)."""

    def draw(layer):
        fan_in = (layer.in_channels // layer.groups) * layer.kernel ** 2
        shape = (layer.out_channels, layer.in_channels // layer.groups,
                 layer.kernel, layer.kernel)
        return rng.standard_normal(shape) / np.sqrt(fan_in)

    w_down = None
    if block.has_downsample:
        down = _down_layer(block)
        w_down = rng.standard_normal(
            (down.out_channels, down.in_channels, 1, 1)
        ) / np.sqrt(down.in_channels)
    return BlockWeights(draw(block.conv1), draw(block.conv2), draw(block.conv3), w_down)


def _down_layer(block: BlockSpec) -> ConvLayerSpec:
    return ConvLayerSpec(
        block.input_shape.channels, block.conv3.out_channels, 1, block.stride
    )


def _skip_path(x, block, bw):
    if block.has_downsample:
        return conv2d_direct(x, _down_layer(block), bw.w_down)
    return x.copy()


def _check_spatial_mask(mask: SpatialMask, block: BlockSpec, n: int):
    out = block.output_shape
    s = mask.granularity
    if out.height % s or out.width % s:
        raise GranularityMismatch(f"S={s} does not divide {out.height}x{out.width}")
    want = (n, out.height // s, out.width // s)
    if mask.coarse.shape != want:
        raise MaskShapeMismatch(f"coarse mask {mask.coarse.shape} != {want}")
    if mask.upsampled.shape != (n, out.height, out.width):
        raise MaskShapeMismatch("upsampled mask does not match the output feature")


def block_forward_dense_masked(
    x: np.ndarray, bw: BlockWeights, block: BlockSpec, cfg: DynamicConfig, mask
) -> np.ndarray:
    """Training-style forward: compute densely, apply masks multiplicatively.

    Spatial masks scale the final conv output before the residual add;
    channel masks scale conv2's input and output; the layer decision scales
    the whole conv path.  Skipped positions therefore carry the skip value.
    """
    n = x.shape[0]
    skip = _skip_path(x, block, bw)
    if cfg.paradigm is Paradigm.SPATIAL:
        _check_spatial_mask(mask, block, n)
        y = conv2d_direct(x, block.conv1, bw.w1)
        y = conv2d_direct(y, block.conv2, bw.w2)
        y = conv2d_direct(y, block.conv3, bw.w3)
        return skip + mask.upsampled[:, None].astype(x.dtype) * y
    if cfg.paradigm is Paradigm.CHANNEL:
        m = mask.expanded
        if m.shape != (n, block.conv2.out_channels):
            raise MaskShapeMismatch(
                f"channel mask {m.shape} != {(n, block.conv2.out_channels)}"
            )
        m = m[:, :, None, None].astype(x.dtype)
        y = conv2d_direct(x, block.conv1, bw.w1)
        y = conv2d_direct(y * m, block.conv2, bw.w2)
        y = conv2d_direct(y * m, block.conv3, bw.w3)
        return skip + y
    if cfg.paradigm is Paradigm.LAYER:
        d = mask.decisions
        if d.shape != (n,):
            raise MaskShapeMismatch(f"layer mask {d.shape} != {(n,)}")
        y = conv2d_direct(x, block.conv1, bw.w1)
        y = conv2d_direct(y, block.conv2, bw.w2)
        y = conv2d_direct(y, block.conv3, bw.w3)
        return skip + d[:, None, None, None].astype(x.dtype) * y
    # static: plain dense block
    y = conv2d_direct(x, block.conv1, bw.w1)
    y = conv2d_direct(y, block.conv2, bw.w2)
    y = conv2d_direct(y, block.conv3, bw.w3)
    return skip + y


def block_forward_sparse(
    x: np.ndarray,
    bw: BlockWeights,
    block: BlockSpec,
    cfg: DynamicConfig,
    mask,
    _misplace_first_patch: bool = False,
) -> np.ndarray:
    """Inference-style forward that only computes what the mask selects.

    Spatial: dense conv1, gather active patches with their conv halo, run
    conv2/conv3 on the gathered stack, scatter-add onto the skip path.
    Channel: run only the surviving filters/channels of the first two convs.
    Layer: execute or skip whole samples.

    ``_misplace_first_patch`` is a test-only fault hook: it scatters the
    first patch one cell off so equivalence checks can prove they would
    catch a broken scatter index.
    """
    n = x.shape[0]
    out = block.output_shape
    skip = _skip_path(x, block, bw)
    if cfg.paradigm is Paradigm.SPATIAL:
        _check_spatial_mask(mask, block, n)
        s = mask.granularity
        stride = block.stride
        k = block.conv2.kernel
        pad = k // 2
        halo = (s - 1) * stride + k
        h1 = conv2d_direct(x, block.conv1, bw.w1)
        h1p = np.pad(h1, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        plan = build_gather_plan(mask.coarse)
        result = skip
        for p_idx, (ni, ci, cj) in enumerate(plan.indices):
            r0, c0 = ci * s, cj * s
            patch_in = h1p[
                ni : ni + 1,
                :,
                r0 * stride : r0 * stride + halo,
                c0 * stride : c0 * stride + halo,
            ]
            y = _conv_raw(patch_in, bw.w2, stride=stride, pad=0,
                          groups=block.conv2.groups)
            y = _conv_raw(y, bw.w3, stride=1, pad=0)
            if _misplace_first_patch and p_idx == 0:
                r0 = (r0 + s) % out.height
            result[ni, :, r0 : r0 + s, c0 : c0 + s] += y[0]
        return result
    if cfg.paradigm is Paradigm.CHANNEL:
        if block.conv2.groups != 1:
            raise ShapeMismatch("sparse channel execution requires groups == 1")
        m = mask.expanded
        if m.shape != (n, block.conv2.out_channels):
            raise MaskShapeMismatch(
                f"channel mask {m.shape} != {(n, block.conv2.out_channels)}"
            )
        result = skip
        for ni in range(n):
            sel = np.flatnonzero(m[ni])
            if sel.size == 0:
                continue
            xi = x[ni : ni + 1]
            h1 = _conv_raw(xi, bw.w1[sel], stride=1, pad=0)
            h2 = _conv_raw(h1, bw.w2[np.ix_(sel, sel)], stride=block.conv2.stride,
                           pad=block.conv2.kernel // 2)
            h3 = _conv_raw(h2, bw.w3[:, sel], stride=1, pad=0)
            result[ni] += h3[0]
        return result
    if cfg.paradigm is Paradigm.LAYER:
        d = mask.decisions
        if d.shape != (n,):
            raise MaskShapeMismatch(f"layer mask {d.shape} != {(n,)}")
        result = skip
        for ni in np.flatnonzero(d):
            xi = x[ni : ni + 1]
            y = conv2d_direct(xi, block.conv1, bw.w1)
            y = conv2d_direct(y, block.conv2, bw.w2)
            y = conv2d_direct(y, block.conv3, bw.w3)
            result[ni] += y[0]
        return result
    return block_forward_dense_masked(x, bw, block, cfg, mask)


# ---------------------------------------------------------------------------
# seeded equivalence suite
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EquivalenceCase:
    """Replayable descriptor of one sparse-vs-dense comparison."""

    paradigm: Paradigm
    channels: int
    height: int
    width: int
    granularity: int
    seed: int
    tolerance: float = 1e-9


def _case_block(case: EquivalenceCase) -> BlockSpec:
    c = case.channels
    mid = max(2, c // 2)
    strided = case.seed % 3 == 1 and case.height % 2 == 0 and case.width % 2 == 0
    widen = case.seed % 4 == 2
    out_c = 2 * c if widen else c
    stride = 2 if strided else 1
    if case.paradigm is Paradigm.SPATIAL and strided:
        half = (case.height // 2, case.width // 2)
        if half[0] % case.granularity or half[1] % case.granularity:
            stride = 1
            out_c = c
    if case.paradigm is Paradigm.CHANNEL:
        mid = max(case.granularity, mid - mid % case.granularity)
    return BlockSpec(
        conv1=ConvLayerSpec(c, mid, 1),
        conv2=ConvLayerSpec(mid, mid, 3, stride),
        conv3=ConvLayerSpec(mid, out_c, 1),
        input_shape=TensorShape(c, case.height, case.width),
        has_downsample=(stride > 1 or out_c != c),
    )


def _case_mask(case, block, rng):
    n = 1 + case.seed % 2
    out = block.output_shape
    rate = 0.1 + 0.8 * rng.random()
    if case.paradigm is Paradigm.SPATIAL:
        coarse = rng.random((n, out.height // case.granularity,
                             out.width // case.granularity)) < rate
        return n, SpatialMask(coarse, upsample_coarse(coarse, case.granularity),
                              case.granularity)
    if case.paradigm is Paradigm.CHANNEL:
        d = block.conv2.out_channels // case.granularity
        coarse = rng.random((n, d)) < rate
        return n, ChannelMask(coarse, np.repeat(coarse, case.granularity, axis=1),
                              case.granularity)
    if case.paradigm is Paradigm.LAYER:
        return n, LayerMask(rng.random(n) < rate)
    return n, None


def run_equivalence_case(case: EquivalenceCase, inject_fault: bool = False) -> float:
    """Max |sparse - dense_masked| for one seeded case."""
    rng = np.random.default_rng(case.seed)
    block = _case_block(case)
    n, mask = _case_mask(case, block, rng)
    bw = make_block_weights(block, rng)
    x = rng.standard_normal((n, case.channels, case.height, case.width))
    if case.paradigm is Paradigm.SPATIAL:
        cfg = DynamicConfig(Paradigm.SPATIAL, spatial_granularity=case.granularity)
    elif case.paradigm is Paradigm.CHANNEL:
        cfg = DynamicConfig(Paradigm.CHANNEL, channel_granularity=case.granularity)
    else:
        cfg = DynamicConfig(case.paradigm)
    dense = block_forward_dense_masked(x, bw, block, cfg, mask)
    fault = (
        inject_fault
        and case.paradigm is Paradigm.SPATIAL
        and mask.coarse.any()
    )
    sparse = block_forward_sparse(x, bw, block, cfg, mask,
                                  _misplace_first_patch=fault)
    return float(np.max(np.abs(sparse - dense)))


def default_cases(per_paradigm: int = 25, max_side: int = 32) -> list[EquivalenceCase]:
    """A deterministic spread of shapes/granularities per paradigm."""
    cases = []
    shapes = [(8, 16, 16), (16, 32, 32), (4, 8, 8), (8, 24, 24)]
    for paradigm in (Paradigm.SPATIAL, Paradigm.CHANNEL, Paradigm.LAYER):
        for i in range(per_paradigm):
            c, h, w = shapes[i % len(shapes)]
            h, w = min(h, max_side), min(w, max_side)
            if paradigm is Paradigm.SPATIAL:
                gran = [1, 2, 4][i % 3]
            elif paradigm is Paradigm.CHANNEL:
                gran = [1, 2][i % 2]
            else:
                gran = 1
            cases.append(EquivalenceCase(paradigm, c, h, w, gran, seed=i))
    return cases


def parse_cases_text(text: str, path: str = "<cases>") -> list[EquivalenceCase]:
    """Parse a case file: one `key=value ...` line per case, '#' comments.

    Keys: paradigm, channels, height, width, granularity, seed, tol
    (tol optional, default 1e-9).
    """
    cases = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        fields = dict(part.split("=", 1) for part in line.split())
        try:
            cases.append(
                EquivalenceCase(
                    paradigm=Paradigm(fields["paradigm"]),
                    channels=int(fields["channels"]),
                    height=int(fields["height"]),
                    width=int(fields["width"]),
                    granularity=int(fields.get("granularity", 1)),
                    seed=int(fields["seed"]),
                    tolerance=float(fields.get("tol", 1e-9)),
                )
            )
        except (KeyError, ValueError) as exc:
            raise SpecFileError(f"{path}:{lineno}: bad case line ({exc})") from exc
    return cases
