"""Command-line interface.

Subcommands: predict-block, predict-net, sweep, flops, ablate-fusion,
verify.  Every command is deterministic given its arguments and emits CSV
with a fixed header; exit codes are 0 (success), 1 (verification failure),
2 (bad arguments, unknown device/network, malformed files), and 3
(validation errors such as a granularity that does not divide its feature).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import reference, zoo
from .core import Paradigm, load_hardware
from .errors import (
    GranularityMismatch,
    MaskShapeMismatch,
    ParadigmFieldMissing,
    PlanLengthMismatch,
    ProfileCountMismatch,
    ShapeMismatch,
    SpecFileError,
    UnknownDevice,
    UnknownNetwork,
)
from .flops import (
    FLOPS_CSV_HEADER,
    block_flops_dynamic,
    block_flops_static,
)
from .latency import (
    LATENCY_CSV_HEADER,
    FusionFlags,
    ablate_fusion,
    predict_block,
)
from .core import profile_for

_VALIDATION_ERRORS = (
    GranularityMismatch,
    ParadigmFieldMissing,
    PlanLengthMismatch,
    ProfileCountMismatch,
    MaskShapeMismatch,
    ShapeMismatch,
)
_ARGUMENT_ERRORS = (UnknownDevice, UnknownNetwork, SpecFileError)

#: edge presets default to single-image inference, the rest to batch 128
_DEFAULT_BATCH = {"tx2": 1, "nano": 1}


def _parse_fuse(text: str) -> FusionFlags:
    if text == "all":
        return FusionFlags.all()
    if text == "none":
        return FusionFlags.none()
    parts = {p.strip() for p in text.split(",") if p.strip()}
    known = {"masker", "gather", "scatter"}
    unknown = parts - known
    if unknown:
        raise argparse.ArgumentTypeError(
            f"unknown fusion names {sorted(unknown)}; pick from {sorted(known)}"
        )
    return FusionFlags(
        fuse_masker_conv1="masker" in parts,
        fuse_gather_conv="gather" in parts,
        fuse_scatter_add="scatter" in parts,
    )


def _parse_floats(text: str) -> list[float]:
    return [float(p) for p in text.split(",") if p.strip()]


def _parse_ints(text: str) -> list[int]:
    return [int(p) for p in text.split(",") if p.strip()]


def _default_batch(device: str, batch) -> int:
    if batch is not None:
        return batch
    return _DEFAULT_BATCH.get(str(device).lower(), 128)


def _emit(lines: list[str], out: str | None):
    text = "\n".join(lines) + "\n"
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _rates_arg(args, n_blocks):
    if args.rates_file:
        values = [
            float(line)
            for line in Path(args.rates_file).read_text().splitlines()
            if line.strip()
        ]
        if len(values) != n_blocks:
            raise ProfileCountMismatch(
                f"{args.rates_file} has {len(values)} rates for {n_blocks} blocks"
            )
        return values
    return args.rate


def _block_cfg(net, stage, paradigm, granularity):
    from .core import DynamicConfig

    if paradigm is Paradigm.SPATIAL:
        return DynamicConfig(paradigm, spatial_granularity=granularity or 1)
    if paradigm is Paradigm.CHANNEL:
        return DynamicConfig(paradigm, channel_granularity=granularity or 1)
    return DynamicConfig(paradigm)


def _predict_row(device, block_id, paradigm, s_val, g_val, rate, batch, pred):
    wl, plan = pred.dominant()
    return ",".join([
        device,
        block_id,
        paradigm.value,
        str(s_val),
        str(g_val),
        f"{rate:.4f}",
        str(batch),
        str(plan.tile),
        str(plan.waves),
        f"{pred.breakdown.data_s * 1e6:.4f}",
        f"{pred.breakdown.compute_s * 1e6:.4f}",
        f"{pred.breakdown.total_s * 1e6:.4f}",
        f"{pred.r_ell:.6f}",
    ])


def _cmd_predict_block(args) -> int:
    hw = load_hardware(args.device)
    net = zoo.build_network(args.net)
    paradigm = Paradigm(args.paradigm)
    batch = _default_batch(args.device, args.batch)
    block = net.template_block(args.stage)
    cfg = _block_cfg(net, args.stage, paradigm, args.granularity)
    prof = profile_for(paradigm, args.rate)
    pred = predict_block(block, cfg, prof, args.fuse, hw, batch)
    s_val = args.granularity if paradigm is Paradigm.SPATIAL else "-"
    g_val = args.granularity if paradigm is Paradigm.CHANNEL else "-"
    _emit(
        [
            LATENCY_CSV_HEADER,
            _predict_row(hw.name, f"s{args.stage}", paradigm, s_val, g_val,
                         args.rate, batch, pred),
        ],
        args.out,
    )
    return 0


def _cmd_predict_net(args) -> int:
    hw = load_hardware(args.device)
    net = zoo.build_network(args.net)
    paradigm = Paradigm(args.paradigm)
    batch = _default_batch(args.device, args.batch)
    plan = zoo.parse_plan(args.plan, net, paradigm) if args.plan else None
    rates = _rates_arg(args, net.block_count)
    pred = zoo.predict_network(net, plan, paradigm, rates, hw, batch, args.fuse)
    lines = [LATENCY_CSV_HEADER]
    per_rates = rates if isinstance(rates, list) else [rates] * net.block_count
    for (inst, bp), rate in zip(pred.block_predictions, per_rates):
        s_val = plan.values[inst.stage - 1] if (plan and paradigm is Paradigm.SPATIAL) else "-"
        g_val = plan.values[inst.stage - 1] if (plan and paradigm is Paradigm.CHANNEL) else "-"
        lines.append(_predict_row(hw.name, inst.block_id, paradigm, s_val, g_val,
                                  rate, batch, bp))
    lines.append(",".join([
        hw.name, "net", paradigm.value, args.plan or "-", "-", "-", str(batch),
        "-", "-", "-", "-",
        f"{pred.total_s * 1e6:.4f}",
        f"{pred.r_ell:.6f}",
    ]))
    _emit(lines, args.out)
    return 0


def _cmd_sweep(args) -> int:
    hw = load_hardware(args.device)
    net = zoo.build_network(args.net)
    paradigm = Paradigm(args.paradigm)
    batch = _default_batch(args.device, args.batch)
    rates = args.rates
    if args.stage is not None:
        grans = args.granularities or [1]
        rows = zoo.sweep_block(net, args.stage, paradigm, grans, rates, hw,
                               batch, args.fuse)
    else:
        plans = [p.strip() for p in (args.plans or "-").split(";") if p.strip()]
        rows = zoo.sweep_network(net, paradigm, plans, rates, hw, batch, args.fuse)
    _emit([zoo.SWEEP_CSV_HEADER] + rows, args.out)
    return 0


def _cmd_flops(args) -> int:
    net = zoo.build_network(args.net)
    paradigm = Paradigm(args.paradigm)
    plan = zoo.parse_plan(args.plan, net, paradigm) if args.plan else None
    rates = _rates_arg(args, net.block_count)
    per_rates = rates if isinstance(rates, list) else [rates] * net.block_count
    lines = [FLOPS_CSV_HEADER]
    for inst, rate in zip(net.blocks, per_rates):
        cfg = zoo.config_for_stage(net, inst.stage, paradigm, plan)
        static = block_flops_static(inst.block)
        dyn = block_flops_dynamic(inst.block, cfg, profile_for(paradigm, rate))
        lines.append(dyn.csv_row(inst.block_id, static))
    report = zoo.network_flops(net, paradigm, plan, rates)
    lines.append(",".join([
        "net", "-", "-", "-", "-", "-",
        f"{report.f_stat:.0f}", f"{report.f_dyn:.2f}", f"{report.ratio:.6f}",
    ]))
    _emit(lines, args.out)
    return 0


def _cmd_ablate_fusion(args) -> int:
    hw = load_hardware(args.device)
    net = zoo.build_network(args.net)
    paradigm = Paradigm(args.paradigm)
    batch = _default_batch(args.device, args.batch)
    block = net.template_block(args.stage)
    cfg = _block_cfg(net, args.stage, paradigm, args.granularity)
    prof = profile_for(paradigm, args.rate)
    table = ablate_fusion(block, cfg, prof, hw, batch)
    lines = ["masker_conv,gather_conv,scatter_add,data_us,compute_us,total_us,r_ell"]
    for flags, pred in table:
        lines.append(",".join([
            str(int(flags.fuse_masker_conv1)),
            str(int(flags.fuse_gather_conv)),
            str(int(flags.fuse_scatter_add)),
            f"{pred.breakdown.data_s * 1e6:.4f}",
            f"{pred.breakdown.compute_s * 1e6:.4f}",
            f"{pred.breakdown.total_s * 1e6:.4f}",
            f"{pred.r_ell:.6f}",
        ]))
    _emit(lines, args.out)
    return 0


def _cmd_verify(args) -> int:
    if args.cases:
        cases = reference.parse_cases_text(Path(args.cases).read_text(), args.cases)
    else:
        cases = reference.default_cases(per_paradigm=args.per_paradigm)
    if args.seed:
        cases = [
            reference.EquivalenceCase(
                c.paradigm, c.channels, c.height, c.width, c.granularity,
                c.seed + args.seed, c.tolerance,
            )
            for c in cases
        ]
    if not cases:
        print("verify: 0 cases, nothing to check")
        return 0
    worst: dict[str, float] = {}
    failures = 0
    for i, case in enumerate(cases):
        fault = args.inject_fault and i == 0
        dev = reference.run_equivalence_case(case, inject_fault=fault)
        key = case.paradigm.value
        worst[key] = max(worst.get(key, 0.0), dev)
        if dev >= case.tolerance:
            failures += 1
    for key in sorted(worst):
        print(f"{key}: worst |delta| = {worst[key]:.3e}")
    print(f"{len(cases)} cases, {failures} failures")
    return 1 if failures else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dynlat",
        description="Latency and FLOPs prediction for dynamic convolution blocks",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, device=True):
        if device:
            p.add_argument("--device", required=True,
                           help="hardware preset name or .hw file path")
        p.add_argument("--net", required=True,
                       help="network preset name or .net file path")
        p.add_argument("--paradigm", required=True,
                       choices=[m.value for m in Paradigm])
        p.add_argument("--batch", type=int, default=None,
                       help="default: 128, or 1 on tx2/nano")
        p.add_argument("--fuse", type=_parse_fuse, default=FusionFlags.all(),
                       help="all, none, or comma list of masker,gather,scatter")
        p.add_argument("--out", default=None, help="write CSV here instead of stdout")

    p = sub.add_parser("predict-block", help="predict one block's latency")
    add_common(p)
    p.add_argument("--stage", type=int, required=True)
    p.add_argument("--granularity", type=int, default=None, help="S or G")
    p.add_argument("--rate", type=float, default=1.0)
    p.set_defaults(func=_cmd_predict_block)

    p = sub.add_parser("predict-net", help="predict whole-network latency")
    add_common(p)
    p.add_argument("--plan", default=None, help='per-stage S/G, e.g. "4-4-2-1"')
    p.add_argument("--rate", type=float, default=1.0)
    p.add_argument("--rates-file", default=None,
                   help="newline-separated per-block rates in network order")
    p.set_defaults(func=_cmd_predict_net)

    p = sub.add_parser("sweep", help="grid of predictions as CSV")
    add_common(p)
    p.add_argument("--stage", type=int, default=None,
                   help="sweep this stage's block; omit for network sweeps")
    p.add_argument("--granularities", type=_parse_ints, default=None,
                   help="comma list of S or G values")
    p.add_argument("--plans", default=None,
                   help="semicolon list of plans for network sweeps")
    p.add_argument("--rates", type=_parse_floats,
                   default=[round(0.1 * i, 1) for i in range(1, 11)])
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("flops", help="per-block MAC accounting as CSV")
    p.add_argument("--net", required=True)
    p.add_argument("--paradigm", required=True, choices=[m.value for m in Paradigm])
    p.add_argument("--plan", default=None)
    p.add_argument("--rate", type=float, default=1.0)
    p.add_argument("--rates-file", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_flops)

    p = sub.add_parser("ablate-fusion", help="all 8 fusion-flag combinations")
    add_common(p)
    p.add_argument("--stage", type=int, required=True)
    p.add_argument("--granularity", type=int, default=None)
    p.add_argument("--rate", type=float, default=0.6)
    p.set_defaults(func=_cmd_ablate_fusion)

    p = sub.add_parser("verify", help="sparse-vs-dense executor equivalence")
    p.add_argument("--cases", default=None, help="case descriptor file")
    p.add_argument("--per-paradigm", type=int, default=10)
    p.add_argument("--seed", type=int, default=0, help="offset for case seeds")
    p.add_argument("--inject-fault", action="store_true",
                   help="test-only: misplace one scatter index, must fail")
    p.set_defaults(func=_cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except _ARGUMENT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
