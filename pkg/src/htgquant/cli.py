"""``htgquant`` command-line entry point.

Subcommands: ``trace-gen``, ``quantize``, ``eval``, ``plan`` and ``report``.
Every command accepts ``--config FILE.json``; flags given on the command
line override the file. The seed falls back to ``$HTG_SEED`` and then 0.

Exit codes: 0 success, 1 usage error, 2 data error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import __version__
from .bundle import load_block, load_bundle, model_digest, read_bundle_manifest, save_block, save_bundle
from .quantizer import error_metrics
from .smoothing import ShiftVector, shift_from_range
from .temporal_clustering import LINKAGES, TemporalPlan, cluster_timesteps, objective, single_group_plan
from .toymodel import (
    BLOCK_INPUT,
    BLOCK_OUTPUT,
    COMPARE_TAPS,
    HTG_LAYERS,
    BlockConfig,
    IncompleteTraceError,
    calibrate_block,
    capture_trace,
    compare_paths,
    init_block,
    reference_outputs,
    storage_overhead,
)
from .trace_io import (
    DRIFT_PROFILES,
    SyntheticSpec,
    TraceFormatError,
    generate_trace,
    load_trace,
    read_manifest,
    save_trace,
    spec_metadata,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2
ABLATIONS = {"baseline": (False, False), "op1": (True, False), "op2": (False, True), "op1+op2": (True, True)}
METRICS = ("mse", "max_abs_err", "sqnr_db")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


@dataclass(frozen=True)
class RunConfig:
    """Merged settings of one invocation (defaults < config file < flags)."""

    weight_bits: int | None = 8
    act_bits: int | None = 8
    groups: int | str = "auto"
    alpha: float = 0.99
    linkage: str = "ward"
    clip_quantile: float = 1.0
    shift: bool = True
    scale: bool = True
    seed: int = 0

    def block_config(self) -> BlockConfig:
        d = asdict(self)
        d.pop("seed")
        return BlockConfig(**d)


_RUN_KEYS = {f.name for f in fields(RunConfig)}


def _seed_fallback() -> int:
    raw = os.environ.get("HTG_SEED")
    if raw is None or raw == "":
        return 0
    try:
        return int(raw)
    except ValueError as exc:
        raise UsageError(f"HTG_SEED must be an integer, got {raw!r}") from exc


def _groups_arg(text: str):
    if text == "auto":
        return "auto"
    try:
        g = int(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError("expected 'auto' or a positive integer") from exc
    if g < 1:
        raise argparse.ArgumentTypeError("groups must be positive")
    return g


def _bits_arg(text: str) -> int:
    b = int(text)
    if not 2 <= b <= 16:
        raise argparse.ArgumentTypeError("bit width must be in [2, 16]")
    return b


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise UsageError(f"config file {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError("config file must hold one JSON object")
    return {k.replace("-", "_"): v for k, v in data.items()}


def _merged(ns: argparse.Namespace, defaults: dict) -> dict:
    """defaults < config file < explicitly given flags; seed falls back to $HTG_SEED."""
    given = {k: v for k, v in vars(ns).items() if k not in ("command", "config", "handler")}
    config = _load_config(getattr(ns, "config", None))
    unknown = set(config) - set(defaults)
    if unknown:
        raise UsageError(f"unknown config keys for this command: {', '.join(sorted(unknown))}")
    out = dict(defaults)
    out.update(config)
    out.update(given)
    if "seed" in out and out["seed"] is None:
        out["seed"] = _seed_fallback()
    return out


def _run_config(opts: dict) -> RunConfig:
    try:
        rc = RunConfig(**{k: opts[k] for k in _RUN_KEYS if k in opts})
        rc.block_config()
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    if rc.linkage not in LINKAGES:
        raise UsageError(f"linkage must be one of {LINKAGES}")
    return rc


def _ensure_dir(path) -> Path:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {path}: {exc}") from exc
    if not os.access(path, os.W_OK):
        raise DataError(f"{path} is not writable")
    return path


def _format_value(v: float) -> str:
    return repr(float(v))


# --------------------------------------------------------------------------
# trace-gen

TRACE_DEFAULTS = {
    "out": None,
    "model": None,
    "channels": 64,
    "heads": 4,
    "tokens": 16,
    "samples": 32,
    "timesteps": 100,
    "outlier_fraction": 0.05,
    "outlier_magnitude": 20.0,
    "outlier_spread": 1.0,
    "drift_profile": "sign_flip_at_end",
    "base_std": 1.0,
    "seed": None,
    "summary_only": False,
}


# a channel whose abs-max exceeds this multiple of the median channel's counts as an outlier
OUTLIER_RATIO = 4.0


def _outlier_summary(trace) -> list[str]:
    lines = []
    for name in sorted(trace):
        tr = trace[name]
        am = np.stack([tr.summary(t).abs_max for t in range(1, tr.num_timesteps + 1)]).max(axis=0)
        med = float(np.median(am))
        ratio = am / med if med > 0 else np.zeros_like(am)
        n_out = int((ratio > OUTLIER_RATIO).sum())
        lines.append(f"  {name:<18} channels={tr.channels:<4} outlier_channels={n_out:<3} max/median={ratio.max():.2f}")
    return lines


def cmd_trace_gen(ns) -> int:
    o = _merged(ns, TRACE_DEFAULTS)
    if not o["out"] or not o["model"]:
        raise UsageError("trace-gen needs --out and --model")
    try:
        spec = SyntheticSpec(
            channels=o["channels"],
            tokens=o["tokens"],
            samples=o["samples"],
            timesteps=o["timesteps"],
            outlier_channel_fraction=o["outlier_fraction"],
            outlier_magnitude=o["outlier_magnitude"],
            outlier_spread=o["outlier_spread"],
            drift_profile=o["drift_profile"],
            base_std=o["base_std"],
            seed=o["seed"],
        )
        spec.validate()
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc

    model_dir = Path(o["model"])
    if (model_dir / "manifest.json").exists():
        block = load_block(model_dir)
        if block.hidden != spec.channels:
            raise DataError(f"model at {model_dir} has hidden={block.hidden}, trace asks for {spec.channels} channels")
        print(f"using toy block from {model_dir}")
    else:
        try:
            block = init_block(hidden=spec.channels, heads=o["heads"], seed=spec.seed)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        save_block(block, _ensure_dir(model_dir))
        print(f"initialized toy block (hidden={block.hidden}, heads={block.heads}, seed={spec.seed}) at {model_dir}")

    block_input = generate_trace(spec)
    trace = capture_trace(block, block_input, tokens=spec.tokens, summary_only=o["summary_only"])
    out = _ensure_dir(o["out"])
    meta = spec_metadata(spec) | {"model_sha256": model_digest(model_dir), "summary_only": o["summary_only"]}
    save_trace(trace, out, meta)
    print(f"wrote {len(trace)} layers x {spec.timesteps} timesteps to {out}")
    print("channel-outlier summary (abs-max over all t, ratio to the median channel):")
    print("\n".join(_outlier_summary(trace)))
    return EXIT_OK


# --------------------------------------------------------------------------
# quantize

QUANT_DEFAULTS = {"trace": None, "model": None, "out": None, "float": False} | asdict(RunConfig())


def cmd_quantize(ns) -> int:
    o = _merged(ns, QUANT_DEFAULTS)
    if not (o["trace"] and o["model"] and o["out"]):
        raise UsageError("quantize needs --trace, --model and --out")
    rc = _run_config(o)
    block, trace = load_block(o["model"]), load_trace(o["trace"])
    sha = model_digest(o["model"])
    meta = read_manifest(o["trace"]).get("metadata", {})
    out = _ensure_dir(o["out"])
    if o["float"]:
        T = next(iter(trace.values())).num_timesteps
        cfg = BlockConfig(weight_bits=None, act_bits=None, groups=1, shift=False, scale=False)
        save_bundle(None, out, sha, cfg, single_group_plan(T), calibration=meta)
        print(f"wrote float bundle (no quantization, no transforms) to {out}")
        print("storage overhead: 0 bytes")
        return EXIT_OK
    cfg = rc.block_config()
    qblock = calibrate_block(block, trace, cfg)
    save_bundle(qblock, out, sha, cfg, calibration=meta)
    plan = qblock.plan
    print(f"calibrated W{cfg.weight_bits}A{cfg.act_bits} shift={cfg.shift} scale={cfg.scale} alpha={cfg.alpha}")
    print(f"plan: G={plan.num_groups} boundaries={list(plan.boundaries)} linkage={plan.linkage}")
    print(f"storage overhead: {storage_overhead(qblock)} bytes")
    print(f"wrote bundle to {out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# eval

EVAL_DEFAULTS = {"bundle": None, "model": None, "trace": None, "seed": None, "samples": 4, "out": None, "ablate": None}


def _eval_inputs(o, block, T: int, calibration: dict) -> np.ndarray:
    """Block inputs ``(T, samples, tokens, hidden)``.

    With ``--trace`` alone the trace's own block inputs are used. Otherwise
    fresh samples are drawn with noise seed ``seed`` from the synthetic spec
    of ``--trace`` or, failing that, of the calibration trace recorded in
    the bundle, so the outlier layout matches calibration.
    """
    if o["trace"] is not None and not o["_fresh"]:
        tr = load_trace(o["trace"]).get(BLOCK_INPUT)
        if tr is None or tr.kind != "full":
            raise DataError(f"{o['trace']} holds no full block.input records to evaluate on")
        meta = read_manifest(o["trace"]).get("metadata", {}).get("synthetic", {})
        tokens = int(meta.get("tokens", 16))
        if tr.num_timesteps != T:
            raise DataError(f"trace covers {tr.num_timesteps} timesteps, bundle plan has {T}")
        return tr.data.astype(np.float64).reshape(T, -1, tokens, block.hidden)
    if o["trace"] is not None:
        meta = read_manifest(o["trace"]).get("metadata", {}).get("synthetic")
        if meta is None:
            raise DataError(f"{o['trace']} has no synthetic spec to draw fresh samples from")
    else:
        meta = calibration.get("synthetic") or {"channels": block.hidden, "timesteps": T, "seed": o["seed"]}
    try:
        spec = SyntheticSpec(**(meta | {"samples": o["samples"], "noise_seed": o["seed"]}))
    except TypeError as exc:
        raise DataError(f"unreadable synthetic spec: {exc}") from exc
    if spec.timesteps != T:
        raise DataError(f"trace covers {spec.timesteps} timesteps, bundle plan has {T}")
    if spec.channels != block.hidden:
        raise DataError(f"trace has {spec.channels} channels, model hidden size is {block.hidden}")
    data = generate_trace(spec).data.astype(np.float64)
    return data.reshape(T, spec.samples, spec.tokens, block.hidden)


def _float_rows(ref: dict, T: int):
    exact = {name: error_metrics(ref[name], ref[name]) for name in COMPARE_TAPS}
    rows = [(name, t, exact[name]) for name in COMPARE_TAPS for t in range(1, T + 1)]
    return rows, exact


def _write_csv(path, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "timestep", "metric", "value"])
    w.writerows(rows)
    try:
        Path(path).write_text(buf.getvalue())
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from exc


def _metric_rows(rows, per_layer):
    out = []
    for name, t, rep in rows:
        for m in METRICS:
            out.append([name, t, m, _format_value(getattr(rep, m))])
    for name, rep in per_layer.items():
        for m in METRICS:
            out.append([name, "all", m, _format_value(getattr(rep, m))])
    return out


def cmd_eval(ns) -> int:
    o = _merged(ns, EVAL_DEFAULTS)
    if not (o["bundle"] and o["model"] and o["out"]):
        raise UsageError("eval needs --bundle, --model and --out")
    # an explicit --seed (or config seed) draws fresh noise, otherwise the trace records are reused
    o["_fresh"] = "seed" in vars(ns) or "seed" in _load_config(getattr(ns, "config", None))
    if o["samples"] < 1:
        raise UsageError("--samples must be positive")
    manifest = read_bundle_manifest(o["bundle"])
    block = load_block(o["model"])
    if manifest["model_sha256"] != model_digest(o["model"]):
        raise DataError("bundle was calibrated for a different model (sha256 mismatch)")
    plan = TemporalPlan.from_dict(manifest["plan"])
    T = plan.num_timesteps
    inputs = _eval_inputs(o, block, T, manifest.get("calibration", {}))
    ref = reference_outputs(block, inputs)

    if o["ablate"]:
        ops = [s.strip() for s in o["ablate"].split(",") if s.strip()]
        if not ops or any(op not in ("op1", "op2") for op in ops) or len(set(ops)) != len(ops):
            raise UsageError("--ablate takes a comma list drawn from op1,op2")
        if o["trace"] is None:
            raise UsageError("--ablate re-calibrates and needs the calibration --trace")
        trace = load_trace(o["trace"])
        base = BlockConfig(**manifest["config"])
        if base.weight_bits is None and base.act_bits is None:
            raise DataError("cannot ablate a float bundle")
        csv_rows, results = [], []
        for label, (sh, sc) in ABLATIONS.items():
            if (sh and "op1" not in ops) or (sc and "op2" not in ops):
                continue
            cfg = BlockConfig(**(base.to_dict() | {"shift": sh, "scale": sc}))
            pc = compare_paths(block, calibrate_block(block, trace, cfg), inputs, reference=ref)
            results.append((label, pc.end_to_end.sqnr_db))
            csv_rows.append([BLOCK_OUTPUT, "all", f"sqnr_db:{label}", _format_value(pc.end_to_end.sqnr_db)])
        _write_csv(o["out"], csv_rows)
        print(f"ablation (W{base.weight_bits}A{base.act_bits}, end-to-end SQNR):")
        for label, v in results:
            print(f"  {label:<9} {v:8.3f} dB")
        return EXIT_OK

    qblock = load_bundle(o["bundle"])
    if qblock is None:
        rows, per_layer = _float_rows(ref, T)
    else:
        if qblock.hidden != block.hidden:
            raise DataError("bundle and model hidden sizes differ")
        pc = compare_paths(block, qblock, inputs, reference=ref)
        rows, per_layer = pc.rows, dict(pc.per_layer)
    _write_csv(o["out"], _metric_rows(rows, per_layer))
    sq = np.array([rep.sqnr_db for _, _, rep in rows])
    finite = {k: v.sqnr_db for k, v in per_layer.items() if math.isfinite(v.sqnr_db)}
    worst = min(finite, key=finite.get) if finite else None
    worst_txt = f"{worst} ({finite[worst]:.3f} dB)" if worst else "none (all layers exact)"
    print(
        f"median SQNR {float(np.median(sq)):.3f} dB over {len(rows)} (layer, t) rows; "
        f"worst layer {worst_txt}; end-to-end {per_layer[BLOCK_OUTPUT].sqnr_db:.3f} dB"
    )
    return EXIT_OK


# --------------------------------------------------------------------------
# plan

PLAN_DEFAULTS = {"trace": None, "groups": "auto", "linkage": "ward", "layers": None}


def cmd_plan(ns) -> int:
    o = _merged(ns, PLAN_DEFAULTS)
    if not o["trace"]:
        raise UsageError("plan needs --trace")
    if o["linkage"] not in LINKAGES:
        raise UsageError(f"linkage must be one of {LINKAGES}")
    trace = load_trace(o["trace"])
    if o["layers"]:
        layers = [s.strip() for s in o["layers"].split(",") if s.strip()]
        missing = [n for n in layers if n not in trace]
        if missing:
            raise DataError(f"trace has no layers {missing}")
    else:
        layers = [n for n in HTG_LAYERS if n in trace] or sorted(trace)
    T = trace[layers[0]].num_timesteps
    if any(trace[n].num_timesteps != T for n in layers):
        raise DataError("layers cover different timestep counts")
    groups = max(1, T // 10) if o["groups"] == "auto" else o["groups"]
    if groups > T:
        raise UsageError(f"G={groups} exceeds T={T}")
    shifts = []
    for t in range(1, T + 1):
        parts = []
        for n in layers:
            s = trace[n].summary(t)
            parts.append(shift_from_range(s.col_min, s.col_max))
        shifts.append(ShiftVector(t, np.concatenate(parts)))
    plan = cluster_timesteps(shifts, groups, o["linkage"])
    print(f"layers: {', '.join(layers)}")
    print(f"G={plan.num_groups} T={T} linkage={plan.linkage}")
    print(f"boundaries: {list(plan.boundaries)}")
    print("groups: " + " ".join(f"[{lo},{hi}]" for lo, hi in plan.group_ranges()))
    print(f"objective (sum of distances to group centroid): {objective(shifts, plan):.6f}")
    print(f"objective (within-group sum of squares): {objective(shifts, plan, squared=True):.6f}")
    return EXIT_OK


# --------------------------------------------------------------------------
# report

REPORT_DEFAULTS = {"csv": None, "metric": "sqnr_db"}


def cmd_report(ns) -> int:
    o = _merged(ns, REPORT_DEFAULTS)
    if not o["csv"]:
        raise UsageError("report needs --csv")
    try:
        with open(o["csv"], newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != ["layer", "timestep", "metric", "value"]:
                raise DataError(f"{o['csv']} is not an eval CSV (header {reader.fieldnames})")
            records = list(reader)
    except FileNotFoundError as exc:
        raise DataError(f"{o['csv']} not found") from exc
    per_t: dict[str, list[float]] = {}
    pooled: dict[str, float] = {}
    for r in records:
        try:
            v = float(r["value"])
        except ValueError as exc:
            raise DataError(f"bad value {r['value']!r} in {o['csv']}") from exc
        if r["timestep"] == "all":
            if r["metric"] == o["metric"]:
                pooled[r["layer"]] = v
            elif r["metric"].startswith(o["metric"] + ":"):
                pooled[f"{r['layer']} [{r['metric'].split(':', 1)[1]}]"] = v
        elif r["metric"] == o["metric"]:
            per_t.setdefault(r["layer"], []).append(v)
    names = list(dict.fromkeys(list(pooled) + list(per_t)))
    if not names:
        raise DataError(f"no {o['metric']} rows in {o['csv']}")
    width = max(len("layer"), *(len(n) for n in names))
    head = f"{'layer':<{width}}  {'pooled':>10}  {'min_t':>10}  {'median_t':>10}  {'max_t':>10}"
    lines = [f"metric: {o['metric']}", head, "-" * len(head)]

    def fmt(v):
        return f"{v:>10.3f}" if v is not None else f"{'-':>10}"

    for n in names:
        vals = per_t.get(n)
        stats = (min(vals), float(np.median(vals)), max(vals)) if vals else (None, None, None)
        lines.append(f"{n:<{width}}  {fmt(pooled.get(n))}  {fmt(stats[0])}  {fmt(stats[1])}  {fmt(stats[2])}")
    print("\n".join(lines))
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="htgquant", description="Timestep-grouped post-training quantization of a toy diffusion transformer block.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    S = argparse.SUPPRESS

    def common(sp):
        sp.add_argument("--config", default=None, help="JSON file of option values; flags override it")

    tg = sub.add_parser("trace-gen", help="generate a synthetic calibration trace", argument_default=S)
    common(tg)
    tg.add_argument("--out", help="trace directory to write")
    tg.add_argument("--model", help="toy block directory; initialized from the seed if absent")
    tg.add_argument("--channels", type=int)
    tg.add_argument("--heads", type=int)
    tg.add_argument("--tokens", type=int)
    tg.add_argument("--samples", type=int)
    tg.add_argument("--timesteps", type=int)
    tg.add_argument("--outlier-fraction", type=float)
    tg.add_argument("--outlier-magnitude", type=float)
    tg.add_argument("--outlier-spread", type=float)
    tg.add_argument("--drift-profile", choices=DRIFT_PROFILES)
    tg.add_argument("--base-std", type=float)
    tg.add_argument("--seed", type=int)
    tg.add_argument("--summary-only", action="store_true")
    tg.set_defaults(handler=cmd_trace_gen)

    q = sub.add_parser("quantize", help="calibrate and write a quantized bundle", argument_default=S)
    common(q)
    q.add_argument("--trace")
    q.add_argument("--model")
    q.add_argument("--out")
    q.add_argument("--weight-bits", type=_bits_arg)
    q.add_argument("--act-bits", type=_bits_arg)
    q.add_argument("--groups", type=_groups_arg)
    q.add_argument("--alpha", type=float)
    q.add_argument("--linkage", choices=LINKAGES)
    q.add_argument("--clip-quantile", type=float)
    q.add_argument("--no-shift", dest="shift", action="store_false")
    q.add_argument("--no-scale", dest="scale", action="store_false")
    q.add_argument("--float", action="store_true", help="write an unquantized pass-through bundle")
    q.add_argument("--seed", type=int)
    q.set_defaults(handler=cmd_quantize)

    e = sub.add_parser("eval", help="compare a bundle against the float block", argument_default=S)
    common(e)
    e.add_argument("--bundle")
    e.add_argument("--model")
    e.add_argument("--trace", help="evaluate on its block inputs, or on fresh draws of its spec with --seed")
    e.add_argument("--seed", type=int, help="noise seed for fresh evaluation inputs (same outlier layout)")
    e.add_argument("--samples", type=int, help="fresh samples per timestep (default 4)")
    e.add_argument("--out", help="CSV report path")
    e.add_argument("--ablate", help="comma list from op1,op2: re-calibrate every on/off combination")
    e.set_defaults(handler=cmd_eval)

    pl = sub.add_parser("plan", help="cluster the timesteps of a trace", argument_default=S)
    common(pl)
    pl.add_argument("--trace")
    pl.add_argument("--groups", type=_groups_arg)
    pl.add_argument("--linkage", choices=LINKAGES)
    pl.add_argument("--layers", help="comma list of layer ids (default: the HTG layers present)")
    pl.set_defaults(handler=cmd_plan)

    r = sub.add_parser("report", help="render an eval CSV as a text table", argument_default=S)
    common(r)
    r.add_argument("--csv")
    r.add_argument("--metric", choices=METRICS)
    r.set_defaults(handler=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits on --help/--version (0) and on usage errors (1)
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    if getattr(ns, "handler", None) is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        return ns.handler(ns)
    except UsageError as exc:
        print(f"htgquant {ns.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, TraceFormatError, IncompleteTraceError) as exc:
        print(f"htgquant {ns.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (OSError, ValueError, KeyError) as exc:
        print(f"htgquant {ns.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
