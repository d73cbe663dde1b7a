"""Command line interface.

Subcommands cover the full pipeline: generate synthetic data, inspect
event statistics, train, evaluate, quantize, run the fixed-point
emulator, and map the network onto cores.  Every command writes a
`<cmd>_report.json` next to its outputs with sorted keys and no
timestamps or absolute paths, so reruns with the same inputs produce
byte-identical reports.

Settings resolve in order: built-in defaults, then --preset, then
--config JSON, then explicit flags.  Exit codes: 0 on success, 2 for
expected pipeline errors (bad input, malformed files, infeasible
mapping), 1 for anything unexpected.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .chip import (
    DEFAULT_BLANK,
    DEFAULT_REPLICATION,
    DEFAULT_WEIGHT_SCALE,
    ENCODING_SIGNED7,
    equivalence_check,
    evaluate_emulated,
    load_quantized,
    quantize,
    save_quantized,
)
from .errors import InvalidConfig, PipelineError
from .events import (
    CLASS_NAMES,
    PATTERNS,
    SyntheticSpec,
    gen_synthetic,
    load_dataset,
    write_evtcsv,
)
from .mapping import ChipConstraints, map_network
from .network import (
    POOLING_SPIKING,
    VARIANTS,
    build_network,
    load_network,
    save_network,
)
from .preprocess import (
    AccumulationConfig,
    densest_tile,
    event_occurrence_map,
    occurrence_to_csv,
    occurrence_to_pgm,
    sample_frames,
)
from .training import TrainConfig, evaluate, load_checkpoint, train

PRESETS = {
    # quick end-to-end run on synthetic data; small window variant,
    # short clips, tuned to finish in minutes on a laptop
    "smoke": {
        "variant": "win50",
        "epochs": 20,
        "batch_size": 20,
        "lr_initial": 1e-3,
        "lr_halving_period_epochs": 20,
        "t_sample_us": 1000,
        "t_length_us": 4000,
        "frame_repeat": 8,
        "seed": 7,
        "pooling": POOLING_SPIKING,
        "synthetic": {
            "width": 50,
            "height": 50,
            "n_per_class": 100,
            "duration_us": 100_000,
            "pattern": "moving-bar",
            "event_rate_per_ms": 150.0,
            "seed": 7,
        },
    },
}

_TRAIN_KEYS = (
    "variant",
    "epochs",
    "batch_size",
    "lr_initial",
    "lr_halving_period_epochs",
    "t_sample_us",
    "t_length_us",
    "frame_repeat",
    "seed",
    "pooling",
    "reset_grad",
    "grad_chunk",
    "calibrate",
)

_TRAIN_DEFAULTS = {
    "variant": "full128",
    "epochs": 200,
    "batch_size": 40,
    "lr_initial": 1e-3,
    "lr_halving_period_epochs": 20,
    "t_sample_us": 1000,
    "t_length_us": 10_000,
    "frame_repeat": 20,
    "seed": 0,
    "pooling": POOLING_SPIKING,
    "reset_grad": "detached",
    "grad_chunk": 32,
    "calibrate": True,
}

_SYN_DEFAULTS = {
    "width": 50,
    "height": 50,
    "n_per_class": 100,
    "duration_us": 100_000,
    "pattern": "moving-bar",
    "event_rate_per_ms": 60.0,
    "seed": 0,
}


def _write_report(path: Path, doc: dict):
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _resolve(args, keys, defaults) -> dict:
    cfg = dict(defaults)
    preset = getattr(args, "preset", None)
    if preset:
        if preset not in PRESETS:
            raise InvalidConfig(f"unknown preset {preset!r} (have: {', '.join(sorted(PRESETS))})")
        for k, v in PRESETS[preset].items():
            if k in cfg or k == "synthetic":
                cfg[k] = v
    config_path = getattr(args, "config", None)
    if config_path:
        try:
            file_cfg = json.loads(Path(config_path).read_text())
        except (OSError, ValueError) as exc:
            raise InvalidConfig(f"cannot read config {config_path}: {exc}")
        if not isinstance(file_cfg, dict):
            raise InvalidConfig(f"config {config_path} must hold a JSON object")
        for k, v in file_cfg.items():
            if k in cfg or k == "synthetic":
                cfg[k] = v
            else:
                raise InvalidConfig(f"config {config_path}: unknown key {k!r}")
    for k in keys:
        v = getattr(args, k, None)
        if v is not None:
            cfg[k] = v
    return cfg


def _synthetic_spec(cfg, args) -> SyntheticSpec:
    syn = dict(_SYN_DEFAULTS)
    syn.update(cfg.get("synthetic") or {})
    for flag, key in (
        ("syn_width", "width"),
        ("syn_height", "height"),
        ("syn_n", "n_per_class"),
        ("syn_duration_us", "duration_us"),
        ("syn_pattern", "pattern"),
        ("syn_rate", "event_rate_per_ms"),
        ("syn_seed", "seed"),
    ):
        v = getattr(args, flag, None)
        if v is not None:
            syn[key] = v
    spec = SyntheticSpec(**syn)
    spec.validate()
    return spec


def _load_streams(args, cfg):
    """Dataset from --data, or synthetic when the resolved config asks for it."""
    if getattr(args, "data", None):
        return load_dataset(args.data, fmt=getattr(args, "fmt", "auto") or "auto", threads=args.threads)
    if getattr(args, "synthetic", False) or cfg.get("synthetic") is not None:
        return gen_synthetic(_synthetic_spec(cfg, args))
    raise InvalidConfig("no input: pass --data DIR or --synthetic")


# --------------------------------------------------------------------------
# commands


def cmd_gen(args) -> int:
    out = Path(args.out)
    spec = _synthetic_spec({"synthetic": {}}, args)
    ds = gen_synthetic(spec)
    counts = {}
    for split, streams in (("train", ds.train), ("test", ds.test)):
        idx = {}
        for s in streams:
            cname = CLASS_NAMES[s.label]
            i = idx.get(cname, 0)
            idx[cname] = i + 1
            path = out / split / cname / f"{cname}_{i:04d}.evt.csv"
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(write_evtcsv(s))
        counts[split] = dict(sorted(idx.items()))
    doc = {
        "counts": counts,
        "spec": {
            "width": spec.width,
            "height": spec.height,
            "n_per_class": spec.n_per_class,
            "duration_us": spec.duration_us,
            "pattern": spec.pattern,
            "event_rate_per_ms": spec.event_rate_per_ms,
            "seed": spec.seed,
        },
    }
    _write_report(out / "gen_report.json", doc)
    total = sum(sum(c.values()) for c in counts.values())
    print(f"wrote {total} streams under {out}")
    return 0


def cmd_stats(args) -> int:
    ds = load_dataset(args.data, fmt=args.fmt, threads=args.threads)
    streams = ds.train if args.split == "train" else ds.test
    occ = event_occurrence_map(streams)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "occurrence.csv").write_text(occurrence_to_csv(occ))
    (out / "occurrence.pgm").write_bytes(occurrence_to_pgm(occ))
    sizes = args.tile or [50, 100]
    tiles = [densest_tile(occ, size) for size in sizes]
    per_class = {}
    for s in streams:
        cname = CLASS_NAMES[s.label] if s.label is not None else "unlabeled"
        row = per_class.setdefault(cname, {"streams": 0, "events": 0})
        row["streams"] += 1
        row["events"] += s.n_events
    doc = {
        "split": args.split,
        "canvas": {"width": occ.width, "height": occ.height},
        "n_streams": len(streams),
        "n_events": int(occ.counts.sum()),
        "per_class": dict(sorted(per_class.items())),
        "densest_tiles": tiles,
    }
    _write_report(out / "stats_report.json", doc)
    for t in tiles:
        print(
            f"tile {t['size']}x{t['size']} at ({t['origin_x']}, {t['origin_y']}) "
            f"holds {t['share']:.1%} of events"
        )
    return 0


def cmd_train(args) -> int:
    cfg = _resolve(args, _TRAIN_KEYS, _TRAIN_DEFAULTS)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ds = _load_streams(args, cfg)
    tc = TrainConfig(**{k: cfg[k] for k in _TRAIN_KEYS if k != "variant"})
    tc.validate()
    network = build_network(cfg["variant"], seed=tc.seed)
    resume = None
    if args.resume:
        network, adam, epoch = load_checkpoint(args.resume)
        resume = (adam, epoch)
    rows = []
    with (out / "metrics.jsonl").open("w") as fh:

        def sink(row):
            rows.append(row)
            fh.write(json.dumps(row, sort_keys=True) + "\n")
            print(
                f"epoch {row['epoch']:3d}  lr {row['lr']:.2e}  loss {row['loss']:.5f}  "
                f"acc_s {row['acc_s']:.3f}  acc_test {row['acc_test']:.3f}  acc_train {row['acc_train']:.3f}"
            )

        network, metrics = train(
            ds,
            network,
            tc,
            threads=args.threads,
            metrics_sink=sink,
            checkpoint_every=args.checkpoint_every,
            checkpoint_dir=out if args.checkpoint_every else None,
            resume=resume,
        )
    model_path = save_network(network, out / "model.json")
    doc = {
        "variant": cfg["variant"],
        "config": {k: cfg[k] for k in _TRAIN_KEYS},
        "synthetic": cfg.get("synthetic"),
        "n_train": len(ds.train),
        "n_test": len(ds.test),
        "final": rows[-1] if rows else None,
        "acc_s": metrics.acc_s,
        "acc_test": metrics.acc_test,
        "acc_train": metrics.acc_train,
        "model": model_path.name,
        "weights": model_path.with_suffix(".bin").name,
        "metrics": "metrics.jsonl",
    }
    _write_report(out / "train_report.json", doc)
    print(f"model written to {model_path}")
    return 0


def cmd_eval(args) -> int:
    network = load_network(args.model)
    ds = _load_streams(args, {})
    streams = ds.train if args.split == "train" else ds.test
    tc = TrainConfig(
        t_sample_us=args.t_sample_us,
        t_length_us=args.t_length_us,
        frame_repeat=args.frame_repeat,
    )
    tc.validate()
    res = evaluate(network, streams, tc, threads=args.threads)
    doc = {
        "split": args.split,
        "acc_frames": res.acc_frames,
        "acc_streams": res.acc_streams,
        "n_frames": res.n_frames,
        "n_streams": res.n_streams,
    }
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_report(out / "eval_report.json", doc)
    print(f"{args.split}: frame acc {res.acc_frames:.4f}, stream acc {res.acc_streams:.4f}")
    return 0


def cmd_quantize(args) -> int:
    network = load_network(args.model)
    enc = ENCODING_SIGNED7 if args.encoding == "signed7" else None
    qnet = quantize(network, scale=args.scale, delta_i=args.delta_i, encoding=enc)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    qpath = save_quantized(qnet, out / "qmodel.json")
    doc = {
        "scale": qnet.scale,
        "vth_mant": qnet.vth_mant,
        "delta_v": qnet.delta_v,
        "delta_i": qnet.delta_i,
        "quant_error": qnet.quant_error,
        "encodings": [
            {"layer": li, "step": l.encoding.step, "lo": l.encoding.lo, "hi": l.encoding.hi}
            for li, l in enumerate(qnet.layers)
        ],
        "qmodel": qpath.name,
        "weights": qpath.with_suffix(".bin").name,
    }
    _write_report(out / "quantize_report.json", doc)
    print(f"vth_mant {qnet.vth_mant}, delta_v {qnet.delta_v}, quantized model written to {qpath}")
    return 0


def cmd_emulate(args) -> int:
    qnet = load_quantized(args.qmodel)
    ds = _load_streams(args, {})
    streams = ds.train if args.split == "train" else ds.test
    acc_cfg = AccumulationConfig(
        t_sample_us=args.t_sample_us,
        t_length_us=args.t_length_us,
        frame_repeat=1,
    )
    acc_cfg.validate()
    res = evaluate_emulated(
        qnet, streams, acc_cfg, replication=args.replication, blank=args.blank, threads=args.threads
    )
    doc = {
        "split": args.split,
        "acc_frames": res.acc_frames,
        "acc_streams": res.acc_streams,
        "n_frames": res.n_frames,
        "n_streams": res.n_streams,
        "timesteps_per_inference": args.replication + args.blank,
    }
    if args.float_model:
        network = load_network(args.float_model)
        agg = {"compared": 0, "mismatches": 0, "boundary_mismatches": 0, "out_of_band_mismatches": 0}
        h, w = qnet.input_size[1], qnet.input_size[2]
        from .preprocess import fit_canvas

        for s in streams[: args.check_streams]:
            frames = sample_frames(fit_canvas(s, w, h), 0, acc_cfg)
            rep = equivalence_check(network, qnet, frames, args.replication, args.blank)
            for k in agg:
                agg[k] += rep[k]
        agg["feasible_equivalence"] = agg["out_of_band_mismatches"] == 0
        agg["n_streams_checked"] = min(args.check_streams, len(streams))
        doc["equivalence"] = agg
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_report(out / "emulate_report.json", doc)
    print(
        f"{args.split}: frame acc {res.acc_frames:.4f}, stream acc {res.acc_streams:.4f}, "
        f"{args.replication + args.blank} timesteps per frame"
    )
    return 0


def cmd_map(args) -> int:
    if args.model:
        network = load_network(args.model)
    else:
        network = build_network(args.variant, seed=0)
    constraints = ChipConstraints(
        max_compartments=args.max_compartments,
        max_fan_in=args.max_fan_in,
        max_fan_out=args.max_fan_out,
        synmem_bytes=args.synmem_bytes,
    )
    report = map_network(network, constraints)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_report(out / "map_report.json", report.to_dict())
    print(f"{'layer':>5}  {'kind':<9} {'cores':>5}  {'compartments':>12}  {'synapses':>10}")
    for row in map_rows(report):
        print(f"{row['layer']:>5}  {row['kind']:<9} {row['cores']:>5}  {row['compartments']:>12}  {row['synapses']:>10}")
    t = report.totals
    print(
        f"total cores {t['n_cores']}, compartments {t['compartments']}, synapses {t['synapses']}, "
        f"compartment util {t['compartment_utilization']:.1%}, synmem util {t['synmem_utilization']:.1%}"
    )
    return 0


def map_rows(report) -> list:
    """Per-layer summary rows of a mapping report."""
    by_layer = {}
    for c in report.cores:
        row = by_layer.setdefault(
            c.layer, {"layer": c.layer, "kind": c.kind, "cores": 0, "compartments": 0, "synapses": 0}
        )
        row["cores"] += 1
        row["compartments"] += c.compartments
        row["synapses"] += c.synapses
    return [by_layer[k] for k in sorted(by_layer)]


# --------------------------------------------------------------------------
# parser


def _add_common(p, out_default="."):
    p.add_argument("--out", default=out_default, help="output directory")
    p.add_argument("--threads", type=int, default=1, help="worker threads (never changes results)")


def _add_synthetic_flags(p):
    p.add_argument("--synthetic", action="store_true", help="generate input data in memory")
    p.add_argument("--syn-width", type=int, default=None)
    p.add_argument("--syn-height", type=int, default=None)
    p.add_argument("--syn-n", type=int, default=None, help="training streams per class")
    p.add_argument("--syn-duration-us", type=int, default=None)
    p.add_argument("--syn-pattern", choices=PATTERNS, default=None)
    p.add_argument("--syn-rate", type=float, default=None, help="events per ms")
    p.add_argument("--syn-seed", type=int, default=None)


def _add_accum_flags(p):
    p.add_argument("--t-sample-us", type=int, default=1000, help="accumulation window per frame")
    p.add_argument("--t-length-us", type=int, default=10_000, help="clip length")
    p.add_argument("--frame-repeat", type=int, default=20, help="timesteps each frame is held")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="evsnn", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write a synthetic event dataset")
    _add_common(p, out_default="synthetic")
    _add_synthetic_flags(p)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("stats", help="event occurrence map and densest tiles")
    p.add_argument("--data", required=True)
    p.add_argument("--fmt", choices=("auto", "dat", "evtcsv"), default="auto")
    p.add_argument("--split", choices=("train", "test"), default="train")
    p.add_argument("--tile", type=int, action="append", help="tile size to scan (repeatable)")
    _add_common(p)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("train", help="train a network")
    p.add_argument("--data", default=None, help="dataset root (train/ and test/ under it)")
    p.add_argument("--fmt", choices=("auto", "dat", "evtcsv"), default="auto")
    p.add_argument("--preset", default=None, help=f"named preset ({', '.join(sorted(PRESETS))})")
    p.add_argument("--config", default=None, help="JSON file with config keys")
    p.add_argument("--variant", choices=sorted(VARIANTS), default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, dest="batch_size", default=None)
    p.add_argument("--lr", type=float, dest="lr_initial", default=None)
    p.add_argument("--lr-halving-period", type=int, dest="lr_halving_period_epochs", default=None)
    p.add_argument("--t-sample-us", type=int, dest="t_sample_us", default=None)
    p.add_argument("--t-length-us", type=int, dest="t_length_us", default=None)
    p.add_argument("--frame-repeat", type=int, dest="frame_repeat", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--pooling", choices=("spiking", "linear"), default=None)
    p.add_argument("--reset-grad", choices=("detached", "full"), dest="reset_grad", default=None)
    p.add_argument("--grad-chunk", type=int, dest="grad_chunk", default=None)
    p.add_argument(
        "--no-calibrate", dest="calibrate", action="store_const", const=False, default=None,
        help="skip the drive-scaling pass at initialisation",
    )
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--resume", default=None, help="checkpoint prefix to resume from")
    _add_synthetic_flags(p)
    _add_common(p, out_default="run")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained network")
    p.add_argument("--model", required=True)
    p.add_argument("--data", default=None)
    p.add_argument("--fmt", choices=("auto", "dat", "evtcsv"), default="auto")
    p.add_argument("--split", choices=("train", "test"), default="test")
    _add_synthetic_flags(p)
    _add_accum_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("quantize", help="translate a model to the integer grid")
    p.add_argument("--model", required=True)
    p.add_argument("--scale", type=int, default=DEFAULT_WEIGHT_SCALE)
    p.add_argument("--delta-i", type=int, dest="delta_i", default=4096)
    p.add_argument("--encoding", choices=("auto", "signed7"), default="auto")
    _add_common(p)
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("emulate", help="run fixed-point inference")
    p.add_argument("--qmodel", required=True)
    p.add_argument("--data", default=None)
    p.add_argument("--fmt", choices=("auto", "dat", "evtcsv"), default="auto")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--replication", type=int, default=DEFAULT_REPLICATION)
    p.add_argument("--blank", type=int, default=DEFAULT_BLANK)
    p.add_argument("--float-model", default=None, help="also check float/integer agreement")
    p.add_argument("--check-streams", type=int, default=4)
    _add_synthetic_flags(p)
    p.add_argument("--t-sample-us", type=int, default=1000)
    p.add_argument("--t-length-us", type=int, default=10_000)
    _add_common(p)
    p.set_defaults(func=cmd_emulate)

    p = sub.add_parser("map", help="place a network onto cores")
    p.add_argument("--model", default=None)
    p.add_argument("--variant", choices=sorted(VARIANTS), default="full128")
    p.add_argument("--max-compartments", type=int, default=1024)
    p.add_argument("--max-fan-in", type=int, default=4096)
    p.add_argument("--max-fan-out", type=int, default=4096)
    p.add_argument("--synmem-bytes", type=int, default=128 * 1024)
    _add_common(p)
    p.set_defaults(func=cmd_map)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"unexpected error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
