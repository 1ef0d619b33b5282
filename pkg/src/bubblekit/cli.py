"""Command-line entry point: ``bubblekit {predict,simulate,sample-bench}``.

Each command writes its CSVs plus a ``manifest.json`` into ``--out``.
Running the same manifest again gives byte-identical files, since every
timestamp comes from the simulation's virtual clock and all randomness is
derived from the one root seed.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Optional

from . import __version__
from .bench import read_logits, sample_bench
from .perf_model import SWEEP_CSV_HEADER, comm_volume, factor_pairs, sweep, sweep_csv_rows
from .pipeline import ConfigError, PipelineFault, bubble_breakdown, load_config, run
from .pipeline.ab import ab_compare
from .pipeline.config import Features, bundled_profile
from .pipeline.report import SUMMARY_FIELDS, summary_row, write_bubbles, write_rows, write_timeline

MANIFEST = "manifest.json"


@dataclass
class RunManifest:
    subcommand: str
    config: Optional[str]
    seed: int
    out: str
    version: str
    args: dict

    def write(self, out: Path) -> None:
        (out / MANIFEST).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError(f"{text} is not an unsigned 64-bit integer")
    return v


def _nonneg(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"{text} must be >= 0")
    return v


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"{text} must be >= 1")
    return v


def _config_path(args) -> Path:
    return Path(args.config) if args.config else bundled_profile()


def _manifest(args, out: Path, seed: int) -> RunManifest:
    recorded = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "out")}
    config = str(_config_path(args)) if hasattr(args, "config") else None
    return RunManifest(args.command, config, seed, str(out), __version__, recorded)


def cmd_predict(args) -> int:
    loaded = load_config(_config_path(args))
    if loaded.predict is None:
        raise ConfigError("predict", "section required by the predict command")
    pc = loaded.predict
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = sweep(pc.model, pc.cluster, pc.gpus, pc.slo_delay)
    with open(out / "sweep.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(SWEEP_CSV_HEADER)
        w.writerows(sweep_csv_rows(rows))
    with open(out / "comm_volume.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("p", "t", "comm_volume_elements"))
        for p, t in factor_pairs(pc.gpus):
            w.writerow((p, t, repr(comm_volume(pc.model, p, t))))
    _manifest(args, out, loaded.engine.seed).write(out)
    best = next((r for r in rows if r.feasible), None)
    if best is not None:
        print(f"best feasible split: p={best.p} t={best.t} "
              f"({best.estimate.throughput:.1f} tok/s, {best.estimate.delay * 1e3:.2f} ms/token)")
    else:
        print("no split meets the delay target")
    return 0


def _engine_config(args):
    loaded = load_config(_config_path(args))
    cfg = loaded.engine
    if args.mode is not None:
        cfg = cfg.with_mode(args.mode)
    if args.sat is not None:
        cfg = cfg.with_features(sat_aware=args.sat == "aware")
    if args.iterations is not None:
        cfg = replace(cfg, iterations=args.iterations)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def cmd_simulate(args) -> int:
    cfg = _engine_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _manifest(args, out, cfg.seed).write(out)
    result = run(cfg)
    report = bubble_breakdown(result.records, cfg.p, tail=cfg.p)
    write_timeline(out / "timeline.csv", result)
    write_bubbles(out / "bubbles.csv", report)
    label = "optimized" if cfg.features == Features.for_mode("optimized") else cfg.features.label
    summary = summary_row(result, report, label)
    if cfg.features == Features():
        summary["speedup_vs_baseline"] = 1.0
    else:
        base = run(replace(cfg, features=Features())).throughput() if result.iterations else 0.0
        summary["speedup_vs_baseline"] = summary["throughput_tok_s"] / base if base else 0.0
    write_rows(out / "summary.csv", SUMMARY_FIELDS + ("speedup_vs_baseline",), [summary])
    if args.compare:
        ab = ab_compare(cfg)
        write_rows(out / "ab.csv", ("variant", "throughput_tok_s", "ratio"),
                   [{"variant": r.variant, "throughput_tok_s": r.throughput, "ratio": r.ratio} for r in ab])
    print(f"{label}: {result.iterations} iterations, {summary['throughput_tok_s']:.1f} tok/s, "
          f"bubbles {report.bubble_fraction:.1%}, {summary['speedup_vs_baseline']:.2f}x baseline")
    return 0


def cmd_sample_bench(args) -> int:
    logits = read_logits(args.logits) if args.logits else None
    V, B = (logits.shape if logits is not None else (args.V, args.B))
    res = sample_bench(V, B, args.steps, args.seed, logits)
    row = {"V": V, "B": B, "steps": args.steps, "incremental_ns_per_iter": res.incremental_ns,
           "scratch_ns_per_iter": res.scratch_ns, "ratio": res.ratio, "identical_tokens": int(res.identical)}
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_rows(out / "bench.csv", list(row), [row])
        _manifest(args, out, args.seed).write(out)
    print(",".join(row))
    print(",".join(repr(v) if isinstance(v, float) else str(v) for v in row.values()))
    return 0 if res.identical else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bubblekit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("predict", help="analytic throughput sweep over p x t splits")
    p.add_argument("--config", metavar="PATH")
    p.add_argument("--out", metavar="DIR", default="out")
    p.set_defaults(func=cmd_predict)

    s = sub.add_parser("simulate", help="run the pipelined engine and report bubbles")
    s.add_argument("--config", metavar="PATH")
    s.add_argument("--mode", choices=("baseline", "optimized"))
    s.add_argument("--iterations", type=_nonneg, metavar="N")
    s.add_argument("--seed", type=_u64, metavar="U64")
    s.add_argument("--out", metavar="DIR", default="out")
    s.add_argument("--sat", choices=("aware", "unaware"))
    s.add_argument("--compare", action="store_true",
                   help="also run every single-feature variant and write ab.csv")
    s.set_defaults(func=cmd_simulate)

    b = sub.add_parser("sample-bench", help="incremental vs from-scratch sampler timing")
    b.add_argument("--V", type=_positive, default=32768)
    b.add_argument("--B", type=_positive, default=256)
    b.add_argument("--steps", type=_positive, default=64)
    b.add_argument("--seed", type=_u64, default=0, metavar="U64")
    b.add_argument("--logits", metavar="PATH", help="binary logits file used at every step")
    b.add_argument("--out", metavar="DIR")
    b.set_defaults(func=cmd_sample_bench)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if argv and argv[0].startswith("--") and argv[0] not in ("--help", "-h", "--version"):
        argv.insert(0, "simulate")  # bare flags mean simulate
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except PipelineFault as exc:
        print(f"fault: {exc}", file=sys.stderr)
        return 3
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
