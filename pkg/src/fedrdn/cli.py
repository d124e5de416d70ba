"""``fedrdn`` command line: run, compare, export-features, gen-data.

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration or input.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import _parse_skew, load_config
from .datasets import generate_synthetic, write_federation
from .errors import ConfigError, FedRDNError, FormatError
from .reporting import atomic_write, compare_reports, comparison_csv, export_features, format_comparison, run_config


def _err(msg: str) -> None:
    print(f"fedrdn: error: {msg}", file=sys.stderr)


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.output_dir or args.workers:
        from dataclasses import replace

        cfg = replace(cfg, output_dir=args.output_dir or cfg.output_dir, workers=args.workers or cfg.workers)
    run_config(cfg, log=None if args.quiet else lambda m: print(m, file=sys.stderr))
    print(cfg.output_dir)
    return 0


def cmd_compare(args) -> int:
    rows = compare_reports(args.reports, weighted=args.weighted)
    print(format_comparison(rows))
    if args.csv:
        atomic_write(args.csv, comparison_csv(rows))
    return 0


def cmd_export(args) -> int:
    text = export_features(args.run_dir, seed=args.seed, layer=args.layer, which=args.model)
    if args.out:
        atomic_write(args.out, text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_gen_data(args) -> int:
    doc = json.loads(Path(args.config).read_text())
    # accept a full run config or a bare synthetic section
    if isinstance(doc, dict) and "dataset" in doc:
        syn = doc["dataset"].get("synthetic")
        if syn is None:
            raise ConfigError("gen-data needs a synthetic dataset section", "dataset.synthetic")
        cfg = _parse_skew(syn, "dataset.synthetic")
    else:
        cfg = _parse_skew(doc, "synthetic")
    fed = generate_synthetic(cfg)
    out = Path(args.out)
    partition = write_federation(out, fed)
    part_path = Path(args.partition) if args.partition else out.with_suffix(".partition.json")
    atomic_write(part_path, json.dumps(partition) + "\n")
    print(f"{out} {part_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedrdn", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run every seed of a config and write reports")
    r.add_argument("config")
    r.add_argument("--output-dir")
    r.add_argument("--workers", type=int)
    r.add_argument("--quiet", action="store_true")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("compare", help="table of per-client and average accuracy across runs")
    c.add_argument("reports", nargs="+", help="run directories or summary.json files; the first is the baseline")
    c.add_argument("--weighted", action="store_true", help="use the sample-count weighted average")
    c.add_argument("--csv", help="also write the table as CSV (full precision)")
    c.set_defaults(func=cmd_compare)

    e = sub.add_parser("export-features", help="dump per-sample features of a trained model")
    e.add_argument("run_dir")
    e.add_argument("--seed", type=int)
    e.add_argument("--layer", default="penultimate")
    e.add_argument("--model", default="global", help="'global' or 'local:<k>'")
    e.add_argument("--out")
    e.set_defaults(func=cmd_export)

    g = sub.add_parser("gen-data", help="synthesize a federation and write it as an FSIM1 file")
    g.add_argument("--config", required=True, help="run config or bare synthetic section (JSON)")
    g.add_argument("--out", required=True)
    g.add_argument("--partition", help="where to write the partition spec (default: <out>.partition.json)")
    g.set_defaults(func=cmd_gen_data)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FormatError) as exc:
        _err(str(exc))
        return 2
    except FileNotFoundError as exc:
        _err(str(exc))
        return 2
    except (FedRDNError, OSError) as exc:
        _err(str(exc))
        return 1


if __name__ == "__main__":
    sys.exit(main())
