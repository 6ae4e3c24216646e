"""Command-line entry point: ``twintune tune|validate|baseline``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .campaign import ConfigError, load_config, read_theta_csv, run_baseline_suite, run_campaign, validate_params
from .tuner import MODES


def _add_common(p):
    p.add_argument("--config", required=True, help="campaign JSON file")
    p.add_argument("--workers", type=int, default=None, help="parallel rollout threads (default: all cores)")
    p.add_argument("--seed", type=int, default=None, help="override campaign_seed")
    p.add_argument("--out", default=None, help="output directory (overrides output_dir)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="twintune", description="Tune NMPC weights against a target plant using randomized twins.")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("tune", help="run a tuning campaign")
    _add_common(p)
    p.add_argument("--mode", choices=MODES, default=None, help="tuner variant (default: from config)")
    p.add_argument("--iterations", type=int, default=None)

    p = sub.add_parser("validate", help="score a parameter vector on the target plant over the path library")
    _add_common(p)
    p.add_argument("--theta", required=True, help="CSV with the weights (a single row, or an iterations.csv)")

    p = sub.add_parser("baseline", help="compare tuner variants over several seeds")
    _add_common(p)
    p.add_argument("--seeds", type=int, required=True, help="number of campaign seeds")
    p.add_argument("--modes", default="auks,const,ukf", help="comma-separated tuner variants")
    return ap


def _load(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.campaign_seed = args.seed
    if getattr(args, "iterations", None) is not None:
        cfg.iterations = args.iterations
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load(args)
        if args.command == "tune":
            summary = run_campaign(cfg, workers=args.workers, mode=args.mode, output_dir=args.out)
            for row in summary.iterations:
                print(f"k={row['k']:2d}  kpi={row['kpi_target']:.5f}  trace(P)={row['trace_P']:.4g}  accepted={row['accepted']}")
            print("final theta:", ",".join(repr(float(v)) for v in summary.final_theta))
        elif args.command == "validate":
            theta = read_theta_csv(args.theta)
            rows = validate_params(theta, cfg, cfg.load_paths(), args.workers)
            print(f"{'path':<18}{'H_path':>10}{'H_velocity':>12}{'H_cost':>10}{'kpi':>10}")
            for r in rows:
                print(f"{r['path']:<18}{r['H_path']:>10.4f}{r['H_velocity']:>12.4f}{r['H_cost']:>10.4f}{r['kpi']:>10.4f}")
            if args.out:
                out = Path(args.out)
                out.mkdir(parents=True, exist_ok=True)
                (out / "validation.json").write_text(json.dumps(rows, indent=2) + "\n")
        else:
            modes = tuple(m.strip() for m in args.modes.split(",") if m.strip())
            bad = [m for m in modes if m not in MODES]
            if bad:
                raise ConfigError(f"--modes: unknown variant {bad[0]!r}")
            res = run_baseline_suite(cfg, seeds=args.seeds, modes=modes, workers=args.workers,
                                     output_dir=args.out or cfg.output_dir)
            for mode, s in res["summary"].items():
                print(f"{mode:<6} median final kpi={s['median_final_kpi']:.5f}  "
                      f"median final trace(P)={s['median_final_trace_P']:.4g}")
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
