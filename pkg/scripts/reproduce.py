"""Run every shipped experiment through the CLI and summarize the CSVs.

    python3 scripts/reproduce.py [--out runs] [--workers N] [--only mpg plan ...]
"""
import argparse
import sys
from pathlib import Path

from cscg.cli import main

EXPERIMENTS = [
    ("mpg", "mpg"),
    ("match", "match_rooms"),
    ("match", "match_bitmaps"),
    ("match-window", "match_window_desk"),
    ("compose", "compose"),
    ("plan", "plan"),
]

SUMMARIES = {
    "compose": ("compose_sweep.csv", ["length", "mode"], ["heldout_nll"]),
    "plan": ("plan_episodes.csv", ["walk", "growth", "lambda"], ["success", "final_distance", "replans"]),
    "match-window": ("window_summary.csv", ["pair"], ["location_accuracy"]),
}


def parse_args(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--only", nargs="*", help="config names to run (default: all)")
    return p.parse_args(argv)


def run(argv=None) -> int:
    args = parse_args(argv)
    out = Path(args.out)
    failed = []
    for command, cfg in EXPERIMENTS:
        if args.only and cfg not in args.only:
            continue
        print(f"== {command} ({cfg})", flush=True)
        target = out / cfg
        if main([command, "--config", cfg, "--out-dir", str(target), "--workers", str(args.workers)]) != 0:
            failed.append(cfg)
            continue
        if command in SUMMARIES:
            name, groups, metrics = SUMMARIES[command]
            main(["report", str(target / name), "--group-by", *groups, "--metrics", *metrics,
                  "--out-dir", str(target / "report")])
    if failed:
        print(f"failed: {', '.join(failed)}", file=sys.stderr)
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(run())
