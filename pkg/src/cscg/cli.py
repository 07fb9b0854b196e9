"""``cscg`` command line: run an experiment from a YAML config and write CSV artifacts.

Exit codes: 0 on success, 1 for invalid input (bad flags, config or files),
2 when the run itself fails.
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from dataclasses import asdict
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from . import experiments as X
from .environments import ground_truth_model, make_world
from .model import ModelError, UngroundedSchema, load, save

log = logging.getLogger("cscg")

EXIT_OK, EXIT_INVALID, EXIT_FAILED = 0, 1, 2

COMMANDS = {
    # name: (config class, default config file)
    "train": (X.TrainConfig, "train"),
    "bind": (X.BindConfig, "bind"),
    "match": (X.MatchConfig, "match_rooms"),
    "match-window": (X.WindowConfig, "match_window"),
    "compose": (X.ComposeConfig, "compose"),
    "plan": (X.PlanConfig, "plan"),
    "mpg": (X.MpgExperimentConfig, "mpg"),
}


class InvalidInput(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------- configs

def builtin_configs() -> list:
    base = resources.files("cscg") / "data" / "configs"
    return sorted(p.name[:-5] for p in base.iterdir() if p.name.endswith(".yaml"))


def read_config_file(ref: str) -> dict:
    """A YAML path, or the name of a config shipped with the package."""
    path = Path(ref)
    if path.suffix in (".yaml", ".yml") or path.exists():
        if not path.exists():
            raise InvalidInput(f"config file not found: {ref}")
        text = path.read_text()
    else:
        res = resources.files("cscg") / "data" / "configs" / f"{ref}.yaml"
        if not res.is_file():
            raise InvalidInput(f"unknown config {ref!r}; shipped configs: {', '.join(builtin_configs())}")
        text = res.read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise InvalidInput(f"config is not valid YAML: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise InvalidInput("config must be a YAML mapping")
    return data


def apply_overrides(values: dict, overrides) -> dict:
    out = dict(values)
    for item in overrides or ():
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise InvalidInput(f"override must look like key=value, got {item!r}")
        try:
            out[key.strip()] = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise InvalidInput(f"cannot parse override value {raw!r}: {exc}") from exc
    return out


def load_config(command: str, ref, overrides, seed):
    cls, default = COMMANDS[command]
    values = apply_overrides(read_config_file(ref or default), overrides)
    if seed is not None:
        values["seed"] = seed
    try:
        return X.build_config(cls, values)
    except (X.ConfigError, TypeError) as exc:
        raise InvalidInput(str(exc)) from exc


# --------------------------------------------------------------------------- artifacts

def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def render_csv(rows: list, meta: dict) -> str:
    """CSV text whose first lines are ``# key: value`` comments describing the run."""
    buf = io.StringIO()
    for k, v in meta.items():
        buf.write(f"# {k}: {v}\n")
    if rows:
        writer = csv.writer(buf, lineterminator="\n")
        columns = list(rows[0])
        writer.writerow(columns)
        for r in rows:
            writer.writerow([_fmt(r[c]) for c in columns])
    return buf.getvalue()


def read_csv(path) -> list:
    lines = [ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(lines))


class Run:
    """Output directory plus the metadata header shared by every artifact of one run."""

    def __init__(self, command: str, cfg, out_dir):
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.meta = {"cscg": __version__, "command": command, "seed": getattr(cfg, "seed", ""),
                     "config_hash": X.config_hash(cfg) if cfg is not None else ""}
        self.written = []

    def csv(self, name: str, rows: list):
        path = self.out / name
        path.write_text(render_csv(rows, self.meta))
        self.written.append(path)

    def model(self, name: str, model):
        path = self.out / name
        save(model, path)
        self.written.append(path)

    def config(self, cfg):
        path = self.out / "config.yaml"
        path.write_text(yaml.safe_dump(asdict(cfg), sort_keys=True))
        self.written.append(path)


# --------------------------------------------------------------------------- subcommands

def cmd_train(cfg: X.TrainConfig, run: Run, workers: int):
    model, schema, trace = X.train_schema(cfg)
    run.model("model.cscg", model)
    run.model("schema.cscg", schema)
    run.csv("train_trace.csv", [{"iteration": i, "nll": v} for i, v in enumerate(trace)])
    print(f"trained {cfg.room}: {model.n_states} states, final NLL {trace[-1]:.4f}; "
          f"schema keeps {schema.n_states} states")


def cmd_bind(cfg: X.BindConfig, run: Run, workers: int):
    if cfg.schema:
        if not Path(cfg.schema).exists():
            raise InvalidInput(f"schema file not found: {cfg.schema}")
        schema = load(cfg.schema)
    else:
        truth = ground_truth_model(make_world(X._room(cfg.room, cfg.size)))
        schema = UngroundedSchema(truth.T, truth.clones, truth.name)
    binding = X.bind_schema(cfg, schema)
    run.model("bound.cscg", binding.model)
    run.csv("bind_trace.csv", [{"iteration": i, "nll": v} for i, v in enumerate(binding.trace)])
    print(f"bound {getattr(schema, 'name', '') or 'schema'}: NLL {binding.nll:.4f} after {len(binding.trace)} iterations")


def cmd_match(cfg: X.MatchConfig, run: Run, workers: int):
    traces, cells = X.run_matching(cfg, workers=workers)
    run.csv("match_traces.csv", traces)
    run.csv("match_cells.csv", cells)
    for c in cells:
        print(f"{c['room']:>12} {c['size']:>7}  winner {c['winner']:<12} decided at {c['decision_step'] or '-'}")


def cmd_match_window(cfg: X.WindowConfig, run: Run, workers: int):
    summary, steps = X.run_window(cfg, workers=workers)
    run.csv("window_summary.csv", summary)
    run.csv("window_steps.csv", steps)
    mean, ci = X.mean_ci([r["location_accuracy"] for r in summary])
    print(f"location accuracy {mean:.3f} +/- {ci:.3f}")


def cmd_compose(cfg: X.ComposeConfig, run: Run, workers: int):
    rows = X.run_compose(cfg, workers=workers)
    run.csv("compose_sweep.csv", rows)
    for L in cfg.lengths:
        parts = []
        for mode in ("schemas", "scratch"):
            mean, ci = X.mean_ci([r["heldout_nll"] for r in rows if r["length"] == L and r["mode"] == mode])
            parts.append(f"{mode} {mean:.4f} +/- {ci:.4f}")
        print(f"length {L:>6}: " + ", ".join(parts))


def cmd_plan(cfg: X.PlanConfig, run: Run, workers: int):
    rows = X.run_plan(cfg, workers=workers)
    run.csv("plan_episodes.csv", rows)
    keys = sorted({(r["walk"], r["growth"], r["lambda"]) for r in rows}, key=lambda k: (k[0], k[1], -k[2]))
    for walk, g, lam in keys:
        sel = [r for r in rows if (r["walk"], r["growth"], r["lambda"]) == (walk, g, lam)]
        dist, ci = X.mean_ci([r["final_distance"] for r in sel])
        print(f"{walk:>8} growth {g} lambda {lam}: success {np.mean([r['success'] for r in sel]):.2f}, "
              f"distance {dist:.2f} +/- {ci:.2f}, replans {np.mean([r['replans'] for r in sel]):.2f}")


def cmd_mpg(cfg: X.MpgExperimentConfig, run: Run, workers: int):
    T, rows = X.run_mpg(cfg, workers=workers)
    run.model("mpg_schema.cscg", UngroundedSchema(T, name="mpg"))
    run.csv("mpg_episodes.csv", rows)
    mean, ci = X.mean_ci([r["reward"] for r in rows])
    scored = sum(r["scored_tasks"] for r in rows)
    optimal = sum(r["optimal_tasks"] for r in rows) / scored if scored else float("nan")
    summary = [{"episodes": len(rows), "mean_reward": mean, "ci95": ci, "optimal_fraction": optimal}]
    run.csv("mpg_summary.csv", summary)
    print(f"reward {mean:.2f} +/- {ci:.2f} over {len(rows)} episodes; {optimal:.1%} of tasks on a shortest path")


def report_rows(paths, group_by, metrics) -> list:
    rows = []
    for p in paths:
        if not Path(p).exists():
            raise InvalidInput(f"input not found: {p}")
        rows.extend(read_csv(p))
    if not rows:
        raise InvalidInput("no rows in the given inputs")
    columns = set(rows[0])
    missing = [c for c in list(group_by) + list(metrics) if c not in columns]
    if missing:
        raise InvalidInput(f"columns not in input: {', '.join(missing)}")
    groups = {}
    for r in rows:
        groups.setdefault(tuple(r[g] for g in group_by), []).append(r)
    out = []
    for key in groups:     # first-appearance order
        sel = groups[key]
        entry = dict(zip(group_by, key))
        entry["n"] = len(sel)
        for m in metrics:
            vals = [1.0 if r[m] == "true" else 0.0 if r[m] == "false" else float(r[m]) for r in sel]
            entry[f"{m}_mean"], entry[f"{m}_ci95"] = X.mean_ci(vals)
        out.append(entry)
    return out


def cmd_report(args) -> int:
    rows = report_rows(args.inputs, args.group_by, args.metrics)
    run = Run("report", None, args.out_dir)
    run.meta["inputs"] = " ".join(str(p) for p in args.inputs)
    run.csv("report.csv", rows)
    for r in rows:
        print("  ".join(f"{k}={_fmt(v)}" for k, v in r.items()))
    return EXIT_OK


HANDLERS = {"train": cmd_train, "bind": cmd_bind, "match": cmd_match, "match-window": cmd_match_window,
            "compose": cmd_compose, "plan": cmd_plan, "mpg": cmd_mpg}


# --------------------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cscg", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"cscg {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML file or shipped config name")
        p.add_argument("--seed", type=int)
        p.add_argument("--out-dir", default=f"runs/{name}")
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
        p.add_argument("--workers", type=int, default=1)
    p = sub.add_parser("report", help="mean and 95%% interval per group over CSV artifacts")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--group-by", nargs="*", default=[])
    p.add_argument("--metrics", nargs="+", required=True)
    p.add_argument("--out-dir", default="runs/report")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "report":
            return cmd_report(args)
        if args.workers < 1:
            raise InvalidInput("--workers must be at least 1")
        cfg = load_config(args.command, args.config, args.override, args.seed)
        run = Run(args.command, cfg, args.out_dir)
        run.config(cfg)
        HANDLERS[args.command](cfg, run, args.workers)
    except InvalidInput as exc:
        print(f"cscg: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (ModelError, X.ConfigError) as exc:
        print(f"cscg: {exc}", file=sys.stderr)
        return EXIT_INVALID if isinstance(exc, X.ConfigError) else EXIT_FAILED
    except Exception as exc:  # noqa: BLE001 - any other failure is a failed run, reported not raised
        log.debug("run failed", exc_info=True)
        print(f"cscg: run failed: {exc}", file=sys.stderr)
        return EXIT_FAILED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
