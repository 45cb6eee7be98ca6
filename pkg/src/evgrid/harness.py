"""Command-line experiment runner.

Verbs: ``train`` (per-seed training, checkpoints, curves, final metrics),
``eval`` (deterministic rollouts from a checkpoint or the greedy rule),
``sweep`` (one full run per axis value per seed), ``report`` (plot-ready
CSVs from a finished run directory).

Output conventions: ``metrics.csv`` and ``summary.csv`` carry only
simulation-derived quantities and are byte-identical across re-runs;
wall-clock figures live in ``timing.csv``. Every run directory gets a
``manifest.json`` with the effective-config hash, seeds, and build info.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import platform
import sys
import time
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import yaml

from . import DATA_DIR, __version__
from .env import CouplingEnv
from .predictor import OnlinePredictor
from .scenario import ScenarioError, load_scenario
from .srl import (AUGMENTED, METHODS, ActorCriticAgent, DQNAgent,
                  LagrangePPOAgent, ReinforceAgent, evaluate, load_checkpoint,
                  pad_width, save_checkpoint, train)

EVAL_SEED_BASE = 990_000
SWEEP_AXES = ("ev_fraction", "controller_interval", "decoder_length",
              "compliance_rate")


class HarnessError(ValueError):
    pass


@dataclass(frozen=True)
class MetricsRecord:
    method: str
    seed: int
    ttt_s: float
    cvv: float
    wct_min: float
    et_s: float
    dt_mean_s: float

    def __post_init__(self):
        for name in ("ttt_s", "cvv", "wct_min", "et_s", "dt_mean_s"):
            v = float(getattr(self, name))
            if not np.isfinite(v) or v < 0:
                raise HarnessError(f"{name} must be finite and >= 0, got {v}")
            object.__setattr__(self, name, v)


# ---------------------------------------------------------------------------
# Small IO helpers
# ---------------------------------------------------------------------------

def write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


def read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def config_hash(cfg) -> str:
    text = yaml.safe_dump(cfg.source, sort_keys=True)
    return hashlib.sha256(text.encode()).hexdigest()


def percentile98(values) -> float:
    """Linear-interpolation 98th percentile, as np.percentile defines it."""
    arr = np.asarray(values, dtype=float)
    if arr.size == 0:
        raise HarnessError("no cost samples to take a percentile of")
    return float(np.percentile(arr, 98))


def write_manifest(out, cfg, args_dict, seeds, sweep=None):
    doc = {
        "scenario": cfg.name,
        "config_sha256": config_hash(cfg),
        "seeds": [int(s) for s in seeds],
        "args": args_dict,
        "sweep": sweep,
        "build": {
            "package": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
        "created_utc": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }
    path = Path(out) / "manifest.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def write_metrics(out, records):
    rows = [(r.method, r.seed, repr(r.ttt_s), repr(r.cvv), repr(r.wct_min))
            for r in records]
    write_csv(Path(out) / "metrics.csv",
              ["method", "seed", "ttt_s", "cvv", "wct_min"], rows)
    write_csv(Path(out) / "timing.csv",
              ["method", "seed", "et_s", "dt_mean_s"],
              [(r.method, r.seed, repr(r.et_s), repr(r.dt_mean_s))
               for r in records])


def write_summary(out, records):
    """Mean and population std per method over seeds, one row per metric."""
    rows = []
    for method in sorted({r.method for r in records}):
        sel = [r for r in records if r.method == method]
        for metric in ("ttt_s", "cvv", "wct_min"):
            vals = np.array([getattr(r, metric) for r in sel])
            rows.append((method, metric, len(sel),
                         repr(float(vals.mean())), repr(float(vals.std()))))
    write_csv(Path(out) / "summary.csv",
              ["method", "metric", "n_seeds", "mean", "std"], rows)


def write_curve(out, method, seed, curve):
    rows = [(row["epoch"], repr(row["mean_ttt"]), repr(row["mean_cvv"]),
             repr(row["lam"]), repr(row["predictor_loss"]))
            for row in curve]
    return write_csv(Path(out) / f"training_curve_{method}_s{seed}.csv",
                     ["epoch", "mean_ttt", "mean_cvv", "lambda",
                      "predictor_loss"], rows)


def write_eval_artifacts(out, method, seed, records, trace):
    """Per-episode minute, droop, and step CSVs backing the report verb."""
    out = Path(out)
    minute_rows, droop_rows, step_rows, trace_rows = [], [], [], []
    n_cs = None
    for i, rec in enumerate(records):
        for t, occ, _feats, total_kw, setpoint in rec.minute_log:
            n_cs = len(occ)
            minute_rows.append((i, rec.seed, repr(float(t)),
                                repr(float(total_kw)), repr(float(setpoint)),
                                *[repr(float(o)) for o in occ]))
        for t, v_avg, setpoint, occ in rec.droop_log:
            droop_rows.append((i, rec.seed, repr(float(t)), repr(float(v_avg)),
                               repr(float(setpoint)),
                               *[repr(float(o)) for o in occ]))
        for k, (r, c) in enumerate(zip(rec.rewards, rec.costs)):
            step_rows.append((i, rec.seed, k, repr(float(r)), repr(float(c))))
        if trace and rec.trace is not None:
            for step, action, r, c, elapsed, vid, followed in rec.trace:
                trace_rows.append((i, rec.seed, step, action, repr(float(r)),
                                   repr(float(c)), repr(float(elapsed)), vid,
                                   int(followed)))
    occ_cols = [f"occ_{j}" for j in range(n_cs or 0)]
    write_csv(out / f"minutes_{method}_s{seed}.csv",
              ["episode", "ep_seed", "t_s", "total_kw", "setpoint_kw",
               *occ_cols], minute_rows)
    write_csv(out / f"droop_{method}_s{seed}.csv",
              ["episode", "ep_seed", "t_s", "v_avg", "setpoint_kw",
               *occ_cols], droop_rows)
    write_csv(out / f"steps_{method}_s{seed}.csv",
              ["episode", "ep_seed", "step", "reward", "cost"], step_rows)
    if trace:
        write_csv(out / f"trace_{method}_s{seed}.csv",
                  ["episode", "ep_seed", "step", "action", "reward", "cost",
                   "elapsed_s", "vid", "followed"], trace_rows)


# ---------------------------------------------------------------------------
# Agent plumbing shared by eval and sweep
# ---------------------------------------------------------------------------

def build_agent(cfg, env, method, seed=0):
    """Fresh (untrained) agent + predictor matching a method's layout."""
    pad = pad_width(cfg) if method in AUGMENTED else 0
    dim = env.state_dim + pad
    tc = cfg.training
    rng = np.random.default_rng([seed, cfg.seed, 4])
    if method in ("opsrl", "ppolag", "ppo", "ppopenalty"):
        agent = LagrangePPOAgent(dim, env.action_dim, tc, rng,
                                 constrained=method in AUGMENTED)
    elif method == "dqn":
        agent = DQNAgent(dim, env.action_dim, tc, rng)
    elif method == "reinforce":
        agent = ReinforceAgent(dim, env.action_dim, tc, rng)
    elif method == "actorcritic":
        agent = ActorCriticAgent(dim, env.action_dim, tc, rng)
    else:
        raise HarnessError(f"method '{method}' does not use an agent")
    predictor = OnlinePredictor(cfg, seed) if method == "opsrl" else None
    return agent, predictor


def _patched_source(cfg, keys, value):
    """Copy of the scenario document with one (possibly nested) key changed,
    so the config hash tracks the effective settings."""
    src = copy.deepcopy(cfg.source)
    node = src
    for k in keys[:-1]:
        node = node.setdefault(k, {})
    node[keys[-1]] = value
    return src


def apply_sweep_value(cfg, axis, value):
    """Return a config with one sensitivity axis changed."""
    if axis == "ev_fraction":
        v = float(value)
        if not 0.0 <= v <= 1.0:
            raise HarnessError(f"ev_fraction {v} outside [0, 1]")
        return replace(cfg, demand=replace(cfg.demand, ev_fraction=v),
                       source=_patched_source(cfg, ("demand", "ev_fraction"), v))
    if axis == "controller_interval":
        minutes = float(value)
        interval = minutes * 60.0
        if interval <= 0 or cfg.demand.control_s % interval != 0:
            raise HarnessError(
                f"controller interval {minutes:g} min must divide the "
                f"control duration ({cfg.demand.control_s:g} s)")
        return replace(cfg, droop=replace(cfg.droop, interval_s=interval),
                       source=_patched_source(cfg, ("droop", "interval_s"),
                                              interval))
    if axis == "decoder_length":
        n = int(value)
        if n < 1:
            raise HarnessError("decoder_length must be >= 1")
        return replace(cfg, predictor=replace(cfg.predictor, dec_len=n),
                       source=_patched_source(cfg, ("predictor", "dec_len"), n))
    if axis == "compliance_rate":
        v = float(value)
        if not 0.0 <= v <= 1.0:
            raise HarnessError(f"compliance_rate {v} outside [0, 1]")
        return replace(cfg, compliance_rate=v,
                       source=_patched_source(cfg, ("compliance_rate",), v))
    raise HarnessError(f"unknown sweep axis '{axis}' (choose from "
                       f"{', '.join(SWEEP_AXES)})")


def _parse_values(text):
    out = []
    for tok in text.split(","):
        tok = tok.strip()
        if not tok:
            continue
        if "/" in tok:
            num, den = tok.split("/", 1)
            out.append(float(num) / float(den))
        else:
            out.append(float(tok))
    if not out:
        raise HarnessError("empty sweep value list")
    return out


def resolve_seeds(args, cfg):
    if args.seeds:
        return [int(s) for s in args.seeds.split(",")]
    if "seeds" in cfg.source:
        return [int(s) for s in cfg.seeds]
    return list(range(5))


def resolve_scenario(name):
    """Accept a YAML path or the bare name of a bundled scenario."""
    p = Path(name)
    if p.is_file():
        return p
    for cand in (DATA_DIR / name, DATA_DIR / f"{name}.yaml"):
        if cand.is_file():
            return cand
    raise HarnessError(f"scenario '{name}' is neither a file nor bundled")


def _load_cfg(args):
    cfg = load_scenario(resolve_scenario(args.scenario))
    if getattr(args, "compliance", None) is not None:
        cfg = apply_sweep_value(cfg, "compliance_rate", args.compliance)
    return cfg


# ---------------------------------------------------------------------------
# Verbs
# ---------------------------------------------------------------------------

def run_train(cfg, method, seeds, out, trace=False, progress=None):
    """Train per seed, then evaluate each checkpoint once for the metrics
    table. Returns the MetricsRecords."""
    out = Path(out)
    records = []
    for seed in seeds:
        t0 = time.perf_counter()
        res = train(cfg, method, seed, progress=progress)
        et = time.perf_counter() - t0
        write_curve(out, method, seed, res.curve)
        save_checkpoint(out / f"checkpoint_{method}_s{seed}.bin",
                        res.agent, res.predictor)
        evals = evaluate(cfg, method, res.agent, res.predictor,
                         seeds=(EVAL_SEED_BASE + seed,), trace=trace)
        m = evals[0].metrics
        records.append(MetricsRecord(method, seed, m.ttt_s, m.cvv, m.wct_min,
                                     et, m.dt_mean_s))
        write_eval_artifacts(out, method, seed, evals, trace)
    write_metrics(out, records)
    write_summary(out, records)
    return records


def run_eval(cfg, method, seeds, out, checkpoint=None, compliance=None,
             trace=False):
    out = Path(out)
    agent = predictor = None
    if method != "greedy":
        if checkpoint is None:
            raise HarnessError(f"method '{method}' needs --checkpoint")
        env = CouplingEnv(cfg)
        agent, predictor = build_agent(cfg, env, method)
        load_checkpoint(checkpoint, agent, predictor)
    records = []
    for seed in seeds:
        t0 = time.perf_counter()
        evals = evaluate(cfg, method, agent, predictor, seeds=(seed,),
                         compliance=compliance, trace=trace)
        et = time.perf_counter() - t0
        m = evals[0].metrics
        records.append(MetricsRecord(method, seed, m.ttt_s, m.cvv, m.wct_min,
                                     et, m.dt_mean_s))
        write_eval_artifacts(out, method, seed, evals, trace)
    write_metrics(out, records)
    write_summary(out, records)
    return records


def run_sweep(cfg, method, axis, values, seeds, out, trace=False):
    out = Path(out)
    combined = []
    for value in values:
        sub_cfg = apply_sweep_value(cfg, axis, value)
        sub_out = out / f"{axis}_{value:g}"
        if method == "greedy":
            recs = run_eval(sub_cfg, method, seeds, sub_out, trace=trace)
        else:
            recs = run_train(sub_cfg, method, seeds, sub_out, trace=trace)
        write_manifest(sub_out, sub_cfg, {"axis": axis, "value": value},
                       seeds)
        combined.extend((axis, repr(float(value)), r.method, r.seed,
                         repr(r.ttt_s), repr(r.cvv), repr(r.wct_min))
                        for r in recs)
    write_csv(out / "sweep_summary.csv",
              ["axis", "value", "method", "seed", "ttt_s", "cvv", "wct_min"],
              combined)
    return combined


def run_report(out):
    """Aggregate a finished run directory into plot-ready CSVs."""
    out = Path(out)
    if not out.is_dir():
        raise HarnessError(f"run directory {out} does not exist")
    curves = sorted(out.glob("training_curve_*.csv"))
    minutes = sorted(out.glob("minutes_*.csv"))
    steps = sorted(out.glob("steps_*.csv"))
    if not (curves or minutes or steps):
        raise HarnessError(f"no run artifacts found under {out}")

    if curves:
        by_key = {}
        for path in curves:
            method = path.stem[len("training_curve_"):].rsplit("_s", 1)[0]
            _, rows = read_csv(path)
            for row in rows:
                by_key.setdefault((method, int(row[0])), []).append(
                    [float(x) for x in row[1:]])
        rows = [(m, e, repr(float(np.mean([v[0] for v in vals]))),
                 repr(float(np.mean([v[1] for v in vals]))),
                 repr(float(np.mean([v[2] for v in vals]))),
                 repr(float(np.mean([v[3] for v in vals]))))
                for (m, e), vals in sorted(by_key.items())]
        write_csv(out / "report_training_curve.csv",
                  ["method", "epoch", "mean_ttt", "mean_cvv", "lambda",
                   "predictor_loss"], rows)

    if minutes:
        power_rows, occ_rows = [], []
        for path in minutes:
            method = path.stem[len("minutes_"):].rsplit("_s", 1)[0]
            header, rows = read_csv(path)
            n_cs = len(header) - 5
            for row in rows:
                power_rows.append((method, row[1], row[0], row[2], row[3],
                                   row[4]))
                for j in range(n_cs):
                    occ_rows.append((method, row[1], row[0], row[2], j,
                                     row[5 + j]))
        write_csv(out / "report_power.csv",
                  ["method", "ep_seed", "episode", "t_s", "total_kw",
                   "setpoint_kw"], power_rows)
        write_csv(out / "report_occupancy.csv",
                  ["method", "ep_seed", "episode", "t_s", "cs_id",
                   "occupancy"], occ_rows)

    if steps:
        cost_rows, pct_rows = [], []
        by_method = {}
        for path in steps:
            method = path.stem[len("steps_"):].rsplit("_s", 1)[0]
            _, rows = read_csv(path)
            for row in rows:
                cost_rows.append((method, row[1], row[0], row[2], row[4]))
                by_method.setdefault(method, []).append(float(row[4]))
        for method, costs in sorted(by_method.items()):
            pct_rows.append((method, len(costs), repr(percentile98(costs))))
        write_csv(out / "report_cost_distribution.csv",
                  ["method", "ep_seed", "episode", "step", "cost"], cost_rows)
        write_csv(out / "report_cost_percentiles.csv",
                  ["method", "n_samples", "p98"], pct_rows)


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(
        prog="evgrid",
        description="Coupled traffic/grid charging-recommendation experiments")
    sub = p.add_subparsers(dest="mode", required=True)

    def common(sp, scenario=True):
        if scenario:
            sp.add_argument("--scenario", required=True,
                            help="scenario YAML path or bundled name")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seeds", default="",
                        help="comma-separated seeds (default: scenario "
                             "seeds, else 0-4)")
        sp.add_argument("--compliance", type=float, default=None,
                        help="override driver compliance rate in [0, 1]")
        sp.add_argument("--trace", action="store_true",
                        help="write per-decision trace CSVs")

    tr = sub.add_parser("train", help="train a method across seeds")
    common(tr)
    tr.add_argument("--method", required=True,
                    choices=[m for m in METHODS if m != "greedy"])

    ev = sub.add_parser("eval", help="evaluate a checkpoint or greedy")
    common(ev)
    ev.add_argument("--method", required=True, choices=list(METHODS))
    ev.add_argument("--checkpoint", default=None,
                    help="checkpoint file from a train run")

    sw = sub.add_parser("sweep", help="sensitivity sweep along one axis")
    common(sw)
    sw.add_argument("--method", required=True, choices=list(METHODS))
    sw.add_argument("--sweep-axis", required=True, choices=list(SWEEP_AXES))
    sw.add_argument("--sweep-values", required=True,
                    help="comma-separated values; fractions like 1/6 allowed; "
                         "controller_interval is in minutes")

    rp = sub.add_parser("report", help="build plot-ready CSVs from a run")
    rp.add_argument("--out", required=True, help="finished run directory")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.mode == "report":
            run_report(args.out)
            print(f"report written under {args.out}")
            return 0
        cfg = _load_cfg(args)
        seeds = resolve_seeds(args, cfg)
        args_dict = {k: v for k, v in vars(args).items() if k != "mode"}
        if args.mode == "train":
            def progress(row):
                print(f"[{args.method} epoch {row['epoch']}] "
                      f"ttt={row['mean_ttt']:.0f}s cvv={row['mean_cvv']:.4f} "
                      f"lam={row['lam']:.4f}")
            run_train(cfg, args.method, seeds, args.out, trace=args.trace,
                      progress=progress)
        elif args.mode == "eval":
            run_eval(cfg, args.method, seeds, args.out,
                     checkpoint=args.checkpoint, compliance=args.compliance,
                     trace=args.trace)
        else:
            values = _parse_values(args.sweep_values)
            run_sweep(cfg, args.method, args.sweep_axis, values, seeds,
                      args.out, trace=args.trace)
        write_manifest(args.out, cfg, args_dict, seeds,
                       sweep=None if args.mode != "sweep" else
                       {"axis": args.sweep_axis, "values": args.sweep_values})
        print(f"done; outputs under {args.out}")
        return 0
    except (HarnessError, ScenarioError, ValueError, OSError,
            RuntimeError) as exc:
        print("ERROR " + json.dumps({"type": type(exc).__name__,
                                     "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
