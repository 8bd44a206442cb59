"""Command-line interface: ``pnrcam <subcommand> ...``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure, 4 I/O or
data-format error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .conditioning import (ConditioningRule, condition_events, conditional_histogram,
                           read_measurements, write_measurements)
from .errors import ConfigError, DataFormatError, NumericalError, PnrcamError
from .photon_model import g2_from_counts
from .pipeline import (ExperimentConfig, build_matrix, build_scene, calibrate_scene,
                       empirical_snr, ingest, load_config, run_experiment, sweep_snr,
                       with_overrides, write_sweep_csv)
from .sampler import AcquisitionConfig, run_acquisition, write_event_log
from .scene import load_matrix, save_matrix, save_scene
from .tvmin import reconstruct, save_reconstruction


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    rules = getattr(args, "rule", None)
    return with_overrides(cfg, seed=args.seed, out=args.out, threads=args.threads,
                          rules=rules or None)


def _out_dir(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_simulate(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg.out or "out")
    scene = build_scene(cfg.scene)
    q = build_matrix(cfg)
    scene = calibrate_scene(scene, q, cfg.scene.pattern_n_bar)
    ev = run_acquisition(scene, q, AcquisitionConfig(cfg.bins_per_pattern, cfg.params, cfg.seed),
                         threads=cfg.threads)
    save_scene(out / "scene.pgm", scene)
    save_matrix(out / "patterns.csv", q)
    write_event_log(out / "events.csv", ev)
    print(json.dumps({"events": str(out / "events.csv"), "digest": ev.digest(),
                      "patterns": int(q.m_rows), "bins_per_pattern": ev.bins_per_pattern}))
    return 0


def cmd_condition(args) -> int:
    ev = ingest(args.log)
    rules = [ConditioningRule.parse(r) for r in (args.rule or ["none"])]
    out = _out_dir(args, ".")
    for rule in rules:
        mv = condition_events(ev, rule)
        path = out / f"meas_{str(rule).replace(':', '_').replace(',', '_')}.csv"
        write_measurements(path, mv)
        print(json.dumps({"rule": str(rule), "file": str(path), "missing": mv.n_missing,
                          "events_used": int(mv.events_used.sum())}))
    return 0


def _parse_shape(text: str | None, x_cols: int) -> tuple[int, int]:
    if text:
        try:
            h, w = (int(v) for v in text.lower().split("x"))
        except ValueError as exc:
            raise ConfigError(f"--shape must look like HxW, got {text!r}") from exc
        return h, w
    side = math.isqrt(x_cols)
    if side * side != x_cols:
        raise ConfigError(f"{x_cols} pixels is not square; pass --shape HxW")
    return side, side


def cmd_reconstruct(args) -> int:
    cfg = _config(args)
    q = load_matrix(args.matrix)
    mv = read_measurements(args.measurements)
    shape = _parse_shape(args.shape, q.x_cols)
    result = reconstruct(q, mv, shape, cfg.solver)
    stem = Path(args.out or Path(args.measurements).with_suffix("").name + "_rec")
    stem.parent.mkdir(parents=True, exist_ok=True)
    save_reconstruction(stem, result, {"rule": str(mv.rule)})
    print(json.dumps({"image": str(stem.with_suffix(".pgm")), "iterations": result.iterations,
                      "converged": result.converged, "residual": result.residual}))
    return 0


def cmd_analyze(args) -> int:
    ev = ingest(args.log)
    out = _out_dir(args, ".")
    rows = []
    for text in args.rule or ["none"]:
        rule = ConditioningRule.parse(text)
        hist = conditional_histogram(ev, rule)
        path = out / f"hist_{str(rule).replace(':', '_').replace(',', '_')}.csv"
        np.savetxt(path, np.column_stack([np.arange(hist.size), hist]), fmt="%d",
                   delimiter=",", header="n1,count", comments="")
        snr = empirical_snr(ev, rule)
        rows.append({"rule": str(rule), "g2": g2_from_counts(hist), "events": int(hist.sum()),
                     "empirical_snr": snr if math.isfinite(snr) else None, "histogram": str(path)})
    print(json.dumps(rows, indent=2))
    return 0


def cmd_run(args) -> int:
    cfg = _config(args)
    cfg = with_overrides(cfg, out=cfg.out or "out", save_log=args.save_log)
    report = run_experiment(cfg)
    for r in report.rules:
        corr = r.metrics["correlation"] if r.metrics else None
        print(f"{r.rule:>12}  status={r.status}  corr={corr if corr is None else round(corr, 4)}"
              f"  g2={r.g2 if r.g2 is None else round(r.g2, 4)}  events={r.events_total}")
    print(f"report: {Path(cfg.out) / 'report.json'}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args)
    n_bars = args.n_bar or [cfg.scene.pattern_n_bar if cfg.scene.pattern_n_bar is not None else 0.8]
    ev = ingest(args.log) if args.log else None
    curves = sweep_snr([(nb, cfg.params) for nb in n_bars], args.scheme,
                       range(args.n_min, args.n_max + 1), ev)
    out = _out_dir(args, cfg.out or "out")
    path = out / f"snr_{args.scheme}.csv"
    write_sweep_csv(path, curves)
    for curve, _ in curves:
        print(f"n_bar={curve.n_bar:g}  " + "  ".join(f"N={n}:{s:.4g}" for n, s in zip(curve.N_values, curve.snr)))
    print(f"table: {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pnrcam", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, rule=False):
        p.add_argument("--config", help="experiment config file")
        p.add_argument("--seed", type=int, help="acquisition seed override")
        p.add_argument("--out", help="output directory (or file stem for reconstruct)")
        p.add_argument("--threads", type=int, help="worker threads")
        if rule:
            p.add_argument("--rule", action="append",
                           help="post:N | sub:N | joint:n,m | none (repeatable)")
        return p

    common(sub.add_parser("simulate", help="config -> event log")).set_defaults(fn=cmd_simulate)
    p = common(sub.add_parser("condition", help="event log + rule -> measurement vector"), rule=True)
    p.add_argument("log")
    p.set_defaults(fn=cmd_condition)
    p = common(sub.add_parser("reconstruct", help="measurements + matrix -> image"))
    p.add_argument("measurements")
    p.add_argument("--matrix", required=True, help="pattern CSV with JSON sidecar")
    p.add_argument("--shape", help="image shape HxW (default: square)")
    p.set_defaults(fn=cmd_reconstruct)
    p = common(sub.add_parser("analyze", help="g2 and empirical SNR of an event log"), rule=True)
    p.add_argument("log")
    p.set_defaults(fn=cmd_analyze)
    p = common(sub.add_parser("run", help="full pipeline"), rule=True)
    p.add_argument("--save-log", action="store_true", help="also write the raw event log")
    p.set_defaults(fn=cmd_run)
    p = common(sub.add_parser("sweep", help="analytic SNR versus N"))
    p.add_argument("--scheme", choices=("post", "sub"), default="post")
    p.add_argument("--n-min", type=int, default=0)
    p.add_argument("--n-max", type=int, default=7)
    p.add_argument("--n-bar", type=float, action="append", help="photon number (repeatable)")
    p.add_argument("--log", help="event log for an empirical overlay")
    p.set_defaults(fn=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 3
    except (DataFormatError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 4
    except PnrcamError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
