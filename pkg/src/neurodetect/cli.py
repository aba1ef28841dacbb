"""Command-line entry point: ``neurodetect {sweep,train,detect,oracle-check}``."""

from __future__ import annotations

import argparse
import csv
import sys

import numpy as np

from . import detect_ml as dml
from . import harness


def _cmd_sweep(args) -> int:
    cfg = harness.load_config(args.config, output=args.out)
    if args.paper_scale:
        cfg = harness.with_overrides(cfg, n_test=harness.PAPER_N_TEST["mimo" if cfg.is_mimo else "finite"])
    cfg = harness.with_overrides(cfg, sigma_e2=args.csi_error, workers=args.workers)
    curve = harness.run_sweep(cfg, out=args.out)
    for row in curve.rows:
        print(f"{row.detector:>12s} {row.snr_db:6g} dB  SER {row.ser:.3e} +/- {row.stderr:.1e}")
    return 0


def _cmd_train(args) -> int:
    cfg = harness.load_config(args.config)
    model = harness.train_from_config(cfg)
    dml.save_model(args.model_out, model)
    print(f"wrote {type(model).__name__} to {args.model_out}")
    return 0


def read_observations(path) -> np.ndarray:
    """Observation CSV: one header row, then one row per time index or channel use."""
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if len(rows) < 2:
        raise ValueError(f"{path}: expected a header and at least one row")
    return np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=float)


def write_decisions(path, decisions: np.ndarray):
    decisions = np.atleast_2d(np.asarray(decisions).T).T
    header = ["symbol"] if decisions.shape[1] == 1 else [f"user{k}" for k in range(decisions.shape[1])]
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(decisions.tolist())


def _cmd_detect(args) -> int:
    model = dml.load_model(args.model)
    obs = read_observations(args.input)
    if isinstance(model, dml.DeepSicNet):
        decisions = dml.deepsic_detect(model, obs)
    else:
        if obs.shape[1] != 1:
            raise ValueError("finite-memory models expect a single observation column")
        y = obs[:, 0]
        if args.detector == "bcjrnet":
            decisions = dml.bcjrnet_detect(model, y)
        else:
            decisions = dml.viterbinet_detect(model, y, args.viterbi_mode)
    write_decisions(args.out, decisions)
    return 0


def _cmd_oracle(args) -> int:
    report = harness.oracle_check(args.suite, n_instances=args.instances, seed=args.seed)
    print(report)
    return 0 if report.passed else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="neurodetect", description="Symbol detection experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("sweep", help="Monte-Carlo SER sweep to CSV")
    s.add_argument("--config", required=True)
    s.add_argument("--paper-scale", action="store_true", help="use the full test-symbol budget")
    s.add_argument("--csi-error", type=float, default=None, metavar="SIGMA_E2")
    s.add_argument("--out", required=True)
    s.add_argument("--workers", type=int, default=None)
    s.set_defaults(func=_cmd_sweep)

    t = sub.add_parser("train", help="train one data-driven detector")
    t.add_argument("--config", required=True)
    t.add_argument("--model-out", required=True)
    t.set_defaults(func=_cmd_train)

    d = sub.add_parser("detect", help="run a trained model on an observation CSV")
    d.add_argument("--model", required=True)
    d.add_argument("--in", dest="input", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--detector", choices=("viterbinet", "bcjrnet"), default="viterbinet")
    d.add_argument("--viterbi-mode", choices=("traceback", "sequential"), default="traceback")
    d.set_defaults(func=_cmd_detect)

    o = sub.add_parser("oracle-check", help="brute-force equivalence suite")
    o.add_argument("--suite", required=True, help=", ".join(harness.ORACLE_SUITES))
    o.add_argument("--instances", type=int, default=100)
    o.add_argument("--seed", type=int, default=0)
    o.set_defaults(func=_cmd_oracle)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"neurodetect: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
