"""Command-line interface.

Subcommands: ``train`` (dataset -> checkpoint), ``calibrate`` (noise
variance sweeps), ``attack`` (config -> report files), ``verify``
(analysis checks), ``report`` (re-render a saved report). Exit codes:
0 success, 1 config error, 2 runtime failure.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import analysis, harness, nn
from .config import ConfigError, load_config

__all__ = ["main"]


class _Parser(argparse.ArgumentParser):
    # bad flags are config errors (exit 1), not argparse's default 2
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _add_common(p, config_required=True):
    p.add_argument("--config", required=config_required, help="config file (JSON)")
    p.add_argument("--seed", type=int, default=None,
                   help="override the config's master seed")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--format", default="csv,json-lines,text",
                   help="comma list of csv|json-lines|text")


def _formats(arg):
    formats = tuple(s.strip() for s in arg.split(",") if s.strip())
    bad = [f for f in formats if f not in ("csv", "json-lines", "text")]
    if bad:
        raise ConfigError(f"unknown format(s) {bad}")
    return formats


def _cmd_train(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    out = Path(args.out or cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    dataset = harness.build_dataset(cfg["dataset"])
    model, log = harness.build_model(cfg["model"], dataset)
    ckpt = out / "model.ckpt"
    nn.save_model(model, ckpt)
    acc = nn.accuracy(model, dataset.x_test, dataset.y_test)
    with open(out / "train_log.csv", "w") as fh:
        fh.write("iteration,loss\n")
        for it, loss in log:
            fh.write(f"{it},{loss:.6g}\n")
    print(f"saved {ckpt} (test accuracy {acc:.4f})")
    return 0


def _cmd_calibrate(args):
    deltas = [float(s) for s in args.deltas.split(",")]
    ks = [float(s) for s in args.ks.split(",")]
    rows = harness.calibration_sweep(deltas, ks, trials=args.trials,
                                     seed=args.seed or 0)
    out = Path(args.out or "results")
    out.mkdir(parents=True, exist_ok=True)
    keys = ["delta", "K", "sigma2_mc", "sigma2_closed_form",
            "sigma2_race_analytic", "closed_form_deviation",
            "replayed_flip_rate", "pass"]
    with open(out / "calibration.csv", "w") as fh:
        fh.write(",".join(keys) + "\n")
        for row in rows:
            fh.write(",".join(harness._fmt(row[k]) for k in keys) + "\n")
    for row in rows:
        status = "PASS" if row["pass"] else "FAIL"
        print(f"delta={row['delta']:.3g} K={row['K']:.3g} "
              f"sigma2_mc={row['sigma2_mc']:.6g} "
              f"closed_form={row['sigma2_closed_form']:.6g} "
              f"replayed_rate={row['replayed_flip_rate']:.4f} {status}")
    ok = all(r["pass"] for r in rows)
    print(f"calibration: {'all rows PASS' if ok else 'FAILURES present'}")
    return 0 if ok else 2


def _cmd_attack(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    out = args.out or cfg["out_dir"]
    report = harness.run_experiment(cfg)
    written = harness.emit_report(report, out, _formats(args.format))
    for p in written:
        print(f"wrote {p}")
    return 0


def _cmd_verify(args):
    rows = analysis.run_verification_suite(seed=args.seed or 0)
    out = Path(args.out or "results")
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "verify.csv", "w") as fh:
        fh.write("check,analytic,empirical,gap,pass\n")
        for row in rows:
            fh.write(f"{row['check']},{row['analytic']:.6g},"
                     f"{row['empirical']:.6g},{row['gap']:.6g},{row['pass']}\n")
    width = max(len(r["check"]) for r in rows)
    for row in rows:
        status = "PASS" if row["pass"] else "FAIL"
        print(f"{row['check']:<{width}}  analytic={row['analytic']:<12.6g} "
              f"empirical={row['empirical']:<12.6g} gap={row['gap']:<12.6g} {status}")
    ok = all(r["pass"] for r in rows)
    print(f"verify: {sum(r['pass'] for r in rows)}/{len(rows)} checks pass")
    return 0 if ok else 2


def _cmd_report(args):
    # re-render a saved report.jsonl into csv/text
    src = Path(args.config)
    rows, head = [], None
    with open(src) as fh:
        for line in fh:
            obj = json.loads(line)
            if obj.get("type") == "summary":
                head = obj
            elif obj.get("type") == "attack_row":
                obj.pop("type")
                rows.append(obj)
    if head is None:
        raise ConfigError(f"{src}: no summary line; not a saved report")
    report = harness.ExperimentReport(
        dataset_name=head["dataset"], model_summary=head["model"],
        clean_accuracy=head["clean_accuracy"],
        defended_accuracy=[tuple(x) for x in head["defended_accuracy"]],
        attack_rows=rows, pgd_traces={}, master_seed=head["master_seed"],
        n_eval_images=head["n_eval_images"])
    written = harness.emit_report(report, args.out or src.parent,
                                  _formats(args.format))
    for p in written:
        print(f"wrote {p}")
    return 0


def main(argv=None):
    parser = _Parser(prog="orlab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and save a checkpoint")
    _add_common(p)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("calibrate", help="noise-variance calibration sweep")
    _add_common(p, config_required=False)
    p.add_argument("--deltas", default="0.2,0.5,0.8")
    p.add_argument("--ks", default="0.01,0.1,0.2")
    p.add_argument("--trials", type=int, default=10**6)
    p.set_defaults(fn=_cmd_calibrate)

    p = sub.add_parser("attack", help="run an attack experiment from a config")
    _add_common(p)
    p.set_defaults(fn=_cmd_attack)

    p = sub.add_parser("verify", help="run the analysis verification suite")
    _add_common(p, config_required=False)
    p.set_defaults(fn=_cmd_verify)

    p = sub.add_parser("report", help="re-render a saved report.jsonl")
    _add_common(p)
    p.set_defaults(fn=_cmd_report)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
