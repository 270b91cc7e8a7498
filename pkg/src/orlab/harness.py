"""Experiment orchestration: train/load a model, run the attack suite
through the defended query interface, aggregate, and emit reports.

Everything is driven by (config, master seed): per-image/per-attack RNG
streams are derived from (master seed, image index, attack index), so a
rerun of the same config writes byte-identical report files. Wall-clock
timing goes to a separate ``run_meta.txt`` sidecar, never into the
deterministic reports.
"""

import dataclasses
import json
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import attacks as atk
from . import data, nn
from .defense import (DefendedOracle, NoiseSpec, QueryLedger,
                      calibrate_variance, calibrate_variance_mc, probit)

__all__ = ["ExperimentReport", "run_experiment", "transfer_attack_eval",
           "emit_report", "calibration_sweep", "build_dataset", "build_model",
           "defended_accuracy"]


@dataclass
class ExperimentReport:
    dataset_name: str
    model_summary: str
    clean_accuracy: float
    defended_accuracy: list        # (sigma2, accuracy) pairs
    attack_rows: list              # dict rows, stable keys
    pgd_traces: dict               # loss_kind -> [(step, mean loss), ...]
    master_seed: int
    n_eval_images: int
    wall_clock_s: float = 0.0


_ROW_KEYS = ["attack_index", "family", "solver", "targeted", "averaging_k",
             "sigma2", "n_images", "success_rate", "mean_l2", "mean_linf",
             "mean_queries"]


def build_dataset(spec):
    """Dataset from a validated config mapping (synthetic or IDX)."""
    spec = dict(spec)
    kind = spec.pop("kind")
    if kind == "synthetic":
        return data.synth_dataset(**spec)
    limits = (spec.pop("train_limit", None), spec.pop("test_limit", None))
    ds = data.idx_dataset(**spec)
    return ds.subset(*limits)


def build_model(model_cfg, dataset):
    """Load a checkpoint or train an MLP per the config."""
    if "checkpoint" in model_cfg:
        return nn.load_model(model_cfg["checkpoint"]), []
    sizes = [dataset.input_dim] + list(model_cfg["hidden"]) + [dataset.num_classes]
    dtype = np.float32 if model_cfg.get("dtype") == "float32" else np.float64
    tc = model_cfg["train"]
    model = nn.mlp(sizes, seed=tc.seed, dtype=dtype)
    return nn.train(model, dataset.x_train, dataset.y_train, tc)


def defended_accuracy(model, x, y, spec, rng):
    """Accuracy of argmax d(p) over a test set, one noisy query per input."""
    correct = 0
    ledger = QueryLedger(x.shape[0])
    oracle = DefendedOracle(model, spec, rng, ledger)
    for i in range(x.shape[0]):
        correct += int(np.argmax(oracle(x[i])) == y[i])
    return correct / x.shape[0]


def _sigma2_scalar(spec):
    return float(np.max(np.asarray(spec.sigma2, dtype=np.float64)))


def _select_eval_images(model, dataset, n):
    """First n test inputs the clean model classifies correctly."""
    preds = nn.predict_batch(model, dataset.x_test)
    idx = np.nonzero(preds == dataset.y_test)[0][:n]
    if idx.shape[0] < n:
        raise RuntimeError(
            f"only {idx.shape[0]} correctly classified test inputs available, "
            f"need {n}")
    return dataset.x_test[idx], dataset.y_test[idx]


def _stream_seed(master_seed, *path):
    return int(np.random.SeedSequence((master_seed,) + path).generate_state(1)[0])


def _run_one(model, x0, y, cfg, spec, master_seed, img_idx, atk_idx):
    """One attack instance with derived defense/attack RNG streams."""
    attack_seed = _stream_seed(master_seed, img_idx, atk_idx, 2)
    cfg = dataclasses.replace(cfg, seed=attack_seed)
    if cfg.family == "pgd":
        return atk.pgd_attack(model, x0, y, cfg)
    if cfg.family == "cw_l2":
        target = cfg.target if cfg.targeted else (int(y) + 1) % model.num_classes
        return atk.cw_l2_attack(model, x0, target, cfg)
    defense_rng = np.random.default_rng(
        np.random.SeedSequence((master_seed, img_idx, atk_idx, 1)))
    ledger = QueryLedger(atk.effective_query_limit(cfg))
    oracle = atk.averaged_oracle(
        DefendedOracle(model, spec, defense_rng, ledger), cfg.averaging_k)
    predict_fn = lambda z: nn.predict(model, z)
    if cfg.family == "zoo":
        return atk.zoo_attack(oracle, x0, y, cfg, predict_fn)
    return atk.ql_attack(oracle, x0, y, cfg, predict_fn)


def _aggregate(results, row_base):
    succ = [r for r in results if r.success]
    row = dict(row_base)
    row["n_images"] = len(results)
    row["success_rate"] = len(succ) / len(results) if results else math.nan
    row["mean_l2"] = float(np.mean([r.l2_distortion for r in succ])) if succ else math.nan
    row["mean_linf"] = float(np.mean([r.linf_distortion for r in succ])) if succ else math.nan
    row["mean_queries"] = float(np.mean([r.queries_used for r in results])) if results else math.nan
    return row


def run_experiment(cfg):
    """Run a parsed config end to end; returns an ExperimentReport.

    Attacks run only on test inputs the clean model classifies
    correctly; black-box families query the model exclusively through
    the defended oracle. Per-attack failures are recorded, not fatal.
    """
    t0 = time.perf_counter()
    dataset = build_dataset(cfg["dataset"])
    model, _ = build_model(cfg["model"], dataset)
    master_seed = cfg["seed"]
    clean_acc = nn.accuracy(model, dataset.x_test, dataset.y_test)
    xs, ys = _select_eval_images(model, dataset, cfg["n_eval_images"])

    sweep = cfg["sigma2_sweep"]
    noise = cfg["noise"]
    specs = ([dataclasses.replace(noise, sigma2=s) for s in sweep]
             if sweep is not None else [noise])

    defended_acc = []
    for si, spec in enumerate(specs):
        rng = np.random.default_rng(np.random.SeedSequence((master_seed, 9000 + si)))
        defended_acc.append((_sigma2_scalar(spec),
                             defended_accuracy(model, dataset.x_test,
                                               dataset.y_test, spec, rng)))

    rows = []
    pgd_traces = {}
    for si, spec in enumerate(specs):
        sigma2 = _sigma2_scalar(spec)
        for ai, acfg in enumerate(cfg["attacks"]):
            results, errors = [], 0
            for ii in range(xs.shape[0]):
                try:
                    results.append(_run_one(model, xs[ii], int(ys[ii]), acfg,
                                            spec, master_seed,
                                            si * 10000 + ii, ai))
                except Exception:
                    errors += 1
            base = {"attack_index": ai, "family": acfg.family,
                    "solver": acfg.solver if acfg.family == "zoo" else "-",
                    "targeted": acfg.targeted,
                    "averaging_k": acfg.averaging_k, "sigma2": sigma2}
            row = _aggregate(results, base)
            if errors:
                row["errors"] = errors
            rows.append(row)
            if acfg.family == "pgd" and results:
                n_steps = min(len(r.loss_trace) for r in results)
                mean_trace = [(s, float(np.mean([r.loss_trace[s][2] for r in results])))
                              for s in range(n_steps)]
                pgd_traces[f"pgd_{acfg.pgd_loss}_sigma2_{sigma2:.6g}"] = mean_trace

    summary = (f"mlp {dataset.input_dim}-"
               + "-".join(str(l.out_dim) for l in model.layers if isinstance(l, nn.Dense)))
    return ExperimentReport(
        dataset_name=dataset.name, model_summary=summary,
        clean_accuracy=clean_acc, defended_accuracy=defended_acc,
        attack_rows=rows, pgd_traces=pgd_traces, master_seed=master_seed,
        n_eval_images=cfg["n_eval_images"],
        wall_clock_s=time.perf_counter() - t0)


def transfer_attack_eval(target_model, dataset, substitute_or_sigma,
                         attack_cfg, seed, train_config, n_eval=20):
    """Substitute-model transfer: train a same-architecture substitute on
    the same data at the given noise level, craft white-box PGD examples
    on it, and measure how often they fool the target."""
    tc = dataclasses.replace(train_config, or_sigma=substitute_or_sigma,
                             seed=seed)
    init = nn.mlp([l.in_dim for l in target_model.layers]
                  + [target_model.num_classes], seed=seed,
                  dtype=target_model.dtype)
    substitute, _ = nn.train(init, dataset.x_train, dataset.y_train, tc)
    xs, ys = _select_eval_images(target_model, dataset, n_eval)
    transferred = 0
    direct = 0
    for i in range(xs.shape[0]):
        cfg = dataclasses.replace(attack_cfg,
                                  seed=_stream_seed(seed, i, 0, 3))
        res = atk.pgd_attack(substitute, xs[i], int(ys[i]), cfg)
        direct += int(res.success)
        x_adv = res.metadata["final_example"]
        transferred += int(nn.predict(target_model, x_adv) != int(ys[i]))
    return {"substitute_or_sigma": substitute_or_sigma,
            "substitute_success_rate": direct / xs.shape[0],
            "transfer_success_rate": transferred / xs.shape[0],
            "n_images": int(xs.shape[0])}


def calibration_sweep(deltas, ks, trials=10**6, seed=0):
    """Calibration table: Monte-Carlo sigma^2 vs the closed form, with a
    fresh-noise round-trip check of the achieved flip rate."""
    rows = []
    for di, delta in enumerate(deltas):
        for ki, k in enumerate(ks):
            rng = np.random.default_rng(
                np.random.SeedSequence((seed, di, ki)))
            sig2_mc = calibrate_variance_mc(delta, k, trials=trials, rng=rng)
            sig2_form = calibrate_variance(delta, k)
            sig2_race = delta ** 2 / (2.0 * probit(k) ** 2)
            z = rng.standard_normal(trials)
            rate = float(np.mean(z * np.sqrt(2.0 * sig2_mc) > delta))
            rows.append({
                "delta": delta, "K": k,
                "sigma2_mc": sig2_mc,
                "sigma2_closed_form": sig2_form,
                "sigma2_race_analytic": sig2_race,
                "closed_form_deviation": abs(sig2_form - sig2_mc),
                "replayed_flip_rate": rate,
                "pass": abs(rate - k) <= 0.01,
            })
    return rows


# ---------------------------------------------------------------------------
# report emission

def _fmt(v):
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        return f"{v:.6g}"
    return str(v)


def _round6(v):
    if isinstance(v, float) and math.isfinite(v):
        return float(f"{v:.6g}")
    if isinstance(v, float):
        return None  # nan/inf are not valid JSON
    return v


def emit_report(report, out_dir, formats=("csv", "json-lines", "text")):
    """Write report files with stable column order and 6-significant-digit
    floats; returns the list of written paths. An empty attack list still
    produces a header-only CSV."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    keys = list(_ROW_KEYS)
    if any("errors" in r for r in report.attack_rows):
        keys.append("errors")

    if "csv" in formats:
        p = out / "report.csv"
        with open(p, "w") as fh:
            fh.write(",".join(keys) + "\n")
            for row in report.attack_rows:
                fh.write(",".join(_fmt(row.get(k, "")) for k in keys) + "\n")
        written.append(p)

    if "json-lines" in formats:
        p = out / "report.jsonl"
        with open(p, "w") as fh:
            head = {"type": "summary", "dataset": report.dataset_name,
                    "model": report.model_summary,
                    "clean_accuracy": _round6(report.clean_accuracy),
                    "defended_accuracy": [[_round6(s), _round6(a)]
                                          for s, a in report.defended_accuracy],
                    "master_seed": report.master_seed,
                    "n_eval_images": report.n_eval_images}
            fh.write(json.dumps(head, sort_keys=True) + "\n")
            for row in report.attack_rows:
                obj = {"type": "attack_row"}
                obj.update({k: _round6(row[k]) for k in keys if k in row})
                fh.write(json.dumps(obj, sort_keys=True) + "\n")
        written.append(p)

    if "text" in formats:
        p = out / "report.txt"
        with open(p, "w") as fh:
            fh.write(f"dataset: {report.dataset_name}   model: {report.model_summary}\n")
            fh.write(f"clean accuracy: {report.clean_accuracy:.6g}\n")
            for s, a in report.defended_accuracy:
                fh.write(f"defended accuracy @ sigma2={s:.6g}: {a:.6g}\n")
            widths = [max(len(k), 10) for k in keys]
            fh.write("  ".join(k.ljust(w) for k, w in zip(keys, widths)) + "\n")
            for row in report.attack_rows:
                fh.write("  ".join(_fmt(row.get(k, "")).ljust(w)
                                   for k, w in zip(keys, widths)) + "\n")
        written.append(p)

    plot = out / "plotdata"
    plot.mkdir(exist_ok=True)
    sweep_vals = sorted({row["sigma2"] for row in report.attack_rows})
    if len(sweep_vals) > 1:
        for family in sorted({r["family"] for r in report.attack_rows}):
            p = plot / f"success_vs_sigma2_{family}.csv"
            with open(p, "w") as fh:
                fh.write("sigma2,success_rate\n")
                for row in report.attack_rows:
                    if row["family"] == family:
                        fh.write(f"{_fmt(row['sigma2'])},{_fmt(row['success_rate'])}\n")
            written.append(p)
        p = plot / "accuracy_vs_sigma2.csv"
        with open(p, "w") as fh:
            fh.write("sigma2,defended_accuracy\n")
            for s, a in report.defended_accuracy:
                fh.write(f"{_fmt(s)},{_fmt(a)}\n")
        written.append(p)
    for name, trace in report.pgd_traces.items():
        p = plot / f"loss_trace_{name}.csv"
        with open(p, "w") as fh:
            fh.write("step,mean_loss\n")
            for step, loss in trace:
                fh.write(f"{step},{_fmt(float(loss))}\n")
        written.append(p)

    with open(out / "run_meta.txt", "w") as fh:  # excluded from determinism
        fh.write(f"wall_clock_s: {report.wall_clock_s:.3f}\n")
    return written
