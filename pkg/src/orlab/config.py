"""Experiment config files: JSON with a versioned schema.

Every mapping is validated against an explicit key set and unknown keys
are hard errors, so a typo like "sigma" for "sigma2" can never silently
run an undefended experiment.
"""

import json

from .attacks import AttackConfig, NesParams, PgdParams
from .defense import NoiseSpec
from .nn import AdvTrainConfig, TrainConfig

__all__ = ["ConfigError", "load_config", "parse_config", "SCHEMA_VERSION"]

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


def _require_keys(d, allowed, required, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(d).__name__}")
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}; "
                          f"allowed: {sorted(allowed)}")
    missing = sorted(set(required) - set(d))
    if missing:
        raise ConfigError(f"{where}: missing required key(s) {missing}")


def _parse_dataset(d):
    if d.get("kind") == "synthetic":
        _require_keys(d, {"kind", "classes", "dims", "separation", "n", "seed"},
                      {"kind"}, "dataset")
        return dict(d)
    if d.get("kind") == "idx":
        _require_keys(d, {"kind", "train_images", "train_labels", "test_images",
                          "test_labels", "train_limit", "test_limit",
                          "num_classes"},
                      {"kind", "train_images", "train_labels", "test_images",
                       "test_labels"}, "dataset")
        return dict(d)
    raise ConfigError(f"dataset.kind must be 'synthetic' or 'idx', "
                      f"got {d.get('kind')!r}")


def _parse_train(d, where="model.train"):
    _require_keys(d, {"iterations", "batch_size", "learning_rate", "or_sigma",
                      "noise_site", "adv_train", "seed", "log_every"},
                  set(), where)
    adv = d.get("adv_train")
    if adv is not None:
        _require_keys(adv, {"eps", "step", "steps"}, set(), where + ".adv_train")
        adv = AdvTrainConfig(**adv)
    kwargs = {k: v for k, v in d.items() if k != "adv_train"}
    try:
        return TrainConfig(adv_train=adv, **kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _parse_model(d):
    _require_keys(d, {"checkpoint", "hidden", "dtype", "train"}, set(), "model")
    if "checkpoint" in d:
        if set(d) - {"checkpoint"}:
            raise ConfigError("model: checkpoint excludes other model keys")
        return {"checkpoint": d["checkpoint"]}
    out = {"hidden": list(d.get("hidden", [64, 32])),
           "dtype": d.get("dtype", "float64")}
    if out["dtype"] not in ("float32", "float64"):
        raise ConfigError(f"model.dtype must be float32/float64, got {out['dtype']!r}")
    out["train"] = _parse_train(d.get("train", {}))
    return out


def _parse_noise(d):
    _require_keys(d, {"mu", "sigma2", "site", "phase"}, set(), "noise")
    try:
        return NoiseSpec(**d)
    except ValueError as exc:
        raise ConfigError(f"noise: {exc}") from exc


def _parse_attack(d, idx):
    where = f"attacks[{idx}]"
    allowed = {"family", "targeted", "target", "kappa", "h", "max_queries",
               "distortion_weight", "solver", "zoo_lr", "nes", "pgd",
               "pgd_loss", "cw_lr", "cw_steps", "averaging_k",
               "stagnation_queries", "seed"}
    _require_keys(d, allowed, {"family"}, where)
    kwargs = dict(d)
    if "nes" in kwargs:
        _require_keys(kwargs["nes"], {"search_sigma", "samples"}, set(),
                      where + ".nes")
        kwargs["nes"] = NesParams(**kwargs["nes"])
    if "pgd" in kwargs:
        _require_keys(kwargs["pgd"], {"eps", "step", "steps"}, set(),
                      where + ".pgd")
        kwargs["pgd"] = PgdParams(**kwargs["pgd"])
    try:
        return AttackConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


_TOP_KEYS = {"schema_version", "dataset", "model", "noise", "sigma2_sweep",
             "attacks", "n_eval_images", "seed", "out_dir"}


def parse_config(doc):
    """Validate a parsed JSON document into harness-ready pieces."""
    _require_keys(doc, _TOP_KEYS, {"schema_version", "dataset", "attacks"},
                  "config")
    if doc["schema_version"] != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {doc['schema_version']} "
                          f"(this build reads {SCHEMA_VERSION})")
    attacks = doc["attacks"]
    if not isinstance(attacks, list) or not attacks:
        raise ConfigError("attacks: need at least one attack")
    n_eval = int(doc.get("n_eval_images", 20))
    if n_eval < 1:
        raise ConfigError("n_eval_images must be >= 1")
    sweep = doc.get("sigma2_sweep")
    if sweep is not None:
        sweep = [float(s) for s in sweep]
        if any(s < 0 for s in sweep):
            raise ConfigError("sigma2_sweep entries must be nonnegative")
    return {
        "dataset": _parse_dataset(doc["dataset"]),
        "model": _parse_model(doc.get("model", {})),
        "noise": _parse_noise(doc.get("noise", {})),
        "sigma2_sweep": sweep,
        "attacks": [_parse_attack(a, i) for i, a in enumerate(attacks)],
        "n_eval_images": n_eval,
        "seed": int(doc.get("seed", 0)),
        "out_dir": doc.get("out_dir", "results"),
    }


def load_config(path):
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return parse_config(doc)
