"""Run configuration: defaults, dotted overrides and validation.

A run is described by one JSON object.  :func:`validate_config` fills in
every default, type- and range-checks every field and reports *all*
problems at once as ``(dotted.key, message)`` pairs.
"""

from __future__ import annotations

import copy
import json
import math
from typing import Any

from .errors import ConfigError

MODES = ("baseline", "slvt", "lwt", "ablation")
TERMS = ("stab", "smooth", "align")

DEFAULTS: dict[str, Any] = {
    "mode": "slvt",
    "arch": {"kind": "cnn_small", "hyper": {}, "lrd": {}},
    "mapping": {
        "d": 2048,
        "alpha": 0.1,
        "activation": "tanh",
        "out_scale": "auto",
        "z_scale": "auto",
        "target_rms": 0.1,
        "variant": "mapped",
        "max_ratio": 0.1,
    },
    "loss": {"mask": list(TERMS), "sigma": 0.01, "probes": 0, "per_unit": False, "s_init": 0.0,
             "max_lambda": 1.0},
    "optim": {
        "kind": "adam",
        "lr": 1e-3,
        "betas": [0.9, 0.999],
        "eps": 1e-8,
        "momentum": 0.9,
        "weight_decay": 0.0,
        "clip": 5.0,
        "schedule": "constant",
    },
    "train": {"epochs": 10, "batch_size": 128, "eval_every": 1, "log_every": 10, "max_steps": None,
              "audit_steps": [0, 100], "eval_train": True, "eval_batch": 1000},
    "seeds": {"init": 0, "data": 0, "noise": 0},
    "precision": "f32",
    "data": {
        "source": "idx",
        "path": "data/mnist",
        "train_subset": None,
        "test_subset": None,
        "classes": None,
        "csv": {"features": None, "target": None, "window": 20, "horizon": 0, "train_frac": 0.8},
        "synth": {"kind": "gaussian_blobs", "params": {}},
    },
    "eval": {"prune": 0.0},
    "finetune": {
        "pretrained": None,
        "manifest": None,
        "layers": [],
        "group": 32,
        "alpha": {},
        "default_alpha": 0.1,
    },
    "probe": {"every": 50, "cap_mb": 512},
}

_VARIANTS = ("mapped", "no_modulation", "lv_wmap", "full_dnn", "lv_full_dnn")


_FREE_FORM = ("arch.hyper", "arch.lrd", "finetune.alpha", "data.synth.params")


def _merge(base: dict, over: dict, path: str, errors: list) -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        dotted = f"{path}.{key}" if path else key
        if key not in base:
            errors.append((dotted, "unknown key"))
        elif dotted in _FREE_FORM:
            if isinstance(val, dict):
                out[key] = copy.deepcopy(val)
            else:
                errors.append((dotted, f"expected an object, got {type(val).__name__}"))
        elif isinstance(base[key], dict):
            if isinstance(val, dict):
                out[key] = _merge(base[key], val, dotted, errors)
            else:
                errors.append((dotted, f"expected an object, got {type(val).__name__}"))
        else:
            out[key] = val
    return out


def set_dotted(cfg: dict, key: str, value) -> None:
    parts = key.split(".")
    node = cfg
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set {key}: {p} is not an object", [(key, "not an object")])
    node[parts[-1]] = value


def parse_override(text: str) -> tuple[str, Any]:
    """``"mapping.d=1024"`` -> ``("mapping.d", 1024)``; values are JSON when possible."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value", [(text, "expected key=value")])
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def _num(errors, key, val, lo=None, hi=None, integer=False, lo_open=False, allow_none=False):
    if val is None and allow_none:
        return
    ok_type = isinstance(val, int) if integer else isinstance(val, (int, float))
    if isinstance(val, bool) or not ok_type:
        errors.append((key, f"expected {'an integer' if integer else 'a number'}, got {val!r}"))
        return
    if not math.isfinite(val):
        errors.append((key, f"must be finite, got {val!r}"))
        return
    if lo is not None and (val <= lo if lo_open else val < lo):
        errors.append((key, f"must be {'>' if lo_open else '>='} {lo}, got {val!r}"))
    if hi is not None and val > hi:
        errors.append((key, f"must be <= {hi}, got {val!r}"))


def _choice(errors, key, val, options):
    if val not in options:
        errors.append((key, f"must be one of {list(options)}, got {val!r}"))


def validate_config(cfg) -> dict:
    """Resolve defaults and check every field.

    ``cfg`` may be a dict or JSON text.  Returns the fully resolved dict;
    raises :class:`ConfigError` listing every violation.
    """
    if isinstance(cfg, (str, bytes)):
        try:
            cfg = json.loads(cfg)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}", [("", str(exc))]) from None
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object", [("", "not an object")])
    errors: list[tuple[str, str]] = []
    r = _merge(DEFAULTS, cfg, "", errors)

    _choice(errors, "mode", r["mode"], MODES)
    _choice(errors, "precision", r["precision"], ("f32", "f64"))

    m = r["mapping"]
    _choice(errors, "mapping.activation", m["activation"], ("tanh", "linear"))
    _choice(errors, "mapping.variant", m["variant"], _VARIANTS)
    _num(errors, "mapping.alpha", m["alpha"], lo=0)
    _num(errors, "mapping.target_rms", m["target_rms"], lo=0, lo_open=True)
    _num(errors, "mapping.max_ratio", m["max_ratio"], lo=0, hi=1, lo_open=True, allow_none=True)
    for key in ("out_scale", "z_scale"):
        if m[key] != "auto":
            _num(errors, f"mapping.{key}", m[key], lo=0, lo_open=True)
    d = m["d"]
    if isinstance(d, list):
        for i, v in enumerate(d):
            _num(errors, f"mapping.d[{i}]", v, lo=1, integer=True)
    else:
        _num(errors, "mapping.d", d, lo=1, integer=True)

    lo = r["loss"]
    if not isinstance(lo["mask"], list) or any(t not in TERMS for t in lo["mask"]):
        errors.append(("loss.mask", f"must be a list drawn from {list(TERMS)}, got {lo['mask']!r}"))
    _num(errors, "loss.sigma", lo["sigma"], lo=0)
    _num(errors, "loss.probes", lo["probes"], lo=0, integer=True)
    _num(errors, "loss.s_init", lo["s_init"])
    if lo["max_lambda"] is not None:
        _num(errors, "loss.max_lambda", lo["max_lambda"], lo=0, lo_open=True)
    if not isinstance(lo["per_unit"], bool):
        errors.append(("loss.per_unit", "must be true or false"))

    o = r["optim"]
    _choice(errors, "optim.kind", o["kind"], ("adam", "sgd"))
    _choice(errors, "optim.schedule", o["schedule"], ("constant", "cosine"))
    _num(errors, "optim.lr", o["lr"], lo=0, lo_open=True)
    _num(errors, "optim.eps", o["eps"], lo=0, lo_open=True)
    _num(errors, "optim.momentum", o["momentum"], lo=0, hi=1)
    _num(errors, "optim.weight_decay", o["weight_decay"], lo=0)
    _num(errors, "optim.clip", o["clip"], lo=0, lo_open=True, allow_none=True)
    if not (isinstance(o["betas"], list) and len(o["betas"]) == 2):
        errors.append(("optim.betas", "must be a list of two numbers"))
    else:
        for i, b in enumerate(o["betas"]):
            _num(errors, f"optim.betas[{i}]", b, lo=0, hi=0.999999999)

    t = r["train"]
    _num(errors, "train.epochs", t["epochs"], lo=0, integer=True)
    _num(errors, "train.batch_size", t["batch_size"], lo=1, integer=True)
    _num(errors, "train.eval_every", t["eval_every"], lo=1, integer=True)
    _num(errors, "train.log_every", t["log_every"], lo=1, integer=True)
    _num(errors, "train.eval_batch", t["eval_batch"], lo=1, integer=True)
    _num(errors, "train.max_steps", t["max_steps"], lo=0, integer=True, allow_none=True)
    for key in ("init", "data", "noise"):
        _num(errors, f"seeds.{key}", r["seeds"][key], lo=0, integer=True)

    da = r["data"]
    _choice(errors, "data.source", da["source"], ("idx", "csv", "synth"))
    _num(errors, "data.train_subset", da["train_subset"], lo=1, integer=True, allow_none=True)
    _num(errors, "data.test_subset", da["test_subset"], lo=1, integer=True, allow_none=True)
    _num(errors, "data.csv.window", da["csv"]["window"], lo=1, integer=True)
    _num(errors, "data.csv.horizon", da["csv"]["horizon"], lo=0, integer=True)
    _num(errors, "eval.prune", r["eval"]["prune"], lo=0, hi=0.999999)

    f = r["finetune"]
    _num(errors, "finetune.group", f["group"], lo=1, integer=True)
    _num(errors, "finetune.default_alpha", f["default_alpha"], lo=0)
    for k, v in f["alpha"].items():
        _num(errors, f"finetune.alpha.{k}", v, lo=0)
    _num(errors, "probe.every", r["probe"]["every"], lo=1, integer=True)
    _num(errors, "probe.cap_mb", r["probe"]["cap_mb"], lo=0, lo_open=True)

    _check_arch(r, errors)
    if errors:
        summary = "; ".join(f"{k}: {msg}" for k, msg in errors)
        raise ConfigError(f"{len(errors)} config error(s): {summary}", errors)
    return r


def _check_arch(r: dict, errors: list) -> None:
    from .zoo import KINDS, TargetArchitecture, build_spec

    a = r["arch"]
    if a.get("kind") not in KINDS:
        errors.append(("arch.kind", f"must be one of {list(KINDS)}, got {a.get('kind')!r}"))
        return
    try:
        arch = TargetArchitecture.from_dict(a)
        spec = build_spec(arch)
    except ConfigError as exc:
        errors.extend(exc.errors or [("arch", str(exc))])
        return
    except (TypeError, ValueError, KeyError) as exc:
        errors.append(("arch.hyper", f"invalid hyperparameters: {exc}"))
        return
    m = r["mapping"]
    ratio = m["max_ratio"]
    if r["mode"] == "baseline" or ratio is None:
        return
    P = spec.flat_size
    d = m["d"]
    if r["mode"] in ("slvt", "ablation") and isinstance(d, int) and not isinstance(d, bool) and d > ratio * P:
        errors.append(("mapping.d", f"d={d} breaks the d << P guard: need d <= {ratio} * P = {ratio * P:g} (P={P})"))
    if r["mode"] == "lwt":
        groups = spec.groups()
        sizes = [spec.subset(g).flat_size for g in groups]
        if isinstance(d, list):
            if len(d) != len(groups):
                errors.append(("mapping.d", f"need {len(groups)} per-layer sizes, got {len(d)}"))
            else:
                for i, (dv, pv) in enumerate(zip(d, sizes)):
                    if isinstance(dv, int) and dv > ratio * pv:
                        errors.append((f"mapping.d[{i}]", f"d={dv} breaks the d << P guard for a {pv}-parameter layer"))
        elif isinstance(d, int) and d > sum(max(1, int(ratio * s)) for s in sizes):
            errors.append(("mapping.d", f"budget {d} exceeds what the d << P guard allows per layer"))


def load_config(path, overrides=()) -> dict:
    """Read a JSON config file, apply ``key=value`` overrides, validate."""
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}", [("config", str(path))]) from None
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}", [("", str(exc))]) from None
    for item in overrides:
        key, value = parse_override(item) if isinstance(item, str) else item
        set_dotted(cfg, key, value)
    return validate_config(cfg)


def dumps(cfg: dict) -> str:
    return json.dumps(cfg, indent=2, sort_keys=True)
