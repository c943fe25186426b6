"""Experiment configuration: defaults, JSON schema and whole-config validation.

A config is a plain JSON object. Anything omitted falls back to ``DEFAULTS``;
``load_config`` merges, validates and returns the completed dict, which is what
reports echo and what a replay feeds back in.
"""
from __future__ import annotations

import copy
import json
from pathlib import Path

import jsonschema

from .errors import ConfigError
from .forecasters import KINDS
from .generators import SOURCES
from .injection import MODES
from .numerics import ACTIVATIONS
from .patterns import SHAPES

SEED_STAGES = ("data", "surrogate", "plan", "offsets", "generator", "baseline", "test_offsets",
               "downstream", "detector")
VARIANTS = ("A1", "A2")

DEFAULTS = {
    "dataset": {
        "source": "synth",
        "csv": None,
        "synth": {"T": 2000, "N": 8, "level": 10.0, "amplitude": 2.0, "period": 24.0,
                  "noise_std": 0.3, "coupling": 1.0},
    },
    "window": {"h": 12, "f": 12},
    "attack": {
        "alpha_t": 0.03, "alpha_s": 0.3, "t_tgr": 4, "t_ptn": 7, "shape": "cone",
        "trigger_factor": 0.2, "pattern_factor": 1.0, "mode": "anchored_additive", "sigma": 1.0,
        "offset_policy": {"kind": "random"}, "spacing": None, "t_bef": 8, "mark_period": 24.0,
    },
    "methods": ["gcn", "inverse", "random", "manhattan"],
    "generator": {
        "gcn": {"init_scale": 0.05, "f_keep": 16, "top_k": None},
        "inverse": {"hidden": 32, "init_scale": 0.05},
    },
    "loss": {"decay": 0.1, "lambda_cln": 1.0, "lambda_reg": 0.01, "K": None, "mode": "position_aware"},
    "schedule": {"rounds": 5, "surrogate_epochs": 3, "generator_steps": 50, "lr": 0.01},
    "surrogate": {"kind": "mlp", "hidden": 64, "activation": "relu", "epochs": 200, "batch_size": 32,
                  "lr": 0.001, "patience": 10},
    "downstream": [
        {"kind": "linear", "hidden": 64, "activation": "relu", "epochs": 200, "batch_size": 32,
         "lr": 0.001, "patience": 10},
        {"kind": "mlp", "hidden": 64, "activation": "relu", "epochs": 200, "batch_size": 32,
         "lr": 0.001, "patience": 10},
    ],
    "stealth": {"enabled": True, "length": 24, "bottleneck": 8, "epochs": 100, "lr": 0.001},
    "seeds": {s: i for i, s in enumerate(SEED_STAGES)},
    "variant": None,
}

_pos_int = {"type": "integer", "minimum": 1}
_nonneg = {"type": "number", "minimum": 0}
_pos = {"type": "number", "exclusiveMinimum": 0}
_frac = {"type": "number", "minimum": 0, "maximum": 1}
_forecaster = {
    "type": "object", "additionalProperties": False,
    "required": ["kind", "hidden", "activation", "epochs", "batch_size", "lr", "patience"],
    "properties": {"kind": {"enum": list(KINDS)}, "hidden": _pos_int, "activation": {"enum": list(ACTIVATIONS)},
                   "epochs": {"type": "integer", "minimum": 0}, "batch_size": _pos_int, "lr": _pos,
                   "patience": _pos_int},
}


def _obj(props, required=None):
    return {"type": "object", "additionalProperties": False, "properties": props,
            "required": list(props) if required is None else required}


SCHEMA = _obj({
    "dataset": _obj({
        "source": {"enum": ["synth", "csv"]},
        "csv": {"type": ["string", "null"]},
        "synth": _obj({"T": _pos_int, "N": {"type": "integer", "minimum": 2}, "level": {"type": "number"},
                       "amplitude": _nonneg, "period": _pos, "noise_std": _nonneg, "coupling": _nonneg}),
    }),
    "window": _obj({"h": _pos_int, "f": _pos_int}),
    "attack": _obj({
        "alpha_t": _frac, "alpha_s": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "t_tgr": _pos_int, "t_ptn": _pos_int, "shape": {"enum": list(SHAPES)},
        "trigger_factor": _nonneg, "pattern_factor": _nonneg, "mode": {"enum": list(MODES)},
        "sigma": _pos,
        "offset_policy": {"oneOf": [
            _obj({"kind": {"const": "random"}}),
            _obj({"kind": {"const": "fixed"},
                  "offsets": {"oneOf": [{"type": "integer", "minimum": 0},
                                        {"type": "array", "items": {"type": "integer", "minimum": 0},
                                         "minItems": 1}]}}),
        ]},
        "spacing": {"oneOf": [{"type": "null"}, {"type": "integer", "minimum": 0}]},
        "t_bef": _pos_int, "mark_period": _pos,
    }),
    "methods": {"type": "array", "items": {"enum": list(SOURCES)}, "uniqueItems": True},
    "generator": _obj({
        "gcn": _obj({"init_scale": _pos, "f_keep": {"type": "integer", "minimum": 2},
                     "top_k": {"oneOf": [{"type": "null"}, _pos_int]}}),
        "inverse": _obj({"hidden": _pos_int, "init_scale": _pos}),
    }),
    "loss": _obj({"decay": _nonneg, "lambda_cln": _nonneg, "lambda_reg": _nonneg,
                  "K": {"oneOf": [{"type": "null"}, _pos_int]},
                  "mode": {"enum": ["position_aware", "uniform_mae"]}}),
    "schedule": _obj({"rounds": {"type": "integer", "minimum": 0}, "surrogate_epochs": {"type": "integer", "minimum": 0},
                      "generator_steps": {"type": "integer", "minimum": 0}, "lr": _pos}),
    "surrogate": _forecaster,
    "downstream": {"type": "array", "items": _forecaster, "minItems": 1},
    "stealth": _obj({"enabled": {"type": "boolean"}, "length": _pos_int, "bottleneck": _pos_int,
                     "epochs": {"type": "integer", "minimum": 0}, "lr": _pos}),
    "seeds": _obj({s: {"type": "integer", "minimum": 0} for s in SEED_STAGES}),
    "variant": {"enum": [None, *VARIANTS]},
})


def _merge(base, override):
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _cross_checks(cfg):
    """Constraints spanning several fields (the schema covers the per-field ones)."""
    out = []
    w, a, ds = cfg["window"], cfg["attack"], cfg["dataset"]
    if a["t_ptn"] >= w["f"]:
        out.append(f"attack.t_ptn={a['t_ptn']} must be smaller than window.f={w['f']}")
    if a["t_tgr"] >= w["h"]:
        out.append(f"attack.t_tgr={a['t_tgr']} must be smaller than window.h={w['h']}")
    if ds["source"] == "csv" and not ds["csv"]:
        out.append("dataset.csv is required when dataset.source is 'csv'")
    if ds["source"] == "synth":
        T, N = ds["synth"]["T"], ds["synth"]["N"]
        if T < 10 * (w["h"] + w["f"]):
            out.append(f"dataset.synth.T={T} must be at least 10*(h+f)={10 * (w['h'] + w['f'])}")
        if round(a["alpha_s"] * N) < 1:
            out.append(f"attack.alpha_s={a['alpha_s']} attacks no variable out of N={N}")
        pol = a["offset_policy"]
        if pol["kind"] == "fixed" and isinstance(pol["offsets"], list) and len(pol["offsets"]) != N:
            out.append(f"attack.offset_policy.offsets needs {N} entries, got {len(pol['offsets'])}")
        top_k = cfg["generator"]["gcn"]["top_k"]
        if top_k is not None and top_k >= N:
            out.append(f"generator.gcn.top_k={top_k} must be below N={N}")
    pol = a["offset_policy"]
    if pol["kind"] == "fixed":
        offs = pol["offsets"] if isinstance(pol["offsets"], list) else [pol["offsets"]]
        bad = [o for o in offs if o > w["f"] - a["t_ptn"]]
        if bad:
            out.append(f"attack.offset_policy.offsets {bad} exceed f - t_ptn = {w['f'] - a['t_ptn']}")
    st = cfg["stealth"]
    if st["enabled"] and st["bottleneck"] >= st["length"]:
        out.append("stealth.bottleneck must be smaller than stealth.length")
    if cfg["variant"] is not None and not any(m in ("gcn", "inverse") for m in cfg["methods"]):
        out.append(f"variant {cfg['variant']} needs a learnable method (gcn or inverse) in methods")
    return out


def validate(cfg):
    """Raise ConfigError listing every problem found (schema and cross-field)."""
    validator = jsonschema.Draft202012Validator(SCHEMA)
    problems = []
    for err in sorted(validator.iter_errors(cfg), key=lambda e: list(map(str, e.absolute_path))):
        where = ".".join(str(p) for p in err.absolute_path) or "<root>"
        problems.append(f"{where}: {err.message}")
    if not problems:
        problems = _cross_checks(cfg)
    if problems:
        raise ConfigError(problems)
    return cfg


def complete(partial=None):
    """Defaults overlaid with ``partial``, validated."""
    partial = partial or {}
    if not isinstance(partial, dict):
        raise ConfigError("config must be a JSON object")
    cfg = _merge(DEFAULTS, partial)
    if isinstance(partial.get("downstream"), list):
        # list entries are partial forecaster specs
        base = {**DEFAULTS["surrogate"], "kind": "linear"}
        cfg["downstream"] = [_merge(base, d) if isinstance(d, dict) else d for d in partial["downstream"]]
    return validate(cfg)


def load_config(path):
    try:
        with Path(path).open(encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc.msg} at line {exc.lineno})") from exc
    return complete(raw)


def override_seed(cfg, assignment):
    """Apply a ``stage=int`` override, returning a new validated config."""
    stage, sep, value = assignment.partition("=")
    if not sep or stage not in SEED_STAGES:
        raise ConfigError(f"seed override {assignment!r} must look like stage=int with stage in {SEED_STAGES}")
    try:
        seed = int(value)
    except ValueError:
        raise ConfigError(f"seed override {assignment!r}: {value!r} is not an integer") from None
    out = copy.deepcopy(cfg)
    out["seeds"][stage] = seed
    return validate(out)


def shift_seeds(cfg, shift):
    """Every stage seed moved by ``shift``; used for repeated runs."""
    out = copy.deepcopy(cfg)
    out["seeds"] = {k: v + shift for k, v in out["seeds"].items()}
    return validate(out)
