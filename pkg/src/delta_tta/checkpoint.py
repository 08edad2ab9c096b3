"""Versioned JSON checkpoints and a float-exact JSON writer.

Floats are written with 17 significant digits, which round-trips every IEEE
double exactly.
"""
from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .errors import InputError
from .netcore import ModelSpec, ModelState
from .normalize import NormLayerState

SCHEMA = "delta-tta/checkpoint"
VERSION = 1


def _num(x, digits=17) -> str:
    x = float(x)
    if math.isnan(x):
        return "NaN"
    if math.isinf(x):
        return "Infinity" if x > 0 else "-Infinity"
    return format(x, f".{digits}g")


def dumps(obj, digits=17) -> str:
    """``json.dumps`` lookalike that writes floats with ``digits`` significant digits."""

    def enc(o):
        if o is None or isinstance(o, (bool, np.bool_)):
            return json.dumps(None if o is None else bool(o))
        if isinstance(o, (int, np.integer)):
            return str(int(o))
        if isinstance(o, (float, np.floating)):
            return _num(o, digits)
        if isinstance(o, str):
            return json.dumps(o)
        if isinstance(o, np.ndarray):
            return enc(o.tolist())
        if isinstance(o, dict):
            return "{" + ", ".join(f"{json.dumps(str(k))}: {enc(v)}" for k, v in o.items()) + "}"
        if isinstance(o, (list, tuple)):
            return "[" + ", ".join(enc(v) for v in o) + "]"
        raise TypeError(f"cannot serialize {type(o).__name__}")

    return enc(obj)


def _arr(a):
    return None if a is None else {"shape": list(np.shape(a)), "data": np.ravel(a).tolist()}


def _unarr(d):
    if d is None:
        return None
    return np.array(d["data"], dtype=np.float64).reshape(d["shape"])


def model_to_dict(model: ModelState) -> dict:
    s = model.spec
    return {
        "schema": SCHEMA,
        "version": VERSION,
        "spec": {"input_dim": s.input_dim, "hidden": list(s.hidden), "num_classes": s.num_classes,
                 "seed": s.seed, "eps": s.eps},
        "dense": [{"W": _arr(w), "b": _arr(b)} for w, b in model.dense],
        "norm": [{"gamma": _arr(n.gamma), "beta": _arr(n.beta), "mu_src": _arr(n.mu_src),
                  "sigma_src": _arr(n.sigma_src), "mu_ema": _arr(n.mu_ema),
                  "sigma_ema": _arr(n.sigma_ema), "alpha": n.alpha, "eps": n.eps}
                 for n in model.norms],
        "head": {"W": _arr(model.head[0]), "b": _arr(model.head[1])},
    }


def model_from_dict(d: dict) -> ModelState:
    if d.get("schema") != SCHEMA:
        raise InputError(f"not a checkpoint (schema={d.get('schema')!r})")
    if d.get("version") != VERSION:
        raise InputError(f"unsupported checkpoint version {d.get('version')!r}")
    s = d["spec"]
    spec = ModelSpec(s["input_dim"], tuple(s["hidden"]), s["num_classes"], s["seed"], s["eps"])
    dense = tuple((_unarr(l["W"]), _unarr(l["b"])) for l in d["dense"])
    norms = tuple(NormLayerState(_unarr(n["gamma"]), _unarr(n["beta"]), _unarr(n["mu_src"]),
                                 _unarr(n["sigma_src"]), _unarr(n["mu_ema"]), _unarr(n["sigma_ema"]),
                                 n["alpha"], n["eps"]) for n in d["norm"])
    return ModelState(spec, dense, norms, (_unarr(d["head"]["W"]), _unarr(d["head"]["b"])))


def save_model(model: ModelState, path, meta=None):
    """``meta`` is an optional JSON-able dict stored alongside (e.g. the task recipe)."""
    d = model_to_dict(model)
    if meta is not None:
        d["meta"] = meta
    Path(path).write_text(dumps(d) + "\n")


def load_model(path, with_meta=False):
    try:
        d = json.loads(Path(path).read_text())
        model = model_from_dict(d)
        return (model, d.get("meta")) if with_meta else model
    except (OSError, KeyError, TypeError, json.JSONDecodeError) as exc:
        raise InputError(f"malformed checkpoint {path}: {exc}") from exc
