"""Fit report JSON: writing and rebuilding a fit from a saved report."""

from __future__ import annotations

import datetime as _dt
import json
import math
import os

import numpy as np

from .data import ItemResponseMatrix, ModelSpec
from .errors import InvalidConfig
from .estimation import FitResult
from .likelihood import ParameterVector, ThresholdsModel, build_layout

SCHEMA_VERSION = 1


def timestamp() -> str:
    """UTC time, or SOURCE_DATE_EPOCH when set so reruns can be byte-identical."""
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    if epoch is not None:
        t = _dt.datetime.fromtimestamp(int(epoch), _dt.timezone.utc)
    else:
        t = _dt.datetime.now(_dt.timezone.utc)
    return t.replace(microsecond=0).isoformat()


def _num(v):
    if v is None:
        return None
    v = float(v)
    return v if math.isfinite(v) else None


def fit_report(result: FitResult, config: dict, command: str = "fit") -> dict:
    names = result.layout.names
    u = result.params.values
    se_u = result.se_unconstrained
    return {
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "timestamp": timestamp(),
        "config": config,
        "model": result.spec.to_config(),
        "spline_ranges": {k: [float(a), float(b)] for k, (a, b) in result.layout.spline_ranges.items()},
        "result": {
            "loglik": float(result.loglik),
            "penalty": float(result.penalty_value),
            "converged": bool(result.converged),
            "iterations": int(result.iterations),
            "grad_norm": float(result.grad_norm),
            "underflow_count": int(result.underflow_count),
            "n_persons": int(result.n_persons),
            "n_params": int(result.n_params),
            "sigma_theta": float(result.sigma_theta),
            "message": result.message,
            "params_unconstrained": {n: float(v) for n, v in zip(names, u)},
            "se_unconstrained": None if se_u is None else {n: _num(v) for n, v in zip(names, se_u)},
            "params_constrained": {n: float(v) for n, v in result.params_constrained.items()},
            "se": {n: _num(v) for n, v in result.se.items()},
            "items": [{k: (_num(v) if not isinstance(v, str) else v) for k, v in row.items()}
                      for row in result.item_table()],
        },
    }


def dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=False) + "\n"


def write_json(obj, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps(obj))


def load_fit_report(path_or_dict, data: ItemResponseMatrix = None) -> FitResult:
    """Rebuild a :class:`FitResult` from a report; with ``data`` the likelihood model is attached."""
    if isinstance(path_or_dict, dict):
        rep = path_or_dict
    else:
        with open(path_or_dict, encoding="utf-8") as fh:
            rep = json.load(fh)
    if rep.get("schema_version") != SCHEMA_VERSION:
        raise InvalidConfig(f"unsupported fit report schema {rep.get('schema_version')!r}")
    spec = ModelSpec.from_config(rep["model"])
    layout = build_layout(spec, None, rep.get("spline_ranges") or {})
    r = rep["result"]
    pu = r["params_unconstrained"]
    if list(pu) != layout.names:
        raise InvalidConfig("report parameters do not match the model layout")
    u = np.array([pu[n] for n in layout.names])
    model = None
    if data is not None:
        model = ThresholdsModel(layout, data)
    se_u = r.get("se_unconstrained")
    return FitResult(
        spec=spec, layout=layout, params=ParameterVector(layout, u), loglik=r["loglik"],
        penalty_value=r["penalty"], converged=r["converged"], iterations=r["iterations"],
        grad_norm=r["grad_norm"], underflow_count=r["underflow_count"], n_persons=r["n_persons"],
        params_constrained={name: v for name, v, _ in layout.constrained(u)},
        se={k: (math.nan if v is None else v) for k, v in r["se"].items()},
        se_unconstrained=None if se_u is None else np.array(
            [math.nan if se_u[n] is None else se_u[n] for n in layout.names]),
        message=r.get("message", ""), model=model,
    )
