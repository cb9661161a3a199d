"""Command-line interface: fit | compare | score | simulate | curves | validate.

Every command reads a TOML run config (``--config``); a handful of flags
override individual settings. Exit codes: 0 success, 1 invalid input or
configuration, 2 fit did not converge (outputs are still written), 3 I/O.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import report as _report
from .curves import all_curves, write_curves_csv
from .data import ItemResponseMatrix, ModelSpec, ingest_csv, items_to_toml, load_toml, parse_item_metadata
from .errors import NonFiniteLikelihood, NotConverged, NotNested, ThresholdsError, ValidationError
from .estimation import FitOptions, fit, lr_test
from .scoring import score_persons
from .simulation import recovery_study, scenario_from_config, simulate_dataset

log = logging.getLogger("irtthresh")

EXIT_OK, EXIT_INVALID, EXIT_NOT_CONVERGED, EXIT_IO = 0, 1, 2, 3
THREADS_ENV = "IRTTHRESH_THREADS"

_FIT_KEYS = ("max_iterations", "grad_tol", "rel_tol", "n_starts", "seed")


class _Fail(Exception):
    def __init__(self, code, msg):
        super().__init__(msg)
        self.code = code


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def _threads(args) -> int:
    if getattr(args, "threads", None):
        return int(args.threads)
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise _Fail(EXIT_INVALID, f"{THREADS_ENV} must be an integer, got {env!r}") from None
    return 1


def _read_config(path) -> tuple:
    if path is None:
        return {}, Path.cwd()
    path = Path(path)
    try:
        cfg = load_toml(path)
    except OSError as exc:
        raise _Fail(EXIT_IO, f"cannot read config {path}: {exc}") from None
    except ValueError as exc:
        raise _Fail(EXIT_INVALID, f"malformed config {path}: {exc}") from None
    return cfg, path.resolve().parent


def _resolve(base: Path, p) -> str:
    p = Path(p)
    return str(p if p.is_absolute() else (base / p).resolve())


def _run_settings(cfg: dict, base: Path, args) -> dict:
    """Effective data/model/fit settings after flag overrides (fully explicit, for the echo)."""
    data_cfg = dict(cfg.get("data", {}))
    if getattr(args, "data", None):
        data_cfg["csv"] = str(Path(args.data).resolve())
    elif "csv" in data_cfg:
        data_cfg["csv"] = _resolve(base, data_cfg["csv"])
    if getattr(args, "items", None):
        data_cfg["items"] = str(Path(args.items).resolve())
    elif isinstance(data_cfg.get("items"), str):
        data_cfg["items"] = _resolve(base, data_cfg["items"])
    if "csv" not in data_cfg:
        raise _Fail(EXIT_INVALID, "no data CSV given ([data] csv or --data)")
    items_src = data_cfg.get("items", cfg.get("items"))
    if items_src is None:
        raise _Fail(EXIT_INVALID, "no item metadata given ([data] items, [items] or --items)")
    try:
        meta = parse_item_metadata(items_src)
    except OSError as exc:
        raise _Fail(EXIT_IO, f"cannot read item metadata: {exc}") from None

    model_cfg = dict(cfg.get("model", {}))
    if getattr(args, "nodes", None) is not None:
        model_cfg["quadrature_nodes"] = args.nodes
    if getattr(args, "lam", None) is not None:
        model_cfg["penalty_lambda"] = args.lam
    fit_cfg = dict(FitOptions().__dict__)
    fit_cfg = {k: fit_cfg[k] for k in _FIT_KEYS}
    extra = set(cfg.get("fit", {})) - set(_FIT_KEYS)
    if extra:
        raise _Fail(EXIT_INVALID, f"unknown [fit] settings {sorted(extra)}")
    fit_cfg.update(cfg.get("fit", {}))
    if getattr(args, "seed", None) is not None:
        fit_cfg["seed"] = args.seed
    return {"data": data_cfg, "meta": meta, "model": model_cfg, "fit": fit_cfg}


def _load_data(settings, allow_empty=False) -> ItemResponseMatrix:
    path = settings["data"]["csv"]
    try:
        return ingest_csv(path, {"items": {k: v.to_config() for k, v in settings["meta"].items()}},
                          allow_empty=allow_empty)
    except OSError as exc:
        raise _Fail(EXIT_IO, f"cannot read data {path}: {exc}") from None


def _spec(settings, data: ItemResponseMatrix) -> ModelSpec:
    return ModelSpec.from_config(settings["model"], data.items)


def _options(settings, threads) -> FitOptions:
    f = settings["fit"]
    return FitOptions(max_iterations=int(f["max_iterations"]), grad_tol=float(f["grad_tol"]),
                      rel_tol=float(f["rel_tol"]), n_starts=int(f["n_starts"]), seed=int(f["seed"]),
                      n_threads=threads)


def _echo(settings, spec: ModelSpec) -> dict:
    data = {k: v for k, v in settings["data"].items() if k != "items"}
    return {"data": data, "model": spec.to_config(), "fit": dict(settings["fit"])}


def _write_text(path, text):
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    except OSError as exc:
        raise _Fail(EXIT_IO, f"cannot write {path}: {exc}") from None


def _emit(text, out):
    if out:
        _write_text(out, text)
    else:
        sys.stdout.write(text)


def _run_fit(settings, threads, data=None):
    data = data if data is not None else _load_data(settings)
    spec = _spec(settings, data)
    res = fit(data, spec, _options(settings, threads))
    return data, spec, res


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_fit(args) -> int:
    cfg, base = _read_config(args.config)
    settings = _run_settings(cfg, base, args)
    data, spec, res = _run_fit(settings, _threads(args))
    rep = _report.fit_report(res, _echo(settings, spec))
    out = args.out or (_resolve(base, cfg["output"]["report"]) if "report" in cfg.get("output", {}) else None)
    _emit(_report.dumps(rep), out)
    curves_out = args.curves or (_resolve(base, cfg["output"]["curves"]) if "curves" in cfg.get("output", {}) else None)
    if curves_out:
        _write_text(curves_out, write_curves_csv(all_curves(res)))
    print(f"loglik = {res.loglik:.6f}  sigma_theta = {res.sigma_theta:.4f}  "
          f"converged = {res.converged}  max|score| = {res.grad_norm:.2e}", file=sys.stderr)
    if not res.converged:
        print("fit did not converge; report written", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg, base = _read_config(args.config)
    sides = {}
    for side in ("full", "reduced"):
        path = getattr(args, side)
        if path is not None:
            sub, sub_base = _read_config(path)
        elif side in cfg:
            sub, sub_base = cfg[side], base
        else:
            raise _Fail(EXIT_INVALID, f"no {side} model given (--{side} or a [{side}] table)")
        sides[side] = _run_settings(sub, sub_base, argparse.Namespace(
            nodes=args.nodes, lam=None, seed=args.seed, data=None, items=None))
    threads = _threads(args)
    full = _run_fit(sides["full"], threads)
    same = all(sides["reduced"][k] == sides["full"][k] for k in ("data", "meta"))
    reduced_data = full[0] if same else None
    reduced = _run_fit(sides["reduced"], threads, reduced_data)
    if full[0].n_persons != reduced[0].n_persons:
        raise NotNested("the two fits use different datasets")
    lr = lr_test(full[2], reduced[2])
    out = {
        "schema_version": _report.SCHEMA_VERSION,
        "command": "compare",
        "timestamp": _report.timestamp(),
        "full": {"config": _echo(sides["full"], full[1]), "loglik": full[2].loglik, "n_params": full[2].n_params},
        "reduced": {"config": _echo(sides["reduced"], reduced[1]), "loglik": reduced[2].loglik,
                    "n_params": reduced[2].n_params},
        "lr_test": lr.to_dict(),
    }
    _emit(_report.dumps(out), args.out)
    print(f"LR statistic = {lr.statistic:.4f} on {lr.df} df, p = {lr.p_value:.4g}", file=sys.stderr)
    return EXIT_OK


def cmd_score(args) -> int:
    cfg, base = _read_config(args.config)
    settings = _run_settings(cfg, base, args)
    data = _load_data(settings, allow_empty=True)
    code = EXIT_OK
    if args.fit:
        try:
            res = _report.load_fit_report(args.fit)
        except OSError as exc:
            raise _Fail(EXIT_IO, f"cannot read fit report {args.fit}: {exc}") from None
        if res.spec.item_ids != data.item_ids:
            raise _Fail(EXIT_INVALID, "fit report items do not match the data columns")
    else:
        keep = np.nonzero(data.observed.any(axis=1))[0]
        fitted = data.subset(persons=keep)
        fitted = ItemResponseMatrix(fitted.items, fitted.values, fitted.observed, fitted.raw_values)
        _, _, res = _run_fit(settings, _threads(args), fitted)
        if not res.converged:
            code = EXIT_NOT_CONVERGED
    scores = score_persons(res, data)
    lines = ["person,mean,mode,sd,n_items,error"]
    for p, s in enumerate(scores):
        if s is None:
            lines.append(f"{p},,,,0,no observed items")
        else:
            lines.append(f"{p},{s.posterior_mean!r},{s.posterior_mode!r},{s.posterior_sd!r},{s.n_items_observed},")
    _emit("\n".join(lines) + "\n", args.out)
    if args.truth:
        theta = _read_truth(args.truth)
        means = np.array([np.nan if s is None else s.posterior_mean for s in scores])
        if theta.size != means.size:
            raise _Fail(EXIT_INVALID, "truth file and data have different numbers of persons")
        ok = ~np.isnan(means)
        r = float(np.corrcoef(theta[ok], means[ok])[0, 1])
        print(f"correlation(true theta, posterior mean) = {r:.4f}", file=sys.stderr)
    return code


def _read_truth(path) -> np.ndarray:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise _Fail(EXIT_IO, f"cannot read {path}: {exc}") from None
    if not rows or "theta" not in rows[0]:
        raise _Fail(EXIT_INVALID, f"{path}: expected a 'theta' column")
    return np.array([float(r["theta"]) for r in rows])


def cmd_simulate(args) -> int:
    cfg, base = _read_config(args.config)
    if not cfg:
        raise _Fail(EXIT_INVALID, "simulate needs a scenario file (--config)")
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.persons is not None:
        cfg["n_persons"] = args.persons
    if args.replications is not None:
        cfg["replications"] = args.replications
    if cfg.get("seed") is None:
        raise _Fail(EXIT_INVALID, "simulate needs a seed (scenario 'seed' or --seed) for reproducibility")
    if args.nodes is not None:
        cfg.setdefault("model", {})["quadrature_nodes"] = args.nodes
    scen = scenario_from_config(cfg)
    out = Path(args.out or ".")
    if args.recovery:
        opts = FitOptions(n_threads=_threads(args))
        rep = recovery_study(scen, opts, n_workers=args.workers)
        d = rep.to_dict()
        d["timestamp"] = _report.timestamp()
        _write_text(out / "recovery.json", _report.dumps(d))
        print(rep.table())
        return EXIT_OK if rep.not_converged == 0 else EXIT_NOT_CONVERGED
    sim = simulate_dataset(scen)
    try:
        out.mkdir(parents=True, exist_ok=True)
        sim.data.to_csv(out / "data.csv")
    except OSError as exc:
        raise _Fail(EXIT_IO, f"cannot write to {out}: {exc}") from None
    _write_text(out / "truth.csv", "person,theta\n" + "".join(f"{p},{float(t)!r}\n" for p, t in enumerate(sim.theta)))
    _write_text(out / "items.toml", items_to_toml(scen.spec.items))
    echo = scen.to_config()
    echo["timestamp"] = _report.timestamp()
    echo["schema_version"] = _report.SCHEMA_VERSION
    _write_text(out / "scenario.json", _report.dumps(echo))
    print(f"wrote {sim.data.n_persons} x {sim.data.n_items} responses to {out}", file=sys.stderr)
    return EXIT_OK


def cmd_curves(args) -> int:
    if not args.fit:
        raise _Fail(EXIT_INVALID, "curves needs a fit report (--fit)")
    try:
        with open(args.fit, encoding="utf-8") as fh:
            rep = json.load(fh)
    except OSError as exc:
        raise _Fail(EXIT_IO, f"cannot read fit report {args.fit}: {exc}") from None
    data = None
    csv_path = rep.get("config", {}).get("data", {}).get("csv")
    if args.config or args.data:
        cfg, base = _read_config(args.config)
        data = _load_data(_run_settings(cfg, base, args))
    elif csv_path and Path(csv_path).exists():
        items = ModelSpec.from_config(rep["model"]).items
        data = _load_data({"data": {"csv": csv_path}, "meta": {it.id: it for it in items}})
    res = _report.load_fit_report(rep, data)
    thetas = tuple(args.theta) if args.theta else (-1.0, 0.0, 1.0)
    _emit(write_curves_csv(all_curves(res, thetas)), args.out)
    return EXIT_OK


def cmd_validate(args) -> int:
    cfg, base = _read_config(args.config)
    settings = _run_settings(cfg, base, args)
    data = _load_data(settings)
    ModelSpec.from_config(settings["model"], data.items)
    print(data.summary_text())
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="irtthresh", description="Thresholds models for mixed item formats")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        sp.add_argument("--config", help="TOML run config")
        sp.add_argument("--nodes", type=int, help="Gauss-Hermite nodes")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output path (stdout if omitted)")
        sp.add_argument("--threads", type=int, help=f"worker threads (default ${THREADS_ENV} or 1)")
        if data:
            sp.add_argument("--data", help="data CSV (overrides the config)")
            sp.add_argument("--items", help="item metadata TOML (overrides the config)")

    sp = sub.add_parser("fit", help="fit a model and write a JSON report")
    common(sp)
    sp.add_argument("--lambda", dest="lam", type=float, help="penalty weight (spline_free)")
    sp.add_argument("--curves", help="also write curve tables to this CSV")
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("compare", help="likelihood-ratio test of two nested models")
    common(sp, data=False)
    sp.add_argument("--full", help="run config of the larger model")
    sp.add_argument("--reduced", help="run config of the restricted model")
    sp.set_defaults(func=cmd_compare)

    sp = sub.add_parser("score", help="posterior mean/mode/sd per person")
    common(sp)
    sp.add_argument("--fit", help="fit report to score with (fits first if omitted)")
    sp.add_argument("--truth", help="CSV with a 'theta' column to correlate against")
    sp.add_argument("--lambda", dest="lam", type=float)
    sp.set_defaults(func=cmd_score)

    sp = sub.add_parser("simulate", help="simulate a dataset or run a recovery study")
    common(sp, data=False)
    sp.add_argument("--persons", type=int)
    sp.add_argument("--replications", type=int)
    sp.add_argument("--recovery", action="store_true", help="fit each replication and report recovery")
    sp.add_argument("--workers", type=int, default=1, help="replications run in parallel")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("curves", help="PT, IC and difficulty curves of a saved fit")
    common(sp)
    sp.add_argument("--fit", help="fit report JSON")
    sp.add_argument("--theta", type=float, action="append", help="theta for PT curves (repeatable)")
    sp.set_defaults(func=cmd_curves)

    sp = sub.add_parser("validate", help="check data and metadata and print a summary")
    common(sp)
    sp.set_defaults(func=cmd_validate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except _Fail as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ValidationError, NotNested) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (NotConverged, NonFiniteLikelihood) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ThresholdsError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
