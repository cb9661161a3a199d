"""Sampling from thresholds models and parameter-recovery studies."""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import response
from .data import ItemResponseMatrix, ItemSpec, ModelSpec, TreatAs, load_toml
from .difficulty import BSpline, FreeOrdinal
from .errors import InvalidConfig, NonMonotoneInput, OutOfRange
from .likelihood import build_layout

#: the exceedance scan for count items stops once the cumulative mass reaches 1 - COUNT_TAIL
COUNT_TAIL = 1e-12
_MAX_COUNT = 10_000_000


def _latent(kind, theta, u):
    """t = theta - F^{-1}(1 - u); Y > y  iff  delta(y) < t."""
    k = response.kernel(kind)
    return np.asarray(theta, dtype=float) - k.quantile(1.0 - np.asarray(u, dtype=float))


def _delta_on_grid(delta, ys):
    """delta at integer points, -inf where the family is undefined (e.g. log at 0)."""
    lo = getattr(delta, "lo", -math.inf)
    out = np.full(ys.shape, -math.inf)
    ok = ys > lo
    out[ok] = delta.value(ys[ok])
    return out


def _inner_bound(delta, edge, toward):
    """delta at the representable point nearest ``edge`` whose inverse stays off the edge."""
    gap = np.nextafter(edge, toward) - edge
    for _ in range(2100):
        y = edge + gap
        gap *= 2.0
        t = float(delta.value(y))
        try:
            back = float(delta.invert(t))
        except OutOfRange:
            continue
        if back != edge:
            return t
    return float(delta.value(y))


def _clip_to_domain(delta, t):
    """Keep latent draws whose inverse would round onto an open domain bound inside it."""
    lo, hi = getattr(delta, "lo", -math.inf), getattr(delta, "hi", math.inf)
    if math.isfinite(lo):
        t = np.maximum(t, _inner_bound(delta, lo, math.inf))
    if math.isfinite(hi):
        t = np.minimum(t, _inner_bound(delta, hi, -math.inf))
    return t


def _count_grid(delta, t_max):
    """delta(0..R) with delta(R) >= t_max."""
    r = 16
    while True:
        ys = np.arange(r + 1, dtype=float)
        d = _delta_on_grid(delta, ys)
        if d[-1] >= t_max:
            return d
        if r > _MAX_COUNT:
            raise OutOfRange(f"count sampling needs more than {_MAX_COUNT} categories; difficulty too flat")
        r *= 4


def sample_responses(item: ItemSpec, delta, theta, u, kind="normal"):
    """Vectorised inverse-transform sampling of responses to one item.

    Continuous items return delta^{-1}(theta - F^{-1}(1-u)); discrete items the
    smallest r with 1 - F(theta - delta(r)) >= u.
    """
    u = np.asarray(u, dtype=float)
    if np.any(~((u > 0) & (u < 1))):
        raise InvalidConfig("uniform draws must lie in (0, 1)")
    theta = np.broadcast_to(np.asarray(theta, dtype=float), u.shape)
    t = _latent(kind, theta, u)
    if item.treat_as is TreatAs.CONTINUOUS:
        return np.asarray(delta.invert(_clip_to_domain(delta, t)), dtype=float)
    top = item.support.top
    if isinstance(delta, FreeOrdinal):
        return np.searchsorted(delta.coefficients, t, side="left").astype(float)
    if top is not None:
        d = _delta_on_grid(delta, np.arange(top, dtype=float))
        return np.searchsorted(d, t, side="left").astype(float)
    # counts: cap the latent draw at the 1 - COUNT_TAIL quantile so the scan terminates
    k = response.kernel(kind)
    t = np.minimum(t, theta + k.quantile(1.0 - COUNT_TAIL))
    d = _count_grid(delta, float(np.max(t)))
    return np.searchsorted(d, t, side="left").astype(float)


def sample_response(item: ItemSpec, delta, theta: float, u: float, kind="normal") -> float:
    return float(sample_responses(item, delta, np.array([theta]), np.array([u]), kind)[0])


@dataclass(frozen=True)
class SimulationScenario:
    """A model spec with true difficulty functions and the generation settings."""

    spec: ModelSpec
    difficulties: tuple
    n_persons: int
    sigma_theta: float = 1.0
    seed: Optional[int] = None
    replications: int = 1
    label: str = ""

    def __post_init__(self):
        object.__setattr__(self, "difficulties", tuple(self.difficulties))
        if len(self.difficulties) != len(self.spec.items):
            raise InvalidConfig("one true difficulty function per item is required")
        if int(self.n_persons) != self.n_persons or self.n_persons < 1:
            raise InvalidConfig(f"n_persons must be a positive integer, got {self.n_persons}")
        if not self.sigma_theta >= 0:
            raise InvalidConfig(f"sigma_theta must be nonnegative, got {self.sigma_theta}")
        if self.replications < 0:
            raise InvalidConfig("replications must be nonnegative")
        for it, d in zip(self.spec.items, self.difficulties):
            if isinstance(d, BSpline) and np.any(np.diff(d.coefficients) < 0):
                raise NonMonotoneInput(f"true difficulty of item {it.id} is not monotone")

    def with_seed(self, seed) -> "SimulationScenario":
        return _replace(self, seed=seed)

    def true_vector(self, data: Optional[ItemResponseMatrix] = None) -> np.ndarray:
        layout = build_layout(self.spec, data, _spline_ranges(self))
        return layout.pack(self.difficulties, max(self.sigma_theta, 1e-300))

    def to_config(self) -> dict:
        return {
            "label": self.label,
            "n_persons": int(self.n_persons),
            "sigma_theta": float(self.sigma_theta),
            "seed": self.seed,
            "replications": int(self.replications),
            "model": self.spec.to_config(),
            "truth": [_delta_to_config(d) for d in self.difficulties],
        }


def _replace(s: SimulationScenario, **kw) -> SimulationScenario:
    args = dict(spec=s.spec, difficulties=s.difficulties, n_persons=s.n_persons,
                sigma_theta=s.sigma_theta, seed=s.seed, replications=s.replications, label=s.label)
    args.update(kw)
    return SimulationScenario(**args)


def _spline_ranges(s: SimulationScenario) -> dict:
    return {it.id: (d.basis.lower, d.basis.upper)
            for it, d in zip(s.spec.items, s.difficulties) if isinstance(d, BSpline)}


def _delta_to_config(d) -> dict:
    if isinstance(d, FreeOrdinal):
        return {"family": "free_ordinal", "thresholds": list(d.thresholds)}
    if isinstance(d, BSpline):
        return {"family": "bspline", "coefficients": list(d.coeffs),
                "range": [d.basis.lower, d.basis.upper]}
    out = {"family": d.family.value, "intercept": d.intercept, "slope": d.slope}
    if hasattr(d, "kind"):
        out["kind"] = response.ResponseFunctionKind(d.kind).value
    return out


@dataclass(frozen=True)
class SimulatedData:
    data: ItemResponseMatrix
    theta: np.ndarray


def simulate_dataset(scenario: SimulationScenario, rng: Optional[np.random.Generator] = None) -> SimulatedData:
    """Draw thetas then a persons x items uniform matrix; deterministic given the seed."""
    if rng is None:
        if scenario.seed is None:
            raise InvalidConfig("simulation needs a seed")
        rng = np.random.default_rng(scenario.seed)
    P = int(scenario.n_persons)
    items = scenario.spec.items
    theta = scenario.sigma_theta * rng.standard_normal(P)
    u = rng.random((P, len(items)))
    # Generator.random is on [0, 1); 0 has probability 2^-53 but is not a valid draw
    u = np.where(u > 0, u, np.nextafter(0.0, 1.0))
    kind = scenario.spec.response_function
    values = np.empty((P, len(items)))
    for j, (it, d) in enumerate(zip(items, scenario.difficulties)):
        values[:, j] = sample_responses(it, d, theta, u[:, j], kind)
    return SimulatedData(ItemResponseMatrix(items, values), theta)


# ---------------------------------------------------------------------------
# recovery
# ---------------------------------------------------------------------------

@dataclass
class RecoveryReport:
    seed: int
    replications: int
    n_persons: int
    parameters: list = field(default_factory=list)
    theta_correlations: list = field(default_factory=list)
    not_converged: int = 0
    failed: int = 0
    scenario: dict = field(default_factory=dict)

    @property
    def mean_theta_correlation(self) -> float:
        r = [c for c in self.theta_correlations if c is not None]
        return float(np.mean(r)) if r else math.nan

    def rmse(self, pattern: str = "") -> float:
        """Root mean square error pooled over parameters whose name contains ``pattern``."""
        sq = [p["rmse"] ** 2 for p in self.parameters if pattern in p["name"] and p["n"] > 0]
        return float(math.sqrt(np.mean(sq))) if sq else math.nan

    def coverage(self, items_only: bool = True) -> float:
        """Share of (replication, parameter) pairs with truth inside estimate +/- 2 SE."""
        hit = tot = 0
        for p in self.parameters:
            if items_only and p["name"] == "sigma_theta":
                continue
            hit += p["covered"]
            tot += p["n_se"]
        return hit / tot if tot else math.nan

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "replications": self.replications,
            "n_persons": self.n_persons,
            "not_converged": self.not_converged,
            "failed": self.failed,
            "mean_theta_correlation": self.mean_theta_correlation,
            "theta_correlations": self.theta_correlations,
            "item_coverage_2se": self.coverage(),
            "parameters": self.parameters,
            "scenario": self.scenario,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=True)

    def table(self) -> str:
        lines = [f"{'parameter':<22}{'true':>10}{'mean est':>10}{'bias':>10}{'rmse':>10}{'cover':>8}"]
        for p in self.parameters:
            cov = p["covered"] / p["n_se"] if p["n_se"] else math.nan
            lines.append(f"{p['name']:<22}{p['true']:>10.4f}{p['mean']:>10.4f}{p['bias']:>10.4f}"
                         f"{p['rmse']:>10.4f}{cov:>8.2f}")
        lines.append(f"mean corr(theta, posterior mean) = {self.mean_theta_correlation:.4f}")
        lines.append(f"not converged: {self.not_converged} of {self.replications}")
        return "\n".join(lines)


def _one_replication(scenario, fit_opts, child):
    from .estimation import fit
    from .scoring import score_persons

    sim = simulate_dataset(scenario, np.random.default_rng(child))
    try:
        res = fit(sim.data, scenario.spec, fit_opts)
    except ArithmeticError as exc:
        return {"error": str(exc)}
    truth = {name: v for name, v, _ in res.layout.constrained(res.layout.pack(scenario.difficulties, scenario.sigma_theta))}
    scores = score_persons(res, sim.data)
    means = np.array([s.posterior_mean if s is not None else np.nan for s in scores])
    ok = ~np.isnan(means)
    corr = None
    if ok.sum() > 2 and np.std(means[ok]) > 0 and np.std(sim.theta[ok]) > 0:
        corr = float(np.corrcoef(sim.theta[ok], means[ok])[0, 1])
    return {"converged": res.converged, "estimates": dict(res.params_constrained),
            "se": dict(res.se), "truth": truth, "corr": corr}


def recovery_study(scenario: SimulationScenario, fit_opts=None, n_workers: int = 1) -> RecoveryReport:
    """Simulate and refit ``scenario.replications`` datasets and aggregate the errors.

    Each replication draws from its own stream spawned from the scenario seed,
    so the report does not depend on ``n_workers``.
    """
    from .estimation import FitOptions

    if scenario.replications < 1:
        raise InvalidConfig("a recovery study needs at least one replication")
    if scenario.seed is None:
        raise InvalidConfig("a recovery study needs a seed")
    fit_opts = fit_opts or FitOptions()
    children = np.random.SeedSequence(scenario.seed).spawn(scenario.replications)
    if n_workers > 1:
        with ThreadPoolExecutor(n_workers) as ex:
            reps = list(ex.map(lambda c: _one_replication(scenario, fit_opts, c), children))
    else:
        reps = [_one_replication(scenario, fit_opts, c) for c in children]

    good = [r for r in reps if "error" not in r]
    report = RecoveryReport(seed=scenario.seed, replications=scenario.replications,
                            n_persons=scenario.n_persons, scenario=scenario.to_config())
    report.failed = len(reps) - len(good)
    report.not_converged = sum(1 for r in good if not r["converged"]) + report.failed
    report.theta_correlations = [r["corr"] for r in good]
    if not good:
        return report
    for name, true in good[0]["truth"].items():
        est = np.array([r["estimates"][name] for r in good])
        se = np.array([r["se"].get(name, np.nan) for r in good])
        has_se = ~np.isnan(se)
        err = est - true
        report.parameters.append({
            "name": name,
            "true": float(true),
            "n": int(est.size),
            "mean": float(est.mean()),
            "bias": float(err.mean()),
            "rmse": float(math.sqrt(np.mean(err**2))),
            "n_se": int(has_se.sum()),
            "covered": int(np.sum(np.abs(err[has_se]) <= 2 * se[has_se])),
        })
    return report


# ---------------------------------------------------------------------------
# scenario files
# ---------------------------------------------------------------------------

def _delta_from_config(it: ItemSpec, spec: ModelSpec, cfg: dict):
    from .difficulty import FAMILY_CLASSES, DifficultyFamily, build_bspline_basis

    fam = DifficultyFamily(cfg.get("family", it.family.value))
    if fam is DifficultyFamily.FREE_ORDINAL:
        return FreeOrdinal(tuple(cfg["thresholds"]))
    if fam is DifficultyFamily.BSPLINE:
        basis = build_bspline_basis(tuple(cfg["range"]), spec.n_basis, spec.degree)
        return BSpline(basis, tuple(cfg["coefficients"]))
    extra = {}
    if fam is DifficultyFamily.INVERSE_CDF:
        extra["kind"] = cfg.get("kind", it.inverse_cdf_kind or spec.response_function)
    return FAMILY_CLASSES[fam](float(cfg["intercept"]), float(cfg["slope"]), **extra)


def scenario_from_config(cfg: dict) -> SimulationScenario:
    """Build a scenario from a parsed scenario file.

    Layout::

        n_persons = 100
        sigma_theta = 1.0
        seed = 1
        replications = 20
        [model]  (ModelSpec settings)
        [[item]] id, support, family, ... plus the true parameters
    """
    model_cfg = dict(cfg.get("model", {}))
    item_cfgs = cfg.get("item", cfg.get("items"))
    if not item_cfgs:
        raise InvalidConfig("scenario needs [[item]] entries")
    if isinstance(item_cfgs, dict):
        item_cfgs = [dict(v, id=k) for k, v in item_cfgs.items()]
    true_keys = ("intercept", "slope", "thresholds", "coefficients", "range", "kind")
    items, truth = [], []
    for ic in item_cfgs:
        ic = dict(ic)
        t = {k: ic.pop(k) for k in true_keys if k in ic}
        t["family"] = ic.get("family", "linear")
        items.append((ItemSpec.from_config(str(ic.pop("id")), ic), t))
    spec = ModelSpec.from_config(model_cfg, [it for it, _ in items])
    deltas = [_delta_from_config(it, spec, t) for it, t in items]
    return SimulationScenario(
        spec=spec,
        difficulties=tuple(deltas),
        n_persons=int(cfg.get("n_persons", 100)),
        sigma_theta=float(cfg.get("sigma_theta", 1.0)),
        seed=cfg.get("seed"),
        replications=int(cfg.get("replications", 1)),
        label=str(cfg.get("label", "")),
    )


def load_scenario(path) -> SimulationScenario:
    return scenario_from_config(load_toml(path))


def linear_recovery_scenario(n_persons=100, seed=1, replications=20) -> SimulationScenario:
    """Ten continuous linear items, intercepts -2.25 + 0.5 (i - 1), slopes 1 x 4, 2 x 4, 3 x 2."""
    from .data import Continuous
    from .difficulty import Linear

    items = tuple(ItemSpec(f"item{i + 1}", Continuous(-math.inf, math.inf), "linear") for i in range(10))
    slopes = [1.0] * 4 + [2.0] * 4 + [3.0] * 2
    deltas = tuple(Linear(-2.25 + 0.5 * i, s) for i, s in enumerate(slopes))
    spec = ModelSpec(items, slope_mode="varying")
    return SimulationScenario(spec, deltas, n_persons, 1.0, seed, replications, "linear-10")
