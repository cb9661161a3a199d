"""Marginal maximum likelihood fitting, standard errors and likelihood-ratio tests."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import optimize, stats

from .data import ItemResponseMatrix, ModelSpec, SlopeMode
from .errors import NotConverged, NotNested, SingularInformation
from .likelihood import (
    ParameterLayout,
    ParameterVector,
    ThresholdsModel,
    build_layout,
    start_values,
)

log = logging.getLogger(__name__)

HESSIAN_STEP = 1e-5


@dataclass(frozen=True)
class FitOptions:
    max_iterations: int = 500
    grad_tol: float = 1e-5
    rel_tol: float = 1e-9
    quadrature_nodes: Optional[int] = None
    n_starts: int = 1
    seed: int = 0
    n_threads: int = 1
    compute_se: bool = True
    start: Optional[np.ndarray] = None


@dataclass
class FitResult:
    spec: ModelSpec
    layout: ParameterLayout
    params: ParameterVector
    loglik: float
    penalty_value: float
    converged: bool
    iterations: int
    grad_norm: float
    underflow_count: int
    n_persons: int
    params_constrained: dict = field(default_factory=dict)
    se: dict = field(default_factory=dict)
    se_unconstrained: Optional[np.ndarray] = None
    information: Optional[np.ndarray] = None
    history: list = field(default_factory=list)
    message: str = ""
    model: Optional[ThresholdsModel] = field(default=None, repr=False)

    @property
    def params_unconstrained(self) -> np.ndarray:
        return self.params.values

    @property
    def n_params(self) -> int:
        return self.layout.n_params

    @property
    def sigma_theta(self) -> float:
        return self.params.sigma

    @property
    def difficulties(self) -> list:
        return self.layout.difficulties(self.params.values)

    def item_table(self) -> list:
        """One dict per item with its reported parameters and standard errors."""
        rows = []
        for b in self.layout.blocks:
            prefix = f"{b.item_id}."
            row = {"item": b.item_id}
            for name, value in self.params_constrained.items():
                if name.startswith(prefix):
                    key = name[len(prefix):]
                    row[key] = value
                    row[f"{key}_se"] = self.se.get(name)
            rows.append(row)
        return rows


def _hessian(model: ThresholdsModel, u, h=HESSIAN_STEP):
    """Central differences of the analytic (penalised) score."""
    n = u.size
    H = np.empty((n, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = h
        gp = model.objective(u + e)[1]
        gm = model.objective(u - e)[1]
        H[:, j] = (gp - gm) / (2 * h)
    return H


def _newton_polish(model, u, f, g, tol, max_steps=25):
    """Damped Newton steps on the penalised objective; never decreases it."""
    steps = 0
    for _ in range(max_steps):
        if np.max(np.abs(g)) < tol:
            break
        H = _hessian(model, u)
        H = 0.5 * (H + H.T)
        try:
            L = np.linalg.cholesky(-H)
            step = np.linalg.solve(L.T, np.linalg.solve(L, g))
        except np.linalg.LinAlgError:
            # indefinite (near-flat directions at a constraint boundary): clamp eigenvalues
            ev, V = np.linalg.eigh(-H)
            if not np.all(np.isfinite(ev)) or ev[-1] <= 0:
                break
            ev = np.maximum(np.abs(ev), 1e-10 * ev[-1])
            step = V @ ((V.T @ g) / ev)
        t = 1.0
        improved = False
        for _ in range(30):
            cand = u + t * step
            try:
                fc, gc = model.objective(cand)
            except ArithmeticError:
                fc = -math.inf
            if np.isfinite(fc) and fc >= f:
                improved = True
                break
            t *= 0.5
        if not improved:
            break
        steps += 1
        u, f, g = cand, fc, gc
    return u, f, g, steps


def _polish_reserve(opts: FitOptions) -> int:
    """Newton steps kept back from the quasi-Newton phase (it can stall on stiff penalties)."""
    return min(50, opts.max_iterations // 5)


def _optimise(model: ThresholdsModel, u0, opts: FitOptions):
    history = []

    def fun(u):
        try:
            f, g = model.objective(u)
        except ArithmeticError:
            return math.inf, np.zeros_like(u)
        if not np.isfinite(f):
            return math.inf, np.zeros_like(u)
        return -f, -g

    def callback(xk):
        history.append(-fun(xk)[0])

    f0, g0 = model.objective(u0)
    history.append(f0)
    res = optimize.minimize(
        fun, u0, jac=True, method="L-BFGS-B", callback=callback,
        options={"maxiter": max(opts.max_iterations - _polish_reserve(opts), 1), "gtol": opts.grad_tol * 1e-2,
                 "ftol": opts.rel_tol * 1e-3, "maxcor": 20},
    )
    u = res.x
    f, g = model.objective(u)
    # the polish shares the iteration budget with the quasi-Newton phase
    budget = min(50, max(0, opts.max_iterations - int(res.nit)))
    u, f, g, polish = _newton_polish(model, u, f, g, tol=opts.grad_tol * 1e-3, max_steps=budget)
    if polish:
        history.append(f)
    return u, f, g, int(res.nit) + polish, history, str(res.message)


def fit(data: ItemResponseMatrix, spec: ModelSpec, opts: Optional[FitOptions] = None) -> FitResult:
    """Maximise the (penalised) marginal log-likelihood."""
    opts = opts or FitOptions()
    layout = build_layout(spec, data)
    model = ThresholdsModel(layout, data, opts.n_threads, opts.quadrature_nodes)
    base = start_values(layout, data) if opts.start is None else np.asarray(opts.start, dtype=float)
    rng = np.random.default_rng(opts.seed)
    starts = [base] + [base + rng.normal(0.0, 0.5, size=base.size) for _ in range(max(opts.n_starts, 1) - 1)]
    best = None
    for u0 in starts:
        u, f, g, nit, hist, msg = _optimise(model, u0, opts)
        if best is None or f > best[1]:
            best = (u, f, g, nit, hist, msg)
    u, f, g, nit, hist, msg = best
    ll = model.loglik(u)
    underflows = model.underflow_count
    grad_norm = float(np.max(np.abs(g)))
    converged = grad_norm < opts.grad_tol
    result = FitResult(
        spec=spec, layout=layout, params=ParameterVector(layout, u), loglik=ll,
        penalty_value=float(model.penalty(u)[0]), converged=converged, iterations=nit,
        grad_norm=grad_norm, underflow_count=underflows, n_persons=data.n_persons,
        params_constrained={name: v for name, v, _ in layout.constrained(u)},
        history=hist, message=msg, model=model,
    )
    if not converged:
        log.warning("fit did not converge: max |score| = %.3g (%s)", grad_norm, msg)
    if opts.compute_se:
        try:
            _attach_se(result, model)
        except SingularInformation as exc:
            log.warning("standard errors unavailable: %s", exc)
    return result


def observed_information(model: ThresholdsModel, u) -> np.ndarray:
    H = _hessian(model, np.asarray(u, dtype=float))
    return -0.5 * (H + H.T)


def _attach_se(result: FitResult, model: ThresholdsModel):
    u = result.params.values
    info = observed_information(model, u)
    result.information = info
    try:
        L = np.linalg.cholesky(info)
    except np.linalg.LinAlgError:
        raise SingularInformation("observed information is not positive definite") from None
    cov = np.linalg.solve(L.T, np.linalg.solve(L, np.eye(u.size)))
    if not np.all(np.isfinite(cov)):
        raise SingularInformation("observed information could not be inverted")
    result.se_unconstrained = np.sqrt(np.diag(cov))
    result.se = {name: float(math.sqrt(max(g @ cov @ g, 0.0))) for name, _, g in result.layout.constrained(u)}


def standard_errors(fit_result: FitResult, data: ItemResponseMatrix = None, spec: ModelSpec = None) -> dict:
    """Delta-method standard errors on the reported (constrained) scale."""
    if not fit_result.converged:
        log.warning("standard errors requested for a non-converged fit")
    model = fit_result.model
    if model is None or data is not None:
        layout = fit_result.layout if spec is None else build_layout(spec, data, fit_result.layout.spline_ranges)
        model = ThresholdsModel(layout, data)
    _attach_se(fit_result, model)
    return dict(fit_result.se)


@dataclass(frozen=True)
class LrTestResult:
    statistic: float
    df: int
    p_value: float

    def to_dict(self):
        return {"statistic": self.statistic, "df": self.df, "p_value": self.p_value}


def _nesting_key(spec: ModelSpec):
    return (
        tuple((it.id, it.family, it.treat_as, it.support) for it in spec.items),
        spec.response_function,
        spec.quadrature_nodes,
        spec.n_basis,
        spec.degree,
    )


def check_nested(full: ModelSpec, reduced: ModelSpec):
    if _nesting_key(full) != _nesting_key(reduced):
        raise NotNested("models are not nested: items, families, supports or response functions differ")
    if full == reduced:
        return
    if reduced.slope_mode is SlopeMode.COMMON and full.slope_mode is SlopeMode.VARYING:
        return
    raise NotNested(
        f"models are not nested: {reduced.slope_mode.value} is not a restriction of {full.slope_mode.value}; "
        "differences of log-likelihoods of non-nested models are not informative"
    )


def lr_test(full: FitResult, reduced: FitResult) -> LrTestResult:
    """Likelihood-ratio test of ``reduced`` against the larger nested ``full`` model."""
    check_nested(full.spec, reduced.spec)
    if not (full.converged and reduced.converged):
        raise NotConverged("both fits must have converged for a likelihood-ratio test")
    df = full.n_params - reduced.n_params
    stat = 2.0 * (full.loglik - reduced.loglik)
    if stat < 0:
        if stat < -1e-4:
            log.warning("negative likelihood-ratio statistic %.6g clamped to 0", stat)
        stat = 0.0
    p = float(stats.chi2.sf(stat, df)) if df > 0 else 1.0
    return LrTestResult(float(stat), int(df), p)
