"""Observation densities, Gauss-Hermite marginal likelihood, score and penalty.

The unconstrained parameter vector is laid out item by item (see
:class:`ParameterLayout`) and ends with ``log sigma_theta``. Each item owns a
*block*: a map from its slice of the unconstrained vector to the coefficient
vector ``c`` of its difficulty function, together with that map's Jacobian.
Because every difficulty family is linear in ``c``, the design rows at the
observed responses are computed once per dataset (:class:`ThresholdsModel`).

With theta_k = sigma * z_k on the standard Gauss-Hermite abscissae z_k,

    l(u) = sum_p log sum_k w_k prod_i f_pi(y_pi | theta_k)

and the score is the exact gradient of this quadrature sum: item terms are
posterior-weighted derivatives of log f_pi, the sigma term differentiates
through the nodes.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numpy.polynomial.hermite import hermgauss
from scipy.special import logsumexp

from . import response
from .data import (
    Binary,
    Continuous,
    Count,
    ItemResponseMatrix,
    ModelSpec,
    OrderedCategorical,
    SlopeMode,
    TreatAs,
)
from .difficulty import (
    BSpline,
    BSplineBasis,
    DifficultyFamily,
    FAMILY_CLASSES,
    FreeOrdinal,
    InverseCdf,
    Linear,
    monotone_from_unconstrained,
    monotone_jacobian,
    monotone_to_unconstrained,
)
from .errors import (
    InvalidConfig,
    NonFiniteLikelihood,
    NumericalUnderflow,
    WrongMode,
    ZeroDerivative,
)

#: probabilities below this are floored before taking logs
PROB_FLOOR = 1e-300
LOG_PROB_FLOOR = math.log(PROB_FLOOR)


# ---------------------------------------------------------------------------
# quadrature
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QuadratureRule:
    """Physicists' Gauss-Hermite nodes with weights normalised to sum to 1.

    ``E g(theta)`` for theta ~ N(0, sigma^2) is ``sum_k weights[k] * g(sqrt(2) sigma nodes[k])``.
    """

    nodes: np.ndarray
    weights: np.ndarray

    @property
    def n(self) -> int:
        return self.nodes.size

    @property
    def z(self) -> np.ndarray:
        """Standard-normal abscissae sqrt(2) * x_k."""
        return math.sqrt(2.0) * self.nodes

    def thetas(self, sigma: float) -> np.ndarray:
        return sigma * self.z

    def expect(self, g, sigma=1.0):
        return float(np.sum(self.weights * g(self.thetas(sigma))))


def gauss_hermite_rule(n: int) -> QuadratureRule:
    if int(n) != n or n < 1:
        raise InvalidConfig(f"quadrature needs n >= 1, got {n}")
    x, w = hermgauss(int(n))
    w = w / math.sqrt(math.pi)
    return QuadratureRule(x, w / w.sum())


# ---------------------------------------------------------------------------
# single-item densities
# ---------------------------------------------------------------------------

def log_density_continuous(delta, theta, y, kind="normal"):
    """log f(theta - delta(y)) + log delta'(y)."""
    k = response.kernel(kind)
    dprime = np.asarray(delta.deriv(y), dtype=float)
    if np.any(dprime <= 0):
        raise ZeroDerivative(f"delta'(y) = {dprime} at y = {y}")
    eta = np.asarray(theta, dtype=float) - np.asarray(delta.value(y), dtype=float)
    out = k.logpdf(eta) + np.log(dprime)
    return float(out) if np.ndim(out) == 0 else out


def _bounds(delta, y, support):
    """(delta(y-1), delta(y)) with -inf below 0 and +inf at the top category."""
    y = np.asarray(y, dtype=float)
    top = support.top if support is not None else None
    hi_is_inf = (y == top) if top is not None else np.zeros(y.shape, bool)
    lo_is_inf = y == 0
    hi = np.where(hi_is_inf, math.inf, delta.value(np.where(hi_is_inf, 0.0, y)))
    lo = np.where(lo_is_inf, -math.inf, delta.value(np.where(lo_is_inf, 0.0, y - 1.0)))
    return lo, hi


def log_density_discrete(delta, theta, y, kind="normal", support=None, strict=True):
    """log P(Y = y) = log(F(theta - delta(y-1)) - F(theta - delta(y))).

    With ``strict`` a probability below ``PROB_FLOOR`` raises
    :class:`NumericalUnderflow`; otherwise it is floored.
    """
    if support is not None:
        support.check(y)
    elif isinstance(delta, FreeOrdinal):
        support = OrderedCategorical(delta.k)
    lo, hi = _bounds(delta, y, support)
    theta = np.asarray(theta, dtype=float)
    out = response.log_prob_between(kind, theta - lo, theta - hi)
    if np.any(~(out >= LOG_PROB_FLOOR)):
        if strict:
            raise NumericalUnderflow(f"P(Y = {y}) underflows at theta = {theta}")
        out = np.where(out >= LOG_PROB_FLOOR, out, LOG_PROB_FLOOR)
    return float(out) if np.ndim(out) == 0 else out


def exceedance(delta, theta, y, kind="normal", support=None):
    """P(Y > y | theta) = F(theta - delta(y)); zero at the top of a finite support."""
    y = np.asarray(y, dtype=float)
    top = support.top if support is not None else None
    if top is None and isinstance(delta, FreeOrdinal):
        top = delta.k - 1
    at_top = (y == top) if top is not None else np.zeros(y.shape, bool)
    d = np.where(at_top, math.inf, delta.value(np.where(at_top, 0.0, y)))
    out = response.kernel(kind).cdf(np.asarray(theta, dtype=float) - d)
    return float(out) if np.ndim(out) == 0 else out


# ---------------------------------------------------------------------------
# parameter layout
# ---------------------------------------------------------------------------

TWO_PARAM = "two_param"
INTERCEPT = "intercept"
MONOTONE = "monotone"
SHAPE = "shape"


@dataclass
class ItemBlock:
    """Map from an item's unconstrained slice to its difficulty coefficients."""

    item: int
    item_id: str
    kind: str
    index: np.ndarray
    template: object
    has_intercept: bool = True

    def coefficients(self, u_local):
        u = np.asarray(u_local, dtype=float)
        if self.kind == TWO_PARAM:
            return np.array([u[0], math.exp(u[1])])
        if self.kind == INTERCEPT:
            return u[:1].copy()
        if self.kind == MONOTONE:
            return monotone_from_unconstrained(u)
        a = u[0] if self.has_intercept else 0.0
        shape = u[1:] if self.has_intercept else u
        return a + monotone_from_unconstrained(shape)

    def jacobian(self, u_local):
        u = np.asarray(u_local, dtype=float)
        if self.kind == TWO_PARAM:
            return np.diag([1.0, math.exp(u[1])])
        if self.kind == INTERCEPT:
            return np.ones((1, 1))
        if self.kind == MONOTONE:
            return monotone_jacobian(u)
        if self.has_intercept:
            jm = monotone_jacobian(u[1:])
            return np.hstack([np.ones((jm.shape[0], 1)), jm])
        return monotone_jacobian(u)

    def difficulty(self, u_local):
        """The constrained difficulty function object for this block."""
        c = self.coefficients(u_local)
        t = self.template
        if self.kind == INTERCEPT:
            if isinstance(t, FreeOrdinal):
                return FreeOrdinal((c[0],))
            return type(t)(float(c[0]), 1.0, **t.structure())
        return t.with_coefficients(c)

    def design(self, y):
        if self.kind == INTERCEPT:
            return np.ones((np.size(y), 1))
        return self.template.design(np.asarray(y, dtype=float))

    def design_deriv(self, y):
        return self.template.design_deriv(np.asarray(y, dtype=float))


@dataclass
class ParameterLayout:
    """Index map between items/coefficients and the unconstrained vector."""

    spec: ModelSpec
    blocks: list
    names: list
    spline_ranges: dict
    penalty_blocks: list = field(default_factory=list)

    @property
    def n_params(self) -> int:
        return len(self.names)

    @property
    def sigma_index(self) -> int:
        return self.n_params - 1

    def sigma(self, u) -> float:
        return float(math.exp(u[self.sigma_index]))

    def difficulties(self, u) -> list:
        return [b.difficulty(u[b.index]) for b in self.blocks]

    def constrained(self, u):
        """Reported parameters as (name, value, d value / d u) triples."""
        out = []
        n = self.n_params
        for b in self.blocks:
            c = b.coefficients(u[b.index])
            jac = b.jacobian(u[b.index])
            labels = _coef_labels(b)
            for j, label in enumerate(labels):
                g = np.zeros(n)
                g[b.index] = jac[j]
                out.append((f"{b.item_id}.{label}", float(c[j]), g))
            if b.kind == SHAPE and b.has_intercept:
                g = np.zeros(n)
                g[b.index[0]] = 1.0
                out.append((f"{b.item_id}.location", float(u[b.index[0]]), g))
        g = np.zeros(n)
        g[self.sigma_index] = self.sigma(u)
        out.append(("sigma_theta", self.sigma(u), g))
        return out

    def pack(self, difficulties, sigma) -> np.ndarray:
        """Unconstrained vector for given per-item difficulty functions and sigma.

        Raises ``InvalidConfig`` when the functions cannot be represented in
        this layout (unequal slopes under a common slope, a spline on a
        different basis, ...).
        """
        u = np.full(self.n_params, np.nan)

        def put(i, v):
            if not np.isnan(u[i]) and not np.isclose(u[i], v, rtol=0, atol=1e-12):
                raise InvalidConfig(f"conflicting values for shared parameter {self.names[i]}")
            u[i] = v

        shape_ref = None
        for b, delta in zip(self.blocks, difficulties):
            if b.kind == INTERCEPT:
                put(b.index[0], float(np.atleast_1d(delta.value(0.0))[0]))
                continue
            if type(delta) is not type(b.template):
                raise InvalidConfig(f"item {b.item_id}: expected {type(b.template).__name__}")
            if isinstance(delta, BSpline) and delta.basis != b.template.basis:
                raise InvalidConfig(f"item {b.item_id}: spline basis differs from the model basis")
            if b.kind == TWO_PARAM:
                put(b.index[0], delta.intercept)
                put(b.index[1], math.log(delta.slope))
            elif b.kind == MONOTONE:
                for i, v in zip(b.index, delta.to_unconstrained()):
                    put(i, v)
            else:
                c = delta.coefficients
                if shape_ref is None:
                    shape_ref = c[0]
                    for i, v in zip(b.index[-c.size:], monotone_to_unconstrained(c)):
                        put(i, v)
                else:
                    for i, v in zip(b.index[-c.size:], monotone_to_unconstrained(c - c[0] + shape_ref)):
                        put(i, v)
                if b.has_intercept:
                    put(b.index[0], c[0] - shape_ref)
        u[self.sigma_index] = math.log(sigma)
        return u

    def to_config(self) -> dict:
        return {
            "names": list(self.names),
            "spline_ranges": {k: list(v) for k, v in self.spline_ranges.items()},
        }


def _coef_labels(b: ItemBlock):
    if b.kind == TWO_PARAM:
        return ["intercept", "slope"]
    if b.kind == INTERCEPT:
        return ["intercept"]
    if isinstance(b.template, FreeOrdinal):
        return [f"threshold{r + 1}" for r in range(b.template.k - 1)]
    return [f"coef{l}" for l in range(b.template.basis.n_basis)]


def _item_top(item):
    if item.treat_as is TreatAs.CONTINUOUS:
        return None
    return item.support.top


def default_spline_range(item, values) -> tuple:
    """Range of the spline basis for one item given its observed model-scale values."""
    v = np.asarray(values, dtype=float)
    s = item.support
    if item.treat_as is TreatAs.DISCRETE:
        if isinstance(s, (Binary, OrderedCategorical)):
            return (0.0, float(s.top))
        lo, hi = 0.0, float(v.max())
    else:
        lo, hi = float(v.min()), float(v.max())
    if not hi > lo:
        lo, hi = lo - 0.5, hi + 0.5
    return (lo, hi)


def build_layout(spec: ModelSpec, data: Optional[ItemResponseMatrix] = None,
                 spline_ranges: Optional[dict] = None) -> ParameterLayout:
    """Lay out the unconstrained parameter vector for ``spec``.

    Spline bases need a range per item: taken from ``spline_ranges`` when
    given (e.g. restored from a fit report), otherwise from ``data``.
    """
    mode = spec.slope_mode
    ranges = {} if spline_ranges is None else {k: tuple(v) for k, v in spline_ranges.items()}
    spline_items = [j for j, it in enumerate(spec.items)
                    if it.family is DifficultyFamily.BSPLINE and not it.is_binary]
    for j in spline_items:
        it = spec.items[j]
        if it.id not in ranges:
            if data is None:
                raise InvalidConfig(f"spline range for item {it.id} needs data or an explicit range")
            if data.item_ids[j] != it.id:
                raise InvalidConfig("data columns do not match the model items")
            ranges[it.id] = default_spline_range(it, data.column(j)[1])
    if mode is SlopeMode.SPLINE_COMMON_SHAPE and spline_items:
        pooled = (min(ranges[spec.items[j].id][0] for j in spline_items),
                  max(ranges[spec.items[j].id][1] for j in spline_items))
        for j in spline_items:
            ranges[spec.items[j].id] = pooled

    names: list = []
    blocks: list = []
    shared_slope = None
    shape_index = None
    first_shape = True

    def add(name):
        names.append(name)
        return len(names) - 1

    for j, it in enumerate(spec.items):
        fam = it.family
        if it.is_binary:
            if fam is DifficultyFamily.FREE_ORDINAL:
                tmpl = FreeOrdinal((0.0,))
            else:
                tmpl = FAMILY_CLASSES[fam](0.0, 1.0)
            idx = [add(f"{it.id}.intercept")]
            blocks.append(ItemBlock(j, it.id, INTERCEPT, np.array(idx), tmpl))
        elif fam.is_two_param:
            extra = {}
            if fam is DifficultyFamily.INVERSE_CDF:
                extra["kind"] = it.inverse_cdf_kind or spec.response_function
            tmpl = FAMILY_CLASSES[fam](0.0, 1.0, **extra)
            i0 = add(f"{it.id}.intercept")
            if mode is SlopeMode.COMMON:
                if shared_slope is None:
                    shared_slope = add("log_slope")
                i1 = shared_slope
            else:
                i1 = add(f"{it.id}.log_slope")
            blocks.append(ItemBlock(j, it.id, TWO_PARAM, np.array([i0, i1]), tmpl))
        elif fam is DifficultyFamily.FREE_ORDINAL:
            k = it.support.k
            tmpl = FreeOrdinal(tuple(range(k - 1)))
            idx = [add(f"{it.id}.threshold1")] + [add(f"{it.id}.log_gap{r}") for r in range(2, k)]
            blocks.append(ItemBlock(j, it.id, MONOTONE, np.array(idx), tmpl))
        elif fam is DifficultyFamily.BSPLINE:
            basis = BSplineBasis(*ranges[it.id], spec.n_basis, spec.degree)
            tmpl = BSpline(basis, tuple(range(spec.n_basis)))
            if mode is SlopeMode.SPLINE_COMMON_SHAPE:
                idx = []
                has_int = not first_shape
                if has_int:
                    idx.append(add(f"{it.id}.location"))
                if shape_index is None:
                    shape_index = [add("shape.coef0")] + [add(f"shape.log_diff{l}") for l in range(1, spec.n_basis)]
                idx += shape_index
                blocks.append(ItemBlock(j, it.id, SHAPE, np.array(idx), tmpl, has_intercept=has_int))
                first_shape = False
            else:
                idx = [add(f"{it.id}.coef0")] + [add(f"{it.id}.log_diff{l}") for l in range(1, spec.n_basis)]
                blocks.append(ItemBlock(j, it.id, MONOTONE, np.array(idx), tmpl))
        else:
            raise InvalidConfig(f"unsupported family {fam} for item {it.id}")
    add("log_sigma")
    penalty = [bi for bi, b in enumerate(blocks)
               if mode is SlopeMode.SPLINE_FREE and isinstance(b.template, BSpline)]
    return ParameterLayout(spec, blocks, names, ranges, penalty)


@dataclass(frozen=True)
class ParameterVector:
    """Unconstrained parameter values together with their layout."""

    layout: ParameterLayout
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (self.layout.n_params,):
            raise InvalidConfig(f"expected {self.layout.n_params} parameters, got {v.shape}")
        object.__setattr__(self, "values", v)

    @property
    def sigma(self) -> float:
        return self.layout.sigma(self.values)

    def position(self, name: str) -> int:
        return self.layout.names.index(name)

    def __getitem__(self, name):
        return self.values[self.position(name)]


# ---------------------------------------------------------------------------
# starting values
# ---------------------------------------------------------------------------

def _clip_prob(p, n):
    eps = 0.5 / max(n, 1)
    return np.clip(p, eps, 1.0 - eps)


def start_values(layout: ParameterLayout, data: ItemResponseMatrix) -> np.ndarray:
    """Moment-matching starting point on the unconstrained scale (sigma = 1)."""
    spec = layout.spec
    rf = response.kernel(spec.response_function)
    var_f = rf.moments.var_f
    u = np.zeros(layout.n_params)
    slopes = []
    shape_done = False
    for b in layout.blocks:
        it = spec.items[b.item]
        _, y = data.column(b.item)
        if b.kind == INTERCEPT:
            p1 = _clip_prob(np.mean(y > 0), y.size)
            u[b.index[0]] = -rf.quantile(p1) * math.sqrt(1.0 + var_f) / math.sqrt(var_f)
        elif b.kind == TWO_PARAM:
            d0, d1 = _two_param_start(b.template, it, y, rf)
            u[b.index[0]] = d0
            slopes.append((b.index[1], d1))
        else:
            if isinstance(b.template, FreeOrdinal):
                c = _ordinal_start(it.support.k, y, rf)
            else:
                c = _spline_start(b.template.basis, it, y, rf)
            uu = monotone_to_unconstrained(c)
            if b.kind == MONOTONE:
                u[b.index] = uu
            else:
                if not shape_done:
                    u[b.index[-len(uu):]] = uu
                    shape_done = True
                    ref = c[0]
                if b.has_intercept:
                    u[b.index[0]] = c[0] - ref
    # a shared slope starts at the mean of the per-item moment slopes
    by_index: dict = {}
    for i, s in slopes:
        by_index.setdefault(i, []).append(s)
    for i, ss in by_index.items():
        u[i] = math.log(float(np.mean(ss)))
    u[layout.sigma_index] = 0.0
    return u


def _two_param_start(tmpl, it, y, rf):
    g = tmpl.g(_interior(tmpl, y))
    var_f = rf.moments.var_f
    sd = float(np.std(g))
    slope = math.sqrt((1.0 + var_f) / sd**2) if sd > 0 else 1.0
    slope = min(max(slope, 1e-2), 1e2)
    return -slope * float(np.mean(g)) - rf.moments.e_f, slope


def _interior(tmpl, y):
    lo, hi = tmpl.lo, tmpl.hi
    y = np.asarray(y, dtype=float)
    pad = 1e-6
    if math.isfinite(lo):
        y = np.maximum(y, lo + pad)
    if math.isfinite(hi):
        y = np.minimum(y, hi - pad)
    return y


def _ordinal_start(k, y, rf):
    var_f = rf.moments.var_f
    scale = math.sqrt(1.0 + var_f) / math.sqrt(var_f)
    exceed = np.array([np.mean(y > r) for r in range(k - 1)])
    c = -rf.quantile(_clip_prob(exceed, y.size)) * scale
    # force strict increase for empty/degenerate categories
    for r in range(1, c.size):
        c[r] = max(c[r], c[r - 1] + 0.1)
    return c


def _spline_start(basis, it, y, rf):
    """Coefficients reproducing the parametric counterpart at the Greville points."""
    gr = basis.greville()
    if it.treat_as is TreatAs.DISCRETE and isinstance(it.support, Count):
        d0, d1 = _two_param_start(FAMILY_CLASSES[DifficultyFamily.LOGP1](0.0, 1.0), it, y, rf)
        c = d0 + d1 * np.log1p(np.maximum(gr, 0.0))
    elif it.treat_as is TreatAs.DISCRETE:
        th = _ordinal_start(it.support.k, y, rf)
        r = np.arange(th.size, dtype=float)
        slope, icpt = np.polyfit(r, th, 1) if th.size > 1 else (1.0, th[0])
        c = icpt + max(slope, 0.1) * gr
    else:
        d0, d1 = _two_param_start(Linear(0.0, 1.0), it, y, rf)
        c = d0 + d1 * gr
    return np.maximum.accumulate(c)


# ---------------------------------------------------------------------------
# evaluator
# ---------------------------------------------------------------------------

@dataclass
class _ItemDesign:
    block: ItemBlock
    persons: np.ndarray
    continuous: bool
    X: np.ndarray = None       # rows for delta(y): one per person (continuous), one per level (discrete)
    Xd: np.ndarray = None      # rows for delta'(y)        (continuous)
    X_lo: np.ndarray = None    # rows for delta(y - 1)     (discrete, per level)
    top: np.ndarray = None     # delta(y) = +inf           (discrete, per level)
    bottom: np.ndarray = None  # delta(y - 1) = -inf       (discrete, per level)
    inverse: np.ndarray = None  # person -> level index    (discrete)


def _build_design(layout: ParameterLayout, data: ItemResponseMatrix):
    if data.item_ids != layout.spec.item_ids:
        raise InvalidConfig(f"data items {data.item_ids} do not match model items {layout.spec.item_ids}")
    out = []
    for b in layout.blocks:
        it = layout.spec.items[b.item]
        persons, y = data.column(b.item)
        if it.treat_as is TreatAs.CONTINUOUS:
            out.append(_ItemDesign(b, persons, True, X=b.design(y), Xd=b.design_deriv(y)))
            continue
        y, inverse = np.unique(y, return_inverse=True)
        top_val = _item_top(it)
        top = (y == top_val) if top_val is not None else np.zeros(y.shape, bool)
        bottom = y == 0
        X = np.zeros((y.size, len(_coef_labels(b))))
        X_lo = np.zeros_like(X)
        if (~top).any():
            X[~top] = b.design(y[~top])
        if (~bottom).any():
            X_lo[~bottom] = b.design(y[~bottom] - 1.0)
        out.append(_ItemDesign(b, persons, False, X=X, X_lo=X_lo, top=top, bottom=bottom, inverse=inverse))
    return out


@dataclass
class _Terms:
    logf: np.ndarray
    dtheta: np.ndarray
    g_hi: np.ndarray = None   # d logf / d delta(y)      (discrete) or d logf / d delta(y) (continuous)
    g_lo: np.ndarray = None   # d logf / d delta(y - 1)  (discrete)
    inv_dprime: np.ndarray = None
    underflows: int = 0


class ThresholdsModel:
    """Likelihood evaluator for one (layout, dataset) pair."""

    def __init__(self, layout: ParameterLayout, data: ItemResponseMatrix, n_threads: int = 1,
                 quadrature_nodes: Optional[int] = None):
        self.layout = layout
        self.spec = layout.spec
        self.data = data
        self.kernel = response.kernel(self.spec.response_function)
        self.rule = gauss_hermite_rule(quadrature_nodes or self.spec.quadrature_nodes)
        self.designs = _build_design(layout, data)
        self.n_threads = max(1, int(n_threads))
        self.underflow_count = 0

    # -- per-item terms ------------------------------------------------------

    def _item_terms(self, d: _ItemDesign, u, thetas, grad: bool) -> _Terms:
        k = self.kernel
        c = d.block.coefficients(u[d.block.index])
        if d.continuous:
            delta = d.X @ c
            dprime = d.Xd @ c
            small = dprime <= PROB_FLOOR
            under = int(small.sum())
            dprime = np.where(small, PROB_FLOOR, dprime)
            eta = thetas[None, :] - delta[:, None]
            logf = k.logpdf(eta) + np.log(dprime)[:, None]
            score_eta = k.dlogpdf(eta)
            return _Terms(logf, score_eta, g_hi=-score_eta if grad else None,
                          inv_dprime=1.0 / dprime, underflows=under)
        hi = np.where(d.top, math.inf, d.X @ c)
        lo = np.where(d.bottom, -math.inf, d.X_lo @ c)
        a = thetas[None, :] - lo[:, None]   # upper argument, +inf at y = 0
        b = thetas[None, :] - hi[:, None]   # lower argument, -inf at the top
        logf = response.log_prob_between(self.spec.response_function, a, b)
        floored = ~(logf >= LOG_PROB_FLOOR)
        under = int(floored.sum())
        with np.errstate(over="ignore", invalid="ignore"):
            la = np.where(np.isfinite(a), k.logpdf(np.where(np.isfinite(a), a, 0.0)), -np.inf)
            lb = np.where(np.isfinite(b), k.logpdf(np.where(np.isfinite(b), b, 0.0)), -np.inf)
        if under:
            logf = np.where(floored, LOG_PROB_FLOOR, logf)
        ra = np.exp(la - logf)
        rb = np.exp(lb - logf)
        if under:
            ra = np.where(floored, 0.0, ra)
            rb = np.where(floored, 0.0, rb)
        # terms were computed once per response level; expand to persons
        inv = d.inverse
        under = int(floored[inv].sum()) if under else 0
        return _Terms(logf[inv], (ra - rb)[inv], g_hi=rb[inv], g_lo=-ra[inv], underflows=under)

    def _all_terms(self, u, thetas, grad):
        job = lambda d: self._item_terms(d, u, thetas, grad)
        if self.n_threads > 1 and len(self.designs) > 1:
            with ThreadPoolExecutor(self.n_threads) as ex:
                return list(ex.map(job, self.designs))
        return [job(d) for d in self.designs]

    def log_lik_matrix(self, u, thetas, terms=None):
        """Sum over items of log f_pi(y_pi | theta) for every person and theta (P x K)."""
        if terms is None:
            terms = self._all_terms(u, thetas, grad=False)
        L = np.zeros((self.data.n_persons, np.size(thetas)))
        for d, t in zip(self.designs, terms):   # fixed order: bit-stable reductions
            L[d.persons] += t.logf
        return L

    # -- public evaluation ---------------------------------------------------

    def _check_u(self, u):
        u = np.asarray(u, dtype=float)
        if u.shape != (self.layout.n_params,):
            raise InvalidConfig(f"expected {self.layout.n_params} parameters, got shape {u.shape}")
        return u

    def loglik(self, u) -> float:
        return self.loglik_and_score(u, with_score=False)[0]

    def loglik_and_score(self, u, with_score=True):
        u = self._check_u(u)
        sigma = self.layout.sigma(u)
        z = self.rule.z
        thetas = sigma * z
        terms = self._all_terms(u, thetas, grad=with_score)
        self.underflow_count = sum(t.underflows for t in terms)
        L = self.log_lik_matrix(u, thetas, terms)
        logw = np.log(self.rule.weights)
        A = L + logw[None, :]
        per_person = logsumexp(A, axis=1)
        bad = ~np.isfinite(per_person)
        if bad.any():
            raise NonFiniteLikelihood(int(np.nonzero(bad)[0][0]))
        ll = float(np.sum(per_person))
        if not with_score:
            return ll, None
        post = np.exp(A - per_person[:, None])
        grad = np.zeros(self.layout.n_params)
        G = np.zeros_like(L)
        for d, t in zip(self.designs, terms):
            w = post[d.persons]
            G[d.persons] += t.dtheta
            if d.continuous:
                gc = d.X.T @ np.sum(w * t.g_hi, axis=1) + d.Xd.T @ t.inv_dprime
            else:
                n = d.X.shape[0]
                gc = (d.X.T @ np.bincount(d.inverse, np.sum(w * t.g_hi, axis=1), n)
                      + d.X_lo.T @ np.bincount(d.inverse, np.sum(w * t.g_lo, axis=1), n))
            b = d.block
            np.add.at(grad, b.index, b.jacobian(u[b.index]).T @ gc)
        grad[self.layout.sigma_index] = sigma * float(np.sum(post * G * z[None, :]))
        return ll, grad

    def per_person_loglik(self, u) -> np.ndarray:
        u = self._check_u(u)
        thetas = self.rule.thetas(self.layout.sigma(u))
        L = self.log_lik_matrix(u, thetas)
        return logsumexp(L + np.log(self.rule.weights)[None, :], axis=1)

    def penalty(self, u):
        return shape_penalty_value(self.layout, u)

    def objective(self, u):
        """Penalised log-likelihood and its gradient."""
        ll, g = self.loglik_and_score(u)
        if self.layout.penalty_blocks and self.spec.penalty_lambda > 0:
            pv, pg = shape_penalty_value(self.layout, u)
            return ll - pv, g - pg
        return ll, g


# ---------------------------------------------------------------------------
# penalty
# ---------------------------------------------------------------------------

def shape_penalty_value(layout: ParameterLayout, u):
    """lambda * sum over adjacent spline items of ||diff(c_i) - diff(c_{i-1})||^2."""
    lam = layout.spec.penalty_lambda
    u = np.asarray(u, dtype=float)
    grad = np.zeros(layout.n_params)
    blocks = [layout.blocks[i] for i in layout.penalty_blocks]
    if len(blocks) < 2 or lam == 0:
        return 0.0, grad
    cs = [b.coefficients(u[b.index]) for b in blocks]
    ds = [np.diff(c) for c in cs]
    value = 0.0
    gd = [np.zeros_like(d) for d in ds]
    for i in range(1, len(ds)):
        r = ds[i] - ds[i - 1]
        value += float(r @ r)
        gd[i] += 2.0 * r
        gd[i - 1] -= 2.0 * r
    for b, g in zip(blocks, gd):
        gc = np.zeros(g.size + 1)
        gc[1:] += g
        gc[:-1] -= g
        np.add.at(grad, b.index, b.jacobian(u[b.index]).T @ gc)
    return lam * value, lam * grad


# ---------------------------------------------------------------------------
# module-level operations
# ---------------------------------------------------------------------------

def _model(params: ParameterVector, data, spec, n_threads=1):
    layout = params.layout
    if spec is not None and spec is not layout.spec and spec != layout.spec:
        layout = build_layout(spec, data, layout.spline_ranges)
    return ThresholdsModel(layout, data, n_threads)


def marginal_log_likelihood(params: ParameterVector, data: ItemResponseMatrix,
                            spec: Optional[ModelSpec] = None, n_threads=1) -> float:
    return _model(params, data, spec, n_threads).loglik(params.values)


def score(params: ParameterVector, data: ItemResponseMatrix,
          spec: Optional[ModelSpec] = None, n_threads=1) -> np.ndarray:
    return _model(params, data, spec, n_threads).loglik_and_score(params.values)[1]


def shape_penalty(params: ParameterVector, spec: Optional[ModelSpec] = None):
    layout = params.layout
    spec = spec or layout.spec
    if spec.slope_mode is not SlopeMode.SPLINE_FREE:
        raise WrongMode("the shape penalty applies to slope_mode = spline_free only")
    if spec != layout.spec:
        layout = build_layout(spec, spline_ranges=layout.spline_ranges)
    return shape_penalty_value(layout, params.values)
