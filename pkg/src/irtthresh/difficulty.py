"""Item difficulty functions delta(y).

Every family is linear in its coefficient vector ``c``:
``delta(y) = design(y) @ c`` and ``delta'(y) = design_deriv(y) @ c``.
The likelihood code relies on this to precompute design rows once per fit.

Families
--------
Linear       delta(y) = d0 + d1 * y
Log          delta(y) = d0 + d1 * log(y),          y > 0
LogP1        delta(y) = d0 + d1 * log(y + 1),      y > -1 (counts)
InverseCdf   delta(y) = d0 + d1 * F^{-1}(y),       0 < y < 1
FreeOrdinal  delta(r) = t_{r+1}, r = 0..k-2;       delta(k-1) = +inf
BSpline      delta(y) = sum_l c_l B_l(y),          c nondecreasing

Unconstrained coordinates keep slopes positive and coefficient sequences
monotone: two-parameter families map to (d0, log d1); ordered sequences map
to (c_0, log(c_1 - c_0), ..., log(c_M - c_{M-1})).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from . import response
from .errors import (
    InvalidConfig,
    NonMonotoneInput,
    NotDifferentiable,
    OutOfRange,
    OutOfSupport,
)
from .response import ResponseFunctionKind

#: floor applied to zero adjacent differences in the log-difference map
FLAT_EPS = 1e-8


class DifficultyFamily(str, enum.Enum):
    LINEAR = "linear"
    LOG = "log"
    LOGP1 = "logp1"
    INVERSE_CDF = "inverse_cdf"
    FREE_ORDINAL = "free_ordinal"
    BSPLINE = "bspline"

    @property
    def is_two_param(self) -> bool:
        return self in _TWO_PARAM


_TWO_PARAM = {
    DifficultyFamily.LINEAR,
    DifficultyFamily.LOG,
    DifficultyFamily.LOGP1,
    DifficultyFamily.INVERSE_CDF,
}


# ---------------------------------------------------------------------------
# monotone sequence <-> unconstrained map
# ---------------------------------------------------------------------------

def monotone_from_unconstrained(u):
    u = np.asarray(u, dtype=float)
    c = np.empty_like(u)
    c[0] = u[0]
    if u.size > 1:
        c[1:] = u[0] + np.cumsum(np.exp(u[1:]))
    return c


def monotone_jacobian(u):
    """d c / d u for :func:`monotone_from_unconstrained` (lower triangular)."""
    u = np.asarray(u, dtype=float)
    n = u.size
    jac = np.zeros((n, n))
    jac[:, 0] = 1.0
    if n > 1:
        e = np.exp(u[1:])
        jac[1:, 1:] = np.tril(np.ones((n - 1, n - 1))) * e
    return jac


def monotone_to_unconstrained(c, strict=False):
    c = np.asarray(c, dtype=float)
    d = np.diff(c)
    if np.any(d < 0) or (strict and np.any(d <= 0)):
        raise NonMonotoneInput(f"coefficients are not {'strictly ' if strict else ''}increasing: {c}")
    return np.concatenate([c[:1], np.log(np.maximum(d, FLAT_EPS))])


# ---------------------------------------------------------------------------
# B-spline basis
# ---------------------------------------------------------------------------

def _cox_de_boor(x, knots, degree):
    """Basis matrices for degrees ``degree - 1`` and ``degree`` at points x."""
    x = np.asarray(x, dtype=float)
    t = knots
    n_int = len(t) - 1
    b = np.zeros((x.size, n_int))
    # half-open spans, with the right boundary folded into the last real span
    for j in range(n_int):
        if t[j] < t[j + 1]:
            b[:, j] = (x >= t[j]) & (x < t[j + 1])
    last = max(j for j in range(n_int) if t[j] < t[j + 1])
    b[x == t[-1], last] = 1.0
    prev = b
    for k in range(1, degree + 1):
        m = n_int - k
        cur = np.zeros((x.size, m))
        for j in range(m):
            den1 = t[j + k] - t[j]
            den2 = t[j + k + 1] - t[j + 1]
            if den1 > 0:
                cur[:, j] += (x - t[j]) / den1 * prev[:, j]
            if den2 > 0:
                cur[:, j] += (t[j + k + 1] - x) / den2 * prev[:, j + 1]
        if k < degree:
            prev = cur
        else:
            return prev, cur
    return None, prev  # degree 0


@dataclass(frozen=True)
class BSplineBasis:
    """Clamped B-spline basis with equally spaced interior knots on [lower, upper].

    Outside the interval the basis is continued linearly from the boundary,
    so spline difficulty functions stay monotone and unbounded on either side.
    """

    lower: float
    upper: float
    n_basis: int = 8
    degree: int = 3
    knots: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.lower < self.upper:
            raise InvalidConfig(f"spline range requires lower < upper, got ({self.lower}, {self.upper})")
        if self.degree < 1 or self.n_basis < self.degree + 1:
            raise InvalidConfig(
                f"need degree >= 1 and n_basis >= degree + 1, got n_basis={self.n_basis}, degree={self.degree}"
            )
        n_interior = self.n_basis - self.degree - 1
        inner = np.linspace(self.lower, self.upper, n_interior + 2)
        knots = np.concatenate([
            np.full(self.degree, self.lower), inner, np.full(self.degree, self.upper)
        ])
        object.__setattr__(self, "knots", knots)

    def _inside(self, x, deriv):
        low, full = _cox_de_boor(x, self.knots, self.degree)
        if not deriv:
            return full
        p, t = self.degree, self.knots
        out = np.zeros_like(full)
        for j in range(self.n_basis):
            den1 = t[j + p] - t[j]
            den2 = t[j + p + 1] - t[j + 1]
            if den1 > 0:
                out[:, j] += p * low[:, j] / den1
            if den2 > 0:
                out[:, j] -= p * low[:, j + 1] / den2
        return out

    def __call__(self, y, deriv=0):
        """Basis values (``deriv=0``) or first derivatives (``deriv=1``), shape (n, n_basis)."""
        y = np.atleast_1d(np.asarray(y, dtype=float))
        yc = np.clip(y, self.lower, self.upper)
        out = self._inside(yc, deriv)
        outside = y != yc
        if deriv == 0 and outside.any():
            slope = self._inside(yc[outside], 1)
            out[outside] += (y[outside] - yc[outside])[:, None] * slope
        return out

    def greville(self):
        """Greville abscissae; a linear function has coefficients a + b * greville."""
        p, t = self.degree, self.knots
        return np.array([t[j + 1:j + p + 1].mean() for j in range(self.n_basis)])

    def to_dict(self):
        return {"lower": self.lower, "upper": self.upper, "n_basis": self.n_basis, "degree": self.degree}


def build_bspline_basis(range_, n_basis=8, degree=3) -> BSplineBasis:
    lower, upper = range_
    return BSplineBasis(float(lower), float(upper), int(n_basis), int(degree))


# ---------------------------------------------------------------------------
# families
# ---------------------------------------------------------------------------

class _Base:
    family: DifficultyFamily

    @property
    def coefficients(self) -> np.ndarray:
        raise NotImplementedError

    @property
    def n_params(self) -> int:
        return self.coefficients.size

    def value(self, y):
        y = np.asarray(y, dtype=float)
        out = self.design(y.ravel()) @ self.coefficients
        return float(out[0]) if y.ndim == 0 else out.reshape(y.shape)

    def deriv(self, y):
        y = np.asarray(y, dtype=float)
        out = self.design_deriv(y.ravel()) @ self.coefficients
        return float(out[0]) if y.ndim == 0 else out.reshape(y.shape)

    def structure(self) -> dict:
        return {}

    def with_coefficients(self, c):
        raise NotImplementedError


@dataclass(frozen=True)
class _TwoParam(_Base):
    intercept: float
    slope: float

    def __post_init__(self):
        if not self.slope > 0:
            raise NonMonotoneInput(f"{type(self).__name__} requires slope > 0, got {self.slope}")

    # g, g', g^{-1} and the open support (lo, hi) are set by subclasses
    lo = -math.inf
    hi = math.inf

    def _check(self, y):
        y = np.asarray(y, dtype=float)
        if np.any((y <= self.lo) | (y >= self.hi)) or np.isnan(y).any():
            raise OutOfSupport(f"{type(self).__name__} defined on ({self.lo}, {self.hi}); got {y}")
        return y

    @property
    def coefficients(self):
        return np.array([self.intercept, self.slope])

    def design(self, y):
        y = self._check(np.atleast_1d(y))
        return np.column_stack([np.ones_like(y), self.g(y)])

    def design_deriv(self, y):
        y = self._check(np.atleast_1d(y))
        return np.column_stack([np.zeros_like(y), self.g_deriv(y)])

    def invert(self, t):
        t = np.asarray(t, dtype=float)
        z = (t - self.intercept) / self.slope
        out = self.g_inv(z)
        if np.any(~np.isfinite(out)):
            raise OutOfRange(f"{t} is outside the range of {self}")
        return float(out) if out.ndim == 0 else out

    def to_unconstrained(self):
        return np.array([self.intercept, math.log(self.slope)])

    @classmethod
    def from_unconstrained(cls, u, **structure):
        return cls(float(u[0]), float(np.exp(u[1])), **structure)

    def with_coefficients(self, c):
        return type(self)(float(c[0]), float(c[1]), **self.structure())


@dataclass(frozen=True)
class Linear(_TwoParam):
    family = DifficultyFamily.LINEAR

    @staticmethod
    def g(y):
        return y

    @staticmethod
    def g_deriv(y):
        return np.ones_like(y)

    @staticmethod
    def g_inv(z):
        return np.asarray(z, dtype=float)


@dataclass(frozen=True)
class Log(_TwoParam):
    family = DifficultyFamily.LOG
    lo = 0.0

    @staticmethod
    def g(y):
        return np.log(y)

    @staticmethod
    def g_deriv(y):
        return 1.0 / y

    @staticmethod
    def g_inv(z):
        return np.exp(z)


@dataclass(frozen=True)
class LogP1(_TwoParam):
    family = DifficultyFamily.LOGP1
    lo = -1.0

    @staticmethod
    def g(y):
        return np.log1p(y)

    @staticmethod
    def g_deriv(y):
        return 1.0 / (1.0 + y)

    @staticmethod
    def g_inv(z):
        return np.expm1(z)


@dataclass(frozen=True)
class InverseCdf(_TwoParam):
    kind: ResponseFunctionKind = ResponseFunctionKind.NORMAL
    family = DifficultyFamily.INVERSE_CDF
    lo = 0.0
    hi = 1.0

    def __post_init__(self):
        super().__post_init__()
        object.__setattr__(self, "kind", ResponseFunctionKind(self.kind))

    def g(self, y):
        return response.kernel(self.kind).quantile(y)

    def g_deriv(self, y):
        k = response.kernel(self.kind)
        return 1.0 / k.pdf(k.quantile(y))

    def g_inv(self, z):
        out = response.kernel(self.kind).cdf(np.asarray(z, dtype=float))
        return np.where((out > 0) & (out < 1), out, np.nan)

    def structure(self):
        return {"kind": self.kind}


@dataclass(frozen=True)
class FreeOrdinal(_Base):
    """Graded-response thresholds: delta(r) = thresholds[r], delta(k-1) = +inf."""

    thresholds: tuple
    family = DifficultyFamily.FREE_ORDINAL

    def __post_init__(self):
        th = tuple(float(v) for v in self.thresholds)
        if len(th) < 1:
            raise InvalidConfig("FreeOrdinal needs at least one threshold")
        if any(b <= a for a, b in zip(th, th[1:])):
            raise NonMonotoneInput(f"thresholds must be strictly increasing: {th}")
        object.__setattr__(self, "thresholds", th)

    @property
    def k(self) -> int:
        return len(self.thresholds) + 1

    @property
    def coefficients(self):
        return np.array(self.thresholds)

    def _index(self, y):
        y = np.atleast_1d(np.asarray(y, dtype=float))
        r = np.rint(y)
        if np.any((r != y) | (r < 0) | (r > self.k - 1)):
            raise OutOfSupport(f"FreeOrdinal with k={self.k} is defined on 0..{self.k - 1}; got {y}")
        return r.astype(int)

    def design(self, y):
        """One-hot rows; the top category gets an all-zero row (its value is +inf)."""
        r = self._index(y)
        out = np.zeros((r.size, self.k - 1))
        ok = r < self.k - 1
        out[np.nonzero(ok)[0], r[ok]] = 1.0
        return out

    def design_deriv(self, y):
        raise NotDifferentiable("FreeOrdinal difficulties are defined on integers only")

    def value(self, y):
        y = np.asarray(y, dtype=float)
        r = self._index(y.ravel())
        ext = np.append(self.coefficients, math.inf)
        out = ext[r]
        return float(out[0]) if y.ndim == 0 else out.reshape(y.shape)

    def deriv(self, y):
        raise NotDifferentiable("FreeOrdinal difficulties are defined on integers only")

    def invert(self, t):
        """Smallest category r with delta(r) >= t."""
        t = np.asarray(t, dtype=float)
        out = np.searchsorted(self.coefficients, t, side="left")
        return int(out) if out.ndim == 0 else out

    def to_unconstrained(self):
        return monotone_to_unconstrained(self.coefficients, strict=True)

    @classmethod
    def from_unconstrained(cls, u, **structure):
        return cls(tuple(monotone_from_unconstrained(u)))

    def with_coefficients(self, c):
        return FreeOrdinal(tuple(c))


@dataclass(frozen=True)
class BSpline(_Base):
    basis: BSplineBasis
    coeffs: tuple
    family = DifficultyFamily.BSPLINE

    def __post_init__(self):
        c = tuple(float(v) for v in self.coeffs)
        if len(c) != self.basis.n_basis:
            raise InvalidConfig(f"expected {self.basis.n_basis} coefficients, got {len(c)}")
        if any(b < a for a, b in zip(c, c[1:])):
            raise NonMonotoneInput(f"spline coefficients must be nondecreasing: {c}")
        object.__setattr__(self, "coeffs", c)

    @property
    def coefficients(self):
        return np.array(self.coeffs)

    def design(self, y):
        return self.basis(y)

    def design_deriv(self, y):
        return self.basis(y, deriv=1)

    def invert(self, t, tol=1e-13):
        t = np.asarray(t, dtype=float)
        flat = np.atleast_1d(t)
        out = np.array([self._invert_one(v, tol) for v in flat])
        return float(out[0]) if t.ndim == 0 else out.reshape(t.shape)

    def _invert_one(self, t, tol):
        lo, hi = self.basis.lower, self.basis.upper
        span = hi - lo
        f = lambda y: self.value(y) - t
        # walk outwards along the linear continuation until t is bracketed
        for _ in range(60):
            if f(lo) <= 0:
                break
            if self.deriv(lo) <= 0:
                raise OutOfRange(f"{t} is below the range of the spline")
            lo -= span
        for _ in range(60):
            if f(hi) >= 0:
                break
            if self.deriv(hi) <= 0:
                raise OutOfRange(f"{t} is above the range of the spline")
            hi += span
        if f(lo) > 0 or f(hi) < 0:
            raise OutOfRange(f"{t} is outside the range of the spline")
        if f(lo) == 0:
            return lo
        if f(hi) == 0:
            return hi
        return brentq(f, lo, hi, xtol=tol, rtol=4 * np.finfo(float).eps, maxiter=500)

    def to_unconstrained(self):
        return monotone_to_unconstrained(self.coefficients)

    @classmethod
    def from_unconstrained(cls, u, basis=None, **_):
        if basis is None:
            raise InvalidConfig("BSpline.from_unconstrained needs the basis")
        return cls(basis, tuple(monotone_from_unconstrained(u)))

    def structure(self):
        return {"basis": self.basis}

    def with_coefficients(self, c):
        return BSpline(self.basis, tuple(c))


FAMILY_CLASSES = {
    DifficultyFamily.LINEAR: Linear,
    DifficultyFamily.LOG: Log,
    DifficultyFamily.LOGP1: LogP1,
    DifficultyFamily.INVERSE_CDF: InverseCdf,
    DifficultyFamily.FREE_ORDINAL: FreeOrdinal,
    DifficultyFamily.BSPLINE: BSpline,
}


# ---------------------------------------------------------------------------
# module-level operations
# ---------------------------------------------------------------------------

def eval(delta, y, support=None):  # noqa: A001 - mirrors the operation name
    """delta(y), returning +inf at the top category of a finite discrete support."""
    if support is not None:
        support.check(y)
        top = support.top
        if top is not None:
            y_arr = np.asarray(y, dtype=float)
            at_top = y_arr == top
            if at_top.any():
                safe = np.where(at_top, 0.0, y_arr)
                vals = np.where(at_top, math.inf, delta.value(safe))
                return float(vals) if vals.ndim == 0 else vals
    return delta.value(y)


def eval_deriv(delta, y):
    return delta.deriv(y)


def invert(delta, t):
    return delta.invert(t)


def to_unconstrained(delta):
    return delta.to_unconstrained()


def from_unconstrained(template, u):
    """Rebuild a difficulty function of the same family/structure as ``template``.

    ``template`` may be an instance (its structure, e.g. the spline basis, is
    reused) or a family class for the structure-free families.
    """
    if isinstance(template, type):
        return template.from_unconstrained(np.asarray(u, dtype=float))
    return type(template).from_unconstrained(np.asarray(u, dtype=float), **template.structure())
