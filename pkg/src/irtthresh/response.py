"""Response functions F: standard normal and standard logistic.

Both are symmetric about zero. The logistic is kept at its natural scale
(variance pi^2/3); no rescaling to unit variance is applied.

Public functions validate their input (NaN raises ``NotANumber``). The
underscore-free helpers on :class:`_Kernel` are the unchecked vectorised
versions used inside the likelihood loop.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import special

from .errors import NotANumber, ProbabilityOutOfRange

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


class ResponseFunctionKind(str, enum.Enum):
    NORMAL = "normal"
    LOGISTIC = "logistic"


@dataclass(frozen=True)
class MomentConstants:
    e_f: float
    var_f: float


def _normal_logpdf(x):
    return -0.5 * x * x - _LOG_SQRT_2PI


def _logistic_logpdf(x):
    a = np.abs(x)
    return -a - 2.0 * np.log1p(np.exp(-a))


def _logistic_pdf(x):
    a = np.abs(x)
    e = np.exp(-a)
    return e / (1.0 + e) ** 2


@dataclass(frozen=True)
class _Kernel:
    cdf: Callable
    sf: Callable
    logcdf: Callable
    logpdf: Callable
    pdf: Callable
    dlogpdf: Callable  # f'(x) / f(x)
    quantile: Callable
    moments: MomentConstants


_KERNELS = {
    ResponseFunctionKind.NORMAL: _Kernel(
        cdf=special.ndtr,
        sf=lambda x: special.ndtr(-x),
        logcdf=special.log_ndtr,
        logpdf=_normal_logpdf,
        pdf=lambda x: np.exp(_normal_logpdf(x)),
        dlogpdf=lambda x: -x,
        quantile=special.ndtri,
        moments=MomentConstants(0.0, 1.0),
    ),
    ResponseFunctionKind.LOGISTIC: _Kernel(
        cdf=special.expit,
        sf=lambda x: special.expit(-x),
        logcdf=special.log_expit,
        logpdf=_logistic_logpdf,
        pdf=_logistic_pdf,
        dlogpdf=lambda x: -np.tanh(0.5 * x),
        quantile=special.logit,
        moments=MomentConstants(0.0, math.pi**2 / 3.0),
    ),
}


def kernel(kind) -> _Kernel:
    return _KERNELS[ResponseFunctionKind(kind)]


def _checked(x):
    arr = np.asarray(x, dtype=float)
    if np.isnan(arr).any():
        raise NotANumber("response function evaluated at NaN")
    return arr


def _out(arr):
    return float(arr) if np.ndim(arr) == 0 else arr


def cdf(kind, x):
    """F(x). Accepts scalars or arrays, including +-inf."""
    return _out(kernel(kind).cdf(_checked(x)))


def sf(kind, x):
    """1 - F(x), computed without cancellation."""
    return _out(kernel(kind).sf(_checked(x)))


def logcdf(kind, x):
    return _out(kernel(kind).logcdf(_checked(x)))


def pdf(kind, x):
    return _out(kernel(kind).pdf(_checked(x)))


def logpdf(kind, x):
    return _out(kernel(kind).logpdf(_checked(x)))


def pdf_deriv(kind, x):
    """f'(x)."""
    k = kernel(kind)
    arr = _checked(x)
    return _out(k.pdf(arr) * k.dlogpdf(arr))


def quantile(kind, p):
    """F^{-1}(p) for p strictly inside (0, 1)."""
    arr = _checked(p)
    if np.any((arr <= 0.0) | (arr >= 1.0)):
        raise ProbabilityOutOfRange(f"quantile requires p in (0, 1), got {p!r}")
    return _out(kernel(kind).quantile(arr))


def moments(kind) -> MomentConstants:
    """Mean and variance of the distribution F."""
    return kernel(kind).moments


def log_prob_between(kind, upper, lower):
    """log(F(upper) - F(lower)) for upper > lower, stable in both tails.

    Infinite arguments are allowed: ``upper=+inf`` gives log(1 - F(lower)) and
    ``lower=-inf`` gives log F(upper). When both arguments sit in the right
    tail the mirrored form log(F(-lower) - F(-upper)) is used.
    """
    k = kernel(kind)
    upper = np.asarray(upper, dtype=float)
    lower = np.asarray(lower, dtype=float)
    flip = (lower > 0.0)
    a = np.where(flip, -lower, upper)
    b = np.where(flip, -upper, lower)
    with np.errstate(divide="ignore", invalid="ignore"):
        la = k.logcdf(a)
        lb = k.logcdf(b)
        out = la + np.log1p(-np.exp(lb - la))
    return out
