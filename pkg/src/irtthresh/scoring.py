"""Posterior ability estimates for response vectors under a fitted model.

Item parameters are plugged in; their estimation error is not propagated
into ``posterior_sd``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Mapping, Optional

import numpy as np
from scipy import optimize
from scipy.special import logsumexp

from .data import ItemResponseMatrix, TreatAs
from .errors import NoObservedItems
from .likelihood import gauss_hermite_rule, log_density_continuous, log_density_discrete

_LOG_SQRT_2PI = 0.5 * math.log(2 * math.pi)


@dataclass(frozen=True)
class PersonScore:
    person_index: int
    posterior_mean: float
    posterior_mode: float
    posterior_sd: float
    n_items_observed: int

    def to_dict(self):
        return asdict(self)


class _Posterior:
    """Unnormalised log posterior for one response vector."""

    def __init__(self, fit, responses):
        self.fit = fit
        self.sigma = fit.sigma_theta
        self.kind = fit.spec.response_function
        items = fit.spec.items
        deltas = fit.difficulties
        if isinstance(responses, Mapping):
            pos = {it.id: j for j, it in enumerate(items)}
            pairs = [(pos[k], float(v)) for k, v in responses.items()
                     if v is not None and not (isinstance(v, float) and math.isnan(v))]
        else:
            vals = np.asarray(responses, dtype=float)
            pairs = [(j, float(v)) for j, v in enumerate(vals) if not np.isnan(v)]
        self.terms = [(items[j], deltas[j], y) for j, y in pairs]
        self.n_observed = len(self.terms)

    def loglik(self, theta):
        theta = np.asarray(theta, dtype=float)
        out = np.zeros(theta.shape)
        for it, delta, y in self.terms:
            if it.treat_as is TreatAs.CONTINUOUS:
                out = out + log_density_continuous(delta, theta, y, self.kind)
            else:
                out = out + log_density_discrete(delta, theta, y, self.kind, it.support, strict=False)
        return out

    def log_prior(self, theta):
        theta = np.asarray(theta, dtype=float)
        return -0.5 * (theta / self.sigma) ** 2 - _LOG_SQRT_2PI - math.log(self.sigma)

    def log_unnormalised(self, theta):
        return self.loglik(theta) + self.log_prior(theta)

    def rule(self):
        model = self.fit.model
        return model.rule if model is not None else gauss_hermite_rule(self.fit.spec.quadrature_nodes)

    def adaptive(self):
        """Gauss-Hermite nodes recentred at the mode and scaled by the curvature there.

        Returns the log normalising constant, the nodes, their log posterior
        weights (summing to 1) and the mode.
        """
        if self.n_observed == 0:
            rule = self.rule()
            t = rule.thetas(self.sigma)
            return 0.0, t, np.log(rule.weights), 0.0
        m = _mode(self)
        h = 1e-4 * self.sigma
        f0, fp, fm = (float(self.log_unnormalised(v)) for v in (m, m + h, m - h))
        curv = -(fp - 2.0 * f0 + fm) / (h * h)
        scale = 1.0 / math.sqrt(curv) if curv > 0 and math.isfinite(curv) else self.sigma
        rule = self.rule()
        z = rule.z
        t = m + scale * z
        logterms = np.log(rule.weights) + 0.5 * z * z + _LOG_SQRT_2PI + math.log(scale) + self.log_unnormalised(t)
        lognorm = float(logsumexp(logterms))
        return lognorm, t, logterms - lognorm, m


def posterior_density(fit, responses, theta, allow_empty=False):
    """Posterior density of theta given responses, normalised by adaptive Gauss-Hermite quadrature."""
    post = _Posterior(fit, responses)
    if post.n_observed == 0 and not allow_empty:
        raise NoObservedItems("no observed items in the response vector")
    lognorm = post.adaptive()[0]
    out = np.exp(post.log_unnormalised(theta) - lognorm)
    return float(out) if np.ndim(out) == 0 else out


def posterior_mode(fit, responses) -> float:
    post = _Posterior(fit, responses)
    if post.n_observed == 0:
        raise NoObservedItems("no observed items in the response vector")
    return _mode(post)


def _mode(post: _Posterior) -> float:
    lo, hi = -8.0 * post.sigma, 8.0 * post.sigma
    grid = np.linspace(lo, hi, 321)
    vals = post.log_unnormalised(grid)
    k = int(np.argmax(vals))
    a, b = grid[max(k - 1, 0)], grid[min(k + 1, grid.size - 1)]
    res = optimize.minimize_scalar(lambda t: -float(post.log_unnormalised(t)), bounds=(a, b),
                                   method="bounded", options={"xatol": 1e-10})
    return float(res.x)


def posterior_mean(fit, responses, person_index: int = 0) -> PersonScore:
    """Posterior mean and sd by adaptive Gauss-Hermite quadrature, plus the posterior mode."""
    post = _Posterior(fit, responses)
    if post.n_observed == 0:
        raise NoObservedItems("no observed items in the response vector")
    _, thetas, logw, mode = post.adaptive()
    w = np.exp(logw)
    mean = float(np.sum(w * thetas))
    var = float(np.sum(w * (thetas - mean) ** 2))
    return PersonScore(person_index, mean, mode, math.sqrt(max(var, 0.0)), post.n_observed)


def score_persons(fit, data: ItemResponseMatrix) -> list:
    """Score every row; rows without observed items yield ``None``."""
    out = []
    for p in range(data.n_persons):
        row = np.where(data.observed[p], data.values[p], np.nan)
        try:
            out.append(posterior_mean(fit, row, person_index=p))
        except NoObservedItems:
            out.append(None)
    return out
