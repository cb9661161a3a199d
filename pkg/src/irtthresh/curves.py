"""Person-threshold, item-characteristic and difficulty curves as tables."""

from __future__ import annotations

import csv
import enum
import io
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import response
from .data import Continuous, ItemSpec, OrderedCategorical, TreatAs
from .difficulty import FreeOrdinal
from .errors import InvalidConfig, OutOfSupport, UnknownItem

GRID_POINTS = 201
THETA_SPAN = 4.0
CSV_HEADER = ("kind", "item", "fixed", "abscissa", "value")


class CurveKind(str, enum.Enum):
    PT = "pt"
    IC = "ic"
    DIFFICULTY = "difficulty"


@dataclass(frozen=True, eq=False)
class CurveTable:
    kind: CurveKind
    item_id: str
    fixed_value: Optional[float]
    grid: np.ndarray
    values: np.ndarray
    discrete: bool = False

    def rows(self):
        fixed = "" if self.fixed_value is None else _fmt(self.fixed_value)
        for x, v in zip(self.grid, self.values):
            yield (self.kind.value, self.item_id, fixed, _fmt(x), _fmt(v))

    def to_csv(self, path=None, header=True) -> str:
        return write_curves_csv([self], path, header)

    def check_invariants(self, tol=0.0) -> bool:
        v = self.values
        if self.kind is CurveKind.DIFFICULTY:
            return bool(np.all(np.diff(v) >= -tol))
        in_unit = bool(np.all((v >= 0) & (v <= 1)))
        if self.kind is CurveKind.PT:
            return in_unit and bool(np.all(np.diff(v) <= tol))
        return in_unit and bool(np.all(np.diff(v) >= -tol))


def _fmt(v) -> str:
    v = float(v)
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return repr(v)


def write_curves_csv(tables: Sequence[CurveTable], path=None, header=True) -> str:
    """Concatenate tables in the kind,item,fixed,abscissa,value layout; returns the text."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if header:
        w.writerow(CSV_HEADER)
    for t in tables:
        w.writerows(t.rows())
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            fh.write(text)
    return text


# ---------------------------------------------------------------------------
# resolving the source
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class _Target:
    item: ItemSpec
    delta: object
    kind: str
    sigma: float
    observed: Optional[np.ndarray]


def _resolve(source, item, kind=None) -> _Target:
    """``source`` is a fit result (``item`` an id or index) or a difficulty function.

    For a bare difficulty function ``item`` may be an :class:`ItemSpec`
    describing the support; without it the support is the real line (or
    0..k-1 for free ordinal thresholds).
    """
    if hasattr(source, "difficulties") and hasattr(source, "spec"):
        spec = source.spec
        if isinstance(item, ItemSpec):
            item = item.id
        if isinstance(item, (int, np.integer)):
            j = int(item)
            if not 0 <= j < len(spec.items):
                raise UnknownItem(f"item index {j} out of range")
        else:
            ids = spec.item_ids
            if item not in ids:
                raise UnknownItem(f"unknown item {item!r}")
            j = ids.index(item)
        observed = None
        model = getattr(source, "model", None)
        if model is not None:
            observed = model.data.column(j)[1]
        return _Target(spec.items[j], source.difficulties[j], kind or spec.response_function.value,
                       float(source.sigma_theta), observed)
    delta = source
    if item is None:
        if isinstance(delta, FreeOrdinal):
            item = ItemSpec("item", OrderedCategorical(delta.k), "free_ordinal")
        else:
            item = ItemSpec("item", Continuous(), "linear")
    return _Target(item, delta, kind or "normal", 1.0, None)


def _is_discrete(t: _Target) -> bool:
    return t.item.treat_as is TreatAs.DISCRETE


def _check_grid(t: _Target, y):
    y = np.asarray(y, dtype=float)
    s = t.item.support
    if _is_discrete(t):
        s.check(y)
    elif s.is_discrete:
        # continuous approximation of an integer support: the hull of the support
        top = s.top if s.top is not None else math.inf
        if np.any((y < 0) | (y > top)):
            raise OutOfSupport(f"{y} outside [0, {top}]")
    else:
        s.check(y)
    return y


def _default_y_grid(t: _Target, include_top: bool):
    s = t.item.support
    if _is_discrete(t):
        if s.top is not None:
            top = s.top
        elif t.observed is not None:
            top = int(np.max(t.observed))
        else:
            raise InvalidConfig("a count item needs an explicit grid or fitted data")
        n = top + 1 if (include_top or s.top is None) else top
        return np.arange(max(n, 1), dtype=float)
    if t.observed is not None:
        lo, hi = float(np.min(t.observed)), float(np.max(t.observed))
    elif isinstance(s, Continuous) and s.bounded:
        lo, hi = s.lower, s.upper
    elif getattr(t.delta, "basis", None) is not None:
        lo, hi = t.delta.basis.lower, t.delta.basis.upper
    else:
        raise InvalidConfig("an unbounded continuous item needs an explicit grid or fitted data")
    lo, hi = _inside_domain(t.delta, lo, hi)
    return np.linspace(lo, hi, GRID_POINTS)


def _inside_domain(delta, lo, hi):
    """Nudge endpoints off open family domains (log at 0, inverse cdf at 0 and 1)."""
    dlo, dhi = getattr(delta, "lo", -math.inf), getattr(delta, "hi", math.inf)
    eps = 1e-6 * max(hi - lo, 1.0)
    return max(lo, dlo + eps) if lo <= dlo else lo, min(hi, dhi - eps) if hi >= dhi else hi


def _delta(t: _Target, y):
    """delta(y) with +inf at the top category of a finite discrete support."""
    y = np.asarray(y, dtype=float)
    top = t.item.support.top if _is_discrete(t) else None
    if top is None:
        return np.asarray(t.delta.value(y), dtype=float)
    at_top = y == top
    return np.where(at_top, math.inf, t.delta.value(np.where(at_top, 0.0, y)))


# ---------------------------------------------------------------------------
# curves
# ---------------------------------------------------------------------------

def pt_curve(source, item=None, theta: float = 0.0, y_grid=None, kind=None) -> CurveTable:
    """y -> P(Y > y | theta) = F(theta - delta(y)); zero at a finite top category."""
    t = _resolve(source, item, kind)
    y = _default_y_grid(t, include_top=True) if y_grid is None else _check_grid(t, y_grid)
    vals = response.kernel(t.kind).cdf(float(theta) - _delta(t, y))
    return CurveTable(CurveKind.PT, t.item.id, float(theta), y, np.asarray(vals, dtype=float), _is_discrete(t))


def ic_curve(source, item=None, y: float = 0.0, theta_grid=None, kind=None) -> CurveTable:
    """theta -> P(Y > y | theta), a copy of F shifted by delta(y)."""
    t = _resolve(source, item, kind)
    y = float(y)
    _check_grid(t, np.array([y]))
    top = t.item.support.top if _is_discrete(t) else None
    if top is not None and y == top:
        raise OutOfSupport(f"y = {y} is the top category; P(Y > y) is identically 0")
    if theta_grid is None:
        theta_grid = np.linspace(-THETA_SPAN * t.sigma, THETA_SPAN * t.sigma, GRID_POINTS)
    th = np.asarray(theta_grid, dtype=float)
    d = float(t.delta.value(y))
    vals = response.kernel(t.kind).cdf(th - d)
    return CurveTable(CurveKind.IC, t.item.id, y, th, np.asarray(vals, dtype=float), False)


def difficulty_curve(source, item=None, y_grid=None) -> CurveTable:
    """y -> delta(y); discrete default grids stop below a finite top category."""
    t = _resolve(source, item)
    y = _default_y_grid(t, include_top=False) if y_grid is None else _check_grid(t, y_grid)
    return CurveTable(CurveKind.DIFFICULTY, t.item.id, None, y, _delta(t, y), _is_discrete(t))


def all_curves(fit, thetas=(-1.0, 0.0, 1.0), ys=None) -> list:
    """PT curves at ``thetas``, IC curves at each item's default levels and difficulty curves."""
    out = []
    for j, it in enumerate(fit.spec.items):
        t = _resolve(fit, j)
        out += [pt_curve(fit, j, th) for th in thetas]
        levels = ys.get(it.id) if ys else None
        if levels is None:
            grid = _default_y_grid(t, include_top=False)
            levels = grid if _is_discrete(t) else np.quantile(grid, [0.25, 0.5, 0.75])
        out += [ic_curve(fit, j, float(v)) for v in levels]
        out.append(difficulty_curve(fit, j))
    return out
