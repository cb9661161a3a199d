"""Item supports, item/model specifications and the response matrix.

Data files are wide CSV (persons as rows, one column per item, header of
item ids, ``NA`` or an empty field for missing cells). Item metadata lives in
a TOML file with one table per item::

    [items.q1]
    support = "ordinal"      # continuous | binary | ordinal | count
    k = 7
    family = "free_ordinal"  # linear | log | logp1 | inverse_cdf | free_ordinal | bspline
    treat_as = "discrete"    # discrete | continuous

Continuous items take optional ``lower``/``upper`` bounds. For bounded items
with the ``inverse_cdf`` family the values are mapped affinely onto [0, 1] and
squeezed away from the boundaries (see :func:`rescale_to_unit_interval`).
"""

from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .difficulty import DifficultyFamily
from .errors import (
    DegenerateRange,
    EmptyItem,
    EmptyPerson,
    InvalidConfig,
    OutOfSupport,
    UnknownItem,
    ValueOutOfSupport,
)
from .response import ResponseFunctionKind

MISSING_TOKEN = "NA"
#: floor for the number of levels used by the boundary squeeze on non-grid data
MIN_CONTINUOUS_LEVELS = 100


# ---------------------------------------------------------------------------
# supports
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Continuous:
    lower: float = -math.inf
    upper: float = math.inf

    is_discrete = False
    top = None

    def __post_init__(self):
        if not self.lower < self.upper:
            raise InvalidConfig(f"continuous support needs lower < upper, got ({self.lower}, {self.upper})")

    @property
    def bounded(self) -> bool:
        return math.isfinite(self.lower) and math.isfinite(self.upper)

    def contains(self, y):
        y = np.asarray(y, dtype=float)
        return (y >= self.lower) & (y <= self.upper)

    def check(self, y):
        if not np.all(self.contains(y)):
            raise OutOfSupport(f"{y} outside [{self.lower}, {self.upper}]")

    def describe(self) -> str:
        return f"continuous[{self.lower}, {self.upper}]"


class _IntegerSupport:
    is_discrete = True
    top: Optional[int] = None

    def contains(self, y):
        y = np.asarray(y, dtype=float)
        ok = (y == np.rint(y)) & (y >= 0)
        if self.top is not None:
            ok &= y <= self.top
        return ok

    def check(self, y):
        if not np.all(self.contains(y)):
            raise OutOfSupport(f"{y} outside {self.describe()}")


@dataclass(frozen=True)
class Binary(_IntegerSupport):
    top = 1
    k = 2

    def describe(self) -> str:
        return "binary{0,1}"


@dataclass(frozen=True)
class OrderedCategorical(_IntegerSupport):
    k: int

    def __post_init__(self):
        if int(self.k) != self.k or self.k < 2:
            raise InvalidConfig(f"ordered categorical support needs k >= 2, got {self.k}")

    @property
    def top(self) -> int:
        return self.k - 1

    def describe(self) -> str:
        return f"ordinal{{0..{self.k - 1}}}"


@dataclass(frozen=True)
class Count(_IntegerSupport):
    def describe(self) -> str:
        return "count{0,1,...}"


SupportKind = Union[Continuous, Binary, OrderedCategorical, Count]


def support_from_config(cfg: Mapping) -> SupportKind:
    name = str(cfg.get("support", "")).lower()
    if name == "continuous":
        return Continuous(float(cfg.get("lower", -math.inf)), float(cfg.get("upper", math.inf)))
    if name == "binary":
        return Binary()
    if name in ("ordinal", "ordered_categorical"):
        if "k" not in cfg:
            raise InvalidConfig("ordinal item needs k")
        return OrderedCategorical(int(cfg["k"]))
    if name == "count":
        return Count()
    raise InvalidConfig(f"unknown support {name!r}")


def support_to_config(s: SupportKind) -> dict:
    if isinstance(s, Continuous):
        out = {"support": "continuous"}
        if math.isfinite(s.lower):
            out["lower"] = s.lower
        if math.isfinite(s.upper):
            out["upper"] = s.upper
        return out
    if isinstance(s, Binary):
        return {"support": "binary"}
    if isinstance(s, OrderedCategorical):
        return {"support": "ordinal", "k": s.k}
    return {"support": "count"}


# ---------------------------------------------------------------------------
# item and model specs
# ---------------------------------------------------------------------------

class TreatAs(str, enum.Enum):
    DISCRETE = "discrete"
    CONTINUOUS = "continuous"


class SlopeMode(str, enum.Enum):
    COMMON = "common"
    VARYING = "varying"
    SPLINE_FREE = "spline_free"
    SPLINE_COMMON_SHAPE = "spline_common_shape"


class Identification(str, enum.Enum):
    FIRST_SPLINE_INTERCEPT_ZERO = "first_spline_intercept_zero"
    PENALTY_ONLY = "penalty_only"


@dataclass(frozen=True)
class ItemSpec:
    id: str
    support: SupportKind
    family: DifficultyFamily = DifficultyFamily.LINEAR
    treat_as: Optional[TreatAs] = None
    allow_continuous_approximation: bool = False
    inverse_cdf_kind: Optional[ResponseFunctionKind] = None
    squeeze: Optional[bool] = None
    levels: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "family", DifficultyFamily(self.family))
        treat = self.treat_as
        if treat is None:
            treat = TreatAs.DISCRETE if self.support.is_discrete else TreatAs.CONTINUOUS
        treat = TreatAs(treat)
        object.__setattr__(self, "treat_as", treat)
        if self.inverse_cdf_kind is not None:
            object.__setattr__(self, "inverse_cdf_kind", ResponseFunctionKind(self.inverse_cdf_kind))
        s, fam = self.support, self.family
        if treat is TreatAs.DISCRETE and not s.is_discrete:
            raise InvalidConfig(f"item {self.id}: a continuous support cannot use the discrete branch")
        if treat is TreatAs.CONTINUOUS and s.is_discrete:
            if not self.allow_continuous_approximation:
                raise InvalidConfig(
                    f"item {self.id}: fitting a discrete support with the continuous branch "
                    "requires allow_continuous_approximation = true"
                )
            if isinstance(s, Binary):
                raise InvalidConfig(f"item {self.id}: binary items cannot use the continuous branch")
        if isinstance(s, Binary) and fam not in (
            DifficultyFamily.LINEAR, DifficultyFamily.LOGP1, DifficultyFamily.FREE_ORDINAL
        ):
            raise InvalidConfig(f"item {self.id}: binary items need linear, logp1 or free_ordinal")
        if fam is DifficultyFamily.LOG and s.is_discrete:
            raise InvalidConfig(f"item {self.id}: the log family is undefined at y = 0; use logp1 for integer data")
        if fam is DifficultyFamily.FREE_ORDINAL and not (
            isinstance(s, (Binary, OrderedCategorical)) and treat is TreatAs.DISCRETE
        ):
            raise InvalidConfig(f"item {self.id}: free_ordinal needs a binary/ordinal item on the discrete branch")
        if fam is DifficultyFamily.INVERSE_CDF and not (isinstance(s, Continuous) and s.bounded):
            raise InvalidConfig(f"item {self.id}: inverse_cdf needs a bounded continuous support")

    @property
    def is_binary(self) -> bool:
        return isinstance(self.support, Binary)

    @property
    def uses_squeeze(self) -> bool:
        if self.squeeze is not None:
            return bool(self.squeeze) and isinstance(self.support, Continuous) and self.support.bounded
        return self.family is DifficultyFamily.INVERSE_CDF

    def to_config(self) -> dict:
        out = support_to_config(self.support)
        out["family"] = self.family.value
        out["treat_as"] = self.treat_as.value
        if self.allow_continuous_approximation:
            out["allow_continuous_approximation"] = True
        if self.inverse_cdf_kind is not None:
            out["inverse_cdf_kind"] = self.inverse_cdf_kind.value
        if self.squeeze is not None:
            out["squeeze"] = self.squeeze
        if self.levels is not None:
            out["levels"] = self.levels
        return out

    @classmethod
    def from_config(cls, item_id: str, cfg: Mapping) -> "ItemSpec":
        known = {"support", "lower", "upper", "k", "family", "treat_as",
                 "allow_continuous_approximation", "inverse_cdf_kind", "squeeze", "levels"}
        extra = set(cfg) - known
        if extra:
            raise InvalidConfig(f"item {item_id}: unknown metadata keys {sorted(extra)}")
        try:
            return cls(
                id=item_id,
                support=support_from_config(cfg),
                family=DifficultyFamily(cfg.get("family", "linear")),
                treat_as=TreatAs(cfg["treat_as"]) if "treat_as" in cfg else None,
                allow_continuous_approximation=bool(cfg.get("allow_continuous_approximation", False)),
                inverse_cdf_kind=cfg.get("inverse_cdf_kind"),
                squeeze=cfg.get("squeeze"),
                levels=cfg.get("levels"),
            )
        except ValueError as exc:
            if isinstance(exc, InvalidConfig):
                raise
            raise InvalidConfig(f"item {item_id}: {exc}") from exc


@dataclass(frozen=True)
class ModelSpec:
    items: tuple
    response_function: ResponseFunctionKind = ResponseFunctionKind.NORMAL
    slope_mode: SlopeMode = SlopeMode.VARYING
    quadrature_nodes: int = 30
    penalty_lambda: float = 0.0
    identification: Optional[Identification] = None
    n_basis: int = 8
    degree: int = 3

    def __post_init__(self):
        object.__setattr__(self, "items", tuple(self.items))
        object.__setattr__(self, "response_function", ResponseFunctionKind(self.response_function))
        mode = SlopeMode(self.slope_mode)
        object.__setattr__(self, "slope_mode", mode)
        if self.quadrature_nodes < 5:
            raise InvalidConfig(f"quadrature_nodes must be >= 5, got {self.quadrature_nodes}")
        if not self.penalty_lambda >= 0:
            raise InvalidConfig("penalty_lambda must be nonnegative")
        if self.penalty_lambda > 0 and mode is not SlopeMode.SPLINE_FREE:
            raise InvalidConfig("penalty_lambda is only used with slope_mode = spline_free")
        ident = self.identification
        if ident is None and mode is SlopeMode.SPLINE_COMMON_SHAPE:
            ident = Identification.FIRST_SPLINE_INTERCEPT_ZERO
        elif ident is None and mode is SlopeMode.SPLINE_FREE:
            ident = Identification.PENALTY_ONLY
        if ident is not None:
            ident = Identification(ident)
            if mode is SlopeMode.SPLINE_COMMON_SHAPE and ident is not Identification.FIRST_SPLINE_INTERCEPT_ZERO:
                raise InvalidConfig("spline_common_shape is only identified with first_spline_intercept_zero")
            if mode is SlopeMode.SPLINE_FREE and ident is not Identification.PENALTY_ONLY:
                raise InvalidConfig("spline_free is identified by the latent mean; use penalty_only")
            if mode not in (SlopeMode.SPLINE_FREE, SlopeMode.SPLINE_COMMON_SHAPE):
                raise InvalidConfig("identification applies to spline modes only")
        object.__setattr__(self, "identification", ident)
        ids = [it.id for it in self.items]
        if len(set(ids)) != len(ids):
            raise InvalidConfig("duplicate item ids")
        if mode in (SlopeMode.SPLINE_FREE, SlopeMode.SPLINE_COMMON_SHAPE):
            if not any(it.family is DifficultyFamily.BSPLINE for it in self.items):
                raise InvalidConfig(f"slope_mode {mode.value} needs at least one bspline item")

    @property
    def item_ids(self):
        return [it.id for it in self.items]

    def with_items(self, items) -> "ModelSpec":
        return ModelSpec(items, self.response_function, self.slope_mode, self.quadrature_nodes,
                         self.penalty_lambda, self.identification, self.n_basis, self.degree)

    def replace(self, **changes) -> "ModelSpec":
        cfg = dict(items=self.items, response_function=self.response_function,
                   slope_mode=self.slope_mode, quadrature_nodes=self.quadrature_nodes,
                   penalty_lambda=self.penalty_lambda, identification=self.identification,
                   n_basis=self.n_basis, degree=self.degree)
        cfg.update(changes)
        return ModelSpec(**cfg)

    def to_config(self) -> dict:
        return {
            "response_function": self.response_function.value,
            "slope_mode": self.slope_mode.value,
            "quadrature_nodes": self.quadrature_nodes,
            "penalty_lambda": self.penalty_lambda,
            "identification": self.identification.value if self.identification else None,
            "n_basis": self.n_basis,
            "degree": self.degree,
            "items": {it.id: it.to_config() for it in self.items},
        }

    @classmethod
    def from_config(cls, cfg: Mapping, items=None) -> "ModelSpec":
        """Inverse of :meth:`to_config`; ``items`` overrides the embedded item table."""
        known = {"response_function", "slope_mode", "quadrature_nodes", "penalty_lambda",
                 "identification", "n_basis", "degree", "items"}
        extra = set(cfg) - known
        if extra:
            raise InvalidConfig(f"unknown model settings {sorted(extra)}")
        if items is None:
            items = [ItemSpec.from_config(str(k), v) for k, v in cfg.get("items", {}).items()]
        try:
            return cls(
                items=tuple(items),
                response_function=cfg.get("response_function", "normal"),
                slope_mode=cfg.get("slope_mode", "varying"),
                quadrature_nodes=int(cfg.get("quadrature_nodes", 30)),
                penalty_lambda=float(cfg.get("penalty_lambda", 0.0)),
                identification=cfg.get("identification"),
                n_basis=int(cfg.get("n_basis", 8)),
                degree=int(cfg.get("degree", 3)),
            )
        except ValueError as exc:
            if isinstance(exc, InvalidConfig):
                raise
            raise InvalidConfig(str(exc)) from exc


# ---------------------------------------------------------------------------
# rescaling
# ---------------------------------------------------------------------------

def squeeze_levels(values) -> int:
    """Number of levels used by the boundary squeeze.

    Integer-valued data (Likert-type scales) use the number of distinct
    observed levels; anything else is treated as truly continuous and uses
    at least :data:`MIN_CONTINUOUS_LEVELS`.
    """
    v = np.asarray(values, dtype=float)
    v = v[np.isfinite(v)]
    n = np.unique(v).size
    if v.size and np.all(v == np.rint(v)):
        return max(n, 2)
    return max(n, MIN_CONTINUOUS_LEVELS)


def rescale_to_unit_interval(values, lower, upper, n_levels=None):
    """Affine map [lower, upper] -> [0, 1], then y' = (y (n-1) + 0.5) / n.

    ``n_levels`` defaults to :func:`squeeze_levels` of the input.
    """
    lower, upper = float(lower), float(upper)
    if not lower < upper:
        raise DegenerateRange(f"lower ({lower}) must be below upper ({upper})")
    v = np.asarray(values, dtype=float)
    if np.any((v < lower) | (v > upper)):
        raise OutOfSupport(f"values outside [{lower}, {upper}]")
    n = squeeze_levels(v) if n_levels is None else int(n_levels)
    unit = (v - lower) / (upper - lower)
    return (unit * (n - 1) + 0.5) / n


# ---------------------------------------------------------------------------
# response matrix
# ---------------------------------------------------------------------------

def _frozen(a):
    a = np.array(a, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class ItemResponseMatrix:
    """Persons x items responses.

    ``values`` holds model-scale responses (NaN where unobserved); for items
    with a boundary squeeze these are the squeezed values. ``raw_values``
    keeps the values as ingested.
    """

    items: tuple
    values: np.ndarray
    observed: np.ndarray = None
    raw_values: np.ndarray = None
    allow_empty: bool = False

    def __post_init__(self):
        items = tuple(self.items)
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 2 or values.shape[1] != len(items):
            raise InvalidConfig(f"values must be P x {len(items)}, got shape {values.shape}")
        observed = ~np.isnan(values) if self.observed is None else np.asarray(self.observed, dtype=bool)
        if observed.shape != values.shape:
            raise InvalidConfig("observed mask shape mismatch")
        values = np.where(observed, values, np.nan)
        if np.any(np.isnan(values[observed])):
            raise InvalidConfig("observed cells must not be NaN")
        raw = values if self.raw_values is None else np.where(observed, self.raw_values, np.nan)
        # supports describe the data as ingested; squeezed model-scale values live in (0, 1)
        for j, it in enumerate(items):
            col = raw[:, j]
            bad = observed[:, j] & ~it.support.contains(np.where(observed[:, j], col, 0.0))
            if bad.any():
                row = int(np.nonzero(bad)[0][0])
                raise ValueOutOfSupport(row, it.id, float(col[row]), it.support.describe())
        empty_items = np.nonzero(~observed.any(axis=0))[0]
        if empty_items.size and not self.allow_empty:
            raise EmptyItem(f"item {items[empty_items[0]].id!r} has no observed responses")
        empty_people = np.nonzero(~observed.any(axis=1))[0]
        if empty_people.size and not self.allow_empty:
            raise EmptyPerson(f"person (row) {int(empty_people[0])} has no observed responses")
        object.__setattr__(self, "items", items)
        object.__setattr__(self, "values", _frozen(values))
        object.__setattr__(self, "observed", _frozen(observed))
        object.__setattr__(self, "raw_values", _frozen(raw))

    @property
    def n_persons(self) -> int:
        return self.values.shape[0]

    @property
    def n_items(self) -> int:
        return len(self.items)

    @property
    def item_ids(self):
        return [it.id for it in self.items]

    def column(self, j):
        """(person indices, values) of the observed cells of item j."""
        idx = np.nonzero(self.observed[:, j])[0]
        return idx, self.values[idx, j]

    def subset(self, persons=None, items=None) -> "ItemResponseMatrix":
        p = slice(None) if persons is None else np.asarray(persons)
        i = list(range(self.n_items)) if items is None else list(items)
        return ItemResponseMatrix(
            tuple(self.items[j] for j in i),
            self.values[p][:, i],
            self.observed[p][:, i],
            self.raw_values[p][:, i],
            self.allow_empty,
        )

    def stack(self, other: "ItemResponseMatrix") -> "ItemResponseMatrix":
        if [it.id for it in other.items] != self.item_ids:
            raise InvalidConfig("cannot stack matrices with different items")
        return ItemResponseMatrix(
            self.items,
            np.vstack([self.values, other.values]),
            np.vstack([self.observed, other.observed]),
            np.vstack([self.raw_values, other.raw_values]),
        )

    def summary(self) -> dict:
        out = {"persons": self.n_persons, "items": []}
        for j, it in enumerate(self.items):
            _, v = self.column(j)
            raw = self.raw_values[self.observed[:, j], j]
            out["items"].append({
                "id": it.id,
                "support": it.support.describe(),
                "family": it.family.value,
                "treat_as": it.treat_as.value,
                "n_observed": int(v.size),
                "n_missing": int(self.n_persons - v.size),
                "min": float(raw.min()),
                "max": float(raw.max()),
                "mean": float(raw.mean()),
            })
        return out

    def summary_text(self) -> str:
        s = self.summary()
        lines = [f"persons: {s['persons']}  items: {len(s['items'])}"]
        for it in s["items"]:
            lines.append(
                f"  {it['id']:<12} {it['support']:<24} {it['family']:<13} n={it['n_observed']:<6}"
                f" missing={it['n_missing']:<5} range=[{it['min']:g}, {it['max']:g}] mean={it['mean']:.4g}"
            )
        return "\n".join(lines)

    def to_csv(self, path) -> None:
        """Write the raw values in the package CSV dialect."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.item_ids)
            for p in range(self.n_persons):
                w.writerow([
                    _format_value(self.raw_values[p, j]) if self.observed[p, j] else MISSING_TOKEN
                    for j in range(self.n_items)
                ])


def _format_value(v: float) -> str:
    if v == int(v) and abs(v) < 2**53:
        return str(int(v))
    return repr(float(v))


def build_matrix(items: Sequence[ItemSpec], raw: np.ndarray, observed=None,
                 allow_empty=False) -> ItemResponseMatrix:
    """Validate raw values and apply the boundary squeeze where the item calls for it."""
    raw = np.asarray(raw, dtype=float)
    observed = ~np.isnan(raw) if observed is None else np.asarray(observed, dtype=bool)
    raw = np.where(observed, raw, np.nan)
    # validate on raw scale first so errors report the ingested value
    checked = ItemResponseMatrix(tuple(items), raw, observed, allow_empty=allow_empty)
    values = raw.copy()
    for j, it in enumerate(items):
        if it.uses_squeeze:
            m = observed[:, j]
            values[m, j] = rescale_to_unit_interval(raw[m, j], it.support.lower, it.support.upper, it.levels)
        _check_family_domain(it, values[:, j], observed[:, j])
    return ItemResponseMatrix(checked.items, values, observed, raw, allow_empty)


def _check_family_domain(it: ItemSpec, col, mask):
    fam = it.family
    if it.treat_as is not TreatAs.CONTINUOUS:
        return
    v = col[mask]
    bad = None
    if fam is DifficultyFamily.LOG:
        bad = v <= 0
    elif fam is DifficultyFamily.LOGP1:
        bad = v <= -1
    elif fam is DifficultyFamily.INVERSE_CDF:
        bad = (v <= 0) | (v >= 1)
    if bad is not None and bad.any():
        rows = np.nonzero(mask)[0]
        r = int(rows[np.nonzero(bad)[0][0]])
        raise ValueOutOfSupport(r, it.id, col[r], f"outside the domain of the {fam.value} family")


def load_toml(path) -> dict:
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def parse_item_metadata(meta) -> dict:
    """Map item id -> ItemSpec from a TOML path or an already-parsed mapping."""
    if isinstance(meta, (str, Path)):
        meta = load_toml(meta)
    table = meta.get("items", meta)
    if not isinstance(table, Mapping):
        raise InvalidConfig("item metadata must be a table of per-item tables")
    return {str(k): ItemSpec.from_config(str(k), v) for k, v in table.items()}


def ingest_csv(path, item_metadata, allow_empty=False) -> ItemResponseMatrix:
    """Read a wide CSV and validate it against item metadata."""
    specs = parse_item_metadata(item_metadata)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise InvalidConfig(f"{path}: empty file") from None
        rows = [r for r in reader if r]
    for h in header:
        if h not in specs:
            raise UnknownItem(f"column {h!r} is not declared in the item metadata")
    if len(set(header)) != len(header):
        raise InvalidConfig("duplicate column names")
    items = [specs[h] for h in header]
    raw = np.full((len(rows), len(header)), np.nan)
    for p, row in enumerate(rows):
        if len(row) != len(header):
            raise InvalidConfig(f"row {p}: expected {len(header)} fields, got {len(row)}")
        for j, cell in enumerate(row):
            cell = cell.strip()
            if cell == MISSING_TOKEN or not cell:
                continue
            try:
                v = float(cell)
            except ValueError:
                raise ValueOutOfSupport(p, header[j], cell, "not a number") from None
            if math.isnan(v):
                raise ValueOutOfSupport(p, header[j], cell, "not a number")
            raw[p, j] = v
    if not rows:
        raise InvalidConfig(f"{path}: no data rows")
    return build_matrix(items, raw, allow_empty=allow_empty)


def items_to_toml(items: Sequence[ItemSpec]) -> str:
    """Serialise item metadata in the format read by :func:`parse_item_metadata`."""
    lines = []
    for it in items:
        lines.append(f"[items.{json.dumps(it.id)}]")
        for k, v in it.to_config().items():
            lines.append(f"{k} = {_toml_value(v)}")
        lines.append("")
    return "\n".join(lines)


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, float):
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    return str(v)
