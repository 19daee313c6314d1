"""Observational dataset model, heterogeneity features and balance statistics."""

from __future__ import annotations

import itertools
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
import pandas as pd

from .exceptions import SchemaError, ValidationError

logger = logging.getLogger(__name__)

CONSTANT_NAME = "const"


def _frozen(a, dtype=float):
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable container for one observational sample.

    Parameters
    ----------
    outcomes : ndarray of shape (N, M)
        One column per outcome (e.g. cumulated months employed per horizon).
    treatment : ndarray of shape (N,)
        Binary participation flags.
    confounders : ndarray of shape (N, p_x)
        Variables entering the propensity score.
    heterogeneity : ndarray of shape (N, p)
        Candidate effect modifiers. The first column is the constant 1.
    cluster_ids : ndarray of shape (N,)
        Sampling cluster of each row (caseworker).
    obs_ids : ndarray of shape (N,)
        Unique row identifiers.
    """

    outcomes: np.ndarray
    treatment: np.ndarray
    confounders: np.ndarray
    heterogeneity: np.ndarray
    cluster_ids: np.ndarray
    obs_ids: np.ndarray
    outcome_names: tuple = ()
    confounder_names: tuple = ()
    heterogeneity_names: tuple = ()

    def __post_init__(self):
        y = np.asarray(self.outcomes, dtype=float)
        if y.ndim == 1:
            y = y[:, None]
        d = np.asarray(self.treatment)
        x = np.asarray(self.confounders, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        z = np.asarray(self.heterogeneity, dtype=float)
        if z.ndim == 1:
            z = z[:, None]
        n = y.shape[0]
        if n < 2:
            raise ValidationError("a dataset needs at least two rows")
        for name, arr in (("treatment", d), ("confounders", x), ("heterogeneity", z),
                          ("cluster_ids", self.cluster_ids), ("obs_ids", self.obs_ids)):
            if len(arr) != n:
                raise ValidationError(f"{name} has {len(arr)} rows, outcomes have {n}")
        if not np.isin(d, (0, 1)).all():
            raise ValidationError("treatment must be coded 0/1")
        d = d.astype(np.int8)
        if d.sum() == 0 or d.sum() == n:
            raise ValidationError("need at least one treated and one control row")
        for name, arr in (("outcomes", y), ("confounders", x), ("heterogeneity", z)):
            if not np.isfinite(arr).all():
                r, c = np.argwhere(~np.isfinite(arr))[0]
                raise ValidationError(f"non-finite value in {name} at row {r}, column {c}")
        if z.shape[1] == 0 or not np.all(z[:, 0] == 1.0):
            raise ValidationError("first heterogeneity column must be the constant 1")
        ids = np.asarray(self.obs_ids)
        if len(np.unique(ids)) != n:
            raise ValidationError("obs_ids are not unique")

        object.__setattr__(self, "outcomes", _frozen(y))
        object.__setattr__(self, "treatment", _frozen(d, np.int8))
        object.__setattr__(self, "confounders", _frozen(x))
        object.__setattr__(self, "heterogeneity", _frozen(z))
        object.__setattr__(self, "cluster_ids", _frozen(self.cluster_ids, None))
        object.__setattr__(self, "obs_ids", _frozen(ids, None))
        names = {
            "outcome_names": (self.outcome_names, y.shape[1], "y"),
            "confounder_names": (self.confounder_names, x.shape[1], "x"),
            "heterogeneity_names": (self.heterogeneity_names, z.shape[1], "z"),
        }
        for attr, (given, k, prefix) in names.items():
            given = tuple(given)
            if not given:
                given = tuple(f"{prefix}{j}" for j in range(k))
                if attr == "heterogeneity_names":
                    given = (CONSTANT_NAME,) + given[1:]
            if len(given) != k:
                raise ValidationError(f"{attr} has {len(given)} entries for {k} columns")
            object.__setattr__(self, attr, given)

    @property
    def n(self):
        return self.outcomes.shape[0]

    def subset(self, rows):
        """Return a new Dataset restricted to ``rows`` (order preserved)."""
        rows = np.asarray(rows)
        return Dataset(
            outcomes=self.outcomes[rows],
            treatment=self.treatment[rows],
            confounders=self.confounders[rows],
            heterogeneity=self.heterogeneity[rows],
            cluster_ids=self.cluster_ids[rows],
            obs_ids=self.obs_ids[rows],
            outcome_names=self.outcome_names,
            confounder_names=self.confounder_names,
            heterogeneity_names=self.heterogeneity_names,
        )

    def outcome(self, name_or_index=0):
        if isinstance(name_or_index, str):
            name_or_index = self.outcome_names.index(name_or_index)
        return self.outcomes[:, name_or_index]


# ---------------------------------------------------------------------------
# delimited text I/O
# ---------------------------------------------------------------------------

def _as_list(v):
    if v is None:
        return []
    if isinstance(v, str):
        return [v]
    return list(v)


def load_dataset(path, schema: Mapping) -> Dataset:
    """Read a comma separated file into a :class:`Dataset`.

    ``schema`` maps roles to column names::

        {"treatment": "D", "outcomes": ["y6"], "confounders": ["x1", "x2"],
         "heterogeneity": ["x1"], "cluster": "cw", "id": "pid"}

    ``heterogeneity`` may be empty; the constant column is always prepended.
    ``id`` is optional and defaults to the row number.
    """
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    for role in ("treatment", "outcomes", "confounders", "cluster"):
        if not schema.get(role):
            raise SchemaError(f"schema is missing the '{role}' role")
    frame = pd.read_csv(path, float_precision="round_trip", encoding="utf-8")
    outcomes = _as_list(schema["outcomes"])
    confounders = _as_list(schema["confounders"])
    heterogeneity = [c for c in _as_list(schema.get("heterogeneity")) if c != CONSTANT_NAME]
    treat = schema["treatment"]
    cluster = schema["cluster"]
    id_col = schema.get("id")
    needed = [treat, cluster, *outcomes, *confounders, *heterogeneity]
    if id_col:
        needed.append(id_col)
    missing = [c for c in needed if c not in frame.columns]
    if missing:
        raise SchemaError(f"columns not found in {path}: {missing}")

    numeric = [treat, *outcomes, *confounders, *heterogeneity]
    for col in numeric:
        values = pd.to_numeric(frame[col], errors="coerce").to_numpy(dtype=float)
        bad = np.flatnonzero(~np.isfinite(values))
        if bad.size:
            raise ValidationError(
                f"non-finite or non-numeric value in column '{col}' at row {int(bad[0])}")
        frame[col] = values
    d = frame[treat].to_numpy()
    bad = np.flatnonzero(~np.isin(d, (0.0, 1.0)))
    if bad.size:
        raise ValidationError(
            f"treatment column '{treat}' has value {d[bad[0]]!r} at row {int(bad[0])}; expected 0/1")

    n = len(frame)
    z = np.column_stack([np.ones(n)] + [frame[c].to_numpy(dtype=float) for c in heterogeneity])
    obs_ids = frame[id_col].to_numpy() if id_col else np.arange(n)
    return Dataset(
        outcomes=frame[outcomes].to_numpy(dtype=float),
        treatment=d.astype(np.int8),
        confounders=frame[confounders].to_numpy(dtype=float),
        heterogeneity=z,
        cluster_ids=frame[cluster].astype(str).to_numpy() if frame[cluster].dtype == object
        else frame[cluster].to_numpy(),
        obs_ids=obs_ids,
        outcome_names=tuple(outcomes),
        confounder_names=tuple(confounders),
        heterogeneity_names=(CONSTANT_NAME, *heterogeneity),
    )


def write_dataset(dataset: Dataset, path, treatment="D", cluster="cluster", id_col="id"):
    """Write ``dataset`` as CSV and return the matching schema mapping.

    Floats are written with 17 significant digits so that
    :func:`load_dataset` reproduces them bit for bit. Columns shared between
    confounders and heterogeneity variables are written once.
    """
    cols = {id_col: dataset.obs_ids, cluster: dataset.cluster_ids,
            treatment: dataset.treatment.astype(int)}
    for j, name in enumerate(dataset.outcome_names):
        cols[name] = dataset.outcomes[:, j]
    for j, name in enumerate(dataset.confounder_names):
        cols[name] = dataset.confounders[:, j]
    for j, name in enumerate(dataset.heterogeneity_names[1:], start=1):
        if name in cols:
            if not np.array_equal(cols[name], dataset.heterogeneity[:, j]):
                raise ValidationError(f"column name '{name}' used for two different variables")
            continue
        cols[name] = dataset.heterogeneity[:, j]
    pd.DataFrame(cols).to_csv(path, index=False, float_format="%.17g", lineterminator="\n")
    return {
        "treatment": treatment,
        "outcomes": list(dataset.outcome_names),
        "confounders": list(dataset.confounder_names),
        "heterogeneity": list(dataset.heterogeneity_names[1:]),
        "cluster": cluster,
        "id": id_col,
    }


# ---------------------------------------------------------------------------
# heterogeneity features
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FeatureSpec:
    """How raw variables are expanded into candidate effect modifiers.

    ``kinds`` maps each raw variable name to ``"binary"`` or ``"continuous"``.
    Variables left out of ``kinds`` are classified from their values.
    """

    names: tuple = ()
    kinds: Mapping = field(default_factory=dict)
    interaction_order: int = 2
    polynomial_order: int = 4
    log_transform: bool = True
    share_min: float = 0.01
    corr_max: float = 0.99

    def __post_init__(self):
        if not 1 <= self.polynomial_order <= 4:
            raise ValidationError("polynomial_order must be between 1 and 4")
        if self.interaction_order < 1:
            raise ValidationError("interaction_order must be >= 1")
        if not 0 < self.share_min < 0.5:
            raise ValidationError("share_min must lie in (0, 0.5)")
        if not 0 < self.corr_max <= 1:
            raise ValidationError("corr_max must lie in (0, 1]")


def _is_binary(col):
    return bool(np.isin(col, (0.0, 1.0)).all())


def expand_features(raw, spec: FeatureSpec = FeatureSpec(), names: Optional[Sequence[str]] = None):
    """Build the candidate heterogeneity design from raw variables.

    Column order is constant, levels, interactions (lexicographic by index
    tuple), powers ``2..polynomial_order`` of each non-binary variable, and
    logs of strictly positive non-binary variables.

    Returns
    -------
    Z : ndarray of shape (N, k)
    names : list of str
    """
    raw = np.asarray(raw, dtype=float)
    if raw.ndim == 1:
        raw = raw[:, None]
    n, p = raw.shape
    names = list(names or spec.names or [f"v{j}" for j in range(p)])
    if len(names) != p:
        raise ValidationError(f"{len(names)} names for {p} raw columns")
    binary = []
    for j, name in enumerate(names):
        kind = spec.kinds.get(name)
        if kind is None:
            binary.append(_is_binary(raw[:, j]))
        else:
            binary.append(kind == "binary")

    cols = [np.ones(n)]
    out_names = [CONSTANT_NAME]
    for j in range(p):
        cols.append(raw[:, j])
        out_names.append(names[j])
    for order in range(2, spec.interaction_order + 1):
        for combo in itertools.combinations(range(p), order):
            cols.append(np.prod(raw[:, combo], axis=1))
            out_names.append("*".join(names[j] for j in combo))
    for j in range(p):
        if binary[j]:
            continue
        for power in range(2, spec.polynomial_order + 1):
            cols.append(raw[:, j] ** power)
            out_names.append(f"{names[j]}^{power}")
    if spec.log_transform:
        for j in range(p):
            if binary[j]:
                continue
            if raw[:, j].min() > 0:
                cols.append(np.log(raw[:, j]))
                out_names.append(f"log({names[j]})")
            else:
                logger.warning("skipping log(%s): variable has nonpositive values", names[j])
    return np.column_stack(cols), out_names


def screen_features(Z, spec: FeatureSpec, treatment, names: Optional[Sequence[str]] = None):
    """Drop rare binary columns and near-duplicate columns.

    A binary column is dropped when, within the treated or within the
    controls, the share of ones or of zeros falls below ``spec.share_min``.
    Among pairs whose absolute correlation exceeds ``spec.corr_max`` the
    earlier column is kept. Non-constant columns without variance are
    dropped as collinear with the constant. Column 0 is always kept.

    Returns
    -------
    Z_kept : ndarray
    kept : list of int
        Indices into the input columns.
    dropped : list of (name, reason)
    """
    Z = np.asarray(Z, dtype=float)
    d = np.asarray(treatment).astype(bool)
    k = Z.shape[1]
    names = list(names) if names is not None else [f"z{j}" for j in range(k)]
    dropped = []
    candidates = []
    for j in range(1, k):
        col = Z[:, j]
        if _is_binary(col):
            shares = [col[d].mean(), col[~d].mean()]
            rare = min(min(s, 1 - s) for s in shares)
            if rare < spec.share_min:
                dropped.append((names[j], f"binary share {rare:.4g} below {spec.share_min}"))
                continue
        if np.ptp(col) == 0 or not np.std(col) > 0:
            dropped.append((names[j], "no variation"))
            continue
        candidates.append(j)

    kept = [0]
    if candidates:
        C = Z[:, candidates]
        C = (C - C.mean(axis=0)) / C.std(axis=0)
        corr = (C.T @ C) / Z.shape[0]
        accepted = []
        for pos, j in enumerate(candidates):
            if accepted:
                r = np.abs(corr[pos, accepted])
                worst = int(np.argmax(r))
                if r[worst] > spec.corr_max:
                    other = candidates[accepted[worst]]
                    dropped.append((names[j], f"|corr| {r[worst]:.4f} with {names[other]}"))
                    continue
            accepted.append(pos)
            kept.append(j)
    return Z[:, kept], kept, dropped


def feature_names_json(names, path=None):
    """Serialize a column name list for auditing; optionally write it to ``path``."""
    text = json.dumps(list(names), indent=1)
    if path is not None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    return text


# ---------------------------------------------------------------------------
# balance statistics
# ---------------------------------------------------------------------------

def standardized_difference(sample_a, sample_b, denominator="average"):
    """Standardized mean difference on a 0-100 scale.

    ``denominator="average"`` divides by ``sqrt((var_a + var_b) / 2)``;
    ``denominator="sum"`` divides by ``sqrt(var_a + var_b)``, a variant seen
    in some published balance tables; it is smaller by a factor ``sqrt(2)``.
    Variances use ``n - 1``.
    """
    a = np.asarray(sample_a, dtype=float)
    b = np.asarray(sample_b, dtype=float)
    if a.size == 0 or b.size == 0:
        raise ValidationError("both samples must be non-empty")
    va = a.var(ddof=1) if a.size > 1 else 0.0
    vb = b.var(ddof=1) if b.size > 1 else 0.0
    if denominator == "average":
        scale = np.sqrt(0.5 * (va + vb))
    elif denominator == "sum":
        scale = np.sqrt(va + vb)
    else:
        raise ValueError(f"unknown denominator {denominator!r}")
    diff = abs(a.mean() - b.mean())
    if scale == 0:
        if diff == 0:
            return 0.0
        raise ValidationError("zero pooled variance with different means")
    return float(100.0 * diff / scale)


def standardized_difference_from_moments(mean_a, sd_a, mean_b, sd_b, denominator="average"):
    """Same as :func:`standardized_difference` from summary moments."""
    va, vb = sd_a ** 2, sd_b ** 2
    scale = np.sqrt(0.5 * (va + vb)) if denominator == "average" else np.sqrt(va + vb)
    return float(100.0 * abs(mean_a - mean_b) / scale)


def balance_table(dataset: Dataset, weights=None, denominator="average"):
    """Means and standardized differences of every confounder by treatment.

    ``std_diff`` uses ``denominator``; ``std_diff_alt`` uses the other
    convention so both can be reported side by side. With ``weights``
    (normalized within groups) the weighted means and their standardized
    difference give the post-weighting balance check.
    """
    d = dataset.treatment.astype(bool)
    other = "sum" if denominator == "average" else "average"
    rows = []
    for j, name in enumerate(dataset.confounder_names):
        x = dataset.confounders[:, j]
        row = {"variable": name, "mean_treated": x[d].mean(), "mean_control": x[~d].mean(),
               "std_diff": standardized_difference(x[d], x[~d], denominator),
               "std_diff_alt": standardized_difference(x[d], x[~d], other)}
        if weights is not None:
            w = np.asarray(weights)
            mt, mc = np.sum(w[d] * x[d]), np.sum(w[~d] * x[~d])
            va, vb = x[d].var(ddof=1), x[~d].var(ddof=1)
            scale = np.sqrt(0.5 * (va + vb)) if denominator == "average" else np.sqrt(va + vb)
            row.update(weighted_mean_treated=mt, weighted_mean_control=mc,
                       weighted_std_diff=float(100 * abs(mt - mc) / scale) if scale > 0 else 0.0)
        rows.append(row)
    return pd.DataFrame(rows)


# ---------------------------------------------------------------------------
# pseudo participation starts
# ---------------------------------------------------------------------------

def assign_pseudo_starts(treated_starts, control_exits=None, treated_strata=None,
                         control_strata=None, n_controls=None, seed=0):
    """Draw pseudo programme starts for controls from the treated distribution.

    Each control receives a start drawn uniformly from the treated starts of
    its stratum (or from all treated starts without strata).

    Parameters
    ----------
    treated_starts : array-like
        Elapsed unemployment duration at programme start, one per treated.
    control_exits : array-like, optional
        Observed exit month of each control. A control whose exit precedes
        its drawn start is flagged ineligible.
    treated_strata, control_strata : array-like, optional
        Conditioning cells. Both or neither must be given.
    n_controls : int, optional
        Needed only when neither ``control_exits`` nor ``control_strata`` is given.
    seed : int

    Returns
    -------
    starts : ndarray
    eligible : ndarray of bool
    """
    donors = np.asarray(treated_starts)
    if donors.size == 0:
        raise ValidationError("treated_starts is empty")
    if (treated_strata is None) != (control_strata is None):
        raise ValidationError("give strata for both treated and controls, or for neither")
    if control_strata is not None:
        m = len(control_strata)
    elif control_exits is not None:
        m = len(control_exits)
    elif n_controls is not None:
        m = int(n_controls)
    else:
        raise ValidationError("cannot infer the number of controls")
    rng = np.random.default_rng(seed)
    if control_strata is None:
        starts = donors[rng.integers(0, donors.size, size=m)]
    else:
        ts = np.asarray(treated_strata)
        cs = np.asarray(control_strata)
        if ts.size != donors.size:
            raise ValidationError("treated_strata must match treated_starts in length")
        starts = np.empty(m, dtype=donors.dtype)
        for cell in sorted(np.unique(cs).tolist(), key=repr):
            pool = donors[ts == cell]
            if pool.size == 0:
                raise ValidationError(f"stratum {cell!r} has controls but no treated donors")
            where = np.flatnonzero(cs == cell)
            starts[where] = pool[rng.integers(0, pool.size, size=where.size)]
    if control_exits is None:
        eligible = np.ones(m, dtype=bool)
    else:
        eligible = ~(np.asarray(control_exits) < starts)
    return starts, eligible
