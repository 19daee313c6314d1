"""Average treatment effects and clustered bootstrap standard errors."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from .exceptions import BootstrapError, HetfxError, ValidationError
from .pipeline import PipelineResult, refit_layout
from .propensity import fit_logit, ipw_weights

logger = logging.getLogger(__name__)

ESTIMANDS = ("ATE", "ATET", "ATENT")
MAX_EXCLUDED_SHARE = 0.05


@dataclass(frozen=True)
class EffectEstimate:
    estimand: str
    value: float
    se: float = float("nan")
    n_boot: int = 0

    def __post_init__(self):
        if self.estimand not in ESTIMANDS:
            raise ValidationError(f"unknown estimand {self.estimand!r}")
        if self.n_boot and self.n_boot < 2:
            raise ValidationError("a bootstrap SE needs at least two replications")
        if self.se < 0:
            raise ValidationError("standard errors are nonnegative")

    @property
    def stars(self):
        return significance_stars(self.value, self.se)


@dataclass(frozen=True)
class BootstrapConfig:
    """Cluster bootstrap settings. ``B`` replications drawn from ``seed``."""

    B: int = 1000
    seed: int = 0
    reestimate_propensity: bool = False
    chunk: int = 250

    def __post_init__(self):
        if self.B < 2:
            raise ValidationError("B must be at least 2")


def significance_stars(value, se):
    """``*``, ``**``, ``***`` for two-sided normal p-values below 10/5/1%."""
    if not np.isfinite(se) or se <= 0:
        return ""
    z = abs(value) / se
    if z >= 2.5758293035489004:
        return "***"
    if z >= 1.959963984540054:
        return "**"
    if z >= 1.6448536269514722:
        return "*"
    return ""


# ---------------------------------------------------------------------------
# point estimates
# ---------------------------------------------------------------------------

def _group_mean(v, mass):
    s = mass.sum()
    if s <= 0:
        raise ValidationError("empty treatment group")
    return float(mass @ v / s)


def estimate_averages(y, D, p_hat, weights=None, freq=None):
    """ATE, ATET and ATENT by normalized inverse-probability reweighting.

    Parameters
    ----------
    y, D, p_hat : array-like of shape (N,)
    weights : array-like, optional
        IPW weights; recomputed from ``p_hat`` when omitted. Only their
        relative size within each group matters.
    freq : array-like, optional
        Integer frequency weights (bootstrap multiplicities).

    Returns
    -------
    dict mapping estimand to :class:`EffectEstimate` (point values only).
    """
    y = np.asarray(y, dtype=float)
    d = np.asarray(D).astype(bool)
    p = np.asarray(p_hat, dtype=float)
    f = np.ones(y.size) if freq is None else np.asarray(freq, dtype=float)
    w = ipw_weights(p, d) if weights is None else np.asarray(weights, dtype=float)
    t, c = d, ~d
    odds = p / (1.0 - p)
    mu1 = _group_mean(y[t], (f * w)[t])
    mu0 = _group_mean(y[c], (f * w)[c])
    y1_treated = _group_mean(y[t], f[t])
    y0_treated = _group_mean(y[c], (f * odds)[c])
    y1_control = _group_mean(y[t], (f / odds)[t])
    y0_control = _group_mean(y[c], f[c])
    return {
        "ATE": EffectEstimate("ATE", mu1 - mu0),
        "ATET": EffectEstimate("ATET", y1_treated - y0_treated),
        "ATENT": EffectEstimate("ATENT", y1_control - y0_control),
    }


def _levels(y, d, p, w):
    t, c = d, ~d
    odds = p / (1.0 - p)
    return {
        "y1": _group_mean(y[t], w[t]), "y0": _group_mean(y[c], w[c]),
        "y1_treated": float(y[t].mean()), "y0_treated": _group_mean(y[c], odds[c]),
    }


def monthly_effect_curve(outcomes, D, p_hat, weights=None):
    """Column-wise average effects and weighted potential outcome levels.

    Returns a DataFrame with one row per outcome column.
    """
    import pandas as pd

    Y = np.asarray(outcomes, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    if Y.shape[1] < 1:
        raise ValidationError("need at least one outcome column")
    d = np.asarray(D).astype(bool)
    p = np.asarray(p_hat, dtype=float)
    w = ipw_weights(p, d) if weights is None else np.asarray(weights, dtype=float)
    rows = []
    for m in range(Y.shape[1]):
        est = estimate_averages(Y[:, m], d, p, w)
        row = {"month": m + 1}
        row.update({k: v.value for k, v in est.items()})
        row.update(_levels(Y[:, m], d, p, w))
        rows.append(row)
    return pd.DataFrame(rows)


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------

def cluster_codes(cluster_ids, n):
    if cluster_ids is None:
        return np.arange(n)
    _, codes = np.unique(np.asarray(cluster_ids), return_inverse=True)
    return codes.ravel()


def replicate_counts(codes, seed, b):
    """Observation multiplicities for replicate ``b``: clusters drawn with replacement.

    With singleton clusters this is the ordinary nonparametric bootstrap.
    """
    G = int(codes.max()) + 1
    rng = np.random.default_rng([int(seed), int(b)])
    draws = np.bincount(rng.integers(0, G, size=G), minlength=G)
    return draws[codes].astype(float)


def population_sd(values, axis=0):
    """Standard deviation with divisor B (number of replications)."""
    return np.std(np.asarray(values, dtype=float), axis=axis, ddof=0)


# ---------------------------------------------------------------------------
# CATE bootstrap
# ---------------------------------------------------------------------------

@dataclass
class _SplitProblem:
    rows: np.ndarray        # estimation rows
    X: np.ndarray           # design on estimation rows
    r: np.ndarray           # response on estimation rows
    d: np.ndarray           # treatment (bool) on estimation rows
    inter_pos: np.ndarray
    inter_cols: list
    weighted: bool
    renormalize: bool


def _split_problems(result: PipelineResult, D, Z):
    cfg = result.config
    D = np.asarray(D)
    out = []
    for sr in result.splits:
        X, pos, cols = refit_layout(cfg.method, cfg.ea_mode, D, Z, sr.selected, sr.main_selected)
        e = sr.estimation
        weighted = not (cfg.method == "mom" and not cfg.mom_weighted)
        out.append(_SplitProblem(e, X[e], sr.response[e], D[e].astype(bool), pos, cols,
                                 weighted, cfg.renormalize and weighted))
    return out


def _batched_refit(prob: _SplitProblem, V):
    """Solve the weighted normal equations for every row of ``V`` (replicate weights).

    Returns ``(coef, ok)`` with ``coef`` of shape (R, k); failed replicates
    (empty group or singular Gram) are flagged in ``ok``.
    """
    X, r = prob.X, prob.r
    R = V.shape[0]
    k = X.shape[1]
    ok = np.ones(R, dtype=bool)
    if prob.renormalize:
        mt = V[:, prob.d].sum(axis=1)
        mc = V[:, ~prob.d].sum(axis=1)
        ok &= (mt > 0) & (mc > 0)
        scale = np.where(prob.d[None, :], 1.0 / np.where(mt > 0, mt, 1.0)[:, None],
                         1.0 / np.where(mc > 0, mc, 1.0)[:, None])
        V = V * scale
    outer = (X[:, :, None] * X[:, None, :]).reshape(X.shape[0], k * k)
    G = (V @ outer).reshape(R, k, k)
    c = V @ (X * r[:, None])
    # relative conditioning check on the scaled Gram
    dg = np.sqrt(np.maximum(np.einsum("rii->ri", G), 0.0))
    good_diag = np.all(dg > 0, axis=1)
    ok &= good_diag
    dgs = np.where(dg > 0, dg, 1.0)
    Gs = G / (dgs[:, :, None] * dgs[:, None, :])
    eig = np.linalg.eigvalsh(Gs)
    ok &= eig[:, 0] > 1e-10 * np.maximum(eig[:, -1], 1e-300)
    coef = np.full((R, k), np.nan)
    if ok.any():
        sol = np.linalg.solve(Gs[ok], (c / dgs)[ok][:, :, None])[:, :, 0]
        coef[ok] = sol / dgs[ok]
    return coef, ok


@dataclass
class CateBootstrap:
    """Bootstrap standard errors of bagged CATEs.

    ``sigma`` holds one SE per observation, ``group_se`` one per requested
    group. ``deltas`` stores the per-replicate bagged coefficient vectors
    (rows of excluded replicates removed), from which any linear functional
    of the CATEs can be re-evaluated.
    """

    sigma: np.ndarray
    group_se: dict
    group_point: dict
    n_requested: int
    n_used: int
    n_excluded: int
    deltas: np.ndarray = field(repr=False)
    replicates: Optional[np.ndarray] = field(default=None, repr=False)

    def report(self):
        return {
            "B_requested": self.n_requested,
            "B_used": self.n_used,
            "excluded": self.n_excluded,
            "groups": {g: {"estimate": self.group_point[g], "se": self.group_se[g],
                           "stars": significance_stars(self.group_point[g], self.group_se[g])}
                       for g in self.group_se},
        }


def _propensity_weights(X, D, freq):
    model = fit_logit(X, D, sample_weight=freq)
    p = model.predict(X)
    return ipw_weights(p, D), p


def bootstrap_cates(result: PipelineResult, D, Z, clusters=None, groups: Optional[Mapping] = None,
                    config: BootstrapConfig = BootstrapConfig(), confounders=None,
                    keep_replicates=False):
    """Cluster bootstrap of bagged CATEs with variable sets frozen per split.

    For each replicate clusters are drawn with replacement. Every split's
    estimation rows enter with their bootstrap multiplicity, the frozen
    design is refitted by WOLS with weights renormalized within groups, and
    the split coefficient vectors are averaged. The SE of each observation's
    CATE is the divisor-B standard deviation over replicates; groups use the
    replicate group means over the fixed original rows.

    Parameters
    ----------
    result : PipelineResult
    D, Z : array-like
        Treatment and heterogeneity matrix the pipeline was run on.
    clusters : array-like, optional
        Cluster labels; ``None`` resamples observations.
    groups : mapping of name to boolean array, optional
        Groups whose mean CATE gets an SE. ``"all"`` is always included.
    config : BootstrapConfig
    confounders : array-like, optional
        Required when ``config.reestimate_propensity`` is set.
    keep_replicates : bool
        Store the (B_used, N) matrix of bagged replicate CATEs.

    Raises
    ------
    BootstrapError
        More than 5% of the replicates could not be refitted.
    """
    Z = np.asarray(Z, dtype=float)
    D = np.asarray(D)
    n, p = Z.shape
    codes = cluster_codes(clusters, n)
    base_w = result.weights
    probs = _split_problems(result, D, Z)
    S = len(probs)
    if config.reestimate_propensity and confounders is None:
        raise ValidationError("re-estimating the propensity needs the confounders")

    deltas = np.zeros((config.B, p))
    ok_all = np.ones(config.B, dtype=bool)
    for start in range(0, config.B, config.chunk):
        bs = range(start, min(start + config.chunk, config.B))
        C = np.vstack([replicate_counts(codes, config.seed, b) for b in bs])
        if config.reestimate_propensity:
            W = np.empty_like(C)
            for i, b in enumerate(bs):
                try:
                    W[i] = _propensity_weights(confounders, D, C[i])[0]
                except (HetfxError, np.linalg.LinAlgError):
                    W[i] = np.nan
        else:
            W = np.broadcast_to(base_w, C.shape)
        acc = np.zeros((len(bs), p))
        ok = np.all(np.isfinite(W), axis=1)
        Wc = np.where(np.isfinite(W), W, 0.0)
        for prob in probs:
            V = C[:, prob.rows] * (Wc[:, prob.rows] if prob.weighted else 1.0)
            coef, fine = _batched_refit(prob, V)
            ok &= fine
            acc[:, prob.inter_cols] += np.where(fine[:, None], coef[:, prob.inter_pos], 0.0)
        deltas[start:start + len(bs)] = acc / S
        ok_all[start:start + len(bs)] = ok

    n_bad = int((~ok_all).sum())
    if n_bad > MAX_EXCLUDED_SHARE * config.B:
        raise BootstrapError(f"{n_bad} of {config.B} bootstrap replications could not be "
                             "refitted; the clusters are too few or too unbalanced")
    if n_bad:
        logger.warning("excluded %d of %d bootstrap replications", n_bad, config.B)
    deltas = deltas[ok_all]
    if deltas.shape[0] < 2:
        raise BootstrapError("fewer than two usable bootstrap replications")

    # replicate CATEs are Z @ delta_b; evaluate in row blocks to bound memory
    sigma = np.empty(n)
    reps = np.empty((deltas.shape[0], n)) if keep_replicates else None
    step = max(1, 4_000_000 // max(deltas.shape[0], 1))
    for i0 in range(0, n, step):
        block = deltas @ Z[i0:i0 + step].T
        sigma[i0:i0 + step] = population_sd(block, axis=0)
        if reps is not None:
            reps[:, i0:i0 + step] = block
    cate = result.ensemble.cate
    group_defs = {"all": np.ones(n, dtype=bool)}
    if groups:
        group_defs.update({k: np.asarray(v).astype(bool) for k, v in groups.items()})
    gse, gpoint = {}, {}
    for name, g in group_defs.items():
        if g.shape != (n,) or not g.any():
            raise ValidationError(f"group {name!r} is empty or misaligned")
        zbar = Z[g].mean(axis=0)
        gse[name] = float(population_sd(deltas @ zbar))
        gpoint[name] = float(cate[g].mean())
    return CateBootstrap(sigma, gse, gpoint, config.B, int(deltas.shape[0]), n_bad, deltas, reps)


# ---------------------------------------------------------------------------
# average effects bootstrap
# ---------------------------------------------------------------------------

@dataclass
class AverageBootstrap:
    estimates: dict
    n_requested: int
    n_used: int
    n_excluded: int
    replicates: np.ndarray = field(repr=False)

    def report(self):
        return {
            "B_requested": self.n_requested,
            "B_used": self.n_used,
            "excluded": self.n_excluded,
            "estimates": {k: {"estimate": e.value, "se": e.se, "stars": e.stars}
                          for k, e in self.estimates.items()},
        }

    def to_json(self):
        return json.dumps(self.report(), indent=1, sort_keys=True)


def bootstrap_averages(y, D, confounders=None, p_hat=None, clusters=None,
                       config: BootstrapConfig = BootstrapConfig()):
    """Cluster bootstrap SEs for ATE, ATET and ATENT.

    With ``config.reestimate_propensity`` the logit of ``D`` on
    ``confounders`` is refitted on every replicate (bootstrap multiplicities
    as frequency weights); otherwise ``p_hat`` is held fixed.
    """
    y = np.asarray(y, dtype=float)
    D = np.asarray(D)
    n = y.size
    if config.reestimate_propensity:
        if confounders is None:
            raise ValidationError("re-estimating the propensity needs the confounders")
        p0 = fit_logit(confounders, D).predict(confounders)
    else:
        if p_hat is None:
            raise ValidationError("pass p_hat or enable reestimate_propensity")
        p0 = np.asarray(p_hat, dtype=float)
    point = estimate_averages(y, D, p0)
    codes = cluster_codes(clusters, n)
    reps = np.full((config.B, 3), np.nan)
    for b in range(config.B):
        f = replicate_counts(codes, config.seed, b)
        try:
            if config.reestimate_propensity:
                pb = fit_logit(confounders, D, sample_weight=f).predict(confounders)
            else:
                pb = p0
            est = estimate_averages(y, D, pb, freq=f)
        except (HetfxError, np.linalg.LinAlgError):
            continue
        reps[b] = [est[k].value for k in ESTIMANDS]
    ok = np.all(np.isfinite(reps), axis=1)
    n_bad = int((~ok).sum())
    if n_bad > MAX_EXCLUDED_SHARE * config.B:
        raise BootstrapError(f"{n_bad} of {config.B} bootstrap replications failed")
    reps = reps[ok]
    se = population_sd(reps, axis=0)
    ests = {k: EffectEstimate(k, point[k].value, float(se[i]), int(reps.shape[0]))
            for i, k in enumerate(ESTIMANDS)}
    return AverageBootstrap(ests, config.B, int(reps.shape[0]), n_bad, reps)
