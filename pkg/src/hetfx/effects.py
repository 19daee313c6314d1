"""Modified Covariate Method, efficiency augmentation and Modified Outcome Method."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import solvers
from .exceptions import ValidationError

EA_MODES = ("none", "one_step", "two_step")
SELECTORS = ("cv-lasso", "cv-adaptive-lasso", "fixed-lambda")


@dataclass(frozen=True)
class McmDesign:
    """Transformed treatment and modified covariates.

    ``modified[:, j] = T * Z[:, j] / 2`` with ``T = 2D - 1``. When a main
    effects block is requested, ``stacked()`` returns ``[Z | T Z / 2]``.
    """

    T: np.ndarray
    modified: np.ndarray
    main: Optional[np.ndarray] = None

    @property
    def labels(self):
        k = self.modified.shape[1]
        main = [("main", j) for j in range(k)] if self.main is not None else []
        return tuple(main + [("interaction", j) for j in range(k)])

    def stacked(self):
        if self.main is None:
            return self.modified
        return np.hstack([self.main, self.modified])

    @property
    def interaction_offset(self):
        return 0 if self.main is None else self.main.shape[1]


def mcm_transform(D, Z, include_main=False):
    D = np.asarray(D)
    Z = np.asarray(Z, dtype=float)
    if Z.ndim == 1:
        Z = Z[:, None]
    T = 2.0 * D.astype(float) - 1.0
    return McmDesign(T, T[:, None] * Z / 2.0, Z.copy() if include_main else None)


@dataclass(frozen=True)
class SelectorConfig:
    """How the penalty is chosen.

    ``penalty_scale="sd"`` multiplies every loading by the weighted standard
    deviation of its column, which penalizes standardized coefficients
    instead of raw ones.
    """

    kind: str = "cv-lasso"
    n_folds: int = 10
    n_lambdas: int = solvers.DEFAULT_N_LAMBDAS
    lambda_min_ratio: float = solvers.DEFAULT_LAMBDA_MIN_RATIO
    lam: Optional[float] = None
    criterion: str = "post_lasso"
    gamma: float = 1.0
    floor: float = 1e-6
    ridge_ratio: float = 1e-3
    penalty_scale: str = "raw"
    tol: float = solvers.DEFAULT_TOL

    def __post_init__(self):
        if self.kind not in SELECTORS:
            raise ValidationError(f"unknown selector {self.kind!r}; choose from {SELECTORS}")
        if self.kind == "fixed-lambda" and self.lam is None:
            raise ValidationError("fixed-lambda selector needs lam")
        if self.penalty_scale not in ("raw", "sd"):
            raise ValidationError("penalty_scale must be 'raw' or 'sd'")


def _loadings(design, w, unpenalized, scale):
    k = design.shape[1]
    out = np.ones(k)
    if scale == "sd":
        W = w.sum()
        mu = (w @ design) / W
        sd = np.sqrt(np.maximum((w @ (design - mu) ** 2) / W, 0.0))
        out = np.where(sd > 0, sd, 1.0)
    out[list(unpenalized)] = 0.0
    return out


def run_selector(design, y, w, unpenalized, config: SelectorConfig, seed=0, clusters=None):
    """Apply the configured selector and return a :class:`solvers.LassoFit`."""
    loadings = _loadings(design, w, unpenalized, config.penalty_scale)
    common = dict(criterion=config.criterion, n_lambdas=config.n_lambdas,
                  lambda_min_ratio=config.lambda_min_ratio, tol=config.tol)
    if config.kind == "cv-lasso":
        return solvers.cross_validate_lambda(design, y, w, K=config.n_folds, seed=seed,
                                             clusters=clusters, penalty_loadings=loadings, **common)
    if config.kind == "cv-adaptive-lasso":
        return solvers.adaptive_cross_validate(design, y, w, K=config.n_folds, seed=seed,
                                               clusters=clusters, penalty_loadings=loadings,
                                               gamma=config.gamma, floor=config.floor,
                                               ridge_ratio=config.ridge_ratio, **common)
    return solvers.fixed_lambda_fit(design, y, w, config.lam, loadings, tol=config.tol)


@dataclass
class EffectFit:
    """Heterogeneity coefficients over the columns of Z.

    ``delta`` holds the Post-LASSO coefficients (zero for deselected
    columns) and ``lasso_delta`` the penalized ones. ``selected`` lists the
    non-constant Z columns kept by the selector. For one-step augmentation
    ``main_selected``/``main_coef`` describe the main effects block; for
    two-step augmentation ``main_coef`` is the fitted main effects model.
    """

    method: str
    delta: np.ndarray
    lasso_delta: np.ndarray
    selected: tuple
    lam: float
    cv_table: Optional[solvers.CvTable] = None
    main_selected: tuple = ()
    main_coef: Optional[np.ndarray] = None
    lasso_fit: Optional[solvers.LassoFit] = field(default=None, repr=False)

    def predict(self, Z):
        return np.asarray(Z, dtype=float) @ self.delta

    def to_dict(self, names=None):
        k = self.delta.size
        names = list(names) if names is not None else [f"z{j}" for j in range(k)]
        cols = [0] + [j for j in self.selected if j != 0]
        return {
            "method": self.method,
            "lambda": self.lam,
            "selected": [names[j] for j in self.selected],
            "coefficients": {names[j]: float(self.delta[j]) for j in cols},
        }

    def to_json(self, names=None):
        return json.dumps(self.to_dict(names), indent=1, sort_keys=True)


def efficiency_augment(y, Z, w, mode="none", selector: SelectorConfig = SelectorConfig(),
                       seed=0, clusters=None):
    """Absorb main effects of Z before (or while) fitting the MCM.

    ``"none"`` returns ``y`` unchanged. ``"two_step"`` fits a weighted
    LASSO of ``y`` on ``Z`` with the configured selector and returns the
    residual from its Post-LASSO fit. ``"one_step"`` leaves ``y`` unchanged;
    the main effects are then estimated jointly inside :func:`fit_mcm`.

    Returns
    -------
    y_adj : ndarray
    main_fit : LassoFit or None
    """
    if mode not in EA_MODES:
        raise ValidationError(f"unknown efficiency augmentation mode {mode!r}")
    y = np.asarray(y, dtype=float)
    if mode in ("none", "one_step"):
        return y, None
    Z = np.asarray(Z, dtype=float)
    fit = run_selector(Z, y, np.asarray(w, float), (0,), selector, seed=seed, clusters=clusters)
    return y - Z @ fit.post_coef, fit


def fit_mcm(y, D, Z, weights, ea_mode="none", selector: SelectorConfig = SelectorConfig(),
            seed=0, clusters=None):
    """Fit the IPW-weighted Modified Covariate Method.

    Minimizes ``sum_i w_i (y_i - T_i Z_i delta / 2)^2 + lam sum_{j>0} |delta_j|``
    (plus main effects for one-step augmentation) with ``w`` the
    group-normalized IPW weights. Both constants are unpenalized.
    """
    y = np.asarray(y, dtype=float)
    Z = np.asarray(Z, dtype=float)
    w = np.asarray(weights, dtype=float)
    p = Z.shape[1]
    y_adj, main_fit = efficiency_augment(y, Z, w, ea_mode, selector, seed=seed, clusters=clusters)
    design = mcm_transform(D, Z, include_main=(ea_mode == "one_step"))
    X = design.stacked()
    off = design.interaction_offset
    unpen = (0, off) if off else (0,)
    fit = run_selector(X, y_adj, w, unpen, selector, seed=seed, clusters=clusters)
    delta = fit.post_coef[off:off + p].copy()
    lasso_delta = fit.coef[off:off + p].copy()
    selected = tuple(j - off for j in fit.selected if j >= off and j != off)
    if off:
        main_selected = tuple(j for j in fit.selected if 0 < j < off)
        main_coef = fit.post_coef[:off].copy()
    else:
        main_selected = tuple(int(j) for j in main_fit.selected) if main_fit is not None else ()
        main_coef = main_fit.post_coef.copy() if main_fit is not None else None
    tag = {"none": "MCM-none", "one_step": "MCM-one-step", "two_step": "MCM-two-step"}[ea_mode]
    return EffectFit(tag, delta, lasso_delta, selected, fit.lam, fit.cv_table,
                     main_selected, main_coef, fit)


def mom_transform(y, D, p):
    """Modified outcome ``y (D - p) / (p (1 - p))``; its mean given Z is the CATE."""
    y = np.asarray(y, dtype=float)
    d = np.asarray(D, dtype=float)
    p = np.asarray(p, dtype=float)
    if not np.all((p > 0) & (p < 1)):
        raise ValidationError("propensity scores must lie strictly inside (0, 1)")
    return y * (d - p) / (p * (1.0 - p))


def fit_mom(y, D, Z, p, selector: SelectorConfig = SelectorConfig(), seed=0, clusters=None,
            weights=None):
    """CV-LASSO of the modified outcome on Z with an unpenalized intercept.

    Unweighted by default; pass group-normalized ``weights`` for the
    weighted variant.
    """
    ystar = mom_transform(y, D, p)
    Z = np.asarray(Z, dtype=float)
    w = np.ones(Z.shape[0]) if weights is None else np.asarray(weights, dtype=float)
    fit = run_selector(Z, ystar, w, (0,), selector, seed=seed, clusters=clusters)
    selected = tuple(j for j in fit.selected if j != 0)
    return EffectFit("MOM", fit.post_coef.copy(), fit.coef.copy(), selected, fit.lam,
                     fit.cv_table, lasso_fit=fit)
