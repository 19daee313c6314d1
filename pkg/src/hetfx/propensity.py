"""Propensity score estimation, common support trimming and IPW weights."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .exceptions import CommonSupportError, ConvergenceError, SeparationError, ValidationError

logger = logging.getLogger(__name__)

SEPARATION_CAP = 30.0


@dataclass(frozen=True)
class PropensityModel:
    """Fitted logit of treatment on confounders.

    ``coef[0]`` is the intercept; ``coef[1:]`` correspond to the columns of
    the design listed in ``columns`` (indices into the original confounder
    matrix, collinear columns removed).
    """

    coef: np.ndarray
    columns: tuple
    n_features: int
    iterations: int
    grad_norm: float
    loglik_path: tuple = field(default=(), repr=False)

    def linear_predictor(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        return self.coef[0] + X[:, list(self.columns)] @ self.coef[1:]

    def predict(self, X):
        """Participation probabilities, clipped away from exact 0 and 1."""
        p = expit(self.linear_predictor(X))
        eps = np.finfo(float).eps
        return np.clip(p, eps, 1 - eps)

    @property
    def slopes(self):
        """Slope per original confounder column (0 for dropped columns)."""
        out = np.zeros(self.n_features)
        out[list(self.columns)] = self.coef[1:]
        return out


def _independent_columns(X, tol=1e-10):
    """Indices of a maximal linearly independent column set, intercept first."""
    n, k = X.shape
    A = np.column_stack([np.ones(n), X])
    keep = [0]
    # greedy Gram-Schmidt keeps the earliest columns of a collinear group
    Q = np.zeros((n, 0))
    for j in range(k + 1):
        v = A[:, j].astype(float)
        norm0 = np.linalg.norm(v)
        if norm0 == 0:
            continue
        if Q.shape[1]:
            v = v - Q @ (Q.T @ v)
            v = v - Q @ (Q.T @ v)
        if np.linalg.norm(v) > tol * norm0 * max(1.0, np.sqrt(n) * 1e-4):
            Q = np.column_stack([Q, v / np.linalg.norm(v)])
            if j > 0:
                keep.append(j)
        elif j == 0:
            raise ValidationError("intercept column is degenerate")
    return [j - 1 for j in keep[1:]]


def _loglik(eta, d, w):
    return float(np.sum(w * (d * eta - np.logaddexp(0.0, eta))))


def fit_logit(X, D, tol=1e-8, max_iter=100, sample_weight=None):
    """Maximum likelihood logit via iteratively reweighted least squares.

    Parameters
    ----------
    X : array-like of shape (N, k)
        Confounders without intercept; ``k`` may be 0.
    D : array-like of shape (N,)
        Binary treatment.
    tol : float
        Convergence threshold on the Euclidean norm of the score of the
        average log-likelihood.
    max_iter : int
    sample_weight : array-like, optional
        Nonnegative frequency weights.

    Returns
    -------
    PropensityModel

    Raises
    ------
    SeparationError
        Some coefficient exceeds ``SEPARATION_CAP`` in absolute value.
    ConvergenceError
        ``max_iter`` reached without meeting ``tol``.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    d = np.asarray(D, dtype=float)
    n, k = X.shape
    w = np.ones(n) if sample_weight is None else np.asarray(sample_weight, dtype=float)
    if not np.isin(d, (0.0, 1.0)).all():
        raise ValidationError("treatment must be coded 0/1")
    cols = _independent_columns(X[w > 0]) if k else []
    if len(cols) < k:
        dropped = sorted(set(range(k)) - set(cols))
        logger.warning("dropping collinear confounder columns %s", dropped)
    A = np.column_stack([np.ones(n), X[:, cols]])
    wsum = w.sum()
    share = np.sum(w * d) / wsum
    if share <= 0 or share >= 1:
        raise SeparationError("treatment is constant; the logit is not identified")
    beta = np.zeros(A.shape[1])
    beta[0] = np.log(share / (1 - share))
    eta = A @ beta
    ll = _loglik(eta, d, w)
    path = [ll]
    grad_norm = np.inf
    for it in range(1, max_iter + 1):
        p = expit(eta)
        grad = A.T @ (w * (d - p)) / wsum
        grad_norm = float(np.linalg.norm(grad))
        if grad_norm <= tol:
            return PropensityModel(beta, tuple(cols), k, it - 1, grad_norm, tuple(path))
        H = (A * (w * p * (1 - p))[:, None]).T @ A / wsum
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, grad, rcond=None)[0]
        t = 1.0
        while True:
            cand = beta + t * step
            eta_c = A @ cand
            ll_c = _loglik(eta_c, d, w)
            if ll_c >= ll or t < 1e-10:
                break
            t *= 0.5
        if ll_c < ll:
            # no ascent possible at machine precision: treat as converged
            return PropensityModel(beta, tuple(cols), k, it, grad_norm, tuple(path))
        beta, eta, ll = cand, eta_c, ll_c
        path.append(ll)
        if np.max(np.abs(beta)) > SEPARATION_CAP:
            raise SeparationError(
                f"logit coefficient exceeded {SEPARATION_CAP} after {it} iterations; "
                "the data look (quasi) separated - trim the sample or drop the offending "
                "confounders")
    p = expit(eta)
    grad_norm = float(np.linalg.norm(A.T @ (w * (d - p)) / wsum))
    if grad_norm <= tol:
        return PropensityModel(beta, tuple(cols), k, max_iter, grad_norm, tuple(path))
    raise ConvergenceError(
        f"logit did not converge in {max_iter} iterations",
        {"iterations": max_iter, "grad_norm": grad_norm, "coef": beta.tolist()})


def average_marginal_effects(model: PropensityModel, X):
    """Average marginal effect of each retained confounder on P(D=1).

    Binary (0/1) columns get the averaged discrete contrast
    ``p(x_j=1) - p(x_j=0)``; other columns get ``mean(p(1-p)) * coef_j``.
    Returns one value per retained column, in ``model.columns`` order.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    out = []
    p = model.predict(X)
    for pos, j in enumerate(model.columns):
        coef = model.coef[pos + 1]
        col = X[:, j]
        if np.isin(col, (0.0, 1.0)).all():
            hi, lo = X.copy(), X.copy()
            hi[:, j], lo[:, j] = 1.0, 0.0
            out.append(float(np.mean(model.predict(hi) - model.predict(lo))))
        else:
            out.append(float(np.mean(p * (1 - p)) * coef))
    return np.array(out)


def _check_scores(p):
    p = np.asarray(p, dtype=float)
    if not np.all((p > 0) & (p < 1)):
        raise ValidationError("propensity scores must lie strictly inside (0, 1)")
    return p


@dataclass(frozen=True)
class TrimResult:
    retained: np.ndarray
    lower: float
    upper: float
    dropped_treated: int
    dropped_control: int

    @property
    def n_retained(self):
        return int(self.retained.size)

    def to_json(self):
        return json.dumps({
            "lower": self.lower, "upper": self.upper,
            "dropped_treated": self.dropped_treated, "dropped_control": self.dropped_control,
            "retained": self.n_retained}, sort_keys=True)


def trim_common_support(p, D, lower_pct=0.5, upper_pct=99.5):
    """Enforce common support on the propensity score.

    The lower bound is the ``lower_pct`` percentile of the treated scores,
    the upper bound the ``upper_pct`` percentile of the control scores
    (linear interpolation between order statistics). Every observation
    outside ``[lower, upper]`` is dropped.
    """
    p = _check_scores(p)
    d = np.asarray(D).astype(bool)
    lower = float(np.percentile(p[d], lower_pct))
    upper = float(np.percentile(p[~d], upper_pct))
    keep = (p >= lower) & (p <= upper)
    if not keep[d].any() or not keep[~d].any():
        raise CommonSupportError(
            f"trimming to [{lower:.4g}, {upper:.4g}] leaves no treated or no controls")
    return TrimResult(np.flatnonzero(keep), lower, upper,
                      int(np.sum(d & ~keep)), int(np.sum(~d & ~keep)))


def ipw_weights(p, D):
    """Inverse probability weights normalized to one within each group.

    Treated rows get ``(1/p) / sum_treated(1/p)``, controls get
    ``(1/(1-p)) / sum_control(1/(1-p))``. This equals ``T * w_hat`` for the
    signed weight ``(D - p) / (p(1-p))`` with the group-sum denominator.
    """
    p = _check_scores(p)
    d = np.asarray(D).astype(bool)
    if not d.any() or d.all():
        raise ValidationError("need at least one treated and one control")
    raw = np.where(d, 1.0 / p, 1.0 / (1.0 - p))
    return normalize_within_groups(raw, d)


def normalize_within_groups(raw, D):
    """Rescale nonnegative ``raw`` so it sums to one within treated and controls."""
    raw = np.asarray(raw, dtype=float)
    d = np.asarray(D).astype(bool)
    w = np.empty_like(raw)
    for g in (d, ~d):
        s = raw[g].sum()
        if s <= 0:
            raise ValidationError("a treatment group has zero weight mass")
        w[g] = raw[g] / s
    return w
