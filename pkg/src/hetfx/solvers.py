"""Weighted least squares, weighted LASSO and cross-validated Post-LASSO.

All penalized problems use the objective

    sum_i w_i (y_i - x_i b)^2 + lam * sum_j loading_j |b_j|

i.e. a weighted *sum* of squares and a penalty on the original-scale
coefficients. Columns with a zero loading are unpenalized; they are
partialled out exactly before coordinate descent runs on the remaining
columns rescaled to unit weighted variance.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import pandas as pd
from numba import njit

from .exceptions import ConvergenceError, ValidationError

logger = logging.getLogger(__name__)

DEFAULT_N_LAMBDAS = 100
DEFAULT_LAMBDA_MIN_RATIO = 1e-4
DEFAULT_TOL = 1e-8
LAMBDA_MAX_SLACK = 1e-10
MAX_CYCLES = 100_000


# ---------------------------------------------------------------------------
# weighted least squares
# ---------------------------------------------------------------------------

def _independent(R, norms, tol=1e-10):
    return np.abs(np.diag(R)) > tol * np.maximum(norms, np.finfo(float).tiny)


def wols_fit(design, y, w, return_kept=False):
    """Weighted least squares ``argmin_b sum_i w_i (y_i - design_i b)^2``.

    Columns that are linear combinations of earlier columns on the rows with
    positive weight are dropped with a warning and get coefficient 0.
    """
    X = np.asarray(design, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, dtype=float)
    w = np.asarray(w, dtype=float)
    if np.any(w < 0):
        raise ValidationError("weights must be nonnegative")
    pos = w > 0
    if not pos.any():
        raise ValidationError("all weights are zero")
    sw = np.sqrt(w[pos])
    A = X[pos] * sw[:, None]
    b = y[pos] * sw
    k = X.shape[1]
    coef = np.zeros(k)
    kept = np.arange(k)
    if k == 0:
        return (coef, kept) if return_kept else coef
    R = np.linalg.qr(A, mode="r")
    ok = _independent(R, np.linalg.norm(A, axis=0))
    if not ok.all():
        kept = np.flatnonzero(ok)
        logger.warning("wols_fit: dropping collinear columns %s", np.flatnonzero(~ok).tolist())
        # a dropped column can make later ones look independent; recheck on the subset
        while True:
            R = np.linalg.qr(A[:, kept], mode="r")
            ok = _independent(R, np.linalg.norm(A[:, kept], axis=0))
            if ok.all():
                break
            kept = kept[ok]
    coef[kept] = np.linalg.lstsq(A[:, kept], b, rcond=None)[0]
    return (coef, kept) if return_kept else coef


def _gram_solve(G, r):
    """Solve the normal equations ``G b = r``, tolerating singular ``G``."""
    if G.shape[0] == 0:
        return np.zeros(0)
    try:
        L = np.linalg.cholesky(G)
        z = np.linalg.solve(L, r)
        sol = np.linalg.solve(L.T, z)
        if np.all(np.isfinite(sol)):
            return sol
    except np.linalg.LinAlgError:
        pass
    return np.linalg.lstsq(G, r, rcond=None)[0]


def crossprod(X, y, w):
    """Weighted cross-product matrix of ``[X, y]``: ``[X, y]' diag(w) [X, y]``."""
    A = np.column_stack([X, y])
    return (A * w[:, None]).T @ A


# ---------------------------------------------------------------------------
# coordinate descent kernel
# ---------------------------------------------------------------------------

@njit(cache=True, nogil=True)
def _objective(G, c, yy, b, thr2):
    q = G @ b
    val = yy - 2.0 * np.dot(c, b) + np.dot(b, q)
    for j in range(b.shape[0]):
        if b[j] != 0.0:
            val += thr2[j] * abs(b[j])
    return val


@njit(cache=True, nogil=True)
def _cd_kernel(G, c, yy, b, thr, tol, max_cycles, trace, trace_out):
    """Cyclic coordinate descent on ``yy - 2 c'b + b'Gb + sum 2 thr_j |b_j|``.

    ``b`` is updated in place. Returns the number of cycles, or -1 when
    ``max_cycles`` is reached. Alternates full sweeps with sweeps over the
    current active set.
    """
    p = c.shape[0]
    q = G @ b
    cycles = 0
    n_trace = 0
    full = True
    while cycles < max_cycles:
        max_change = 0.0
        for j in range(p):
            gjj = G[j, j]
            if gjj <= 0.0:
                continue
            bj = b[j]
            if not full and bj == 0.0:
                continue
            z = c[j] - q[j] + gjj * bj
            t = thr[j]
            if z > t:
                new = (z - t) / gjj
            elif z < -t:
                new = (z + t) / gjj
            else:
                new = 0.0
            delta = new - bj
            if delta != 0.0:
                for k in range(p):
                    q[k] += delta * G[k, j]
                b[j] = new
                ad = abs(delta)
                if ad > max_change:
                    max_change = ad
        cycles += 1
        if trace and n_trace < trace_out.shape[0]:
            trace_out[n_trace] = _objective(G, c, yy, b, 2.0 * thr)
            n_trace += 1
        if max_change < tol:
            if full:
                return cycles
            full = True
        else:
            full = False
    return -1


# ---------------------------------------------------------------------------
# penalized problem on cross-products
# ---------------------------------------------------------------------------

class _Standardized:
    """Penalized columns partialled on the unpenalized block and rescaled.

    Built from the weighted cross-product matrix ``M`` of ``[X, y]`` and the
    total weight ``W``.
    """

    def __init__(self, M, W, loadings):
        k = M.shape[0] - 1
        loadings = np.asarray(loadings, dtype=float)
        if loadings.shape != (k,):
            raise ValidationError(f"need {k} penalty loadings, got {loadings.shape}")
        if np.any(loadings < 0):
            raise ValidationError("penalty loadings must be nonnegative")
        self.k = k
        self.W = float(W)
        self.U = np.flatnonzero(loadings == 0)
        self.P = np.flatnonzero(loadings > 0)
        U, P = self.U, self.P
        Gxx = M[:k, :k]
        gxy = M[:k, k]
        yy = M[k, k]
        if U.size:
            Guu = Gxx[np.ix_(U, U)]
            rhs = np.column_stack([Gxx[np.ix_(U, P)], gxy[U]])
            sol = _gram_solve_multi(Guu, rhs)
            self.B = sol[:, :-1]           # coefficients of P columns on U
            self.a = sol[:, -1]            # coefficients of y on U
            Gpp = Gxx[np.ix_(P, P)] - Gxx[np.ix_(P, U)] @ self.B
            cp = gxy[P] - Gxx[np.ix_(P, U)] @ self.a
            self.yy = yy - gxy[U] @ self.a
        else:
            self.B = np.zeros((0, P.size))
            self.a = np.zeros(0)
            Gpp = Gxx[np.ix_(P, P)].copy()
            cp = gxy[P].copy()
            self.yy = yy
        Gpp = 0.5 * (Gpp + Gpp.T)
        raw_scale = np.sqrt(np.maximum(np.diag(Gxx)[P], 0.0) / max(self.W, 1e-300))
        var = np.maximum(np.diag(Gpp), 0.0) / max(self.W, 1e-300)
        s = np.sqrt(var)
        dead = s <= 1e-7 * np.maximum(raw_scale, 1e-300)
        s[dead] = 1.0
        self.dead = dead
        self.s = s
        G = Gpp / np.outer(s, s)
        G[dead, :] = 0.0
        G[:, dead] = 0.0
        self.G = np.ascontiguousarray(G)
        self.c = cp / s
        self.c[dead] = 0.0
        self.raw_c = cp
        self.loadings = loadings[P]
        self.yy = max(float(self.yy), 0.0)
        self.y_scale = np.sqrt(self.yy / self.W) if self.W > 0 and self.yy > 0 else 1.0

    def lambda_max(self):
        alive = ~self.dead
        if not alive.any():
            return 0.0
        return float(np.max(2.0 * np.abs(self.raw_c[alive]) / self.loadings[alive]))

    def thresholds(self, lam):
        thr = lam * self.loadings / (2.0 * self.s)
        thr[self.dead] = np.inf
        return thr

    def to_original(self, b):
        beta = np.zeros(self.k)
        bp = b / self.s
        bp[self.dead] = 0.0
        beta[self.P] = bp
        if self.U.size:
            beta[self.U] = self.a - self.B @ bp
        return beta

    def solve(self, lam, b0=None, tol=DEFAULT_TOL, max_cycles=MAX_CYCLES, trace=False):
        p = self.P.size
        b = np.zeros(p) if b0 is None else np.array(b0, dtype=float)
        trace_out = np.zeros(1024 if trace else 1)
        # lam_max computed elsewhere may differ by rounding; the exact solution is zero there
        if p == 0 or lam >= self.lambda_max() * (1.0 - LAMBDA_MAX_SLACK):
            b[:] = 0.0
            return b, 0, trace_out[:0]
        cycles = _cd_kernel(self.G, self.c, self.yy, b, self.thresholds(lam),
                            tol * self.y_scale, max_cycles, trace, trace_out)
        if cycles < 0:
            raise ConvergenceError(
                f"coordinate descent did not converge in {max_cycles} cycles at lambda={lam:.6g}",
                {"lambda": lam, "cycles": max_cycles, "active": int(np.sum(b != 0))})
        return b, cycles, trace_out[:min(cycles, trace_out.size)] if trace else trace_out[:0]


def _gram_solve_multi(G, R):
    try:
        L = np.linalg.cholesky(G)
        sol = np.linalg.solve(L.T, np.linalg.solve(L, R))
        if np.all(np.isfinite(sol)):
            return sol
    except np.linalg.LinAlgError:
        pass
    return np.linalg.lstsq(G, R, rcond=None)[0]


def _default_loadings(k, loadings):
    if loadings is None:
        loadings = np.ones(k)
        if k:
            loadings[0] = 0.0
    return np.asarray(loadings, dtype=float)


def lambda_max(design, y, w, penalty_loadings=None):
    """Smallest penalty at which every penalized coefficient is exactly zero.

    With ``x_c``, ``y_c`` the weighted residuals of a column and the outcome
    on the unpenalized columns, ``lam_max = max_j 2 |sum_i w_i x_cij y_ci| / loading_j``.
    """
    X = np.asarray(design, dtype=float)
    w = np.asarray(w, dtype=float)
    prob = _Standardized(crossprod(X, np.asarray(y, float), w), w.sum(),
                         _default_loadings(X.shape[1], penalty_loadings))
    return prob.lambda_max()


def weighted_lasso(design, y, w, lam, penalty_loadings=None, tol=DEFAULT_TOL,
                   max_cycles=MAX_CYCLES, return_trace=False):
    """Weighted LASSO by cyclic coordinate descent.

    Parameters
    ----------
    design : ndarray of shape (N, k)
    y : ndarray of shape (N,)
    w : ndarray of shape (N,)
        Nonnegative observation weights.
    lam : float
        Penalty level, on the scale of the weighted sum of squares.
    penalty_loadings : ndarray of shape (k,), optional
        Per-column penalty multipliers; zero means unpenalized. Defaults to
        one for every column except column 0 (the constant).
    tol : float
        Convergence threshold on the largest coefficient change in a sweep,
        relative to the weighted spread of the partialled outcome.
    return_trace : bool
        Also return the penalized objective after every sweep.

    Returns
    -------
    coef : ndarray of shape (k,)
    trace : ndarray, only if ``return_trace``
    """
    if lam < 0:
        raise ValidationError("lambda must be nonnegative")
    X = np.asarray(design, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, dtype=float)
    w = np.asarray(w, dtype=float)
    if np.any(w < 0) or not np.any(w > 0):
        raise ValidationError("weights must be nonnegative and not all zero")
    prob = _Standardized(crossprod(X, y, w), w.sum(), _default_loadings(X.shape[1], penalty_loadings))
    b, _, trace = prob.solve(lam, tol=tol, max_cycles=max_cycles, trace=return_trace)
    coef = prob.to_original(b)
    if return_trace:
        # the unpenalized block is re-optimized implicitly, so each entry equals
        # the original penalized objective at the matching iterate
        return coef, trace
    return coef


def penalized_objective(design, y, w, coef, lam, penalty_loadings=None):
    X = np.asarray(design, dtype=float)
    loadings = _default_loadings(X.shape[1], penalty_loadings)
    r = np.asarray(y, float) - X @ coef
    return float(np.sum(np.asarray(w) * r * r) + lam * np.sum(loadings * np.abs(coef)))


def lambda_grid(lam_max, n_lambdas=DEFAULT_N_LAMBDAS, min_ratio=DEFAULT_LAMBDA_MIN_RATIO):
    """Decreasing log-spaced grid from ``lam_max`` to ``min_ratio * lam_max``."""
    if lam_max <= 0:
        return np.array([0.0])
    return np.geomspace(lam_max, min_ratio * lam_max, n_lambdas)


def lasso_path(design, y, w, lambdas, penalty_loadings=None, tol=DEFAULT_TOL):
    """Coefficients along a decreasing penalty grid with warm starts.

    Returns an array of shape (len(lambdas), k).
    """
    X = np.asarray(design, dtype=float)
    w = np.asarray(w, dtype=float)
    prob = _Standardized(crossprod(X, np.asarray(y, float), w), w.sum(),
                         _default_loadings(X.shape[1], penalty_loadings))
    return _path(prob, np.asarray(lambdas, dtype=float), tol)


def _path(prob, lambdas, tol):
    out = np.zeros((lambdas.size, prob.k))
    b = np.zeros(prob.P.size)
    order = np.argsort(-lambdas, kind="stable")
    for i in order:
        b, _, _ = prob.solve(lambdas[i], b0=b, tol=tol)
        out[i] = prob.to_original(b)
    return out


# ---------------------------------------------------------------------------
# cross-validation
# ---------------------------------------------------------------------------

def cluster_folds(n, K, seed, clusters=None):
    """Assign rows to ``K`` folds without splitting clusters.

    Clusters are visited in random order and each goes to the fold with the
    fewest rows so far (lowest fold index on ties).
    """
    if K < 2:
        raise ValidationError("need at least two folds")
    if clusters is None:
        codes = np.arange(n)
    else:
        _, codes = np.unique(np.asarray(clusters), return_inverse=True)
        codes = codes.ravel()
    n_clusters = int(codes.max()) + 1 if n else 0
    if n_clusters < K:
        raise ValidationError(f"{n_clusters} clusters cannot fill {K} folds")
    sizes = np.bincount(codes, minlength=n_clusters)
    rng = np.random.default_rng(seed)
    order = rng.permutation(n_clusters)
    fill = np.zeros(K, dtype=np.int64)
    cluster_fold = np.empty(n_clusters, dtype=np.int64)
    for c in order:
        f = int(np.argmin(fill))
        cluster_fold[c] = f
        fill[f] += sizes[c]
    return cluster_fold[codes]


@dataclass
class CvTable:
    lambdas: np.ndarray
    mean_mse: np.ndarray
    fold_mse: np.ndarray          # (n_lambdas, K)
    n_selected: np.ndarray

    def to_frame(self):
        frame = pd.DataFrame({"lambda": self.lambdas, "mean_mse": self.mean_mse})
        for f in range(self.fold_mse.shape[1]):
            frame[f"fold{f}_mse"] = self.fold_mse[:, f]
        frame["n_selected"] = self.n_selected
        return frame

    def to_csv(self, path=None):
        return self.to_frame().to_csv(path, index=False, float_format="%.17g", lineterminator="\n")


@dataclass
class LassoFit:
    """Cross-validated LASSO fit and its Post-LASSO refit.

    ``coef`` holds the LASSO coefficients at ``lam``; ``post_coef`` holds the
    weighted least squares refit on ``selected`` plus ``unpenalized`` (zero
    elsewhere).
    """

    lam: float
    coef: np.ndarray
    unpenalized: tuple
    selected: tuple
    post_coef: np.ndarray
    cv_table: Optional[CvTable] = None
    loadings: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def support(self):
        """Columns entering the Post-LASSO refit (sorted)."""
        return tuple(sorted(set(self.selected) | set(self.unpenalized)))


def _selected(beta, P):
    return tuple(int(j) for j in P if beta[j] != 0.0)


def _heldout_mse(M_fold, W_fold, cols, beta_sub):
    k = M_fold.shape[0] - 1
    yy = M_fold[k, k]
    if len(cols) == 0:
        return yy / W_fold
    cols = list(cols)
    r = M_fold[cols, k]
    G = M_fold[np.ix_(cols, cols)]
    return float((yy - 2 * beta_sub @ r + beta_sub @ G @ beta_sub) / W_fold)


def post_lasso(design, y, w, selected, unpenalized):
    """WOLS refit on ``selected`` plus ``unpenalized`` columns (zero elsewhere)."""
    X = np.asarray(design, dtype=float)
    cols = sorted(set(selected) | set(unpenalized))
    coef = np.zeros(X.shape[1])
    if cols:
        coef[cols] = wols_fit(X[:, cols], y, w)
    return coef


def cross_validate_lambda(design, y, w, K=10, lambdas=None, seed=0, clusters=None,
                          penalty_loadings=None, criterion="post_lasso",
                          n_lambdas=DEFAULT_N_LAMBDAS, lambda_min_ratio=DEFAULT_LAMBDA_MIN_RATIO,
                          tol=DEFAULT_TOL, folds=None):
    """Choose the penalty by K-fold cross-validation of the Post-LASSO MSE.

    For each penalty and fold, the LASSO is fitted on the training folds,
    the nonzero columns (plus unpenalized ones) are refitted by WOLS on the
    training folds, and the weighted squared error of that refit is taken
    on the held-out fold. The penalty with the smallest mean held-out error
    wins (largest penalty on exact ties), and the LASSO and Post-LASSO are
    refitted on all rows at that penalty.

    ``criterion="lasso"`` scores the LASSO coefficients themselves.
    """
    if criterion not in ("post_lasso", "lasso"):
        raise ValidationError(f"unknown CV criterion {criterion!r}")
    X = np.asarray(design, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, dtype=float)
    w = np.asarray(w, dtype=float)
    n, k = X.shape
    loadings = _default_loadings(k, penalty_loadings)
    M_full = crossprod(X, y, w)
    W_full = w.sum()
    full = _Standardized(M_full, W_full, loadings)
    if lambdas is None:
        lambdas = lambda_grid(full.lambda_max(), n_lambdas, lambda_min_ratio)
    lambdas = np.asarray(lambdas, dtype=float)
    if lambdas.size == 0:
        raise ValidationError("empty lambda grid")
    if np.any(lambdas < 0):
        raise ValidationError("lambdas must be nonnegative")
    lambdas = lambdas[np.argsort(-lambdas, kind="stable")]

    if folds is None:
        folds = cluster_folds(n, K, seed, clusters)
    folds = np.asarray(folds)
    K = int(folds.max()) + 1
    fold_mse = np.zeros((lambdas.size, K))
    for f in range(K):
        rows = folds == f
        W_fold = w[rows].sum()
        if W_fold <= 0:
            raise ValidationError(f"fold {f} has zero weight mass")
        M_fold = crossprod(X[rows], y[rows], w[rows])
        M_train = M_full - M_fold
        W_train = W_full - W_fold
        if W_train <= 0:
            raise ValidationError(f"training folds for fold {f} have zero weight mass")
        prob = _Standardized(M_train, W_train, loadings)
        betas = _path(prob, lambdas, tol)
        cache = {}
        for i in range(lambdas.size):
            beta = betas[i]
            if criterion == "lasso":
                cols = np.flatnonzero(beta != 0.0)
                fold_mse[i, f] = _heldout_mse(M_fold, W_fold, cols, beta[cols])
                continue
            sel = _selected(beta, prob.P)
            if sel not in cache:
                cols = sorted(set(sel) | set(prob.U.tolist()))
                Gs = M_train[np.ix_(cols, cols)]
                rs = M_train[cols, k]
                bsub = _gram_solve(Gs, rs)
                cache[sel] = _heldout_mse(M_fold, W_fold, cols, bsub)
            fold_mse[i, f] = cache[sel]

    mean_mse = fold_mse.mean(axis=1)
    best = int(np.argmin(mean_mse))   # grid is decreasing: first minimum = largest lambda
    betas_full = _path(full, lambdas, tol)
    n_sel = np.array([len(_selected(b, full.P)) for b in betas_full])
    coef = betas_full[best]
    selected = _selected(coef, full.P)
    unpen = tuple(int(j) for j in full.U)
    post = post_lasso(X, y, w, selected, unpen)
    table = CvTable(lambdas, mean_mse, fold_mse, n_sel)
    return LassoFit(float(lambdas[best]), coef, unpen, selected, post, table, loadings)


def fixed_lambda_fit(design, y, w, lam, penalty_loadings=None, tol=DEFAULT_TOL):
    """LASSO at a given penalty followed by the Post-LASSO refit."""
    X = np.asarray(design, dtype=float)
    loadings = _default_loadings(X.shape[1], penalty_loadings)
    coef = weighted_lasso(X, y, w, lam, loadings, tol=tol)
    P = np.flatnonzero(loadings > 0)
    U = tuple(int(j) for j in np.flatnonzero(loadings == 0))
    selected = _selected(coef, P)
    post = post_lasso(X, y, w, selected, U)
    return LassoFit(float(lam), coef, U, selected, post, None, loadings)


# ---------------------------------------------------------------------------
# adaptive LASSO
# ---------------------------------------------------------------------------

def ridge_pilot(design, y, w, alpha, penalty_loadings=None):
    """Ridge fit on unit-variance penalized columns, reported on the original scale.

    Unpenalized columns (zero loading) are partialled out and not shrunk.
    """
    X = np.asarray(design, dtype=float)
    w = np.asarray(w, dtype=float)
    prob = _Standardized(crossprod(X, np.asarray(y, float), w), w.sum(),
                         _default_loadings(X.shape[1], penalty_loadings))
    if prob.P.size == 0:
        return prob.to_original(np.zeros(0))
    G = prob.G + alpha * np.eye(prob.P.size)
    b = np.linalg.solve(G, prob.c)
    b[prob.dead] = 0.0
    return prob.to_original(b)


def adaptive_loadings(init_coefs, gamma=1.0, floor=1e-6, unpenalized: Sequence[int] = (0,)):
    """Adaptive LASSO loadings ``1 / max(|init_j|, floor) ** gamma``.

    Columns listed in ``unpenalized`` get loading 0.
    """
    init = np.abs(np.asarray(init_coefs, dtype=float))
    out = 1.0 / np.maximum(init, floor) ** gamma
    out[list(unpenalized)] = 0.0
    return out


def adaptive_cross_validate(design, y, w, K=10, seed=0, clusters=None, penalty_loadings=None,
                            gamma=1.0, floor=1e-6, ridge_ratio=1e-3, **kwargs):
    """Adaptive LASSO: ridge pilot, reciprocal loadings, then :func:`cross_validate_lambda`.

    The ridge pilot is a convention rather than a requirement; to use a
    different pilot, build loadings with :func:`adaptive_loadings` and pass
    them to :func:`cross_validate_lambda` directly.
    """
    X = np.asarray(design, dtype=float)
    base = _default_loadings(X.shape[1], penalty_loadings)
    unpen = np.flatnonzero(base == 0)
    alpha = ridge_ratio * lambda_max(X, y, w, base)
    pilot = ridge_pilot(X, y, w, alpha, base)
    loadings = adaptive_loadings(pilot, gamma, floor, unpen)
    return cross_validate_lambda(X, y, w, K=K, seed=seed, clusters=clusters,
                                 penalty_loadings=loadings, **kwargs)
