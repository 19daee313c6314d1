"""Descriptive summaries of estimated CATEs, smoothing curves and method comparisons."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np
import pandas as pd

from .exceptions import ValidationError
from .inference import population_sd
from .pipeline import group_average

logger = logging.getLogger(__name__)

GRID_POINTS = 512
GAP_MASS = 1e-8
SQRT_2PI = np.sqrt(2.0 * np.pi)


@dataclass(frozen=True)
class SummaryRow:
    label: str
    mean: float
    median: float
    sd: float
    min: float
    max: float
    mean_se: float

    def __post_init__(self):
        if not self.min <= self.median <= self.max:
            raise ValidationError("summary needs min <= median <= max")

    def to_dict(self):
        return asdict(self)


def cate_summary(cate, sigma=None, label="CATE"):
    """Mean, median, sd (divisor N-1), min, max and mean standard error."""
    g = np.asarray(cate, dtype=float)
    if g.size == 0:
        raise ValidationError("empty CATE vector")
    sd = float(np.std(g, ddof=1)) if g.size > 1 else 0.0
    mean_se = float(np.mean(sigma)) if sigma is not None else float("nan")
    return SummaryRow(label, float(g.mean()), float(np.median(g)), sd, float(g.min()),
                      float(g.max()), mean_se)


def summary_frame(rows):
    return pd.DataFrame([r.to_dict() for r in rows])


def _is_binary(col):
    return np.isin(col, (0.0, 1.0)).all()


def median_split(col):
    """High-group indicator: binary columns as-is, others at-or-above the median."""
    col = np.asarray(col, dtype=float)
    if _is_binary(col):
        return col == 1.0
    return col >= np.median(col)


def binary_split_table(cate, characteristics, names=None, bootstrap=None, Z=None):
    """Mean CATE for low and high values of each characteristic.

    Parameters
    ----------
    cate : array-like of shape (N,)
    characteristics : array-like of shape (N, k)
    names : sequence of str, optional
    bootstrap : CateBootstrap, optional
        Replicate coefficients from :func:`inference.bootstrap_cates`; with
        ``Z`` it yields the SE of each high-minus-low difference.
    Z : array-like, optional
        Heterogeneity matrix the bootstrap coefficients apply to.

    Returns
    -------
    DataFrame with ``characteristic``, ``low``, ``high``, ``difference``,
    ``se``, ``share_high``. Degenerate characteristics are skipped with a
    logged note.
    """
    g = np.asarray(cate, dtype=float)
    X = np.asarray(characteristics, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    names = list(names) if names is not None else [f"x{j}" for j in range(X.shape[1])]
    Zm = None if Z is None else np.asarray(Z, dtype=float)
    rows = []
    for j, name in enumerate(names):
        high = median_split(X[:, j])
        if high.all() or not high.any():
            logger.info("skipping %s: one of its median-split groups is empty", name)
            continue
        lo, hi = group_average(g, ~high), group_average(g, high)
        se = float("nan")
        if bootstrap is not None and Zm is not None:
            contrast = Zm[high].mean(axis=0) - Zm[~high].mean(axis=0)
            se = float(population_sd(bootstrap.deltas @ contrast))
        rows.append({"characteristic": name, "low": lo, "high": hi, "difference": hi - lo,
                     "se": se, "share_high": float(high.mean())})
    return pd.DataFrame(rows, columns=["characteristic", "low", "high", "difference", "se",
                                       "share_high"])


def silverman_bandwidth(values):
    """``0.9 * min(sd, IQR / 1.34) * n^(-1/5)``; falls back to sd when the IQR is 0."""
    x = np.asarray(values, dtype=float)
    if x.size < 2:
        raise ValidationError("automatic bandwidth needs at least two values")
    sd = np.std(x, ddof=1)
    q75, q25 = np.percentile(x, [75, 25])
    spread = min(sd, (q75 - q25) / 1.34)
    if spread <= 0:
        spread = sd
    return 0.9 * spread * x.size ** (-0.2)


def _bandwidth(values, bandwidth):
    h = silverman_bandwidth(values) if bandwidth in (None, "auto") else float(bandwidth)
    if not h > 0:
        raise ValidationError("bandwidth must be positive")
    # below this the grid ends round back onto the data
    scale = float(np.max(np.abs(values))) if np.size(values) else 0.0
    if h < 1e3 * np.finfo(float).eps * scale:
        raise ValidationError(f"bandwidth {h:.3g} is too small for data of magnitude {scale:.3g}")
    return h


def kernel_density(values, bandwidth="auto", n_grid=GRID_POINTS):
    """Gaussian kernel density on a grid spanning ``[min - 3h, max + 3h]``.

    Returns
    -------
    DataFrame with ``x`` and ``density``; the bandwidth is in ``attrs``.
    """
    x = np.asarray(values, dtype=float)
    if x.size == 0:
        raise ValidationError("no values")
    h = _bandwidth(x, bandwidth)
    grid = np.linspace(x.min() - 3 * h, x.max() + 3 * h, n_grid)
    dens = np.zeros(n_grid)
    for i0 in range(0, x.size, 4096):
        u = (grid[:, None] - x[None, i0:i0 + 4096]) / h
        with np.errstate(over="ignore"):
            dens += np.exp(-0.5 * u * u).sum(axis=1)
    dens /= x.size * h * SQRT_2PI
    out = pd.DataFrame({"x": grid, "density": dens})
    out.attrs["bandwidth"] = h
    return out


def kernel_regression(x, y, bandwidth="auto", grid=None, n_grid=GRID_POINTS, n_bins=50):
    """Local constant (Nadaraya-Watson) regression of ``y`` on ``x``.

    Grid points whose total kernel weight is below ``1e-8`` are gaps
    (``NaN`` estimate, ``gap=True``).

    Returns
    -------
    curve : DataFrame with ``x``, ``estimate``, ``weight``, ``gap``
    histogram : DataFrame with ``left``, ``right``, ``count``
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise ValidationError("x and y differ in length")
    h = _bandwidth(x, bandwidth)
    g = np.linspace(x.min(), x.max(), n_grid) if grid is None else np.asarray(grid, float)
    num = np.zeros(g.size)
    den = np.zeros(g.size)
    for i0 in range(0, x.size, 4096):
        u = (g[:, None] - x[None, i0:i0 + 4096]) / h
        with np.errstate(over="ignore"):
            k = np.exp(-0.5 * u * u) / SQRT_2PI
        den += k.sum(axis=1)
        num += k @ y[i0:i0 + 4096]
    gap = den < GAP_MASS
    est = np.where(gap, np.nan, num / np.where(gap, 1.0, den))
    curve = pd.DataFrame({"x": g, "estimate": est, "weight": den, "gap": gap})
    curve.attrs["bandwidth"] = h
    counts, edges = np.histogram(x, bins=n_bins)
    hist = pd.DataFrame({"left": edges[:-1], "right": edges[1:], "count": counts})
    return curve, hist


def correlate_methods(cates):
    """Pearson correlations between CATE vectors keyed by method tag.

    Vectors with zero variance get NaN rows and columns.
    """
    tags = list(cates)
    M = np.vstack([np.asarray(cates[t], dtype=float) for t in tags])
    if M.shape[1] < 2:
        raise ValidationError("need at least two observations")
    C = M - M.mean(axis=1, keepdims=True)
    norms = np.sqrt((C * C).sum(axis=1))
    live = norms > 0
    U = np.where(live[:, None], C / np.where(live, norms, 1.0)[:, None], 0.0)
    R = np.clip(U @ U.T, -1.0, 1.0)
    np.fill_diagonal(R, 1.0)
    R[~live, :] = np.nan
    R[:, ~live] = np.nan
    return pd.DataFrame(R, index=tags, columns=tags)
