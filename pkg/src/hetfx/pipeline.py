"""Honest split-sample CATE estimation with bagging over random splits."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import effects, solvers
from .effects import SelectorConfig
from .exceptions import ValidationError
from .propensity import normalize_within_groups

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PipelineConfig:
    """Settings of the split-sample procedure.

    ``method`` is ``"mcm"`` or ``"mom"``. ``renormalize`` rescales the IPW
    weights to sum to one within each treatment group on every subsample.
    ``mom_weighted`` switches MOM from unweighted to IPW-weighted fits.
    """

    method: str = "mcm"
    ea_mode: str = "none"
    selector: SelectorConfig = SelectorConfig()
    n_splits: int = 30
    renormalize: bool = True
    mom_weighted: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.method not in ("mcm", "mom"):
            raise ValidationError("method must be 'mcm' or 'mom'")
        if self.ea_mode not in effects.EA_MODES:
            raise ValidationError(f"unknown ea_mode {self.ea_mode!r}")
        if self.method == "mom" and self.ea_mode != "none":
            raise ValidationError("efficiency augmentation applies to the MCM only")
        if self.n_splits < 1:
            raise ValidationError("n_splits must be >= 1")

    @property
    def tag(self):
        if self.method == "mom":
            base = "MOM"
        else:
            base = {"none": "MCM-none", "one_step": "MCM-one-step",
                    "two_step": "MCM-two-step"}[self.ea_mode]
        if self.selector.kind == "cv-adaptive-lasso":
            base += "-adaptive"
        return base


def split_seed(master_seed, s, purpose=0):
    """Counter-based seed: split ``s`` never depends on how many splits run."""
    return np.random.SeedSequence([int(master_seed), int(s), int(purpose)])


def honest_split(n, cluster_ids=None, seed=0):
    """Split rows into a training half and an estimation half.

    Whole clusters are assigned, in random order, to whichever half
    currently has fewer rows (training on ties).

    Returns
    -------
    train, estimation : ndarray of int
        Sorted row indices.
    """
    if n < 2:
        raise ValidationError("need at least two rows to split")
    if cluster_ids is None:
        codes = np.arange(n)
    else:
        _, codes = np.unique(np.asarray(cluster_ids), return_inverse=True)
        codes = codes.ravel()
    n_clusters = int(codes.max()) + 1
    if n_clusters < 2:
        raise ValidationError("a single cluster cannot be split honestly")
    sizes = np.bincount(codes, minlength=n_clusters)
    rng = np.random.default_rng(seed)
    half = np.zeros(n_clusters, dtype=bool)    # True = training
    fill = [0, 0]
    for c in rng.permutation(n_clusters):
        to_train = fill[0] <= fill[1]
        half[c] = to_train
        fill[0 if to_train else 1] += sizes[c]
    mask = half[codes]
    return np.flatnonzero(mask), np.flatnonzero(~mask)


@dataclass
class SplitResult:
    """One honest split.

    ``delta`` is indexed by Z columns and nonzero only on ``selected`` and
    the constant. ``predictions`` are ``Z_i delta`` for every row.
    ``response`` and ``refit_columns`` describe the estimation-half
    regression so that it can be re-run on bootstrap samples.
    """

    s: int
    train: np.ndarray
    estimation: np.ndarray
    selected: tuple
    delta: np.ndarray
    predictions: np.ndarray
    main_selected: tuple = ()
    lam: float = float("nan")
    response: Optional[np.ndarray] = field(default=None, repr=False)


@dataclass
class CateEnsemble:
    """Per-split predictions and their bagged average."""

    predictions: np.ndarray         # (S, N)
    cate: np.ndarray                # (N,)
    selected: tuple                 # one tuple of Z indices per split

    @property
    def n_splits(self):
        return self.predictions.shape[0]


@dataclass
class PipelineResult:
    config: PipelineConfig
    splits: list
    ensemble: CateEnsemble
    weights: np.ndarray
    propensity: Optional[np.ndarray] = None

    def manifest(self, names=None):
        cfg = self.config
        out = {
            "method": cfg.tag,
            "ea_mode": cfg.ea_mode,
            "selector": cfg.selector.kind,
            "n_splits": cfg.n_splits,
            "seed": cfg.seed,
            "splits": [],
        }
        for r in self.splits:
            sel = [names[j] for j in r.selected] if names is not None else list(r.selected)
            out["splits"].append({"s": r.s, "lambda": r.lam, "n_train": int(r.train.size),
                                  "n_estimation": int(r.estimation.size), "selected": sel})
        return out


# ---------------------------------------------------------------------------
# refit design shared with the bootstrap
# ---------------------------------------------------------------------------

def refit_layout(method, ea_mode, D, Z, selected, main_selected=()):
    """Design used for the estimation-half refit.

    Returns ``(X, inter_pos, inter_cols)``: the design matrix over all rows,
    the positions of the interaction (CATE) block inside ``X`` and the Z
    columns those positions correspond to.
    """
    Z = np.asarray(Z, dtype=float)
    inter_cols = [0] + [j for j in selected if j != 0]
    if method == "mom":
        return Z[:, inter_cols], np.arange(len(inter_cols)), inter_cols
    T = 2.0 * np.asarray(D, dtype=float) - 1.0
    inter = T[:, None] * Z[:, inter_cols] / 2.0
    if ea_mode == "one_step":
        main_cols = [0] + [j for j in main_selected if j != 0]
        X = np.hstack([Z[:, main_cols], inter])
        return X, np.arange(len(main_cols), X.shape[1]), inter_cols
    return inter, np.arange(len(inter_cols)), inter_cols


def _subsample_weights(config, w, D, rows):
    if config.method == "mom" and not config.mom_weighted:
        return np.ones(rows.size)
    ws = w[rows]
    if config.renormalize:
        ws = normalize_within_groups(ws, D[rows])
    return ws


def run_split(y, D, Z, weights, config: PipelineConfig, s, p_hat=None, clusters=None):
    """Select on a training half, refit on the estimation half, predict for all rows."""
    y = np.asarray(y, dtype=float)
    D = np.asarray(D)
    Z = np.asarray(Z, dtype=float)
    w = np.asarray(weights, dtype=float)
    n = y.size
    train, est = honest_split(n, clusters, seed=split_seed(config.seed, s, 0))
    cv_seed = split_seed(config.seed, s, 1)
    cl_train = None if clusters is None else np.asarray(clusters)[train]
    w_train = _subsample_weights(config, w, D, train)

    if config.method == "mom":
        if p_hat is None:
            raise ValidationError("MOM needs propensity scores")
        fit = effects.fit_mom(y[train], D[train], Z[train], np.asarray(p_hat)[train],
                              config.selector, seed=cv_seed, clusters=cl_train,
                              weights=w_train if config.mom_weighted else None)
        response = effects.mom_transform(y, D, p_hat)
        main_selected = ()
    else:
        fit = effects.fit_mcm(y[train], D[train], Z[train], w_train, config.ea_mode,
                              config.selector, seed=cv_seed, clusters=cl_train)
        main_selected = fit.main_selected
        if config.ea_mode == "two_step":
            response = y - Z @ fit.main_coef
        else:
            response = y

    X, inter_pos, inter_cols = refit_layout(config.method, config.ea_mode, D, Z,
                                            fit.selected, main_selected)
    w_est = _subsample_weights(config, w, D, est)
    coef, kept = solvers.wols_fit(X[est], response[est], w_est, return_kept=True)
    if kept.size < X.shape[1]:
        logger.warning("split %d: refit dropped %d collinear columns", s, X.shape[1] - kept.size)
    delta = np.zeros(Z.shape[1])
    delta[inter_cols] = coef[inter_pos]
    return SplitResult(s, train, est, tuple(fit.selected), delta, Z @ delta,
                       tuple(main_selected), fit.lam, response)


def bag_cates(results):
    """Average per-split predictions: ``cate_i = mean_s prediction_si``."""
    if not results:
        raise ValidationError("no split results to aggregate")
    n = results[0].predictions.size
    if any(r.predictions.size != n for r in results):
        raise ValidationError("split results cover different numbers of rows")
    P = np.vstack([r.predictions for r in results])
    return CateEnsemble(P, P.mean(axis=0), tuple(r.selected for r in results))


def group_average(ensemble, G):
    """Mean bagged CATE over rows with ``G_i = 1``."""
    cate = ensemble.cate if isinstance(ensemble, CateEnsemble) else np.asarray(ensemble, float)
    G = np.asarray(G).astype(bool)
    if G.shape != cate.shape:
        raise ValidationError("group indicator length does not match the number of rows")
    if not G.any():
        raise ValidationError("empty group")
    return float(cate[G].mean())


def run_pipeline(y, D, Z, weights, config: PipelineConfig = PipelineConfig(), p_hat=None,
                 clusters=None, workers=1):
    """Run ``config.n_splits`` honest splits and bag the predictions.

    ``weights`` are the IPW weights estimated once on the full (trimmed)
    sample. Splits are independent and may run on ``workers`` threads; the
    result does not depend on ``workers``.
    """
    def one(s):
        return run_split(y, D, Z, weights, config, s, p_hat=p_hat, clusters=clusters)

    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, range(config.n_splits)))
    else:
        results = [one(s) for s in range(config.n_splits)]
    results.sort(key=lambda r: r.s)
    return PipelineResult(config, results, bag_cates(results), np.asarray(weights, float),
                          None if p_hat is None else np.asarray(p_hat, float))


def save_ensemble(result: PipelineResult, manifest_path, predictions_path, names=None, extra=None):
    """Persist an ensemble: JSON manifest plus CSV of per-split predictions (rows = obs)."""
    manifest = result.manifest(names)
    if extra:
        manifest.update(extra)
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    P = result.ensemble.predictions.T
    header = ",".join(f"split{s}" for s in range(P.shape[1]))
    np.savetxt(predictions_path, P, delimiter=",", fmt="%.17g", header=header, comments="")
