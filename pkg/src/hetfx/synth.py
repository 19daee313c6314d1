"""Synthetic data with known conditional average treatment effects."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import expit

from .data import CONSTANT_NAME, Dataset

OVERLAP = (0.02, 0.98)


@dataclass(frozen=True)
class DgpConfig:
    """Data generating process with a linear CATE ``tau = delta' Z``.

    Heterogeneity columns ``1..p-1`` are independent standard normals; the
    first ``p_x`` of them are also the confounders driving participation.
    ``delta`` and ``beta`` may be given explicitly; otherwise ``delta`` has
    intercept ``delta0`` and ``s`` informative columns of alternating sign
    and magnitude ``delta_value``, and ``beta`` puts ``main_value`` on the
    first ``n_main`` columns.
    """

    n: int = 2000
    n_clusters: int = 100
    p_x: int = 3
    p: int = 12
    s: int = 4
    delta0: float = -0.5
    delta_value: float = 0.5
    delta: Optional[tuple] = None
    n_main: int = 6
    main_value: float = 0.5
    beta: Optional[tuple] = None
    a: tuple = (0.0, 0.0, 0.0)
    a0: float = 0.0
    sigma: float = 1.0
    cluster_sd: float = 0.3
    horizon: int = 1
    nonlinear: bool = False
    seed: int = 0
    name: str = "custom"

    def __post_init__(self):
        if self.s > self.p - 1:
            raise ValueError("s must not exceed the number of non-constant columns")
        if len(self.a) != self.p_x:
            raise ValueError("a needs one coefficient per confounder")

    def delta_vector(self):
        if self.delta is not None:
            return np.asarray(self.delta, dtype=float)
        d = np.zeros(self.p)
        d[0] = self.delta0
        signs = np.where(np.arange(self.s) % 2 == 0, 1.0, -1.0)
        d[1:self.s + 1] = self.delta_value * signs
        return d

    def beta_vector(self):
        if self.beta is not None:
            return np.asarray(self.beta, dtype=float)
        b = np.zeros(self.p)
        b[1:min(self.n_main, self.p - 1) + 1] = self.main_value
        return b

    def with_(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        return dataclasses.asdict(self)


def _nonlinear_part(Z):
    return 0.5 * np.sin(2.0 * Z[:, 1]) + 0.25 * (Z[:, 2] ** 2 - 1.0)


def generate(config: DgpConfig):
    """Draw one dataset.

    Returns
    -------
    dataset : Dataset
    tau : ndarray
        True individual CATE ``tau_i``.
    truth : dict
        ``ate``, ``atet``, ``atent``, ``delta``, ``support`` (non-constant
        informative columns), ``propensity``, potential outcomes ``y0``/``y1``
        of the first horizon and per-horizon effect multipliers ``fade``.
    """
    rng = np.random.default_rng(config.seed)
    n, p = config.n, config.p
    k = max(config.p_x, p - 1)
    L = rng.standard_normal((n, k))
    X = L[:, :config.p_x]
    Z = np.column_stack([np.ones(n), L[:, :p - 1]])
    a = np.asarray(config.a, dtype=float)
    prop = np.clip(expit(config.a0 + X @ a), *OVERLAP)
    D = (rng.random(n) < prop).astype(np.int8)
    clusters = rng.integers(0, config.n_clusters, size=n)
    c = rng.normal(0.0, config.cluster_sd, size=config.n_clusters)[clusters]
    delta = config.delta_vector()
    beta = config.beta_vector()
    tau = Z @ delta
    if config.nonlinear:
        tau = tau + _nonlinear_part(Z)
    M = config.horizon
    fade = np.ones(1) if M == 1 else 1.0 - np.arange(M) / (M - 1)
    base = Z @ beta + c
    eps = rng.normal(0.0, config.sigma, size=(n, M))
    y0 = base[:, None] + eps
    y1 = y0 + tau[:, None] * fade[None, :]
    Y = np.where(D[:, None] == 1, y1, y0)

    znames = tuple(f"x{j}" for j in range(1, k + 1))
    ds = Dataset(
        outcomes=Y,
        treatment=D,
        confounders=X,
        heterogeneity=Z,
        cluster_ids=clusters,
        obs_ids=np.arange(n),
        outcome_names=tuple(["y"] if M == 1 else [f"y{m + 1}" for m in range(M)]),
        confounder_names=znames[:config.p_x],
        heterogeneity_names=(CONSTANT_NAME,) + znames[:p - 1],
    )
    d = D.astype(bool)
    truth = {
        "ate": float(tau.mean()),
        "atet": float(tau[d].mean()),
        "atent": float(tau[~d].mean()),
        "delta": delta,
        "support": tuple(int(j) for j in np.flatnonzero(delta[1:]) + 1),
        "propensity": prop,
        "y0": y0[:, 0],
        "y1": y1[:, 0],
        "fade": fade,
    }
    return ds, tau, truth


def default_configs():
    """Named reference designs with fixed seeds."""
    return {
        "rct-linear": DgpConfig(n=20_000, n_clusters=200, p_x=3, p=12, s=4, a=(0.0, 0.0, 0.0),
                                seed=20180226, name="rct-linear"),
        "obs-sparse": DgpConfig(n=10_000, n_clusters=50, p_x=3, p=200, s=5, delta_value=0.5,
                                n_main=3, main_value=1.0, a=(0.6, -0.5, 0.4), sigma=1.0,
                                seed=1268, name="obs-sparse"),
        "null": DgpConfig(n=5_000, n_clusters=100, p_x=3, p=12, s=0, delta0=0.0,
                          a=(0.6, -0.5, 0.4), seed=85198, name="null"),
        "nonlinear": DgpConfig(n=20_000, n_clusters=200, p_x=3, p=12, s=4, nonlinear=True,
                               seed=12712, name="nonlinear"),
    }


def truth_sidecar(config: DgpConfig, tau, truth):
    """JSON-ready summary of the ground truth (the tau vector is digested)."""
    digest = hashlib.sha256(np.ascontiguousarray(tau, dtype=float).tobytes()).hexdigest()
    return {
        "config": config.to_dict(),
        "tau_sha256": digest,
        "ate": truth["ate"],
        "atet": truth["atet"],
        "atent": truth["atent"],
        "delta": [float(v) for v in truth["delta"]],
        "support": list(truth["support"]),
    }


def write_truth(path, config, tau, truth, tau_path=None):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(truth_sidecar(config, tau, truth), fh, indent=1, sort_keys=True)
        fh.write("\n")
    if tau_path is not None:
        np.savetxt(tau_path, tau, fmt="%.17g", header="tau", comments="")
