"""Quota-constrained treatment assignment rules and their evaluation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from .exceptions import ValidationError
from .inference import cluster_codes, population_sd, replicate_counts

RULES = ("observed", "random", "best_case", "worst_case", "predicate_with_fill")


@dataclass(frozen=True)
class PolicyRule:
    """Assign exactly ``quota`` units.

    ``predicate`` names the flag columns used by ``predicate_with_fill``:
    everyone in the first group is assigned, remaining slots are filled at
    random from the second group and then from everyone else.
    """

    kind: str
    quota: int
    predicate: tuple = ()
    seed: int = 0
    label: Optional[str] = None

    def __post_init__(self):
        if self.kind not in RULES:
            raise ValidationError(f"unknown rule {self.kind!r}; choose from {RULES}")
        if int(self.quota) < 1:
            raise ValidationError("quota must be a positive integer")
        if self.kind == "predicate_with_fill" and not self.predicate:
            raise ValidationError("predicate_with_fill needs at least one flag column")

    @property
    def name(self):
        return self.label or self.kind


def _ranked(cate, obs_ids, largest):
    # lexsort: last key is primary; ties resolved by ascending obs_id
    key = -cate if largest else cate
    return np.lexsort((obs_ids, key))


def select_participants(rule: PolicyRule, cate, flags=None, treated=None, obs_ids=None,
                        seed=None):
    """Indices (sorted) of the ``rule.quota`` units the rule assigns.

    Parameters
    ----------
    rule : PolicyRule
    cate : array-like of shape (N,)
        Bagged CATEs.
    flags : mapping of name to boolean array, optional
        Columns referenced by ``rule.predicate``.
    treated : array-like of bool, optional
        Realized treatment, needed by the ``observed`` rule.
    obs_ids : array-like, optional
        Tie-breaking keys for ranked rules; defaults to row order.
    seed : int, optional
        Overrides ``rule.seed``.
    """
    cate = np.asarray(cate, dtype=float)
    n = cate.size
    q = int(rule.quota)
    if q > n:
        raise ValidationError(f"quota {q} exceeds the {n} available units")
    ids = np.arange(n) if obs_ids is None else np.asarray(obs_ids)
    rng = np.random.default_rng(rule.seed if seed is None else seed)
    if rule.kind == "observed":
        if treated is None:
            raise ValidationError("the observed rule needs the realized treatment")
        sel = np.flatnonzero(np.asarray(treated).astype(bool))
        if sel.size != q:
            raise ValidationError(f"observed rule assigns {sel.size} units but the quota is {q}")
    elif rule.kind == "random":
        sel = rng.choice(n, size=q, replace=False)
    elif rule.kind == "best_case":
        sel = _ranked(cate, ids, largest=True)[:q]
    elif rule.kind == "worst_case":
        sel = _ranked(cate, ids, largest=False)[:q]
    else:
        if flags is None:
            raise ValidationError("predicate_with_fill needs flag columns")
        groups = []
        for name in rule.predicate:
            if name not in flags:
                raise ValidationError(f"unknown flag column {name!r}")
            groups.append(np.asarray(flags[name]).astype(bool))
        for i in range(len(groups)):
            for j in range(i + 1, len(groups)):
                if np.any(groups[i] & groups[j]):
                    raise ValidationError("predicate groups must be disjoint")
        primary = np.flatnonzero(groups[0])
        if primary.size > q:
            raise ValidationError(f"primary group has {primary.size} units, more than the quota {q}")
        chosen = [primary]
        taken = groups[0].copy()
        short = q - primary.size
        for g in groups[1:] + [np.ones(n, dtype=bool)]:
            if short == 0:
                break
            pool = np.flatnonzero(g & ~taken)
            k = min(short, pool.size)
            pick = rng.choice(pool, size=k, replace=False)
            chosen.append(pick)
            taken[pick] = True
            short -= k
        sel = np.concatenate(chosen)
    return np.sort(sel)


def evaluate_rule(selection, cate):
    """Mean CATE over the selected units (the hypothetical ATET under the rule)."""
    selection = np.asarray(selection, dtype=int)
    if selection.size == 0:
        raise ValidationError("empty selection")
    return float(np.asarray(cate, dtype=float)[selection].mean())


def policy_table(rules: Sequence[PolicyRule], cate, flags=None, treated=None, obs_ids=None):
    """One row per rule: mean CATE of the assigned units and the selection size."""
    rows = []
    for rule in rules:
        sel = select_participants(rule, cate, flags, treated, obs_ids)
        rows.append({"rule": rule.name, "mean_cate": evaluate_rule(sel, cate),
                     "n_selected": int(sel.size)})
    return pd.DataFrame(rows, columns=["rule", "mean_cate", "n_selected"])


def sign_group_profile(cate, characteristics, names=None, clusters=None, B=200, seed=0):
    """Mean characteristics of units with nonnegative versus negative CATEs.

    Sign groups are fixed at their full-sample assignment; the SE of each
    difference is the divisor-B standard deviation of the difference over
    cluster bootstrap replicates. If a sign group is empty its means and
    all SEs are NaN and ``empty_group`` names it.

    Returns
    -------
    DataFrame with columns ``characteristic``, ``mean_nonneg``,
    ``mean_neg``, ``difference``, ``se``, ``empty_group``.
    """
    cate = np.asarray(cate, dtype=float)
    X = np.asarray(characteristics, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n, k = X.shape
    names = list(names) if names is not None else [f"x{j}" for j in range(k)]
    pos = cate >= 0
    empty = "negative" if pos.all() else ("nonneg" if not pos.any() else "")
    mean_pos = X[pos].mean(axis=0) if pos.any() else np.full(k, np.nan)
    mean_neg = X[~pos].mean(axis=0) if (~pos).any() else np.full(k, np.nan)
    se = np.full(k, np.nan)
    if not empty:
        codes = cluster_codes(clusters, n)
        diffs = []
        for b in range(B):
            f = replicate_counts(codes, seed, b)
            fp, fn = f * pos, f * ~pos
            if fp.sum() == 0 or fn.sum() == 0:
                continue
            diffs.append(fp @ X / fp.sum() - fn @ X / fn.sum())
        if len(diffs) >= 2:
            se = population_sd(np.vstack(diffs), axis=0)
    return pd.DataFrame({"characteristic": names, "mean_nonneg": mean_pos, "mean_neg": mean_neg,
                         "difference": mean_pos - mean_neg, "se": se,
                         "empty_group": [empty] * k})
