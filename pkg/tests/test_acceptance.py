"""End-to-end acceptance suite.

Run alone with ``pytest tests/test_acceptance.py -s`` to see one PASS/FAIL
line per criterion as it finishes; the lines are also repeated in the
terminal summary of any run that includes this file.
"""

import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hetfx import cli, data, effects, inference, pipeline, policy, propensity, reporting, solvers, synth
from hetfx.effects import SelectorConfig

pytestmark = pytest.mark.acceptance

PRESETS = synth.default_configs()


def ipw_setup(ds, trim=True):
    """Logit propensity, optional common-support trim and group-normalized weights."""
    p = propensity.fit_logit(ds.confounders, ds.treatment).predict(ds.confounders)
    rows = (propensity.trim_common_support(p, ds.treatment).retained if trim
            else np.arange(ds.n))
    return rows, p[rows], propensity.ipw_weights(p[rows], ds.treatment[rows])


@pytest.fixture(scope="module")
def rct():
    ds, tau, _ = synth.generate(PRESETS["rct-linear"])
    _, p, w = ipw_setup(ds, trim=False)
    return ds, tau, p, w


# ---------------------------------------------------------------------------
# 1. weight normalization
# ---------------------------------------------------------------------------

_worst_weight_error = []


@settings(max_examples=60, deadline=None)
@given(n=st.integers(200, 3000), a=st.tuples(*[st.floats(-1.5, 1.5)] * 3),
       a0=st.floats(-1.0, 1.0), seed=st.integers(0, 2**32 - 1), trim=st.booleans())
def _weight_sums(n, a, a0, seed, trim):
    ds, _, _ = synth.generate(synth.DgpConfig(n=n, p=6, s=2, a=a, a0=a0, seed=seed))
    rows, _, w = ipw_setup(ds, trim)
    d = ds.treatment[rows].astype(bool)
    err = max(abs(w[d].sum() - 1.0), abs(w[~d].sum() - 1.0))
    _worst_weight_error.append(err)
    assert err <= 1e-12


def test_c01_weights_sum_to_one_within_groups(verdict):
    _worst_weight_error.clear()
    try:
        _weight_sums()
        ok = True
    except AssertionError:
        ok = False
    for cfg in PRESETS.values():
        ds, _, _ = synth.generate(cfg)
        rows, _, w = ipw_setup(ds)
        d = ds.treatment[rows].astype(bool)
        _worst_weight_error.append(max(abs(w[d].sum() - 1), abs(w[~d].sum() - 1)))
    worst = max(_worst_weight_error)
    verdict(1, "IPW weights sum to 1 within groups", ok and worst <= 1e-12,
            f"max |error| = {worst:.1e} over {len(_worst_weight_error)} datasets")


# ---------------------------------------------------------------------------
# 2. constant-only identity
# ---------------------------------------------------------------------------

def test_c02_constant_only_mcm_is_ipw_ate(verdict):
    diffs = []
    for name in ("obs-sparse", "rct-linear", "null"):
        ds, _, _ = synth.generate(PRESETS[name])
        rows, p, w = ipw_setup(ds)
        y, D = ds.outcome(0)[rows], ds.treatment[rows].astype(bool)
        fit = effects.fit_mcm(y, D, np.ones((y.size, 1)), w,
                              selector=SelectorConfig(kind="fixed-lambda", lam=0.0))
        # oracle: normalized IPW contrast written out directly
        ate = (np.sum(y[D] / p[D]) / np.sum(1 / p[D])
               - np.sum(y[~D] / (1 - p[~D])) / np.sum(1 / (1 - p[~D])))
        diffs.append(abs(fit.delta[0] - ate))
        diffs.append(abs(fit.delta[0] - inference.estimate_averages(y, D, p)["ATE"].value))
    worst = max(diffs)
    verdict(2, "constant-only MCM reproduces the IPW ATE", worst <= 1e-10,
            f"max |difference| = {worst:.1e}")


# ---------------------------------------------------------------------------
# 3. unpenalized limit and lambda_max
# ---------------------------------------------------------------------------

def kkt_lambda_max(X, y, w, unpenalized):
    """Independent oracle: partial out unpenalized columns by lstsq, then 2|X_c' W y_c|."""
    sw = np.sqrt(w)
    U = X[:, unpenalized] * sw[:, None]
    Q, _ = np.linalg.qr(U)
    def resid(v):
        v = v * sw if v.ndim == 1 else v * sw[:, None]
        return v - Q @ (Q.T @ v)
    P = [j for j in range(X.shape[1]) if j not in unpenalized]
    return float(np.max(2 * np.abs(resid(X[:, P]).T @ resid(y))))


def test_c03_unpenalized_limit_and_lambda_max(verdict, rct):
    ds, _, _, w = rct
    problems = [(effects.mcm_transform(ds.treatment, ds.heterogeneity).modified, ds.outcome(0), w, [0])]
    rng = np.random.default_rng(3)
    X = np.column_stack([np.ones(800), rng.normal(size=(800, 9))])
    y = X[:, :4] @ [1.0, 2.0, -1.0, 0.5] + rng.normal(size=800)
    problems.append((X, y, rng.uniform(0.2, 3.0, 800), [0]))
    problems.append((X, y, rng.uniform(0.2, 3.0, 800), [0, 2]))
    rel, exact_zero, active_below, oracle_gap = [], True, True, []
    for X, y, w, unpen in problems:
        load = np.ones(X.shape[1])
        load[unpen] = 0.0
        b0 = solvers.weighted_lasso(X, y, w, 0.0, penalty_loadings=load, tol=1e-12)
        ref = solvers.wols_fit(X, y, w)
        rel.append(np.linalg.norm(b0 - ref) / np.linalg.norm(ref))
        lmax = kkt_lambda_max(X, y, w, unpen)
        oracle_gap.append(abs(solvers.lambda_max(X, y, w, load) - lmax) / lmax)
        pen = load > 0
        for lam in (lmax, 1.5 * lmax, 10 * lmax):
            exact_zero &= bool(np.all(solvers.weighted_lasso(X, y, w, lam, load)[pen] == 0.0))
        active_below &= bool(np.any(solvers.weighted_lasso(X, y, w, 0.95 * lmax, load)[pen] != 0))
    ok = max(rel) <= 1e-6 and exact_zero and active_below and max(oracle_gap) <= 1e-8
    verdict(3, "lambda=0 matches WOLS; lambda>=lambda_max gives exact zeros", ok,
            f"max rel error {max(rel):.1e}, zeros at lambda_max: {exact_zero}, "
            f"lambda_max vs oracle {max(oracle_gap):.1e}")


# ---------------------------------------------------------------------------
# 4. oracle recovery on rct-linear
# ---------------------------------------------------------------------------

def test_c04_oracle_recovery(verdict, rct):
    ds, tau, p, w = rct
    res = pipeline.run_pipeline(ds.outcome(0), ds.treatment, ds.heterogeneity, w,
                                pipeline.PipelineConfig(seed=4), p_hat=p, clusters=ds.cluster_ids)
    g = res.ensemble.cate
    corr = np.corrcoef(g, tau)[0, 1]
    rmse = np.sqrt(np.mean((g - tau) ** 2)) / tau.std()
    # brute-force oracle: WOLS on the true support with the full sample
    truth = PRESETS["rct-linear"].delta_vector()
    support = [0] + list(np.flatnonzero(truth[1:]) + 1)
    X = effects.mcm_transform(ds.treatment, ds.heterogeneity[:, support]).modified
    oracle = ds.heterogeneity[:, support] @ solvers.wols_fit(X, ds.outcome(0), w)
    oracle_rmse = np.sqrt(np.mean((oracle - tau) ** 2)) / tau.std()
    verdict(4, "rct-linear recovery: corr >= 0.9, RMSE <= 0.15 sd(tau)",
            corr >= 0.9 and rmse <= 0.15,
            f"corr {corr:.4f}, RMSE/sd {rmse:.4f}, oracle RMSE/sd {oracle_rmse:.4f}")


# ---------------------------------------------------------------------------
# 5. support recovery on obs-sparse
# ---------------------------------------------------------------------------

@pytest.mark.slow
def test_c05_support_recovery(verdict):
    base = PRESETS["obs-sparse"]
    hits = 0
    for i in range(20):
        ds, _, truth = synth.generate(base.with_(seed=base.seed + i))
        rows, _, w = ipw_setup(ds)
        fit = effects.fit_mcm(ds.outcome(0)[rows], ds.treatment[rows], ds.heterogeneity[rows], w,
                              seed=i, clusters=ds.cluster_ids[rows])
        hits += set(truth["support"]) <= set(fit.selected)
    verdict(5, "CV-Post-LASSO keeps the 5 true columns in >= 16/20 runs", hits >= 16,
            f"{hits}/20")


# ---------------------------------------------------------------------------
# 6. confounding is real and removed
# ---------------------------------------------------------------------------

@pytest.mark.slow
def test_c06_confounding_removed(verdict):
    base = PRESETS["obs-sparse"]
    bias = []
    for i in range(50):
        ds, _, truth = synth.generate(base.with_(seed=base.seed + i))
        d, y = ds.treatment == 1, ds.outcome(0)
        bias.append(y[d].mean() - y[~d].mean() - truth["ate"])
    bias = np.array(bias)
    mc_se = bias.std(ddof=1)      # sampling sd of a single naive estimate
    ds, tau, _ = synth.generate(base)
    rows, p, _ = ipw_setup(ds)
    boot = inference.bootstrap_averages(
        ds.outcome(0)[rows], ds.treatment[rows], ds.confounders[rows], p, ds.cluster_ids[rows],
        inference.BootstrapConfig(B=999, seed=6, reestimate_propensity=True))
    ate = boot.estimates["ATE"]
    gap = abs(ate.value - tau[rows].mean())
    ok = abs(bias.mean()) > 3 * mc_se and gap < 3 * ate.se
    verdict(6, "naive bias > 3 MC SE and |IPW - ATE| < 3 bootstrap SE", ok,
            f"naive bias {bias.mean():.3f} vs MC SE {mc_se:.3f}; IPW gap {gap:.3f} "
            f"vs SE {ate.se:.3f}")


# ---------------------------------------------------------------------------
# 7. bootstrap coverage of the overall group-average CATE
# ---------------------------------------------------------------------------

@pytest.mark.slow
def test_c07_bootstrap_coverage(verdict):
    base = PRESETS["obs-sparse"]
    covered, ses, points = 0, [], []
    for i in range(50):
        ds, _, truth = synth.generate(base.with_(seed=5000 + i))
        rows, p, w = ipw_setup(ds)
        y, D, Z, cl = ds.outcome(0)[rows], ds.treatment[rows], ds.heterogeneity[rows], ds.cluster_ids[rows]
        res = pipeline.run_pipeline(y, D, Z, w, pipeline.PipelineConfig(n_splits=10, seed=i),
                                    p_hat=p, clusters=cl)
        boot = inference.bootstrap_cates(res, D, Z, cl, config=inference.BootstrapConfig(B=200, seed=i))
        point, se = boot.group_point["all"], boot.group_se["all"]
        covered += abs(point - truth["delta"][0]) <= 1.959963984540054 * se
        points.append(point)
        ses.append(se)
    rate = covered / 50
    verdict(7, "95% interval coverage of the group-average CATE in [0.85, 1]",
            0.85 <= rate <= 1.0,
            f"coverage {rate:.2f}; MC sd {np.std(points, ddof=1):.4f}, mean SE {np.mean(ses):.4f}")


# ---------------------------------------------------------------------------
# 8. policy ordering
# ---------------------------------------------------------------------------

def test_c08_policy_ordering(verdict):
    designs = {
        "rct-linear": PRESETS["rct-linear"].with_(n=3000),
        "obs-sparse": PRESETS["obs-sparse"].with_(n=3000, p=40),
        "null": PRESETS["null"].with_(n=2000),
    }
    checks, failures, observed_order = 0, [], 0
    for name, cfg in designs.items():
        for seed in range(3):
            ds, _, _ = synth.generate(cfg.with_(seed=cfg.seed + seed))
            rows, p, w = ipw_setup(ds)
            sub = ds.subset(rows)
            res = pipeline.run_pipeline(sub.outcome(0), sub.treatment, sub.heterogeneity, w,
                                        pipeline.PipelineConfig(n_splits=3, seed=seed), p_hat=p,
                                        clusters=sub.cluster_ids)
            cate, n, n_t = res.ensemble.cate, sub.n, int(sub.treatment.sum())
            for quota in sorted({1, n // 10, n // 2, n_t, n}):
                vals = {}
                for kind in ("best_case", "random", "worst_case"):
                    rule = policy.PolicyRule(kind, quota, seed=seed)
                    sel = policy.select_participants(rule, cate, obs_ids=sub.obs_ids)
                    if sel.size != quota or np.unique(sel).size != quota:
                        failures.append((name, seed, quota, kind, "quota"))
                    vals[kind] = policy.evaluate_rule(sel, cate)
                checks += 1
                if not vals["best_case"] >= vals["random"] >= vals["worst_case"]:
                    failures.append((name, seed, quota, "order"))
                if quota == n_t:
                    obs = policy.evaluate_rule(np.flatnonzero(sub.treatment), cate)
                    observed_order += vals["best_case"] >= obs >= vals["worst_case"]
    verdict(8, "best >= random >= worst with the quota met exactly", not failures,
            f"{checks} dataset/seed/quota cases, {len(failures)} failures; observed rule "
            f"between best and worst in {observed_order}/9")


# ---------------------------------------------------------------------------
# 9. honesty
# ---------------------------------------------------------------------------

def test_c09_permuting_estimation_outcomes_keeps_selection(verdict):
    ds, _, _ = synth.generate(PRESETS["obs-sparse"].with_(n=3000, p=40))
    rows, p, w = ipw_setup(ds)
    sub = ds.subset(rows)
    y, D, Z, cl = sub.outcome(0), sub.treatment, sub.heterogeneity, sub.cluster_ids
    rng = np.random.default_rng(9)
    identical, moved, cases = True, 0, 0
    for method, ea in (("mcm", "none"), ("mcm", "one_step"), ("mcm", "two_step"), ("mom", "none")):
        cfg = pipeline.PipelineConfig(method=method, ea_mode=ea, n_splits=4, seed=9)
        for s in range(cfg.n_splits):
            ref = pipeline.run_split(y, D, Z, w, cfg, s, p_hat=p, clusters=cl)
            y_perm = y.copy()
            y_perm[ref.estimation] = rng.permutation(y[ref.estimation])
            alt = pipeline.run_split(y_perm, D, Z, w, cfg, s, p_hat=p, clusters=cl)
            identical &= (alt.selected == ref.selected and alt.main_selected == ref.main_selected
                          and np.array_equal(alt.train, ref.train) and alt.lam == ref.lam)
            moved += not np.array_equal(alt.delta, ref.delta)
            cases += 1
    verdict(9, "permuting estimation-half outcomes leaves selection bit-identical",
            identical and moved == cases,
            f"{cases} splits identical: {identical}; refit coefficients changed in {moved}")


# ---------------------------------------------------------------------------
# 10. determinism through the command line
# ---------------------------------------------------------------------------

CLI_CONFIG = """
seed = 2024
[simulate]
preset = "obs-sparse"
n = 2000
p = 40
[fit]
n_splits = 4
[bootstrap]
B = 50
B_averages = 50
[report]
characteristics = ["x1", "x2", "x3"]
"""


@pytest.fixture(scope="module")
def cli_runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("acceptance_cli")
    cfg = base / "config.toml"
    cfg.write_text(CLI_CONFIG)
    outs = {}
    for label, workers in (("first", 1), ("second", 1), ("parallel", 4)):
        codes = [cli.main([cmd, "--config", str(cfg), "--out", str(base / label),
                           "--workers", str(workers)]) for cmd in cli.COMMANDS]
        outs[label] = (base / label, codes)
    return outs


def _files(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_c10_byte_identical_outputs(verdict, cli_runs):
    ok_codes = all(code == 0 for _, codes in cli_runs.values() for code in codes)
    ref = _files(cli_runs["first"][0])
    same = [_files(cli_runs[k][0]) == ref for k in ("second", "parallel")]
    verdict(10, "identical config and seed give byte-identical outputs (also with 4 workers)",
            ok_codes and all(same) and len(ref) > 10,
            f"{len(ref)} files compared; rerun identical {same[0]}, parallel identical {same[1]}")


# ---------------------------------------------------------------------------
# 11. agreement across variants
# ---------------------------------------------------------------------------

VARIANTS = {
    "MCM-none": ("mcm", "none", "cv-lasso"),
    "MCM-one-step": ("mcm", "one_step", "cv-lasso"),
    "MCM-two-step": ("mcm", "two_step", "cv-lasso"),
    "MOM": ("mom", "none", "cv-lasso"),
    "MCM-none-adaptive": ("mcm", "none", "cv-adaptive-lasso"),
}


def test_c11_variants_agree(verdict, rct):
    ds, _, p, w = rct
    cates = {}
    for tag, (method, ea, kind) in VARIANTS.items():
        cfg = pipeline.PipelineConfig(method=method, ea_mode=ea, selector=SelectorConfig(kind=kind),
                                      seed=11)
        cates[tag] = pipeline.run_pipeline(ds.outcome(0), ds.treatment, ds.heterogeneity, w, cfg,
                                           p_hat=p, clusters=ds.cluster_ids).ensemble.cate
    R = reporting.correlate_methods(cates).to_numpy()
    low = R[np.triu_indices(len(cates), 1)].min()
    verdict(11, "pairwise CATE correlations across 5 variants >= 0.5", low >= 0.5,
            f"smallest pairwise correlation {low:.4f}")


# ---------------------------------------------------------------------------
# 12. standardized difference
# ---------------------------------------------------------------------------

def test_c12_standardized_difference(verdict, cli_runs):
    ds, _, _ = synth.generate(PRESETS["obs-sparse"])
    d = ds.treatment.astype(bool)
    table = data.balance_table(ds)
    gaps = []
    for j in range(ds.confounders.shape[1]):
        a, b = ds.confounders[d, j], ds.confounders[~d, j]
        oracle = 100 * abs(a.mean() - b.mean()) / np.sqrt((a.var(ddof=1) + b.var(ddof=1)) / 2)
        gaps.append(abs(data.standardized_difference(a, b) - oracle))
        gaps.append(abs(table["std_diff"].iloc[j] - oracle))
    worst = max(gaps)
    report = json.loads((cli_runs["first"][0] / "report" / "report.json").read_text())
    note = report.get("std_diff_note", "")
    header = (cli_runs["first"][0] / "report" / "balance.csv").read_text().splitlines()[0].split(",")
    documented = "sqrt(2)" in note and {"std_diff", "std_diff_alt"} <= set(header)
    verdict(12, "standardized difference matches the one-line oracle; convention documented",
            worst <= 1e-12 and documented,
            f"max |difference| {worst:.1e}; note present {documented}")
