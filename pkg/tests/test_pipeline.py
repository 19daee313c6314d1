import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hetfx import pipeline, propensity, synth
from hetfx.effects import SelectorConfig
from hetfx.exceptions import ValidationError
from hetfx.pipeline import PipelineConfig


def _prep(ds):
    p = propensity.fit_logit(ds.confounders, ds.treatment).predict(ds.confounders)
    return p, propensity.ipw_weights(p, ds.treatment)


def test_singletons_split_in_halves():
    tr, es = pipeline.honest_split(10, np.arange(10), seed=4)
    assert tr.size == 5 and es.size == 5
    assert np.intersect1d(tr, es).size == 0
    assert np.array_equal(np.sort(np.r_[tr, es]), np.arange(10))
    a = pipeline.honest_split(10, None, seed=4)
    np.testing.assert_array_equal(a[0], pipeline.honest_split(10, None, seed=4)[0])


def test_single_cluster_cannot_split():
    with pytest.raises(ValidationError):
        pipeline.honest_split(10, np.zeros(10), seed=0)
    with pytest.raises(ValidationError):
        pipeline.honest_split(1)


@given(st.integers(0, 10 ** 6))
def test_greedy_balance_bound(seed):
    rng = np.random.default_rng(seed)
    sizes = rng.integers(1, 60, 100)
    clusters = np.repeat(np.arange(100), sizes)
    tr, es = pipeline.honest_split(clusters.size, clusters, seed=seed)
    share = tr.size / clusters.size
    assert abs(share - 0.5) <= sizes.max() / clusters.size
    for c in range(100):
        inside = np.isin(np.flatnonzero(clusters == c), tr)
        assert inside.all() or not inside.any()


@pytest.fixture(scope="module")
def obs_run(small_obs):
    ds, tau, _ = small_obs
    p, w = _prep(ds)
    cfg = PipelineConfig(n_splits=4, selector=SelectorConfig(n_folds=5), seed=21)
    res = pipeline.run_pipeline(ds.outcomes[:, 0], ds.treatment, ds.heterogeneity, w, cfg,
                                p_hat=p, clusters=ds.cluster_ids)
    return ds, p, w, cfg, res


def test_split_invariants(obs_run):
    ds, _, _, cfg, res = obs_run
    assert len(res.splits) == cfg.n_splits
    for r in res.splits:
        assert np.intersect1d(r.train, r.estimation).size == 0
        assert r.train.size + r.estimation.size == ds.n
        nz = set(np.flatnonzero(r.delta))
        assert nz <= set(r.selected) | {0}
        np.testing.assert_allclose(r.predictions, ds.heterogeneity @ r.delta)


def test_bagging_is_exact_mean(obs_run):
    ens = obs_run[4].ensemble
    assert np.array_equal(ens.cate, ens.predictions.mean(axis=0))
    assert ens.n_splits == 4


def test_group_average_linearity(obs_run):
    ds, _, _, _, res = obs_run
    G = ds.treatment == 1
    bagged = np.mean([r.predictions[G].mean() for r in res.splits])
    assert pipeline.group_average(res.ensemble, G) == pytest.approx(bagged, abs=1e-12)
    assert pipeline.group_average(res.ensemble, np.ones(ds.n)) == pytest.approx(
        res.ensemble.cate.mean(), abs=1e-15)
    one = np.zeros(ds.n, bool)
    one[7] = True
    assert pipeline.group_average(res.ensemble, one) == res.ensemble.cate[7]
    with pytest.raises(ValidationError):
        pipeline.group_average(res.ensemble, np.zeros(ds.n))


def test_bag_examples():
    r1 = pipeline.SplitResult(0, np.arange(1), np.arange(1, 2), (), np.zeros(1), np.array([1.0]))
    r3 = pipeline.SplitResult(1, np.arange(1), np.arange(1, 2), (), np.zeros(1), np.array([3.0]))
    assert pipeline.bag_cates([r1]).cate[0] == 1.0
    assert pipeline.bag_cates([r1, r3]).cate[0] == 2.0
    bad = pipeline.SplitResult(2, np.arange(1), np.arange(1, 2), (), np.zeros(1), np.zeros(2))
    with pytest.raises(ValidationError):
        pipeline.bag_cates([r1, bad])


def test_constant_only_split_is_estimation_half_ate(small_obs):
    ds = small_obs[0]
    p, w = _prep(ds)
    y = ds.outcomes[:, 0]
    cfg = PipelineConfig(n_splits=1, selector=SelectorConfig(kind="fixed-lambda", lam=1e12))
    r = pipeline.run_split(y, ds.treatment, ds.heterogeneity, w, cfg, 0,
                           clusters=ds.cluster_ids)
    e = r.estimation
    we = propensity.normalize_within_groups(w[e], ds.treatment[e])
    d = ds.treatment[e] == 1
    ate = np.sum(we[d] * y[e][d]) - np.sum(we[~d] * y[e][~d])
    assert r.selected == ()
    np.testing.assert_allclose(r.predictions, ate, atol=1e-10)


def test_zero_outcome(small_obs):
    ds = small_obs[0]
    p, w = _prep(ds)
    cfg = PipelineConfig(n_splits=2, selector=SelectorConfig(n_folds=5))
    res = pipeline.run_pipeline(np.zeros(ds.n), ds.treatment, ds.heterogeneity, w, cfg,
                                clusters=ds.cluster_ids)
    assert np.all(res.ensemble.cate == 0)


@pytest.mark.parametrize("ea", ["none", "one_step", "two_step"])
def test_honesty_under_permuted_estimation_outcomes(small_obs, ea):
    ds = small_obs[0]
    p, w = _prep(ds)
    y = ds.outcomes[:, 0].copy()
    cfg = PipelineConfig(ea_mode=ea, n_splits=3, selector=SelectorConfig(n_folds=5), seed=5)
    base = pipeline.run_pipeline(y, ds.treatment, ds.heterogeneity, w, cfg,
                                 clusters=ds.cluster_ids)
    rng = np.random.default_rng(0)
    for r in base.splits:
        y2 = y.copy()
        y2[r.estimation] = rng.permutation(y[r.estimation])
        again = pipeline.run_split(y2, ds.treatment, ds.heterogeneity, w, cfg, r.s,
                                   clusters=ds.cluster_ids)
        assert again.selected == r.selected
        assert again.main_selected == r.main_selected


def test_determinism_and_workers(small_obs):
    ds = small_obs[0]
    p, w = _prep(ds)
    cfg = PipelineConfig(n_splits=3, selector=SelectorConfig(n_folds=5), seed=9)
    args = (ds.outcomes[:, 0], ds.treatment, ds.heterogeneity, w, cfg)
    a = pipeline.run_pipeline(*args, clusters=ds.cluster_ids)
    b = pipeline.run_pipeline(*args, clusters=ds.cluster_ids, workers=3)
    assert a.ensemble.predictions.tobytes() == b.ensemble.predictions.tobytes()
    # counter-based seeds: adding splits keeps earlier ones
    c = pipeline.run_pipeline(*args[:4], cfg.__class__(**{**cfg.__dict__, "n_splits": 4}),
                              clusters=ds.cluster_ids)
    assert np.array_equal(c.ensemble.predictions[:3], a.ensemble.predictions)


def test_oracle_split_quality(rct_linear):
    ds, tau, _ = rct_linear
    w = propensity.ipw_weights(np.full(ds.n, 0.5), ds.treatment)
    cfg = PipelineConfig(n_splits=6, seed=1)
    res = pipeline.run_pipeline(ds.outcomes[:, 0], ds.treatment, ds.heterogeneity, w, cfg,
                                clusters=ds.cluster_ids)
    P = res.ensemble.predictions
    assert all(np.corrcoef(P[s], tau)[0, 1] > 0.6 for s in range(P.shape[0]))
    assert np.all(P.std(axis=0) > 0)
    r = np.corrcoef(P)
    assert r[np.triu_indices(P.shape[0], 1)].mean() > 0.5


def test_mom_pipeline_and_tags(small_obs):
    ds = small_obs[0]
    p, w = _prep(ds)
    cfg = PipelineConfig(method="mom", n_splits=2, selector=SelectorConfig(n_folds=5))
    assert cfg.tag == "MOM"
    res = pipeline.run_pipeline(ds.outcomes[:, 0], ds.treatment, ds.heterogeneity, w, cfg,
                                p_hat=p, clusters=ds.cluster_ids)
    assert np.all(np.isfinite(res.ensemble.cate))
    with pytest.raises(ValidationError):
        PipelineConfig(method="mom", ea_mode="two_step")
    assert PipelineConfig(selector=SelectorConfig(kind="cv-adaptive-lasso")).tag == \
        "MCM-none-adaptive"


def test_save_ensemble(obs_run, tmp_path):
    ds, _, _, _, res = obs_run
    pipeline.save_ensemble(res, tmp_path / "m.json", tmp_path / "p.csv",
                           names=ds.heterogeneity_names)
    back = np.loadtxt(tmp_path / "p.csv", delimiter=",", skiprows=1)
    assert np.array_equal(back.T, res.ensemble.predictions)
