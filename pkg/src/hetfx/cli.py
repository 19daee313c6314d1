"""Command line interface: ``hetfx {simulate,fit,infer,report,policy}``.

Every command reads one TOML config, writes into ``<out>/<command>/`` and
finishes with a ``manifest.json`` holding the config hash, seed, library
version and a SHA-256 of every artifact. Identical config and seed give
byte-identical outputs regardless of the worker count.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import pandas as pd

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__, inference, pipeline, policy, reporting, synth
from .data import Dataset, FeatureSpec, balance_table, expand_features, load_dataset, \
    screen_features, write_dataset
from .effects import SelectorConfig
from .exceptions import HetfxError, ManifestError, SchemaError, ValidationError
from .propensity import average_marginal_effects, fit_logit, ipw_weights, trim_common_support

logger = logging.getLogger("hetfx")

COMMANDS = ("simulate", "fit", "infer", "report", "policy")

DEFAULTS = {
    "seed": None,
    "simulate": {"preset": "rct-linear"},
    "data": {},
    "features": {"expand": False, "screen": True, "interaction_order": 2, "polynomial_order": 4,
                 "log_transform": True, "share_min": 0.01, "corr_max": 0.99},
    "propensity": {"trim": True, "lower_pct": 0.5, "upper_pct": 99.5,
                   "include_heterogeneity": False, "std_diff_denominator": "average"},
    "fit": {"method": "mcm", "ea_mode": "none", "selector": "cv-lasso", "n_splits": 30,
            "n_folds": 10, "renormalize": True, "mom_weighted": False, "lam": None,
            "penalty_scale": "raw", "criterion": "post_lasso", "gamma": 1.0},
    "bootstrap": {"B": 1000, "B_averages": 4999, "reestimate_propensity_averages": True,
                  "reestimate_propensity_cates": False},
    "report": {"characteristics": None, "bins": 50, "bandwidth": "auto",
               "variants": ["MCM-none", "MCM-one-step", "MCM-two-step", "MOM",
                            "MCM-none-adaptive"]},
    "policy": {"quota": None, "rules": [{"kind": "observed"}, {"kind": "random"},
                                        {"kind": "best_case"}, {"kind": "worst_case"}]},
}

# config sections each stage depends on; a downstream stage refuses to run
# when the upstream key recorded in its manifest differs
STAGE_SECTIONS = {
    "simulate": ("seed", "simulate"),
    "fit": ("seed", "simulate", "data", "features", "propensity", "fit"),
    "infer": ("seed", "simulate", "data", "features", "propensity", "fit", "bootstrap"),
}


# ---------------------------------------------------------------------------
# config and manifests
# ---------------------------------------------------------------------------

def _merge(base, override):
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path=None, seed=None):
    """Read a TOML config, fill defaults and apply a seed override."""
    raw = {}
    if path is not None:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    unknown = set(raw) - set(DEFAULTS) - {"out", "workers"}
    if unknown:
        raise SchemaError(f"unknown config sections: {sorted(unknown)}")
    cfg = _merge(DEFAULTS, raw)
    if seed is not None:
        cfg["seed"] = int(seed)
    if cfg["seed"] is None:
        raise SchemaError("a seed is required: set 'seed' in the config or pass --seed")
    return cfg


def _canonical(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str).encode()


def config_hash(cfg, sections=None):
    keep = {k: v for k, v in cfg.items() if k not in ("out", "workers")}
    if sections is not None:
        keep = {k: keep.get(k) for k in sections}
    return hashlib.sha256(_canonical(keep)).hexdigest()


def _sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Stage:
    """Output directory of one command; files are registered as they are written."""

    def __init__(self, root, name, cfg, force=False):
        self.dir = Path(root) / name
        self.name = name
        self.cfg = cfg
        self.outputs = []
        if (self.dir / "manifest.json").exists() and not force:
            raise ManifestError(f"{self.dir} already holds a completed '{name}' run; "
                                "choose another --out or pass --force")
        self.dir.mkdir(parents=True, exist_ok=True)

    def path(self, fname):
        self.outputs.append(fname)
        return self.dir / fname

    def csv(self, fname, frame: pd.DataFrame):
        frame.to_csv(self.path(fname), index=False, float_format="%.17g", lineterminator="\n")

    def json(self, fname, obj):
        with open(self.path(fname), "w", encoding="utf-8") as fh:
            json.dump(obj, fh, indent=1, sort_keys=True, default=_jsonable)
            fh.write("\n")

    def finish(self, extra=None):
        manifest = {
            "command": self.name,
            "version": __version__,
            "seed": self.cfg["seed"],
            "config_sha256": config_hash(self.cfg),
            "stage_keys": {k: config_hash(self.cfg, v) for k, v in STAGE_SECTIONS.items()},
            "outputs": {f: _sha256_file(self.dir / f) for f in sorted(set(self.outputs))},
        }
        if extra:
            manifest.update(extra)
        with open(self.dir / "manifest.json", "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=1, sort_keys=True)
            fh.write("\n")
        return manifest


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


def require_stage(root, name, cfg):
    """Load the manifest of an upstream stage and check it matches ``cfg``."""
    mpath = Path(root) / name / "manifest.json"
    if not mpath.exists():
        raise ManifestError(f"missing {mpath}; run 'hetfx {name}' with this config first")
    with open(mpath, encoding="utf-8") as fh:
        manifest = json.load(fh)
    want = config_hash(cfg, STAGE_SECTIONS[name])
    if manifest.get("stage_keys", {}).get(name) != want:
        raise ManifestError(f"{mpath} was produced with a different configuration; "
                            f"rerun 'hetfx {name}'")
    for fname, digest in manifest["outputs"].items():
        fpath = mpath.parent / fname
        if not fpath.exists() or _sha256_file(fpath) != digest:
            raise ManifestError(f"{fpath} is missing or was modified after '{name}' ran")
    return manifest


# ---------------------------------------------------------------------------
# shared preparation
# ---------------------------------------------------------------------------

def _dgp_config(cfg):
    sim = dict(cfg["simulate"])
    preset = sim.pop("preset", None)
    presets = synth.default_configs()
    if preset is not None and preset not in presets:
        raise SchemaError(f"unknown simulate preset {preset!r}; choose from {sorted(presets)}")
    # presets keep their documented seeds; otherwise the master seed drives the draw
    base = presets[preset] if preset else synth.DgpConfig(seed=cfg["seed"])
    valid = {f.name for f in fields(synth.DgpConfig)}
    bad = set(sim) - valid
    if bad:
        raise SchemaError(f"unknown simulate fields: {sorted(bad)}")
    for key in ("a", "delta", "beta"):
        if sim.get(key) is not None:
            sim[key] = tuple(sim[key])
    return base.with_(**sim)


def _load(cfg, root):
    data = cfg["data"]
    if data.get("path"):
        schema = {k: v for k, v in data.items() if k not in ("path", "outcome")}
        return load_dataset(data["path"], schema)
    require_stage(root, "simulate", cfg)
    with open(Path(root) / "simulate" / "schema.json", encoding="utf-8") as fh:
        schema = json.load(fh)
    return load_dataset(Path(root) / "simulate" / "data.csv", schema)


@dataclass
class Prepared:
    dataset: Dataset            # trimmed sample
    y: np.ndarray
    Z: np.ndarray
    z_names: list
    p_hat: np.ndarray
    weights: np.ndarray
    model: object
    trim: object
    full: Dataset
    dropped_features: list


def prepare(cfg, root) -> Prepared:
    full = _load(cfg, root)
    pcfg = cfg["propensity"]
    # optionally condition on X and Z jointly; duplicated columns are dropped by the fit
    Xp = full.confounders
    if pcfg["include_heterogeneity"]:
        Xp = np.hstack([Xp, full.heterogeneity[:, 1:]])
    model = fit_logit(Xp, full.treatment)
    p_full = model.predict(Xp)
    if pcfg["trim"]:
        trim = trim_common_support(p_full, full.treatment, pcfg["lower_pct"], pcfg["upper_pct"])
        rows = trim.retained
    else:
        trim, rows = None, np.arange(full.n)
    ds = full.subset(rows)
    p = p_full[rows]

    fcfg = cfg["features"]
    spec = FeatureSpec(interaction_order=fcfg["interaction_order"],
                       polynomial_order=fcfg["polynomial_order"],
                       log_transform=fcfg["log_transform"], share_min=fcfg["share_min"],
                       corr_max=fcfg["corr_max"])
    Z, names = ds.heterogeneity, list(ds.heterogeneity_names)
    if fcfg["expand"]:
        Z, names = expand_features(Z[:, 1:], spec, names[1:])
    dropped = []
    if fcfg["screen"]:
        Z, kept, dropped = screen_features(Z, spec, ds.treatment, names)
        names = [names[j] for j in kept]

    outcome = cfg["data"].get("outcome")
    y = ds.outcome(outcome if outcome is not None else 0)
    w = ipw_weights(p, ds.treatment)
    return Prepared(ds, y, np.ascontiguousarray(Z), names, p, w, model, trim, full, dropped)


_VARIANTS = {
    "MCM-none": ("mcm", "none", "cv-lasso"),
    "MCM-one-step": ("mcm", "one_step", "cv-lasso"),
    "MCM-two-step": ("mcm", "two_step", "cv-lasso"),
    "MOM": ("mom", "none", "cv-lasso"),
    "MCM-none-adaptive": ("mcm", "none", "cv-adaptive-lasso"),
    "MCM-one-step-adaptive": ("mcm", "one_step", "cv-adaptive-lasso"),
    "MCM-two-step-adaptive": ("mcm", "two_step", "cv-adaptive-lasso"),
    "MOM-adaptive": ("mom", "none", "cv-adaptive-lasso"),
}


def pipeline_config(cfg, method=None, ea_mode=None, selector=None):
    f = cfg["fit"]
    sel = SelectorConfig(kind=selector or f["selector"], n_folds=f["n_folds"], lam=f["lam"],
                         penalty_scale=f["penalty_scale"], criterion=f["criterion"],
                         gamma=f["gamma"])
    return pipeline.PipelineConfig(method=method or f["method"], ea_mode=ea_mode or f["ea_mode"],
                                   selector=sel, n_splits=f["n_splits"],
                                   renormalize=f["renormalize"], mom_weighted=f["mom_weighted"],
                                   seed=cfg["seed"])


def run_fit(prep: Prepared, pcfg, workers):
    return pipeline.run_pipeline(prep.y, prep.dataset.treatment, prep.Z, prep.weights, pcfg,
                                 p_hat=prep.p_hat, clusters=prep.dataset.cluster_ids,
                                 workers=workers)


def _cate_frame(prep, result):
    return pd.DataFrame({"id": prep.dataset.obs_ids, "D": prep.dataset.treatment.astype(int),
                         "p_hat": prep.p_hat, "cate": result.ensemble.cate})


def refit_checked(cfg, root, prep, workers):
    """Recompute the fitted ensemble and confirm it matches the stored one."""
    manifest = require_stage(root, "fit", cfg)
    result = run_fit(prep, pipeline_config(cfg), workers)
    text = _cate_frame(prep, result).to_csv(index=False, float_format="%.17g", lineterminator="\n")
    if hashlib.sha256(text.encode()).hexdigest() != manifest["outputs"]["cate.csv"]:
        raise ManifestError("recomputed CATEs differ from fit/cate.csv; rerun 'hetfx fit'")
    return result


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

STD_DIFF_NOTE = ("std_diff divides the absolute mean difference by sqrt((var_treated + "
                 "var_control) / 2); std_diff_alt divides by sqrt(var_treated + var_control). "
                 "Published balance tables sometimes use the second convention, so their "
                 "values are smaller by a factor of sqrt(2) than the first; compare like "
                 "with like.")


def cmd_simulate(cfg, root, workers=1, force=False):
    dgp = _dgp_config(cfg)
    ds, tau, truth = synth.generate(dgp)
    st = Stage(root, "simulate", cfg, force)
    schema = write_dataset(ds, st.path("data.csv"))
    st.json("schema.json", schema)
    synth.write_truth(st.path("truth.json"), dgp, tau, truth, tau_path=st.path("tau.csv"))
    return st.finish()


def cmd_fit(cfg, root, workers=1, force=False):
    prep = prepare(cfg, root)
    pcfg = pipeline_config(cfg)
    result = run_fit(prep, pcfg, workers)
    st = Stage(root, "fit", cfg, force)
    full, model = prep.full, prep.model
    pnames, Xp = list(full.confounder_names), full.confounders
    if cfg["propensity"]["include_heterogeneity"]:
        pnames += list(full.heterogeneity_names[1:])
        Xp = np.hstack([Xp, full.heterogeneity[:, 1:]])
    st.json("propensity.json", {
        "coef": {"intercept": float(model.coef[0]),
                 **{pnames[j]: float(c) for j, c in zip(model.columns, model.coef[1:])}},
        "marginal_effects": dict(zip([pnames[j] for j in model.columns],
                                     average_marginal_effects(model, Xp).tolist())),
        "iterations": model.iterations,
        "grad_norm": model.grad_norm,
    })
    st.json("trim.json", json.loads(prep.trim.to_json()) if prep.trim else {"trim": False})
    denom = cfg["propensity"]["std_diff_denominator"]
    st.csv("balance.csv", balance_table(prep.dataset, prep.weights, denom))
    st.json("features.json", {"names": prep.z_names,
                              "dropped": [{"name": n, "reason": r} for n, r in prep.dropped_features]})
    pipeline.save_ensemble(result, st.path("ensemble.json"), st.path("predictions.csv"),
                           names=prep.z_names, extra={"config": pcfg.tag})
    st.csv("cate.csv", _cate_frame(prep, result))
    deltas = np.vstack([r.delta for r in result.splits])
    st.csv("coefficients.csv", pd.DataFrame({
        "variable": prep.z_names,
        "selection_share": (deltas != 0).mean(axis=0),
        "bagged_coef": deltas.mean(axis=0),
        "mean_coef_if_selected": [float(c[c != 0].mean()) if np.any(c != 0) else 0.0
                                  for c in deltas.T],
    }))
    return st.finish({"method": pcfg.tag, "n_retained": int(prep.dataset.n)})


def cmd_infer(cfg, root, workers=1, force=False):
    prep = prepare(cfg, root)
    result = refit_checked(cfg, root, prep, workers)
    bcfg = cfg["bootstrap"]
    ds = prep.dataset
    d = ds.treatment.astype(bool)
    st = Stage(root, "infer", cfg, force)

    avg = inference.bootstrap_averages(
        prep.y, ds.treatment, confounders=ds.confounders, p_hat=prep.p_hat,
        clusters=ds.cluster_ids,
        config=inference.BootstrapConfig(B=bcfg["B_averages"], seed=cfg["seed"],
                                         reestimate_propensity=bcfg["reestimate_propensity_averages"]))
    st.csv("averages.csv", pd.DataFrame([
        {"estimand": k, "estimate": e.value, "se": e.se, "stars": e.stars}
        for k, e in avg.estimates.items()]))
    st.json("averages.json", avg.report())
    st.csv("monthly.csv", inference.monthly_effect_curve(ds.outcomes, ds.treatment, prep.p_hat,
                                                         prep.weights))

    boot = inference.bootstrap_cates(
        result, ds.treatment, prep.Z, ds.cluster_ids,
        groups={"treated": d, "control": ~d},
        config=inference.BootstrapConfig(B=bcfg["B"], seed=cfg["seed"],
                                         reestimate_propensity=bcfg["reestimate_propensity_cates"]),
        confounders=ds.confounders)
    st.csv("sigma.csv", pd.DataFrame({"id": ds.obs_ids, "cate": result.ensemble.cate,
                                      "se": boot.sigma}))
    st.json("bootstrap.json", boot.report())
    st.csv("bootstrap_deltas.csv", pd.DataFrame(boot.deltas, columns=prep.z_names))
    rows = [reporting.cate_summary(result.ensemble.cate, boot.sigma, "all"),
            reporting.cate_summary(result.ensemble.cate[d], boot.sigma[d], "treated"),
            reporting.cate_summary(result.ensemble.cate[~d], boot.sigma[~d], "control")]
    st.csv("cate_summary.csv", reporting.summary_frame(rows))
    return st.finish({"B_used": boot.n_used, "B_excluded": boot.n_excluded})


def _read(root, stage, fname):
    return pd.read_csv(Path(root) / stage / fname, float_precision="round_trip")


def _characteristics(cfg, prep):
    ds = prep.dataset
    cols = {}
    for j, name in enumerate(ds.confounder_names):
        cols[name] = ds.confounders[:, j]
    for j, name in enumerate(ds.heterogeneity_names[1:], start=1):
        cols.setdefault(name, ds.heterogeneity[:, j])
    wanted = cfg["report"]["characteristics"]
    if wanted:
        missing = [c for c in wanted if c not in cols]
        if missing:
            raise SchemaError(f"unknown characteristics: {missing}")
        cols = {c: cols[c] for c in wanted}
    return list(cols), np.column_stack(list(cols.values()))


def cmd_report(cfg, root, workers=1, force=False):
    require_stage(root, "fit", cfg)
    require_stage(root, "infer", cfg)
    prep = prepare(cfg, root)
    rcfg = cfg["report"]
    cate = _read(root, "fit", "cate.csv")["cate"].to_numpy()
    deltas = _read(root, "infer", "bootstrap_deltas.csv").to_numpy()
    boot = inference.CateBootstrap(np.zeros(cate.size), {}, {}, deltas.shape[0], deltas.shape[0],
                                   0, deltas)
    st = Stage(root, "report", cfg, force)

    dens = reporting.kernel_density(cate, rcfg["bandwidth"])
    st.csv("density.csv", dens)
    names, X = _characteristics(cfg, prep)
    st.csv("median_split.csv", reporting.binary_split_table(cate, X, names, boot, prep.Z))
    curve, hist = reporting.kernel_regression(prep.p_hat, cate, rcfg["bandwidth"],
                                              n_bins=rcfg["bins"])
    st.csv("kernel_regression.csv", curve)
    st.csv("propensity_histogram.csv", hist)
    st.csv("sign_profile.csv", policy.sign_group_profile(
        cate, X, names, prep.dataset.cluster_ids, B=max(2, min(cfg["bootstrap"]["B"], 1000)),
        seed=cfg["seed"]))

    denom = cfg["propensity"]["std_diff_denominator"]
    st.csv("balance.csv", balance_table(prep.dataset, prep.weights, denom))

    cates = {}
    for tag in rcfg["variants"]:
        if tag not in _VARIANTS:
            raise SchemaError(f"unknown variant {tag!r}; choose from {sorted(_VARIANTS)}")
        method, ea, sel = _VARIANTS[tag]
        cates[tag] = run_fit(prep, pipeline_config(cfg, method, ea, sel), workers).ensemble.cate
    corr = reporting.correlate_methods(cates) if len(cates) >= 2 else pd.DataFrame()
    st.csv("method_correlations.csv", corr.reset_index().rename(columns={"index": "method"}))
    st.json("report.json", {
        "density_bandwidth": dens.attrs["bandwidth"],
        "regression_bandwidth": curve.attrs["bandwidth"],
        "std_diff_denominator": denom,
        "std_diff_note": STD_DIFF_NOTE,
    })
    return st.finish()


def _policy_rules(cfg, quota):
    rules = []
    for i, spec in enumerate(cfg["policy"]["rules"]):
        spec = dict(spec)
        kind = spec.pop("kind")
        rules.append(policy.PolicyRule(kind=kind, quota=int(spec.pop("quota", quota)),
                                       predicate=tuple(spec.pop("predicate", ())),
                                       seed=int(spec.pop("seed", cfg["seed"] + i)),
                                       label=spec.pop("label", None)))
        if spec:
            raise SchemaError(f"unknown policy rule fields: {sorted(spec)}")
    return rules


def cmd_policy(cfg, root, workers=1, force=False):
    require_stage(root, "fit", cfg)
    prep = prepare(cfg, root)
    frame = _read(root, "fit", "cate.csv")
    cate = frame["cate"].to_numpy()
    treated = frame["D"].to_numpy() == 1
    quota = cfg["policy"]["quota"] or int(treated.sum())
    names, X = _characteristics(cfg, prep)
    flags = {n: X[:, j] == 1 for j, n in enumerate(names) if np.isin(X[:, j], (0, 1)).all()}
    rules = _policy_rules(cfg, quota)
    st = Stage(root, "policy", cfg, force)
    table = policy.policy_table(rules, cate, flags, treated, frame["id"].to_numpy())
    st.csv("policy.csv", table)
    st.json("policy.json", {"quota": quota, "rules": table.to_dict(orient="records")})
    return st.finish()


HANDLERS = {"simulate": cmd_simulate, "fit": cmd_fit, "infer": cmd_infer, "report": cmd_report,
            "policy": cmd_policy}


def resolve_workers(flag, cfg):
    if flag is not None:
        n = flag
    elif os.environ.get("HETFX_WORKERS"):
        n = os.environ["HETFX_WORKERS"]
    else:
        n = cfg.get("workers", 1)
    try:
        n = int(n)
    except (TypeError, ValueError):
        raise ValidationError(f"worker count must be an integer, got {n!r}") from None
    if n < 1:
        raise ValidationError("worker count must be at least 1")
    return n


def build_parser():
    parser = argparse.ArgumentParser(prog="hetfx", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"hetfx {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=HANDLERS[name].__name__.replace("cmd_", "run "))
        p.add_argument("--config", help="TOML config file")
        p.add_argument("--out", help="run directory (default: config 'out' or ./hetfx-run)")
        p.add_argument("--seed", type=int, help="master seed (overrides the config)")
        p.add_argument("--workers", type=int, help="parallel workers (env HETFX_WORKERS)")
        p.add_argument("--force", action="store_true", help="overwrite a completed stage")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.seed)
        root = args.out or cfg.get("out") or "hetfx-run"
        workers = resolve_workers(args.workers, cfg)
        manifest = HANDLERS[args.command](cfg, root, workers=workers, force=args.force)
    except (HetfxError, ValueError, FileNotFoundError) as exc:
        print(f"hetfx {args.command}: error: {exc}", file=sys.stderr)
        return 2
    print(f"hetfx {args.command}: wrote {len(manifest['outputs'])} files to "
          f"{Path(root) / args.command}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
