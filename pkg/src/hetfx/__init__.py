"""Conditional average treatment effects from observational data.

IPW-weighted Modified Covariate Method with LASSO selection, honest sample
splitting, bagging, cluster bootstrap inference and assignment rules.
"""

__version__ = "0.1.0"

from .data import Dataset, FeatureSpec, load_dataset, write_dataset
from .effects import SelectorConfig, fit_mcm, fit_mom
from .inference import BootstrapConfig, bootstrap_averages, bootstrap_cates, estimate_averages
from .pipeline import PipelineConfig, run_pipeline
from .propensity import fit_logit, ipw_weights, trim_common_support
from .synth import DgpConfig, default_configs, generate

__all__ = [
    "BootstrapConfig", "Dataset", "DgpConfig", "FeatureSpec", "PipelineConfig", "SelectorConfig",
    "bootstrap_averages", "bootstrap_cates", "default_configs", "estimate_averages", "fit_logit",
    "fit_mcm", "fit_mom", "generate", "ipw_weights", "load_dataset", "run_pipeline",
    "trim_common_support", "write_dataset",
]
