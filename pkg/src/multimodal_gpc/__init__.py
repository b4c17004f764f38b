from .config import PriorConfig, RunConfig, SamplerConfig
from .data import Dataset, load_dataset, generate_synthetic
from .diagnostics import geweke_test, summarize
from .evaluation import run_cv_experiment
from .model import ModelContext
from .prediction import mc_predict, predict_subjects
from .samplers import run_chain, run_chains

__all__ = ['PriorConfig', 'RunConfig', 'SamplerConfig', 'Dataset', 'load_dataset', 'generate_synthetic',
           'geweke_test', 'summarize', 'run_cv_experiment', 'ModelContext', 'mc_predict', 'predict_subjects',
           'run_chain', 'run_chains']
