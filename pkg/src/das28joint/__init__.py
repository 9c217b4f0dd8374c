"""Bayesian joint model of log-DAS28 trajectories with informative competing-risk dropout."""
__version__ = "0.1.0"

from .datagen import (GenConfig, GroundTruth, disposition_table, expected_disposition,
                      null_coupling_config, simulate_trial, tempo_like_config)
from .diagnostics import (DicResult, deviance, dic, ess, ess_and_acf, population_curves, rhat,
                          summarize)
from .io import RunConfig, SchemaError, ingest, load_config, read_trial, write_trial
from .model import (DataError, Hyperparams, JointModel, ModelVariant, Priors, SubjectEffects,
                    SubjectRecord, TrialData, das28_score)
from .sampler import ChainOutput, McmcConfig, SamplerError, run_analysis, run_chain

__all__ = [
    "ChainOutput", "DataError", "DicResult", "GenConfig", "GroundTruth", "Hyperparams", "JointModel",
    "McmcConfig", "ModelVariant", "Priors", "RunConfig", "SamplerError", "SchemaError",
    "SubjectEffects", "SubjectRecord", "TrialData", "das28_score", "deviance", "dic",
    "disposition_table", "ess", "ess_and_acf", "expected_disposition", "ingest", "load_config",
    "null_coupling_config", "population_curves", "read_trial", "rhat", "run_analysis", "run_chain",
    "simulate_trial", "summarize", "tempo_like_config", "write_trial",
]
