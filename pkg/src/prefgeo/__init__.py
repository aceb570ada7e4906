"""Geostatistical design under preferential sampling.

Gaussian-process geostatistics with a log-Gaussian Cox model for the
sampling locations: simulation, MCMC fitting, prediction and
expected-utility design of new monitoring sites.
"""
from .design import (DesignConfig, UtilitySpec, expected_utility, gaussian_approx_moments,
                     run_design_chain, select_optimal)
from .gp import CovarianceSpec, NumericalError, kriging_moments, sample_gaussian_field
from .grid import Grid, Region, build_grid, pairwise_distances
from .inference import ChainConfig, PriorSpec, posterior_summaries, run_mcmc
from .metrics import global_prediction_error, local_prediction_error, prediction_surface
from .simulate import PRESETS, Dataset, simulate_case

__version__ = "0.1.0"

__all__ = [
    "ChainConfig", "CovarianceSpec", "Dataset", "DesignConfig", "Grid", "NumericalError",
    "PRESETS", "PriorSpec", "Region", "UtilitySpec", "build_grid", "expected_utility",
    "gaussian_approx_moments", "global_prediction_error", "kriging_moments",
    "local_prediction_error", "pairwise_distances", "posterior_summaries", "prediction_surface",
    "run_design_chain", "run_mcmc", "sample_gaussian_field", "select_optimal", "simulate_case",
]
