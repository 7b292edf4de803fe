"""Achievability bound for unsourced random access over the Gaussian MAC with
a learned diffusion denoiser: bound terms, score training and constants."""

from .bound import (
    BoundBreakdown,
    BoundOptions,
    BracketError,
    EstimatorPool,
    baseline_epsilon_bound,
    epsilon_bound,
    pairwise_bound,
    q0_term,
    q1_term,
    q2_term,
    required_ebn0,
)
from .constants import DenoiserConstants, estimate_constants, estimate_J, estimate_K_E, v_star
from .sysmodel import SystemConfig, ebn0_db_to_power, power_to_ebn0_db

__version__ = "0.1.0"
