"""Numerical laboratory for derived-from-Anosov maps of the 3-torus."""
from .config import ExperimentConfig, load_config, parse_config
from .errors import *  # noqa: F401,F403
from .maps import DAMap, InverseMap, Shear, Twist, verify_partial_hyperbolicity
from .torus import A0, LinearAnosov, analyze_linear

__version__ = "0.1.0"

__all__ = [
    "A0",
    "DAMap",
    "ExperimentConfig",
    "InverseMap",
    "LinearAnosov",
    "Shear",
    "Twist",
    "analyze_linear",
    "load_config",
    "parse_config",
    "verify_partial_hyperbolicity",
]
