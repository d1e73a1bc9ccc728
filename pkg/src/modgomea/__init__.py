"""Modular GP-GOMEA symbolic regression."""
from .archive import ArchiveEntry, ParetoArchive
from .data import Dataset, SyntheticSpec, generate_synthetic, load_csv, r_squared
from .estimator import ModularGPGOMEARegressor, TemplateGPRegressor
from .expression import MultiTreeGenotype, dumps, evaluate, loads, to_infix, usage_stats
from .gomea import RunConfig, RunResult, run
from .gp import GpConfig, gp_run

__all__ = [
    "ArchiveEntry", "ParetoArchive", "Dataset", "SyntheticSpec", "generate_synthetic",
    "load_csv", "r_squared", "ModularGPGOMEARegressor", "TemplateGPRegressor",
    "MultiTreeGenotype", "dumps", "evaluate", "loads", "to_infix", "usage_stats",
    "RunConfig", "RunResult", "run", "GpConfig", "gp_run",
]
__version__ = "0.1.0"
