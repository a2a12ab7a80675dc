"""Noise-robust node classification by distilling a weighted ensemble of graph teachers into a GCN student."""
from .config import RunConfig, config_from_dict, load_config
from .runner import RunReport, emit_report, run_experiment, run_sweep

__all__ = ["RunConfig", "RunReport", "config_from_dict", "emit_report", "load_config",
           "run_experiment", "run_sweep"]
__version__ = "0.1.0"
