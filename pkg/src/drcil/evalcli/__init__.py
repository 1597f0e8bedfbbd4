"""Experiment runner: config parsing, result files, summaries and the CLI."""
from ..evaluation import ExperimentResult, evaluate
from .config import ConfigError, RunConfig, parse_config, parse_text
from .reporting import emit_results, load_results, summarize

__all__ = [
    "ConfigError",
    "ExperimentResult",
    "RunConfig",
    "emit_results",
    "evaluate",
    "load_results",
    "parse_config",
    "parse_text",
    "summarize",
]
