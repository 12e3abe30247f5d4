"""Command-line harness: configuration, experiment runners and SVG reports."""
from .config import ConfigError, ExperimentConfig, MissingArtifactError, config_hash, dump_config, parse_config
from .report import Figure, ReportError, emit_report

__all__ = ["ConfigError", "ExperimentConfig", "MissingArtifactError", "config_hash", "dump_config", "parse_config",
           "Figure", "ReportError", "emit_report"]
