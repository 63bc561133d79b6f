"""Command-line pipeline: configuration, cross-validation and subcommands."""

from .config import RunConfig, load_config, parse_overrides

__all__ = ["RunConfig", "load_config", "parse_overrides"]
