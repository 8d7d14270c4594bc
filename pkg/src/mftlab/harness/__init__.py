"""Experiment harness: configuration, the six experiment programs, plots,
and the command-line interface."""

from .config import ConfigError  # noqa: F401
