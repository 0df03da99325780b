"""Closed-loop longitudinal driving simulator for studying AEB/ACC behaviour
under object-level LiDAR perception errors, with control-level safeguards
and a deterministic experiment harness."""

__version__ = "0.1.0"

from .errors import ConfigurationError, SchemaVersionError, TraceError  # noqa: E402
