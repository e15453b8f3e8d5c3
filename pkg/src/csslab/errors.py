"""Exception types raised across the package.

Every error carries a plain-language message; the CLI prefixes messages with
the module that raised them, so keep them self-contained and specific.
"""

from __future__ import annotations


class CssLabError(Exception):
    """Base class for all package errors."""


class ScheduleError(CssLabError):
    """Invalid class schedule (bad setting string, non-divisible remainder)."""


class GenerationError(CssLabError):
    """Synthetic generation cannot satisfy the requested geometry."""


class StreamError(CssLabError):
    """A task stream step ended up with no usable training images."""


class FormatError(CssLabError):
    """On-disk payload does not match the documented binary layout."""


class ShapeError(CssLabError):
    """Array arguments disagree with the declared dimensions."""


class StateError(CssLabError):
    """Operation called against a model in the wrong lifecycle state."""


class NumericError(CssLabError):
    """Non-finite values where finite ones are required."""


class RangeError(CssLabError):
    """Scalar argument outside its documented domain."""


class ConfigError(CssLabError):
    """Experiment config text failed to parse or validate."""


class ProbeError(CssLabError):
    """Linear probing preconditions violated (e.g. a class has no pixels)."""


class MetricError(CssLabError):
    """Metric preconditions violated (shape mismatch, zero-norm rows, ...)."""


class ArtifactError(CssLabError):
    """A saved experiment directory is missing required artifacts."""
