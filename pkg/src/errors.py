"""
Exception types raised across the engine.

Bad inputs subclass ValueError, failures discovered while running subclass
RuntimeError, so callers can keep catching the builtin families.
"""


class ConfigError(ValueError):
    """Run configuration failed validation."""


class NoForegroundIntersection(ValueError):
    """A ray never enters the normalized unit ball."""


class EmptySampleSet(ValueError):
    """Both foreground and background sample lists were empty."""


class OutOfDomain(ValueError):
    """A contracted point falls outside the encoder's unit cube."""


class NonUnitDirection(ValueError):
    """A view direction is not unit length."""


class TapeMismatch(ValueError):
    """A backward call received adjoints that do not match its forward record."""


class EmptyRay(ValueError):
    """Compositing was asked to integrate a ray with no samples."""


class EmptyBatch(ValueError):
    """A loss was evaluated over zero rays."""


class ShapeMismatch(ValueError):
    """Parameter, gradient and moment shapes disagree."""


class DimensionMismatch(ValueError):
    """Two images compared by a metric have different shapes."""


class CameraOutsideScene(ValueError):
    """A synthetic camera sits inside an opaque primitive."""


class OutOfImage(ValueError):
    """A pixel coordinate lies outside the camera's image."""


class CheckpointMismatch(ValueError):
    """A checkpoint header is incompatible with the requested model."""


class TrainingDiverged(RuntimeError):
    """The training loss became NaN or infinite."""
