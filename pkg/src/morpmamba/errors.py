"""Exception hierarchy shared by every stage of the pipeline."""


class MorpMambaError(Exception):
    """Base class for all library errors."""


class DimensionError(MorpMambaError, ValueError):
    """Operand shapes are incompatible."""


class ConfigError(MorpMambaError, ValueError):
    """A configuration value is invalid (even kernel, bad ratio, unknown key...)."""


class NumericalError(MorpMambaError, FloatingPointError):
    """A forward operation produced NaN or Inf from finite inputs."""


class MagicError(MorpMambaError):
    """File header magic does not match the expected format."""


class TruncatedPayloadError(MorpMambaError):
    """File payload is shorter or longer than its header declares."""


class ShapeMismatchError(MorpMambaError):
    """Sidecar or checkpoint contents disagree with the declared shape."""


class ValidationError(MorpMambaError, ValueError):
    """Data violates a domain invariant (label range, finiteness...)."""


class InfeasibleSpecError(MorpMambaError, ValueError):
    """Synthetic cube parameters cannot satisfy the generator's guarantees."""


class StratificationError(MorpMambaError, ValueError):
    """A class has too few samples to stratify."""


class TrainingError(MorpMambaError):
    """Training aborted; message carries epoch/batch context."""


class CompatibilityError(MorpMambaError, ValueError):
    """A checkpoint does not fit the cube it is applied to."""
