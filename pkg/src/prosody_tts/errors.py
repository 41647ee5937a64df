"""Exception hierarchy shared across the package."""


class ProsodyTTSError(Exception):
    """Base class for all package errors."""


class DimensionError(ProsodyTTSError, ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class ConfigurationError(ProsodyTTSError, ValueError):
    """A configuration value is invalid (even kernel, bad head split, ...)."""


class InvariantError(ProsodyTTSError, ValueError):
    """A structural invariant of an input was violated."""


class InfeasibleAlignmentError(InvariantError):
    """More phonemes than frames: no monotonic segmentation exists."""


class FrontendError(ProsodyTTSError, ValueError):
    """Text could not be converted into phoneme ids."""


class InputError(ProsodyTTSError, ValueError):
    """Audio or corpus input is unusable."""


class FormatError(ProsodyTTSError, ValueError):
    """A binary or text file does not follow its declared format."""


class TapeError(ProsodyTTSError, RuntimeError):
    """Misuse of the autodiff tape (reused, empty, foreign loss)."""


class DeterminismError(ProsodyTTSError, RuntimeError):
    """A function expected to be deterministic produced differing outputs."""


class NonFiniteError(ProsodyTTSError, FloatingPointError):
    """A NaN or infinity appeared in a forward result (debug mode only)."""


class TrainingDivergedError(ProsodyTTSError, FloatingPointError):
    """Training loss became non-finite."""

    def __init__(self, step, last_finite_loss):
        self.step = step
        self.last_finite_loss = last_finite_loss
        super().__init__(
            f"loss became non-finite at step {step}; last finite loss was {last_finite_loss!r}"
        )


class StageOrderError(ProsodyTTSError, RuntimeError):
    """A pipeline stage was invoked before its prerequisites were trained."""
