"""Exception hierarchy shared across the package.

Every error raised on a documented failure path derives from CausalTadError
so callers (and the CLI) can map failures to exit codes without matching on
message strings.
"""


class CausalTadError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(CausalTadError):
    """Invalid, unknown, or out-of-range configuration value."""


class NotFound(CausalTadError):
    """A referenced video id or file entry does not exist."""


class CorruptFeatureFile(CausalTadError):
    """Feature payload length disagrees with the manifest shape."""


class InvalidData(CausalTadError):
    """Loaded values violate a data invariant (e.g. non-finite entries)."""


class InvalidSegment(CausalTadError):
    """An annotation interval is empty or inverted after clipping."""


class UnknownLabel(CausalTadError):
    """An annotation references a label that is not in the class table."""


class IoError(CausalTadError):
    """A file could not be read or written."""


class PlacementFailure(CausalTadError):
    """Synthetic action placement failed after the retry budget."""


class EmptySequence(CausalTadError):
    """An operation received a zero-length sequence."""


class DegenerateMask(CausalTadError):
    """An attention mask row excludes every position."""


class ShapeError(CausalTadError):
    """Tensor shapes are not conformable for the requested operation."""


class SequenceTooShort(CausalTadError):
    """The input sequence cannot support the requested pyramid depth."""


class InvalidStep(CausalTadError):
    """A discretization step size is not strictly positive."""


class GridMismatch(CausalTadError):
    """Two raw detector outputs were produced on different grids."""


class EmptyGroundTruth(CausalTadError):
    """Evaluation was requested against an empty ground-truth database."""


class GradientOverflow(CausalTadError):
    """A non-finite gradient was produced during backpropagation."""


class DivergedAtStep(CausalTadError):
    """Training loss became non-finite.

    Attributes:
        step: global optimizer step at which divergence was detected.
    """

    def __init__(self, step: int, message: str | None = None):
        self.step = step
        super().__init__(message or f"training diverged at step {step}")
