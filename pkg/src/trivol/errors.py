"""Exception hierarchy. Every failure mode raised by the package derives from TrivolError."""


class TrivolError(Exception):
    """Base class for all errors raised by trivol."""


class ConfigurationError(TrivolError):
    """Invalid runtime setup: bad stage tag, unsupported input shape, missing manifest, ..."""


class ConfigValidationError(ConfigurationError):
    """A config violates its invariants. Carries the full list of violations."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("invalid configuration:\n" + "\n".join(f"  - {v}" for v in self.violations))


class ShapeError(TrivolError):
    """Array shape mismatch; carries expected vs. actual."""

    def __init__(self, expected, actual, what="input"):
        self.expected = tuple(expected)
        self.actual = tuple(actual)
        super().__init__(f"{what}: expected shape {self.expected}, got {self.actual}")


class LabelError(TrivolError):
    """Class label outside the valid range."""


class NumericError(TrivolError):
    """Non-finite values where finite ones are required (NaN inputs, NaN loss)."""


class ManifestError(TrivolError):
    """Malformed dataset manifest; message carries offending row numbers."""


class IncompatibilityError(TrivolError):
    """Checkpoint does not match the target architecture (fingerprint or head mismatch)."""


class IntegrityError(TrivolError):
    """Corrupt or unreadable checkpoint file."""


class EvaluationError(TrivolError):
    """Invalid evaluation request (empty split, length mismatch, too few rows)."""


class IterationError(TrivolError):
    """Batch iteration over an empty or unusable manifest."""
