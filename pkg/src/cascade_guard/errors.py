"""Exception hierarchy shared by the whole package."""


class CascadeGuardError(Exception):
    """Base class for all package errors."""


class ValidationError(CascadeGuardError):
    """Bad inputs: shape mismatches, out-of-range parameters, empty classes."""


class FormatError(ValidationError):
    """Malformed persisted artifacts: bad magic, corrupt payloads, wrong version."""


class TrainingError(CascadeGuardError):
    """Training diverged or could not proceed."""
