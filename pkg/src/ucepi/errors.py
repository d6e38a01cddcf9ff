"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid or unknown configuration (CLI exit code 2)."""


class DataError(ValueError):
    """Invalid input data (CLI exit code 3)."""


class ParseError(DataError):
    """Malformed input row; message carries file and line number."""


class IntegrityError(DataError):
    """Cross-reference violated, e.g. individual pointing at a missing household."""


class StandardizationError(DataError):
    """Covariate column cannot be standardized (zero variance)."""


class CapacityError(DataError):
    """Location pool exhausted before the target population size was reached."""


class DegenerateFilterError(RuntimeError):
    """Every particle weight vanished at some filter step (CLI exit code 4)."""


class DegenerateRunError(RuntimeError):
    """Every parameter-particle weight vanished (CLI exit code 4)."""
