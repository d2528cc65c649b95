"""
Exception hierarchy for the VFSS toolkit.
The CLI maps these onto exit codes: usage -> 1, data -> 2, anything else -> 3.
"""


class VfssError(Exception):
    """Base class for all toolkit errors"""


class UsageError(VfssError):
    """Bad command-line usage"""


class DataValidationError(VfssError, ValueError):
    """Input files or values violate a documented format or precondition"""


class EmptyActivationError(DataValidationError):
    """Activation map is identically zero, so there is nothing to localize"""


class OmnibusNotSignificantError(VfssError):
    """Post-hoc comparison requested after a non-significant Friedman test"""
