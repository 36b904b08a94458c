"""Exception types shared across the toolkit."""


class PlimError(Exception):
    """Base class for all toolkit errors."""


class IntegrationDivergedError(PlimError):
    """A trajectory left the representable range (non-finite state).

    Carries the last finite state and its time stamp.
    """

    def __init__(self, t, last_state):
        super().__init__(f"integration diverged at t={t:.6g}")
        self.t = t
        self.last_state = last_state


class OutOfDomainError(PlimError):
    """A coarse point lies outside the atlas domain."""


class PrunedRegionError(PlimError):
    """Sheet evaluation was requested inside a pruned element."""


class NoCandidateSheetError(PlimError):
    """No selectable sheet exists in the requested block."""


class MissingSheetError(PlimError):
    """A run references a sheet id the atlas does not contain."""


class UnresolvableSingularityError(PlimError):
    """Repeated vector-field perturbations failed to leave the singular set."""


class SolverFailedError(PlimError):
    """A sheet solve finished above the acceptance threshold.

    The best sheet found is attached for diagnostics.
    """

    def __init__(self, message, sheet=None):
        super().__init__(message)
        self.sheet = sheet


class AtlasFormatError(PlimError):
    """Atlas file is corrupt, truncated, or has an unsupported version."""


class ConfigError(PlimError):
    """A run configuration is malformed or references unknown entities."""
