"""Shared exception types, mapped to CLI exit codes in `teamaware.cli`."""


class TeamAwareError(Exception):
    """Base class for all package errors."""


class ConfigurationError(TeamAwareError):
    """Bad configuration: unknown key, type mismatch, or shape/dimension mismatch."""


class ContractViolation(TeamAwareError):
    """A documented precondition was violated by the caller."""


class NumericError(TeamAwareError):
    """A non-finite value was produced where finiteness is guaranteed."""


class VerificationFailure(TeamAwareError):
    """A verification suite (gradcheck / igm / kl / bound) reported failures."""
