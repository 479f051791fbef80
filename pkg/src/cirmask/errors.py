"""Exception types shared across the package."""


class CirmaskError(Exception):
    """Base class for all package errors."""


class ConfigError(CirmaskError):
    """Invalid or missing configuration. CLI maps this to exit code 2."""


class InvalidInputError(CirmaskError, ValueError):
    """A function received arguments that violate its preconditions."""


class ContractViolation(CirmaskError, ValueError):
    """A value broke an interface contract (e.g. non-normalized features)."""


class NoMaskableWord(CirmaskError):
    """The caption contains no word the tagger marks as a noun."""


class RelevanceUnavailable(CirmaskError):
    """The relevance provider failed for this (image, word) pair."""


class QueryTooLong(CirmaskError):
    """Composing the query would exceed the text encoder's context length."""


class CheckpointError(CirmaskError):
    """Checkpoint missing, malformed, or incompatible with the backbone."""


class StaleIndexError(CirmaskError):
    """A persisted gallery index was built with a different backbone."""
