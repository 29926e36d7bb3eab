"""Shared exception types."""


class FedEmbedError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(FedEmbedError):
    """A model, dataset or run was set up with incompatible settings."""


class InputError(FedEmbedError, ValueError):
    """A caller passed values outside an operation's contract."""


class UsageError(FedEmbedError, RuntimeError):
    """An operation was invoked in the wrong order (e.g. backward before forward)."""


class ProtocolError(FedEmbedError):
    """A client/server exchange violated the federation protocol."""
