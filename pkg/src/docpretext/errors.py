class DomainError(ValueError):
    """Argument outside the operation's domain."""


class BoundsError(DomainError):
    """Rectangle or index falls outside an image."""


class UnsupportedError(DomainError):
    pass


class DecodeError(ValueError):
    """File exists but does not decode as an image."""


class ConfigError(ValueError):
    pass


class ContractError(ValueError):
    """Operation called on a model whose task does not support it."""
