class DimensionError(ValueError):
    pass


class DomainError(ValueError):
    pass


class ContractError(RuntimeError):
    """A caller broke a documented precondition."""


class ConfigError(ValueError):
    pass


class InvariantError(RuntimeError):
    """Internal bookkeeping went out of sync (a bug, not a user error)."""


class DivergenceError(RuntimeError):
    pass
