"""Error types shared across the package."""


class DimensionError(ValueError):
    """Shapes incompatible with the requested operation."""


class ContractError(ValueError):
    """A call violated an operation's contract (non-shape precondition)."""


class BudgetError(ValueError):
    """A sequence exceeded the language model's context budget."""

    def __init__(self, required: int, available: int):
        self.required = required
        self.available = available
        super().__init__(
            f"sequence needs {required} positions but the context limit is {available}"
        )


class ConfigError(ValueError):
    """An experiment or task configuration is invalid."""
