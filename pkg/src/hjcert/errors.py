class ContractError(ValueError):
    """Raised when an operation is called outside its preconditions."""


class DivergenceError(RuntimeError):
    """Raised when training loss blows up past the divergence guard."""


class ConvergenceError(RuntimeError):
    """Raised when a fixed-point iteration exhausts its sweep budget."""
