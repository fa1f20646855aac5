"""Exception hierarchy shared across the package."""


class BanditGNNError(Exception):
    """Base class for all package errors."""


class ParseError(BanditGNNError):
    def __init__(self, path, line_no, message):
        self.path = str(path)
        self.line_no = line_no
        super().__init__(f"{self.path}:{line_no}: {message}")


class StructuralError(BanditGNNError):
    """Data files disagree with each other or with the graph invariants."""


class DataError(BanditGNNError):
    """Labels or inputs that cannot be used for training."""


class ParameterError(BanditGNNError, ValueError):
    """Invalid numeric parameters (e.g. n <= k)."""


class ContractError(BanditGNNError, ValueError):
    """A caller violated an operation's precondition."""


class NumericError(BanditGNNError, ArithmeticError):
    """Non-finite values appeared during a computation."""


class UsageError(BanditGNNError):
    """Bad command-line usage or configuration."""
