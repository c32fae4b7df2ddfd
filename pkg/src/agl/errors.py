"""Exception hierarchy shared by every agl module."""


class AGLError(Exception):
    """Base class for all errors raised by agl."""


class ContractError(AGLError, ValueError):
    """A precondition of an operation was violated by the caller."""


class ValidationError(AGLError, ValueError):
    """Data or a descriptor failed structural validation."""


class ParseError(AGLError, ValueError):
    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(where + message)


class NumericalError(AGLError, ArithmeticError):
    def __init__(self, message, residual=None):
        self.residual = residual
        if residual is not None:
            message = f"{message} (residual={residual:.3e})"
        super().__init__(message)


class SelectionError(AGLError):
    """Feature selection would remove every column."""


class SatisfiabilityError(AGLError):
    """Rejection sampling could not find a constraint-satisfying assignment."""


class SizeError(AGLError):
    def __init__(self, message, count):
        self.count = count
        super().__init__(message)


class SearchError(AGLError):
    """A search produced no successful trial."""


class MutationError(SearchError):
    pass


class DerivationError(SearchError):
    def __init__(self, message, violations=()):
        self.violations = list(violations)
        super().__init__(f"{message}: {', '.join(self.violations)}")


class ProxyError(SearchError):
    pass


class ConfigError(AGLError, ValueError):
    """Solver configuration is invalid."""


class BudgetExpired(Exception):
    """Raised before a trial would start after the time budget ran out.

    Deliberately not an :class:`AGLError` so strategies do not record it as
    a failed trial.
    """
