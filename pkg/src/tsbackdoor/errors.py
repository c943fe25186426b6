"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """A precondition on shapes, ranges or arguments was not met."""


class NumericError(ArithmeticError):
    """A computation produced NaN/Inf or diverged."""


class ParseError(ValueError):
    def __init__(self, message, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column


class InsufficientDataError(ValueError):
    pass


class InsufficientVarianceError(ValueError):
    pass


class BudgetError(ValueError):
    def __init__(self, variable, excess):
        super().__init__(f"trigger for variable {variable} exceeds its budget by {excess:.6g}")
        self.variable = variable
        self.excess = excess


class PlanConflictError(ValueError):
    pass


class UndefinedAUCError(ValueError):
    pass


class ConfigError(ValueError):
    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("invalid config:\n  " + "\n  ".join(self.problems))
