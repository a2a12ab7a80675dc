class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ValidationError(ValueError):
    """An argument or data structure violates its documented contract."""


class ParseError(ValueError):
    """An input file could not be parsed; the message names file and line."""

    def __init__(self, path, line, message):
        self.path = str(path)
        self.line = line
        super().__init__(f"{self.path}:{line}: {message}")


class NumericError(ArithmeticError):
    """A non-finite value appeared at a named computation stage."""

    def __init__(self, stage, message="non-finite value"):
        self.stage = stage
        super().__init__(f"{message} in {stage}")
