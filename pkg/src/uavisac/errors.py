"""Exception types raised by the solver and harness."""


class UavIsacError(Exception):
    """Base class for all package errors."""


class ValidationError(UavIsacError):
    """A scenario or configuration violates one or more invariants.

    ``problems`` holds one message per violated invariant.
    """

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class ParseError(UavIsacError):
    def __init__(self, message, line=None, field=None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field '{field}'")
        prefix = f"[{', '.join(where)}] " if where else ""
        super().__init__(prefix + message)


class InfeasibleInit(UavIsacError):
    """No collision-free initial trajectory could be built."""


class NonFiniteValue(UavIsacError):
    """The augmented Lagrangian became NaN or infinite."""


class SubsolverStall(UavIsacError):
    """The convex trajectory subproblem missed its KKT target."""


class SchemeInfeasible(UavIsacError):
    """A comparison scheme cannot meet the sensing constraint."""
