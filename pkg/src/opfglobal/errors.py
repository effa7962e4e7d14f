"""Exception hierarchy shared by every stage of the solver."""


class OpfError(Exception):
    """Base class for all errors raised by this package."""


class MalformedCase(OpfError):
    """Input text could not be parsed as a case description."""


class InconsistentCase(OpfError):
    """Case parsed but violates a structural invariant."""


class NotHermitian(OpfError, ValueError):
    pass


class DimensionMismatch(OpfError, ValueError):
    pass


class NotOptimal(OpfError):
    """An operation needs an optimal solution but got another status."""


class NotPsdAfterShift(OpfError):
    """Dual-derived matrix is too indefinite to be repaired by a small shift."""


class MissingPair(OpfError, KeyError):
    pass


class EmptyBox(OpfError, ValueError):
    pass


class ZeroWidthInterval(OpfError):
    """Branching was requested on a variable whose interval has collapsed."""


class EmptyQueue(OpfError, IndexError):
    pass


class ZeroUpperBound(OpfError, ZeroDivisionError):
    pass
