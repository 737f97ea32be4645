"""Exception types raised across grnet.

Every error derives from :class:`GrNetError`; the CLI maps
:class:`FormatError` subclasses to exit code 3.
"""


class GrNetError(Exception):
    """Base class for all grnet errors."""


class ShapeMismatch(GrNetError, ValueError):
    pass


class NotSquare(ShapeMismatch):
    pass


class NotSymmetric(GrNetError, ValueError):
    pass


class NonFinite(GrNetError, ValueError):
    pass


class RankDeficient(GrNetError, ArithmeticError):
    """A matrix failed a full-rank check.

    ``ratio`` is the smallest over largest |R_ii| of the offending factor and
    ``index`` its flat position within a stacked input (None for a single
    matrix).
    """

    def __init__(self, message, ratio=float("nan"), index=None):
        super().__init__(message)
        self.ratio = ratio
        self.index = index


class SingularR(GrNetError, ArithmeticError):
    pass


class DegenerateSpectrum(GrNetError, ArithmeticError):
    def __init__(self, message, gap=float("nan"), index=None):
        super().__init__(message)
        self.gap = gap
        self.index = index


class CacheMismatch(GrNetError, ValueError):
    pass


class BadGrouping(GrNetError, ValueError):
    pass


class BadPatchSize(GrNetError, ValueError):
    pass


class BadLabel(GrNetError, ValueError):
    pass


class ConfigInvalid(GrNetError, ValueError):
    pass


class EmptyDataset(GrNetError, ValueError):
    pass


class UnknownTarget(GrNetError, KeyError):
    pass


class FormatError(GrNetError, ValueError):
    """Malformed dataset or model file."""


class BadMagic(FormatError):
    pass


class BadVersion(FormatError):
    pass


class TruncatedFile(FormatError):
    pass


class InvariantViolation(FormatError):
    pass
