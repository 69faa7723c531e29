class VerificationError(Exception):
    """Base class for errors raised by babverify."""


class ShapeError(VerificationError, ValueError):
    pass


class InconsistentSplitError(VerificationError, ValueError):
    pass


class NotAmbiguousError(VerificationError, ValueError):
    pass


class SizeCapError(VerificationError, ValueError):
    """Problem exceeds the size the exact oracles accept."""


class BoundBlowupError(VerificationError, ArithmeticError):
    """A dual value became non-finite."""


class ArchitectureMismatchError(VerificationError, ValueError):
    pass


class EmptyDatasetError(VerificationError, ValueError):
    pass
