"""Exception hierarchy shared by all modules."""


class LevinsonError(Exception):
    """Base class for every error raised by this package."""


class InvalidInputError(LevinsonError, ValueError):
    """Argument has the wrong shape, dimension or range."""


class ContractError(LevinsonError, ValueError):
    """A documented precondition or output contract was violated."""


class NumericDomainError(LevinsonError, ArithmeticError):
    """A field produced a non-finite value.

    ``witness`` holds the offending point (whatever the caller had at hand,
    usually a dict with ``x``, ``y`` and ``t``).
    """

    def __init__(self, message, witness=None):
        super().__init__(message)
        self.witness = witness


class CatalogError(LevinsonError, KeyError):
    def __init__(self, name, valid):
        self.name = name
        self.valid = tuple(valid)
        super().__init__(f"unknown builtin {name!r}; valid names: {', '.join(self.valid)}")

    def __str__(self):
        return self.args[0]


class ParseError(LevinsonError, ValueError):
    """Malformed polynomial coefficients or configuration."""


class CapabilityError(LevinsonError, TypeError):
    """A derivative oracle is missing and no numeric fallback was allowed."""


class WrongVariantError(LevinsonError, TypeError):
    """Operation applied to the wrong friction or certificate variant."""


class CertificateError(LevinsonError, ValueError):
    """Certificate constants violate their sign/range invariants."""


class CertificateFailure(LevinsonError):
    """A certificate cannot be produced; ``witness`` locates the failure."""

    def __init__(self, message, witness=None):
        super().__init__(message)
        self.witness = witness


class DissipativityFailure(CertificateFailure):
    """The friction-potential inner product does not grow."""


class BlowUpError(LevinsonError, ArithmeticError):
    """A time step produced a non-finite state."""

    def __init__(self, message, state=None, h=None):
        super().__init__(message)
        self.state = state
        self.h = h


class EnsembleQualityError(LevinsonError):
    """Too many ensemble paths blew up for the empirical law to be trusted."""

    def __init__(self, message, rejected=0, total=0):
        super().__init__(message)
        self.rejected = rejected
        self.total = total

    @property
    def fraction(self):
        return self.rejected / self.total if self.total else 0.0
