"""Exception hierarchy.

Every error carries a CLI exit code: 2 for invalid input, 3 for numerical
trouble, 4 for I/O.
"""


class FbxError(Exception):
    exit_code = 3


class ValidationError(FbxError, ValueError):
    exit_code = 2


class NumericalError(FbxError, ArithmeticError):
    exit_code = 3


class IoError(FbxError, OSError):
    exit_code = 4


# validation
class InvalidDistribution(ValidationError):
    pass


class OutOfRange(ValidationError):
    pass


class ZeroSumViolation(ValidationError):
    pass


class BlocklengthTooSmall(ValidationError):
    pass


class WrongChannelFamily(ValidationError):
    pass


class SpecViolation(ValidationError):
    pass


class NotInvariant(ValidationError):
    """The weighted increment law differs between inputs."""


# numerical
class DivergentDensity(NumericalError):
    pass


class DegenerateDerivatives(NumericalError):
    pass


class NonConvergence(NumericalError):
    pass


class LatticeFailure(NumericalError):
    pass


class SupportOverflow(NumericalError):
    pass


class NumericalUnderflow(NumericalError):
    pass


class TruncationMassExceeded(NumericalError):
    pass


class NoFeasibleM(NumericalError):
    pass


class NoFeasibleGamma(NumericalError):
    pass


class InfeasibleEpsilon(NumericalError):
    pass


class OrderingViolation(NumericalError):
    pass
