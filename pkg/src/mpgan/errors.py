"""Exception hierarchy.

Every error carries a short machine-parsable ``category`` which the CLI
prints as ``error: <category>: <message>``.
"""


class MPGANError(Exception):
    category = "Error"


class ConstantVolume(MPGANError, ValueError):
    category = "ConstantVolume"


class NonFiniteInput(MPGANError, ValueError):
    category = "NonFiniteInput"


class CorruptHeader(MPGANError, ValueError):
    category = "CorruptHeader"


class ShapeMismatch(MPGANError, ValueError):
    category = "ShapeMismatch"


class IoFailure(MPGANError, OSError):
    category = "IoFailure"


class LesionOutOfBounds(MPGANError, ValueError):
    category = "LesionOutOfBounds"


class TooFewSubjects(MPGANError, ValueError):
    category = "TooFewSubjects"


class ShapeNotDivisible(MPGANError, ValueError):
    category = "ShapeNotDivisible"


class NonFiniteGradient(MPGANError, FloatingPointError):
    category = "NonFiniteGradient"


class NonFiniteTerm(MPGANError, FloatingPointError):
    category = "NonFiniteTerm"


class NonFiniteLoss(MPGANError, FloatingPointError):
    category = "NonFiniteLoss"


class DegenerateK(MPGANError, ValueError):
    category = "DegenerateK"


class EmptyClass(MPGANError, ValueError):
    category = "EmptyClass"


class VersionMismatch(MPGANError, ValueError):
    category = "VersionMismatch"


class SpecMismatch(MPGANError, ValueError):
    category = "SpecMismatch"


class SliceOutOfRange(MPGANError, IndexError):
    category = "SliceOutOfRange"


class ConstantInput(MPGANError, ValueError):
    category = "ConstantInput"


class VolumeTooSmall(MPGANError, ValueError):
    category = "VolumeTooSmall"


class SingleClass(MPGANError, ValueError):
    category = "SingleClass"


class UnknownKey(MPGANError, KeyError):
    category = "UnknownKey"

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class ConfigTypeError(MPGANError, TypeError):
    category = "TypeError"


class MissingRequired(MPGANError, ValueError):
    category = "MissingRequired"
