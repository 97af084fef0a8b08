"""Exception types raised across the package.

Every error that callers may want to catch precisely gets its own class;
all inherit from OrdiffError so CLI code can catch the lot.
"""


class OrdiffError(Exception):
    pass


# corpus
class EmptyCorpus(OrdiffError):
    pass


class InvalidByte(OrdiffError):
    def __init__(self, position, byte):
        self.position = position
        self.byte = byte
        super().__init__(f"invalid byte {byte!r} at position {position}")


class EvenLength(OrdiffError):
    pass


class UnknownId(OrdiffError):
    pass


class CorpusTooShort(OrdiffError):
    pass


# ordering
class EmptyVocab(OrdiffError):
    pass


class NoWindows(OrdiffError):
    pass


class WindowLengthMismatch(OrdiffError):
    pass


class BTooLarge(OrdiffError):
    pass


# schedule
class DegenerateEntropy(OrdiffError):
    pass


class NonMonotonic(OrdiffError):
    pass


# diffusion
class BadTimestep(OrdiffError):
    pass


class DivisionByZeroMask(OrdiffError):
    pass


class EmptySupport(OrdiffError):
    pass


class ZeroProbability(OrdiffError):
    pass


class NotFullyMasked(OrdiffError):
    pass


class MaskResidue(OrdiffError):
    pass


class TooLarge(OrdiffError):
    pass


# denoiser
class BadConfig(OrdiffError):
    pass


class LengthExceeded(OrdiffError):
    pass


class NonFiniteLoss(OrdiffError):
    pass


class ShapeMismatch(OrdiffError):
    pass


class NonToyInput(OrdiffError):
    pass


class VersionMismatch(OrdiffError):
    pass


class CorruptFile(OrdiffError):
    pass


# trainer
class IncompatibleSchedule(OrdiffError):
    pass
