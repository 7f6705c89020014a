"""Exception types shared across the pipeline."""


class MotionAttrError(Exception):
    """Base class for all package errors."""


class InvalidSpec(MotionAttrError):
    pass


class InvalidParam(MotionAttrError):
    pass


class IoFailure(MotionAttrError):
    pass


class EmptyCorpus(MotionAttrError):
    pass


class UnknownClip(MotionAttrError):
    pass


class CorruptRecord(MotionAttrError):
    pass


class ClipTooShort(MotionAttrError):
    pass


class DimensionMismatch(MotionAttrError):
    pass


class NonFiniteActivation(MotionAttrError):
    pass


class DivergedLoss(MotionAttrError):
    pass


class ZeroGradient(MotionAttrError):
    pass


class NonFiniteGradient(MotionAttrError):
    pass


class BadLength(MotionAttrError):
    pass


class FingerprintMismatch(MotionAttrError):
    pass


class EmptyStore(MotionAttrError):
    pass


class EmptySelection(MotionAttrError):
    pass


class LengthMismatch(MotionAttrError):
    pass


class ConstantVector(MotionAttrError):
    pass
