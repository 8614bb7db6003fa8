"""Exception types raised across the package."""


class HaloError(Exception):
    """Base class for all errors raised by this package."""


# --- skeleton ---

class WrongJointCount(HaloError):
    pass


class NonFiniteCoordinate(HaloError):
    pass


class DegenerateBone(HaloError):
    pass


# --- canonicalization ---

class CollinearPalmarBones(HaloError):
    pass


class DegenerateFrame(HaloError):
    pass


class AngleOutOfRange(HaloError):
    pass


# --- diffcore ---

class UnsupportedPrimitive(HaloError):
    pass


class ShapeMismatch(HaloError):
    pass


# --- occupancy / training ---

class PartIndexOutOfRange(HaloError):
    pass


class NonFiniteLoss(HaloError):
    pass


# --- surface ---

class EmptySurface(HaloError):
    pass


class EmptyMesh(HaloError):
    pass


# --- grasp ---

class SamplingStalled(HaloError):
    pass


class NonFiniteGradient(HaloError):
    pass


class NonWatertight(HaloError):
    pass
