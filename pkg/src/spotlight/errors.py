"""Exception hierarchy.

Every error carries an ``exit_code`` so the CLI can map failures onto the
documented process exit codes (2 config, 3 data, 4 numeric).
"""


class SpotlightError(Exception):
    exit_code = 3


class ConfigError(SpotlightError):
    exit_code = 2


class CorruptFile(SpotlightError):
    pass


class UnsupportedFormat(SpotlightError):
    pass


class TooSmall(SpotlightError):
    pass


class OddShape(SpotlightError):
    pass


class OutOfBounds(SpotlightError):
    pass


class ShapeMismatch(SpotlightError):
    pass


class ConstantImage(SpotlightError):
    pass


class InvalidSharpness(SpotlightError):
    exit_code = 2


class EmptyMask(SpotlightError):
    pass


class InvalidCache(SpotlightError):
    pass


class NoForegroundPatches(SpotlightError):
    pass


class NumericFailure(SpotlightError):
    exit_code = 4


class PlacementFailed(SpotlightError):
    pass


class ConstantRange(SpotlightError):
    pass


class EmptyProfile(SpotlightError):
    pass


class ZeroProfile(SpotlightError):
    pass


class Incompatible(SpotlightError):
    pass
