"""Exception types.

Everything a caller can fix by changing inputs or configuration derives from
:class:`BLRPError` (a ``ValueError``); the CLI maps those to exit status 1.
"""


class BLRPError(ValueError):
    pass


class DimensionError(BLRPError):
    pass


class RankError(BLRPError):
    pass


class MaskError(BLRPError):
    pass


class ConfigError(BLRPError):
    pass


class VocabularyError(BLRPError):
    pass


class EmptySequenceError(BLRPError):
    pass


class SequencingError(BLRPError):
    pass


class SpecError(BLRPError):
    pass


class LengthError(BLRPError):
    pass


class ParseError(BLRPError):
    pass


class CheckpointError(BLRPError):
    pass


class GridError(BLRPError):
    pass


class NonFiniteGradientError(BLRPError):
    pass
