"""Exception hierarchy shared by every neonet module."""

from __future__ import annotations


class NeonetError(Exception):
    """Base class for all errors raised by the library."""


class ShapeError(NeonetError):
    pass


class GraphError(NeonetError):
    pass


class NiftiFormatError(NeonetError):
    pass


class UnsupportedFeatureError(NiftiFormatError):
    pass


class TruncatedFileError(NiftiFormatError):
    def __init__(self, offset: int, needed: int) -> None:
        super().__init__(
            f"file truncated at byte {offset} (needed {needed} bytes)"
        )
        self.offset = offset
        self.needed = needed


class UnmappedLabelError(NeonetError):
    def __init__(self, value: int) -> None:
        super().__init__(f"raw label {value} is not covered by the mapping")
        self.value = value


class ConfigError(NeonetError):
    pass


class ChecksumError(NeonetError):
    def __init__(self, path: str, reason: str) -> None:
        super().__init__(f"checksum error in {path}: {reason}")
        self.path = path


class MissingStageError(NeonetError):
    def __init__(self, stage: str, command: str) -> None:
        super().__init__(
            f"stage '{stage}' has not completed; run `neonet {command}` first"
        )
        self.stage = stage
        self.command = command


class RankError(NeonetError):
    pass


class UndefinedMetricError(NeonetError):
    pass


class EmptySplitError(NeonetError):
    pass


class PhantomError(NeonetError):
    pass
