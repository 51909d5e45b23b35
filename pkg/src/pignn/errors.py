"""Exception types raised across the package."""


class PignnError(Exception):
    pass


class InvalidDelta(PignnError):
    pass


class UnknownNode(PignnError, KeyError):
    pass


class SnapshotMismatch(PignnError):
    pass


class DimensionMismatch(PignnError, ValueError):
    pass


class EmptyMemory(PignnError):
    pass


class NotExpanded(PignnError):
    pass


class EmptyEvalSet(PignnError):
    pass


class MissingCheckpoints(PignnError):
    pass


class ConfigInvalid(PignnError, ValueError):
    pass


class FormatError(PignnError):
    pass


class VersionMismatch(FormatError):
    pass
