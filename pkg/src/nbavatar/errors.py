"""Exception types raised across the package."""


class NBAvatarError(Exception):
    """Base class for all package errors."""


class DegenerateTriangle(NBAvatarError):
    pass


class ConvergenceFailure(NBAvatarError):
    pass


class ChannelMismatch(NBAvatarError):
    pass


class OutOfDomain(NBAvatarError):
    pass


class AnchorOutOfRange(NBAvatarError):
    pass


class UnsortedInput(NBAvatarError):
    pass


class MissingForwardCache(NBAvatarError):
    pass


class ShapeError(NBAvatarError):
    pass


class CacheMismatch(NBAvatarError):
    pass


class TooFewBillboards(NBAvatarError):
    pass


class UnsupportedLoss(NBAvatarError):
    pass


class NaNGradient(NBAvatarError):
    def __init__(self, group):
        super().__init__(f"non-finite gradient in parameter group {group!r}")
        self.group = group


class DataError(NBAvatarError):
    pass


class ConnectivityMismatch(NBAvatarError):
    pass


class FormatError(NBAvatarError):
    """Malformed binary file (bad magic, version or truncated payload)."""
