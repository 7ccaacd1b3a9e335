"""Exception hierarchy shared across the package."""


class SQSError(Exception):
    """Base class for all errors raised by this package."""


class InvalidArgument(SQSError, ValueError):
    pass


class ProtocolViolation(SQSError, RuntimeError):
    """A peer (or local state machine) broke the drafting/verification protocol."""


class ConsistencyError(SQSError, RuntimeError):
    """Internal bookkeeping is out of sync (e.g. missing checkpoint)."""


class DecodeError(SQSError, ValueError):
    pass


class TruncatedPacket(DecodeError):
    pass


class RankOutOfRange(DecodeError):
    pass


class VerdictMismatch(DecodeError):
    """Verdict refers to more accepted tokens than were drafted, or the wrong batch."""


class HandshakeError(SQSError, RuntimeError):
    """Session constants disagree between edge and cloud; the session is aborted."""


class TraceError(SQSError):
    pass


class TraceFileMissing(TraceError, FileNotFoundError):
    pass


class TraceFormatError(TraceError, ValueError):
    pass


class UnknownContext(TraceError, KeyError):
    pass


class ConfigError(SQSError, ValueError):
    """Raised with every offending field listed, not just the first."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))
