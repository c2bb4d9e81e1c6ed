"""Exception types shared across the package."""


class IspnError(Exception):
    """Base class for all package errors."""


class UnknownVariable(IspnError, KeyError):
    pass


class InvalidDistribution(IspnError, ValueError):
    pass


class InvalidScm(IspnError, ValueError):
    pass


class ParseError(IspnError, ValueError):
    def __init__(self, message, line=None, field=None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        prefix = f"[{', '.join(where)}] " if where else ""
        super().__init__(prefix + message)
        self.line = line
        self.field = field


class CptRowNotNormalized(ParseError):
    pass


class TooLarge(IspnError, ValueError):
    pass


class InconsistentEvidence(IspnError, ValueError):
    pass


class ZeroSupport(IspnError, ValueError):
    pass


class InvalidConfig(IspnError, ValueError):
    pass


class ShapeMismatch(IspnError, ValueError):
    pass


class MissingCache(IspnError, RuntimeError):
    pass


class NonFiniteLoss(IspnError, FloatingPointError):
    def __init__(self, batch_id, value):
        super().__init__(f"non-finite loss {value!r} at batch {batch_id}")
        self.batch_id = batch_id
        self.value = value


class UnknownRegime(IspnError, KeyError):
    pass


class SupportMismatch(IspnError, ValueError):
    pass


class HashMismatch(IspnError, ValueError):
    pass


class SchemaMismatch(IspnError, ValueError):
    pass


class UnknownDataset(IspnError, KeyError):
    pass


class BadRegimeSpec(IspnError, ValueError):
    pass
