"""Exception types raised across the toolkit."""


class CtxPpiError(Exception):
    """Base class for all toolkit errors."""


class ParseError(CtxPpiError, ValueError):
    def __init__(self, message, path=None, row=None):
        self.path = path
        self.row = row
        where = ""
        if path is not None:
            where += f"{path}"
        if row is not None:
            where += f" (row {row})"
        super().__init__(f"{where}: {message}" if where else message)


class ContextRejected(CtxPpiError):
    def __init__(self, context_id, size):
        self.context_id = context_id
        self.size = size
        super().__init__(f"context {context_id!r} rejected: largest component has {size} nodes")


class MissingParent(CtxPpiError):
    def __init__(self, subtype):
        self.subtype = subtype
        super().__init__(f"subtype {subtype!r} has no parent cell type")


class DegenerateGraph(CtxPpiError, ValueError):
    pass


class ShapeError(CtxPpiError, ValueError):
    pass


class ContractViolation(CtxPpiError, ValueError):
    pass


class NumericalError(CtxPpiError, ArithmeticError):
    pass


class SamplingExhausted(CtxPpiError, RuntimeError):
    pass


class EmptyDataset(CtxPpiError, ValueError):
    pass


class GeneNotFound(CtxPpiError, KeyError):
    pass


class InsufficientContexts(CtxPpiError, ValueError):
    pass


class DegenerateVector(CtxPpiError, ValueError):
    pass


class SpecError(CtxPpiError, ValueError):
    pass


class CorruptCheckpoint(CtxPpiError):
    pass


class UnsupportedVersion(CtxPpiError):
    pass


class ResumeMismatch(CtxPpiError):
    pass
