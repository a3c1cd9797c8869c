"""Exception hierarchy shared by every flowline module."""

from __future__ import annotations


class FlowlineError(Exception):
    """Base class for all errors raised by flowline."""


# -- element model ---------------------------------------------------------


class DuplicateName(FlowlineError):
    pass


class UnknownUdf(FlowlineError):
    pass


# -- graph construction ----------------------------------------------------


class GraphError(FlowlineError):
    """Raised when a dataset node fails validation."""


class InvalidArity(GraphError):
    pass


class InvalidAttr(GraphError):
    pass


class TypeMismatch(GraphError):
    def __init__(self, message: str, component: int | None = None):
        if component is not None:
            message = f"component {component}: {message}"
        super().__init__(message)
        self.component = component


class MalformedInput(FlowlineError):
    def __init__(self, position: int, reason: str):
        super().__init__(f"malformed input at byte {position}: {reason}")
        self.position = position
        self.reason = reason


class ValidationFailed(FlowlineError):
    def __init__(self, cause: GraphError):
        super().__init__(f"deserialized graph is invalid: {cause}")
        self.cause = cause


# -- runtime ---------------------------------------------------------------


class MissingFile(FlowlineError):
    pass


class UdfError(FlowlineError):
    """A user-defined function raised while processing an element."""

    def __init__(self, element_index: int, cause: BaseException, udf: str = ""):
        where = f" in {udf!r}" if udf else ""
        super().__init__(f"UDF failure{where} on element {element_index}: {cause!r}")
        self.element_index = element_index
        self.cause = cause
        self.udf = udf


class RecordFormatError(FlowlineError):
    pass


class ConcurrentCacheFill(FlowlineError):
    pass


class IteratorClosed(FlowlineError):
    pass


class CheckpointError(FlowlineError):
    pass


class FingerprintMismatch(CheckpointError):
    pass


class VersionMismatch(CheckpointError):
    pass


class CorruptBlob(CheckpointError):
    pass


# -- optimizer -------------------------------------------------------------


class RewriteDiverged(FlowlineError):
    pass


class RuleProducedInvalidGraph(FlowlineError):
    def __init__(self, rule: str, cause: Exception):
        super().__init__(f"rule {rule!r} produced an invalid graph: {cause}")
        self.rule = rule
        self.cause = cause


# -- autotuner -------------------------------------------------------------


class DomainError(FlowlineError, ValueError):
    pass


# -- bench harness ---------------------------------------------------------


class SpecError(FlowlineError):
    def __init__(self, line: int, column: int, message: str):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


class GridTooLarge(FlowlineError):
    pass


class RunFailed(FlowlineError):
    """A benchmark run aborted; ``path`` names the iterator that failed."""

    def __init__(self, path: str | None, cause: BaseException):
        where = f" at node {path}" if path else ""
        super().__init__(f"runtime error{where}: {cause}")
        self.path = path
        self.cause = cause
