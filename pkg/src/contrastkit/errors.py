"""Exception hierarchy shared by every stage of the toolkit."""

from __future__ import annotations


class ContrastKitError(Exception):
    """Base class for all toolkit errors."""


# vector kernels

class ZeroVector(ContrastKitError, ValueError):
    def __init__(self, ident: str):
        super().__init__(f"vector {ident!r} has (near-)zero norm")
        self.ident = ident


class DimMismatch(ContrastKitError, ValueError):
    pass


class BadDim(ContrastKitError, ValueError):
    pass


class FormatError(ContrastKitError, ValueError):
    """Malformed binary embedding file."""


# data interchange

class ParseError(ContrastKitError, ValueError):
    def __init__(self, path, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.path = path
        self.line = line


class DuplicateId(ContrastKitError, ValueError):
    pass


class NonContiguousRanks(ContrastKitError, ValueError):
    pass


class ConfigError(ContrastKitError, ValueError):
    pass


# filtering / mining

class MissingVector(ContrastKitError, KeyError):
    def __init__(self, ident: str):
        super().__init__(ident)
        self.ident = ident

    def __str__(self) -> str:
        return f"no vector for id {self.ident!r}"


class PositiveNotScored(ContrastKitError, ValueError):
    pass


class InsufficientNegatives(ContrastKitError, ValueError):
    pass


class MissingScores(ContrastKitError, ValueError):
    pass


# training

class BadPositiveIndex(ContrastKitError, IndexError):
    pass


class StepOutOfRange(ContrastKitError, ValueError):
    pass


class EmptyDataset(ContrastKitError, ValueError):
    pass


class NonFiniteLoss(ContrastKitError, FloatingPointError):
    def __init__(self, step: int, loss: float, diagnostics: dict | None = None):
        super().__init__(f"non-finite loss {loss!r} at step {step}: {diagnostics or {}}")
        self.step = step
        self.loss = loss
        self.diagnostics = diagnostics or {}


# evaluation / harness

class NoJudgedQueries(ContrastKitError, ValueError):
    pass


class ZeroBaseline(ContrastKitError, ZeroDivisionError):
    pass


class MissingCheckpoint(ContrastKitError, LookupError):
    pass


class StageError(ContrastKitError, RuntimeError):
    def __init__(self, stage: str, cause: BaseException, manifest: dict):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause
        self.manifest = manifest
