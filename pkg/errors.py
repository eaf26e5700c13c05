from __future__ import annotations


class DecorError(Exception):
    """Base class for every error raised by this project."""


class MalformedInput(DecorError, ValueError):
    pass


class InvalidConfig(DecorError, ValueError):
    pass


class ConfigError(InvalidConfig):
    """Config validation failure tied to a dotted key path (e.g. ``pipeline.n``)."""

    def __init__(self, key_path: str, message: str) -> None:
        super().__init__(f"{key_path}: {message}")
        self.key_path = key_path


class EmptyCorpus(DecorError, ValueError):
    pass


class VersionMismatch(DecorError, ValueError):
    pass


class CorruptFile(DecorError, ValueError):
    pass


class DimMismatch(DecorError, ValueError):
    pass


class ZeroVector(DecorError, ValueError):
    pass


class EmptyText(DecorError, ValueError):
    pass


class TransportError(DecorError, RuntimeError):
    pass


class ProtocolError(DecorError, RuntimeError):
    pass


class TranscriptMiss(DecorError, KeyError):
    def __init__(self, request_hash: str) -> None:
        super().__init__(f"No transcript entry for request_hash={request_hash}")
        self.request_hash = request_hash

    def __str__(self) -> str:
        return self.args[0]


class UnknownQuery(DecorError, KeyError):
    def __str__(self) -> str:
        return self.args[0] if self.args else "unknown query"


class MalformedRunFile(DecorError, ValueError):
    pass


class QueryFailed(DecorError, RuntimeError):
    """A single query failed inside the pipeline; carries the stage it failed in."""

    def __init__(self, query_id: str, stage: str, cause: BaseException) -> None:
        super().__init__(f"query {query_id} failed at stage '{stage}': {type(cause).__name__}: {cause}")
        self.query_id = query_id
        self.stage = stage
        self.cause = cause


class MissingArtifact(DecorError, FileNotFoundError):
    def __init__(self, path: object, hint: str = "") -> None:
        message = f"Missing artifact: {path}"
        if hint:
            message = f"{message}. {hint}"
        super().__init__(message)
        self.path = str(path)

    def __str__(self) -> str:
        return self.args[0]
