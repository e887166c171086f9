"""Exceptions raised by gridleak."""


class GridLeakError(Exception):
    """Base class for every gridleak error."""


class ShapeError(GridLeakError, ValueError):
    """Array dimensions do not match what an operation expects."""


class ContractError(GridLeakError):
    """A precondition of an operation does not hold."""


class DivergenceError(GridLeakError):
    """Training produced a non-finite loss or gradient."""


class ConfigError(GridLeakError):
    """Invalid experiment or generator configuration."""


class DatasetError(GridLeakError):
    """Malformed or unusable consumption data."""


class ProtocolError(GridLeakError):
    """The oracle answered a query with an error frame."""

    def __init__(self, code: str, request_id: object = None) -> None:
        super().__init__(f"Oracle rejected query {request_id!r}: {code}")
        self.code = code
        self.request_id = request_id


class OracleError(GridLeakError):
    """The oracle could not be reached or answered garbage."""


class AttackError(GridLeakError):
    """The attack could not be carried out for an oracle."""


class StageError(GridLeakError):
    """An experiment stage failed or ran out of order."""
