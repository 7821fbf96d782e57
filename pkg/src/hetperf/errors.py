"""Exception types raised across the package."""


class HetperfError(Exception):
    pass


class InvalidArgument(HetperfError, ValueError):
    pass


class InvalidDag(HetperfError, ValueError):
    pass


class CyclicGraph(InvalidDag):
    pass


class EmptyGraph(InvalidDag):
    pass


class InfeasibleAction(HetperfError, ValueError):
    pass


class SchemaMismatch(HetperfError):
    pass


class ParseError(HetperfError):
    def __init__(self, message: str, row_index: int | None = None):
        super().__init__(message if row_index is None else f"row {row_index}: {message}")
        self.row_index = row_index


class EmptyDataset(HetperfError):
    pass


class ShapeError(HetperfError, ValueError):
    def __init__(self, node_id, expected, got):
        super().__init__(f"node {node_id!r}: expected feature length {expected}, got {got}")
        self.node_id = node_id
        self.expected = expected
        self.got = got


class NumericError(HetperfError, ArithmeticError):
    pass


class InvalidParams(HetperfError, ValueError):
    pass


class EmptyBatch(HetperfError, ValueError):
    pass


class InsufficientData(HetperfError, ValueError):
    pass


class NoSafeAction(HetperfError):
    pass


class ConfigError(HetperfError):
    pass
