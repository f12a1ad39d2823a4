"""Exception types shared across the library."""


class PforVecError(Exception):
    """Base class for all library errors."""


# --- tensor kernel errors ---

class IncompatibleShapes(PforVecError):
    pass


class DTypeMismatch(PforVecError):
    pass


class RankError(PforVecError):
    pass


class AxisOutOfRange(PforVecError):
    pass


class DuplicateAxis(PforVecError):
    pass


class IndexOutOfBounds(PforVecError):
    pass


class IndexCollision(PforVecError):
    pass


class IncompleteCover(PforVecError):
    pass


class BadPermutation(PforVecError):
    pass


# --- graph construction / validation errors ---

class UnknownInput(PforVecError):
    pass


class BadAttr(PforVecError):
    pass


class CycleDetected(PforVecError):
    def __init__(self, msg, nodes=()):
        super().__init__(msg)
        self.nodes = tuple(nodes)


class ArityMismatch(PforVecError):
    pass


class NonScalarCondition(PforVecError):
    pass


class ParseError(PforVecError):
    def __init__(self, msg, line, col):
        super().__init__(f"{msg} at line {line}, column {col}")
        self.line = line
        self.col = col


# --- execution errors ---

class ExecError(PforVecError):
    """Kernel error tagged with the node it occurred at."""

    def __init__(self, node_id, cause):
        super().__init__(f"node {node_id}: {cause}")
        self.node_id = node_id
        self.cause = cause


class ShapeVariance(PforVecError):
    pass


class BudgetExceeded(PforVecError):
    pass


# --- vectorizer errors ---

class VectorizeError(PforVecError):
    pass


class StatefulNotSupported(VectorizeError):
    pass


# --- autodiff errors ---

class NonScalarOutput(PforVecError):
    pass


class NonDifferentiableOp(PforVecError):
    pass


class ShapeMismatch(PforVecError):
    pass


# --- cli errors ---

class UnknownModel(PforVecError):
    pass


class UnknownDemo(PforVecError):
    pass
