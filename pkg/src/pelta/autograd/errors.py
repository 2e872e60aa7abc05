"""Exception types raised by graph construction and evaluation."""


class GraphError(ValueError):
    """Malformed graph description."""


class ShapeError(GraphError):
    def __init__(self, node, message):
        self.node = node
        super().__init__(f"node {node}: {message}")


class EdgeOrderError(GraphError):
    pass


class CycleError(GraphError):
    pass


class MissingParameterError(KeyError):
    pass


class NumericalError(ArithmeticError):
    pass


class NoForwardPassError(RuntimeError):
    pass


class NonScalarLossError(ValueError):
    pass
