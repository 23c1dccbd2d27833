"""Exception types raised by the membrane laboratory."""


class SolverConvergenceError(RuntimeError):
    """Iterative solve stopped before reaching its relative tolerance."""

    def __init__(self, residual: float, iterations: int, tolerance: float):
        self.residual = residual
        self.iterations = iterations
        self.tolerance = tolerance
        super().__init__(
            f"Conjugate gradient did not converge: relative residual {residual:.3e} "
            f"after {iterations} iterations (tolerance {tolerance:.1e})"
        )


class ReplicateError(RuntimeError):
    """A Monte Carlo replicate failed; the original error is chained."""

    def __init__(self, replicate: int, message: str):
        self.replicate = replicate
        super().__init__(f"Replicate {replicate} failed: {message}")


class QuadratureError(ArithmeticError):
    """Adaptive Gauss-Hermite quadrature did not stabilise."""

    def __init__(self, change: float, nodes: int):
        self.change = change
        self.nodes = nodes
        super().__init__(f"Quadrature unstable: last node doubling to {nodes} changed the value by {change:.3e}")


class InsufficientDataError(ValueError):
    """Too few replicates or exceedances for an estimator."""
