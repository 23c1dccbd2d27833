"""Membrane precision operator A = LᵀL and the solvers built on it.

L is the 4D lattice Laplacian (center -8, eight axis neighbours +1) applied
to fields that vanish outside V_N. Its rows run over W = V_N ∪ ∂₁V_N, the
vertices where the Laplacian of a zero-extended field can be nonzero.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import scipy.io
import scipy.sparse as sp
from scipy import linalg, ndimage
from scipy.sparse import linalg as sparse_linalg

from membrane.errors import SolverConvergenceError
from membrane.lattice import DIM, Lattice4
from utils.logger import logger

# covariance growth constant: G_N(x, x) ~ GAMMA * ln N
GAMMA = 8.0 / np.pi ** 2

LAPLACIAN_CENTER = -8
BIHARMONIC_DIAGONAL = LAPLACIAN_CENTER ** 2 + 2 * DIM

DENSE_MAX_SIDE = 6
SPARSE_MAX_SIDE = 12
CG_TOLERANCE = 1e-8
CG_ITERATIONS_PER_SIDE_SQUARED = 50
GREEN_BLOCK = 256


class SolverMode(str, Enum):
    DIRECT_DENSE = "direct_dense"
    DIRECT_SPARSE = "direct_sparse"
    ITERATIVE = "iterative"


def solver_mode_for_side(N: int) -> SolverMode:
    """Default tier for the box V_N"""
    if N <= DENSE_MAX_SIDE:
        return SolverMode.DIRECT_DENSE
    if N <= SPARSE_MAX_SIDE:
        return SolverMode.DIRECT_SPARSE
    return SolverMode.ITERATIVE


def solver_mode_for_size(size: int) -> SolverMode:
    """Default tier for an operator with `size` unknowns (same cut points as by side)"""
    if size <= (DENSE_MAX_SIDE + 1) ** DIM:
        return SolverMode.DIRECT_DENSE
    if size <= (SPARSE_MAX_SIDE + 1) ** DIM:
        return SolverMode.DIRECT_SPARSE
    return SolverMode.ITERATIVE


def noise_mask(lattice: Lattice4) -> np.ndarray:
    """
    Membership of W = V_N ∪ ∂₁V_N inside the padded box [-1, N+1]^4

    Returns:
        Boolean array of shape (N+3,)*4; entry [i+1, ...] refers to vertex i
    """
    axis = np.arange(-1, lattice.N + 2)
    outside = ((axis < 0) | (axis > lattice.N)).astype(np.int8)
    count = sum(
        outside.reshape([-1 if a == b else 1 for b in range(DIM)]) for a in range(DIM)
    )
    return count <= 1


def _stencil_offsets():
    offsets = [(np.zeros(DIM, dtype=np.int64), LAPLACIAN_CENTER)]
    for axis in range(DIM):
        for step in (1, -1):
            e = np.zeros(DIM, dtype=np.int64)
            e[axis] = step
            offsets.append((e, 1))
    return offsets


def laplacian_matrix(lattice: Lattice4) -> sp.csr_matrix:
    """
    Rectangular Laplacian L with rows over W (C order in the padded box) and columns over V_N

    (L h)_w = -8 h_w + sum of the neighbours of w, with h = 0 outside V_N.
    """
    ext = np.argwhere(noise_mask(lattice)) - 1
    row_ids = np.arange(len(ext))
    rows, cols, vals = [], [], []
    for offset, weight in _stencil_offsets():
        target = ext + offset
        inside = np.all((target >= 0) & (target <= lattice.N), axis=1)
        rows.append(row_ids[inside])
        cols.append(lattice.index(target[inside]))
        vals.append(np.full(int(inside.sum()), weight, dtype=np.int64))
    return sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(len(ext), lattice.vertex_count),
        dtype=np.int64,
    )


def stencil_laplacian(grid: np.ndarray) -> np.ndarray:
    """Laplacian of a padded grid; np.roll wraps, so keep at least one zero layer beyond the support"""
    out = LAPLACIAN_CENTER * grid
    for axis in range(DIM):
        out = out + np.roll(grid, 1, axis=axis) + np.roll(grid, -1, axis=axis)
    return out


@dataclass(frozen=True, eq=False)
class PrecisionOperator:
    """Bi-Laplacian precision A of the membrane on one lattice"""

    lattice: Lattice4
    solver_mode: SolverMode

    @property
    def size(self) -> int:
        return self.lattice.vertex_count

    @cached_property
    def matrix(self) -> sp.csr_matrix:
        """A as a sparse integer matrix (assembled on first use)"""
        lap = laplacian_matrix(self.lattice)
        a = (lap.T @ lap).tocsr()
        a.sort_indices()
        logger.info(f"Assembled precision operator: N={self.lattice.N}, size={self.size}, nnz={a.nnz}")
        return a

    @cached_property
    def diagonal(self) -> np.ndarray:
        # every vertex of V_N sees the whole stencil of the zero-extended field
        return np.full(self.size, float(BIHARMONIC_DIAGONAL))

    def matvec(self, x: np.ndarray) -> np.ndarray:
        """A·x through two stencil passes (matrix free)"""
        N = self.lattice.N
        padded = np.zeros((N + 5,) * DIM)
        padded[(slice(2, N + 3),) * DIM] = np.asarray(x, dtype=np.float64).reshape(self.lattice.shape)
        twice = stencil_laplacian(stencil_laplacian(padded))
        return twice[(slice(2, N + 3),) * DIM].ravel()

    def noise_rhs(self, z: np.ndarray) -> np.ndarray:
        """Lᵀz for z indexed by W in noise_mask order"""
        N = self.lattice.N
        mask = noise_mask(self.lattice)
        if z.shape != (int(mask.sum()),):
            raise ValueError(f"Noise vector must have {int(mask.sum())} entries, got {z.shape}")
        padded = np.zeros((N + 5,) * DIM)
        inner = np.zeros(mask.shape)
        inner[mask] = z
        padded[(slice(1, N + 4),) * DIM] = inner
        return stencil_laplacian(padded)[(slice(2, N + 3),) * DIM].ravel()


@dataclass(frozen=True, eq=False)
class MatrixOperator:
    """An explicit SPD block (e.g. A_UU) behind the same interface as PrecisionOperator"""

    matrix: sp.csr_matrix

    @property
    def size(self) -> int:
        return self.matrix.shape[0]

    @cached_property
    def diagonal(self) -> np.ndarray:
        return self.matrix.diagonal().astype(np.float64)

    def matvec(self, x: np.ndarray) -> np.ndarray:
        return self.matrix @ np.asarray(x, dtype=np.float64)


Operator = Union[PrecisionOperator, MatrixOperator]


def assemble_precision(lattice: Lattice4, solver_mode: Optional[SolverMode] = None) -> PrecisionOperator:
    """
    Build the precision operator of the membrane on V_N

    The sparse matrix is assembled lazily; the iterative tier never needs it.

    Raises:
        ValueError: N < 2 (no interior vertex)
    """
    if lattice.N < 2:
        raise ValueError(f"N={lattice.N} is too small to contain an interior vertex")
    mode = SolverMode(solver_mode) if solver_mode else solver_mode_for_side(lattice.N)
    logger.debug(f"Precision operator for N={lattice.N} uses tier {mode.value}")
    return PrecisionOperator(lattice=lattice, solver_mode=mode)


class SolverHandle:
    """Factorisation or preconditioner state bound to one operator"""

    def __init__(
        self,
        operator: Operator,
        mode: Optional[SolverMode] = None,
        tolerance: float = CG_TOLERANCE,
        max_iterations: Optional[int] = None,
    ):
        self.operator = operator
        if mode is not None:
            self.mode = SolverMode(mode)
        elif isinstance(operator, PrecisionOperator):
            self.mode = operator.solver_mode
        else:
            self.mode = solver_mode_for_size(operator.size)
        self.tolerance = tolerance
        side = operator.lattice.N if isinstance(operator, PrecisionOperator) else round(operator.size ** (1 / DIM))
        self.max_iterations = max_iterations or CG_ITERATIONS_PER_SIDE_SQUARED * max(side, 1) ** 2
        self._lock = threading.Lock()
        self._cholesky = None
        self._lu = None

        if self.mode is SolverMode.DIRECT_DENSE:
            self._cholesky = linalg.cholesky(operator.matrix.toarray().astype(np.float64), lower=False)
        elif self.mode is SolverMode.DIRECT_SPARSE:
            self._lu = sparse_linalg.splu(
                operator.matrix.tocsc().astype(np.float64),
                permc_spec="MMD_AT_PLUS_A",
                diag_pivot_thresh=0.0,
                options={"SymmetricMode": True},
            )
            logger.solver(f"splu factor: size={operator.size}, nnz(L+U)={self._lu.L.nnz + self._lu.U.nnz}")
        else:
            self._linear_operator = sparse_linalg.LinearOperator(
                (operator.size, operator.size), matvec=operator.matvec, dtype=np.float64
            )
            inverse_diagonal = 1.0 / operator.diagonal
            self._preconditioner = sparse_linalg.LinearOperator(
                (operator.size, operator.size), matvec=lambda x: inverse_diagonal * x, dtype=np.float64
            )
        logger.solver(f"Solver handle ready: mode={self.mode.value}, size={operator.size}")

    @property
    def lattice(self) -> Optional[Lattice4]:
        return getattr(self.operator, "lattice", None)

    @property
    def size(self) -> int:
        return self.operator.size

    @property
    def cholesky_factor(self) -> np.ndarray:
        """Upper factor R with A = RᵀR (dense tier only)"""
        if self._cholesky is None:
            raise ValueError(f"No dense Cholesky factor in mode {self.mode.value}")
        return self._cholesky

    @property
    def min_pivot(self) -> float:
        """Smallest pivot of the direct factorisation"""
        if self._cholesky is not None:
            return float(np.min(np.diag(self._cholesky)) ** 2)
        if self._lu is not None:
            return float(np.min(self._lu.U.diagonal()))
        raise ValueError("The iterative tier has no factorisation pivots")

    def _cg(self, b: np.ndarray) -> np.ndarray:
        norm_b = np.linalg.norm(b)
        count = 0

        def tick(_):
            nonlocal count
            count += 1

        x = None
        residual = np.inf
        for _ in range(2):
            x, info = sparse_linalg.cg(
                self._linear_operator,
                b,
                x0=x,
                rtol=self.tolerance,
                atol=0.0,
                maxiter=max(self.max_iterations - count, 1),
                M=self._preconditioner,
                callback=tick,
            )
            residual = np.linalg.norm(b - self.operator.matvec(x)) / norm_b
            # a restart only helps when the recursive residual drifted from the true one
            if residual <= self.tolerance or info != 0 or count >= self.max_iterations:
                break
        logger.solver(f"CG finished: iterations={count}, relative residual={residual:.3e}")
        if residual > self.tolerance:
            logger.error(f"CG failed to converge: residual={residual:.3e}, iterations={count}")
            raise SolverConvergenceError(residual, count, self.tolerance)
        return x

    def solve(self, b: np.ndarray) -> np.ndarray:
        rhs = np.asarray(b, dtype=np.float64)
        if rhs.shape[0] != self.size:
            raise ValueError(f"Right-hand side has {rhs.shape[0]} rows, operator has {self.size}")
        if not np.any(rhs):
            return np.zeros_like(rhs)
        if self._cholesky is not None:
            return linalg.cho_solve((self._cholesky, False), rhs)
        if self._lu is not None:
            with self._lock:
                return self._lu.solve(rhs)
        if rhs.ndim == 1:
            return self._cg(rhs)
        return np.column_stack([self._cg(rhs[:, j]) if np.any(rhs[:, j]) else np.zeros(self.size)
                                for j in range(rhs.shape[1])])


def solve(handle: SolverHandle, b: np.ndarray) -> np.ndarray:
    """x with A x = b (columns solved independently when b is 2D)"""
    return handle.solve(b)


def _unit_columns(size: int, vertices: np.ndarray) -> np.ndarray:
    block = np.zeros((size, len(vertices)))
    block[vertices, np.arange(len(vertices))] = 1.0
    return block


def green_diag(handle: SolverHandle, vertices: Optional[Sequence[int]] = None) -> np.ndarray:
    """
    G(v, v) = (A⁻¹)_vv for the requested vertices (all of V_N by default)

    The iterative tier needs one CG solve per vertex; prefer passing `vertices`.
    """
    idx = np.arange(handle.size) if vertices is None else np.asarray(vertices, dtype=np.int64)
    if handle.mode is SolverMode.DIRECT_DENSE:
        inverse_factor = linalg.solve_triangular(handle.cholesky_factor, np.eye(handle.size), lower=False)
        return np.einsum("ij,ij->i", inverse_factor[idx], inverse_factor[idx])
    if handle.mode is SolverMode.ITERATIVE and len(idx) > 1000:
        logger.warning(f"Iterative Green diagonal over {len(idx)} vertices needs as many CG solves")
    out = np.empty(len(idx))
    step = GREEN_BLOCK if handle.mode is SolverMode.DIRECT_SPARSE else 1
    for start in range(0, len(idx), step):
        chunk = idx[start:start + step]
        columns = handle.solve(_unit_columns(handle.size, chunk))
        out[start:start + step] = columns[chunk, np.arange(len(chunk))]
    return out


def green_column(handle: SolverHandle, v: int) -> np.ndarray:
    """Column v of A⁻¹"""
    e = np.zeros(handle.size)
    e[int(v)] = 1.0
    return handle.solve(e)


def green_entry(handle: SolverHandle, u: int, v: int) -> float:
    return float(green_column(handle, v)[int(u)])


@dataclass(frozen=True, eq=False)
class ConditionalOperators:
    """Conditional law of h on U given h outside U"""

    inner: np.ndarray
    boundary: np.ndarray
    coupling: sp.csr_matrix
    solver: SolverHandle

    def conditional_mean(self, values: np.ndarray) -> np.ndarray:
        """-A_UU⁻¹ A_{U,∂₂U} h_{∂₂U} for a flat field `values` over V_N"""
        if len(self.boundary) == 0:
            return np.zeros(len(self.inner))
        return -self.solver.solve(self.coupling @ np.asarray(values)[self.boundary])


def conditional_operators(operator: PrecisionOperator, U: Sequence[int]) -> ConditionalOperators:
    """
    Split A along a sub-domain U

    ∂₂U is taken geometrically: vertices of V_N outside U within ℓ¹ distance 2.

    Raises:
        ValueError: U empty or with repeated vertices
    """
    inner = np.asarray(U, dtype=np.int64).ravel()
    if inner.size == 0:
        raise ValueError("Sub-domain U must not be empty")
    if np.any((inner < 0) | (inner >= operator.size)):
        raise IndexError(f"Sub-domain has vertices outside V_{operator.lattice.N}")
    if len(np.unique(inner)) != len(inner):
        raise ValueError("Sub-domain U has repeated vertices")
    inner = np.sort(inner)

    inside = np.zeros(operator.size, dtype=bool)
    inside[inner] = True
    near = ndimage.binary_dilation(
        inside.reshape(operator.lattice.shape),
        structure=ndimage.generate_binary_structure(DIM, 1),
        iterations=2,
    ).ravel()
    boundary = np.flatnonzero(near & ~inside)

    rows = operator.matrix[inner]
    block = rows[:, inner].tocsr()
    coupling = rows[:, boundary].tocsr()
    logger.debug(f"Conditional operators: |U|={len(inner)}, |∂₂U|={len(boundary)}")
    return ConditionalOperators(inner=inner, boundary=boundary, coupling=coupling,
                                solver=SolverHandle(MatrixOperator(block)))


def write_matrix_market(operator: PrecisionOperator, path: Union[str, Path]) -> Path:
    """Dump A in Matrix Market coordinate format (1-based, row-major order)"""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    scipy.io.mmwrite(str(target), operator.matrix.tocoo(), field="integer", symmetry="general")
    logger.info(f"Matrix Market dump written to {target}")
    return target


class OperatorCache:
    """Process-wide cache: one operator and one handle per (N, tier)"""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super(OperatorCache, cls).__new__(cls)
            cls._instance._initialized = False
        return cls._instance

    def __init__(self):
        if self._initialized:
            return
        self._operators = {}
        self._handles = {}
        self._lock = threading.Lock()
        self._initialized = True

    def operator(self, N: int, mode: Optional[SolverMode] = None) -> PrecisionOperator:
        key = (N, SolverMode(mode) if mode else solver_mode_for_side(N))
        with self._lock:
            if key not in self._operators:
                self._operators[key] = assemble_precision(Lattice4(N), key[1])
            return self._operators[key]

    def handle(self, N: int, mode: Optional[SolverMode] = None) -> SolverHandle:
        operator = self.operator(N, mode)
        key = (N, operator.solver_mode)
        with self._lock:
            if key not in self._handles:
                self._handles[key] = SolverHandle(operator)
            return self._handles[key]

    def clear(self):
        with self._lock:
            self._operators.clear()
            self._handles.clear()
