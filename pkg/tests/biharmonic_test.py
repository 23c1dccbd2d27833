import numpy as np
import pytest
import scipy.io
from scipy import linalg

from membrane.biharmonic import (
    BIHARMONIC_DIAGONAL,
    OperatorCache,
    SolverHandle,
    SolverMode,
    assemble_precision,
    conditional_operators,
    green_column,
    green_diag,
    green_entry,
    laplacian_matrix,
    noise_mask,
    solve,
    solver_mode_for_side,
    write_matrix_market,
)
from membrane.errors import SolverConvergenceError
from membrane.lattice import Lattice4


def _stencil_oracle(lattice: Lattice4) -> np.ndarray:
    """Δ² of the infinite lattice restricted to V_N: 72, -16 (axis 1), 1 (axis 2), 2 (diagonal)"""
    diff = lattice.coordinates[:, None, :] - lattice.coordinates[None, :, :]
    l1 = np.abs(diff).sum(axis=2)
    nonzero_axes = np.count_nonzero(diff, axis=2)
    oracle = np.zeros(l1.shape, dtype=np.int64)
    oracle[l1 == 0] = 72
    oracle[l1 == 1] = -16
    oracle[(l1 == 2) & (nonzero_axes == 1)] = 1
    oracle[(l1 == 2) & (nonzero_axes == 2)] = 2
    return oracle


def _handle(N: int, mode: SolverMode, **kwargs) -> SolverHandle:
    return SolverHandle(assemble_precision(Lattice4(N), mode), **kwargs)


@pytest.mark.biharmonic
class TestPrecisionOperator:
    """A = LᵀL over the zero-extended field"""

    def test_matches_stencil_convolution(self, expect):
        lattice = Lattice4(4)
        matrix = assemble_precision(lattice).matrix.toarray()
        expect.to_equal(matrix, _stencil_oracle(lattice))

    def test_deep_interior_entries(self, expect):
        lattice = Lattice4(4)
        a = assemble_precision(lattice).matrix
        c = lattice.index((2, 2, 2, 2))
        expect.to_equal(a[c, c], BIHARMONIC_DIAGONAL)
        expect.to_equal(a[c, lattice.index((3, 2, 2, 2))], -16)
        expect.to_equal(a[c, lattice.index((2, 2, 2, 4))], 1)
        expect.to_equal(a[c, lattice.index((3, 3, 2, 2))], 2)
        expect.to_equal(a[c, lattice.index((2, 2, 3, 4))], 0)

    def test_symmetric_integer_matrix(self, expect):
        a = assemble_precision(Lattice4(3)).matrix
        expect.to_equal(a.dtype, np.dtype(np.int64))
        expect.to_equal((a != a.T).nnz, 0)

    def test_diagonal_is_constant(self, expect):
        operator = assemble_precision(Lattice4(3))
        expect.to_equal(operator.matrix.diagonal().astype(float), operator.diagonal)

    def test_matvec_matches_matrix(self, expect, stream):
        operator = assemble_precision(Lattice4(3))
        x = stream(21).standard_normal(operator.size)
        expect.to_be_close(operator.matvec(x), operator.matrix @ x, rel=1e-12, abs_tol=1e-9)

    def test_noise_rhs_is_laplacian_transpose(self, expect, stream):
        lattice = Lattice4(3)
        operator = assemble_precision(lattice)
        lap = laplacian_matrix(lattice)
        z = stream(22).standard_normal(lap.shape[0])
        expect.to_be_close(operator.noise_rhs(z), lap.T @ z, rel=1e-12, abs_tol=1e-9)
        expect.to_equal((lap.T @ lap - operator.matrix).nnz, 0)

    def test_noise_domain_size(self, expect):
        N = 4
        expect.to_equal(int(noise_mask(Lattice4(N)).sum()), (N + 1) ** 4 + 8 * (N + 1) ** 3)

    def test_too_small_lattice(self):
        with pytest.raises(ValueError):
            assemble_precision(Lattice4(1))

    @pytest.mark.parametrize("N, mode", [
        (2, SolverMode.DIRECT_DENSE),
        (6, SolverMode.DIRECT_DENSE),
        (7, SolverMode.DIRECT_SPARSE),
        (12, SolverMode.DIRECT_SPARSE),
        (13, SolverMode.ITERATIVE),
    ])
    def test_solver_tiers(self, expect, N, mode):
        expect.to_equal(solver_mode_for_side(N), mode)

    def test_matrix_market_dump(self, expect, tmp_path):
        operator = assemble_precision(Lattice4(2))
        path = write_matrix_market(operator, tmp_path / "a.mtx")
        expect.to_equal(scipy.io.mmread(str(path)).toarray(), operator.matrix.toarray())


@pytest.mark.biharmonic
class TestSolvers:
    """Direct and iterative solves on the same operator"""

    @pytest.mark.parametrize("N", [2, 3, 4, 5, 6, 7, 8])
    def test_pivots_are_positive(self, expect, N):
        mode = solver_mode_for_side(N)
        expect.to_be_truthy(_handle(N, mode).min_pivot > 0)

    @pytest.mark.slow
    @pytest.mark.parametrize("N", [9, 10, 11, 12])
    def test_pivots_are_positive_sparse(self, expect, N):
        expect.to_be_truthy(_handle(N, SolverMode.DIRECT_SPARSE).min_pivot > 0)

    @pytest.mark.parametrize("mode", list(SolverMode))
    def test_zero_rhs(self, expect, mode):
        handle = _handle(3, mode)
        expect.to_equal(solve(handle, np.zeros(handle.size)), np.zeros(handle.size))

    @pytest.mark.parametrize("mode", [SolverMode.DIRECT_DENSE, SolverMode.DIRECT_SPARSE])
    def test_direct_recovers_ones(self, expect, mode):
        handle = _handle(4, mode)
        b = handle.operator.matvec(np.ones(handle.size))
        expect.to_be_close(solve(handle, b), np.ones(handle.size), rel=1e-10, abs_tol=1e-10)

    def test_iterative_reaches_tolerance(self, expect):
        handle = _handle(4, SolverMode.ITERATIVE)
        b = handle.operator.matvec(np.ones(handle.size))
        x = solve(handle, b)
        residual = np.linalg.norm(handle.operator.matvec(x) - b) / np.linalg.norm(b)
        expect.to_be_less_than_or_equal(residual, handle.tolerance)
        expect.to_be_close(x, np.ones(handle.size), rel=0.0, abs_tol=1e-3)

    def test_green_column_residual(self, expect):
        handle = _handle(4, SolverMode.DIRECT_DENSE)
        v = handle.lattice.index((2, 1, 2, 3))
        e = np.zeros(handle.size)
        e[v] = 1.0
        x = green_column(handle, v)
        expect.to_be_less_than_or_equal(np.linalg.norm(handle.operator.matvec(x) - e), 1e-10)

    def test_tiers_agree_on_green_function(self, expect):
        dense = _handle(4, SolverMode.DIRECT_DENSE)
        sparse = _handle(4, SolverMode.DIRECT_SPARSE)
        iterative = _handle(4, SolverMode.ITERATIVE)
        center = dense.lattice.index(dense.lattice.center)
        vertices = [center, 0, 17, 300]
        expect.to_be_close(green_diag(sparse, vertices), green_diag(dense, vertices), rel=1e-9)
        exact = green_column(dense, center)
        expect.to_be_close(green_column(iterative, center), exact, rel=0.0, abs_tol=1e-4 * np.linalg.norm(exact))
        expect.to_be_close(green_entry(sparse, 17, center), exact[17], rel=1e-9)

    def test_green_diag_dense_inverse(self, expect):
        handle = _handle(3, SolverMode.DIRECT_DENSE)
        inverse = np.linalg.inv(handle.operator.matrix.toarray().astype(float))
        expect.to_be_close(green_diag(handle), np.diag(inverse), rel=1e-9)

    def test_green_diag_profile(self, expect):
        handle = _handle(4, SolverMode.DIRECT_DENSE)
        diag = green_diag(handle)
        lattice = handle.lattice
        expect.to_be_truthy(np.all(diag > 0))
        expect.to_be_less_than_or_equal(diag[lattice.index((1, 2, 2, 2))], diag[lattice.index((2, 2, 2, 2))])
        expect.to_be_less_than_or_equal(diag[lattice.index((0, 2, 2, 2))], diag[lattice.index((1, 2, 2, 2))])

    def test_center_variance_grows_with_the_box(self, expect):
        small = _handle(4, SolverMode.DIRECT_DENSE)
        large = _handle(6, SolverMode.DIRECT_DENSE)
        g_small = green_entry(small, *[small.lattice.index(small.lattice.center)] * 2)
        g_large = green_entry(large, *[large.lattice.index(large.lattice.center)] * 2)
        expect.to_be_greater_than_or_equal(g_large, g_small)

    @pytest.mark.slow
    def test_center_variance_n8_dense_oracle(self, expect):
        handle = _handle(8, SolverMode.DIRECT_SPARSE)
        center = handle.lattice.index(handle.lattice.center)
        e = np.zeros(handle.size)
        e[center] = 1.0
        oracle = linalg.solve(handle.operator.matrix.toarray().astype(float), e, assume_a="pos")[center]
        expect.to_be_close(green_diag(handle, [center])[0], oracle, rel=1e-8)

    def test_iteration_budget_exhausted(self):
        handle = _handle(4, SolverMode.ITERATIVE, max_iterations=1)
        with pytest.raises(SolverConvergenceError) as error:
            handle.solve(np.ones(handle.size))
        assert error.value.iterations <= 1
        assert error.value.residual > handle.tolerance

    def test_iterative_tier_has_no_pivots(self):
        with pytest.raises(ValueError):
            _ = _handle(3, SolverMode.ITERATIVE).min_pivot

    def test_operator_cache_reuses_handles(self, expect, operator_cache):
        first = operator_cache.handle(3)
        expect.to_be_truthy(operator_cache.handle(3) is first)
        expect.to_be_truthy(OperatorCache() is operator_cache)
        expect.to_equal(first.mode, SolverMode.DIRECT_DENSE)


@pytest.mark.biharmonic
class TestConditionalOperators:
    """Splitting A along a sub-domain U"""

    def test_whole_lattice_has_no_boundary(self, expect, stream):
        operator = assemble_precision(Lattice4(3))
        cond = conditional_operators(operator, np.arange(operator.size))
        expect.to_equal(len(cond.boundary), 0)
        expect.to_equal(cond.conditional_mean(stream(23).standard_normal(operator.size)), np.zeros(operator.size))

    def test_coupling_supported_on_second_boundary(self, expect):
        lattice = Lattice4(8)
        operator = assemble_precision(lattice, SolverMode.ITERATIVE)
        U = lattice.box_vertices((3, 3, 3, 3), 3)
        cond = conditional_operators(operator, U)
        outside = np.setdiff1d(np.arange(lattice.vertex_count), np.concatenate([U, cond.boundary]))
        expect.to_equal(operator.matrix[U][:, outside].nnz, 0)
        coords = lattice.coords(cond.boundary)
        distance = np.abs(coords[:, None, :] - lattice.coords(U)[None, :, :]).sum(axis=2).min(axis=1)
        expect.to_be_truthy(np.all((distance >= 1) & (distance <= 2)))

    def test_block_is_the_membrane_on_u(self, expect):
        lattice = Lattice4(8)
        operator = assemble_precision(lattice, SolverMode.ITERATIVE)
        cond = conditional_operators(operator, lattice.box_vertices((3, 3, 3, 3), 3))
        own = assemble_precision(Lattice4(2)).matrix
        expect.to_equal(cond.solver.operator.matrix.toarray(), own.toarray())

    def test_conditional_mean_matches_dense_formula(self, expect, stream):
        lattice = Lattice4(4)
        operator = assemble_precision(lattice)
        U = lattice.box_vertices((1, 1, 1, 1), 3)
        cond = conditional_operators(operator, U)
        values = stream(24).standard_normal(lattice.vertex_count)
        a = operator.matrix.toarray().astype(float)
        rest = np.setdiff1d(np.arange(lattice.vertex_count), U)
        oracle = -np.linalg.solve(a[np.ix_(U, U)], a[np.ix_(U, rest)] @ values[rest])
        expect.to_be_close(cond.conditional_mean(values), oracle, rel=1e-9, abs_tol=1e-12)

    def test_empty_or_repeated_subdomain(self):
        operator = assemble_precision(Lattice4(2))
        with pytest.raises(ValueError):
            conditional_operators(operator, [])
        with pytest.raises(ValueError):
            conditional_operators(operator, [3, 3])
