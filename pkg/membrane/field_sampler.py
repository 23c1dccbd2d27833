"""Exact membrane sampling, Gibbs-Markov decomposition and Dysonization."""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Sequence, Tuple

import numpy as np
from scipy import linalg

from membrane.biharmonic import (
    GAMMA,
    ConditionalOperators,
    PrecisionOperator,
    SolverHandle,
    SolverMode,
    noise_mask,
)
from membrane.lattice import Lattice4


class Provenance(str, Enum):
    MEMBRANE = "membrane"
    BRW = "brw"
    MBRW = "mbrw"
    INTERPOLATED = "interpolated"
    FINE = "fine"
    SMOOTH = "smooth"

    @property
    def code(self) -> int:
        return list(Provenance).index(self)

    @classmethod
    def from_code(cls, code: int) -> "Provenance":
        members = list(cls)
        if not 0 <= code < len(members):
            raise ValueError(f"Unknown provenance code: {code}")
        return members[code]


@dataclass(frozen=True, eq=False)
class Field:
    """Real values on V_N in canonical order, immutable after creation"""

    lattice: Lattice4
    values: np.ndarray
    provenance: Provenance
    seed: int = 0

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64).reshape(self.lattice.shape)
        if not np.all(np.isfinite(values)):
            raise ValueError("Field values must be finite")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ValueError(f"Field seed must fit in 64 unsigned bits, got {self.seed}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "provenance", Provenance(self.provenance))

    @property
    def N(self) -> int:
        return self.lattice.N

    @property
    def flat(self) -> np.ndarray:
        return self.values.ravel()

    def at(self, vertex: Sequence[int]) -> float:
        return float(self.values[tuple(vertex)])


@dataclass(frozen=True)
class DysonParams:
    """Interpolation time t for ĥ = √(1 - t/(g ln N)) h¹ + √(t/(g ln N)) h²"""

    t: float
    N: int
    g: float = GAMMA

    def __post_init__(self):
        if self.N < 2:
            raise ValueError(f"Dysonization needs N >= 2, got {self.N}")
        if self.t < 0:
            raise ValueError(f"Diffusion time must be non-negative, got {self.t}")
        if self.t >= self.g * np.log(self.N):
            raise ValueError(f"t={self.t} must stay below g ln N = {self.g * np.log(self.N):.6f}")

    @property
    def weight(self) -> float:
        """t / (g ln N), the share of the second copy in the variance"""
        return self.t / (self.g * np.log(self.N))

    @property
    def coefficients(self) -> Tuple[float, float]:
        return float(np.sqrt(1.0 - self.weight)), float(np.sqrt(self.weight))


def sample_membrane(handle: SolverHandle, rng: np.random.Generator, seed: int = 0) -> Field:
    """
    Draw h ~ N(0, A⁻¹)

    Dense tier: h = R⁻¹z with A = RᵀR. Other tiers: z on W = V_N ∪ ∂₁V_N,
    then A h = Lᵀz, whose solution has covariance A⁻¹LᵀLA⁻¹ = A⁻¹.
    """
    operator = handle.operator
    if not isinstance(operator, PrecisionOperator):
        raise ValueError("sample_membrane needs a handle built from assemble_precision")
    if handle.mode is SolverMode.DIRECT_DENSE:
        z = rng.standard_normal(operator.size)
        h = linalg.solve_triangular(handle.cholesky_factor, z, lower=False)
    else:
        z = rng.standard_normal(int(np.count_nonzero(noise_mask(operator.lattice))))
        h = handle.solve(operator.noise_rhs(z))
    return Field(operator.lattice, h, Provenance.MEMBRANE, seed)


def gibbs_markov_decompose(h: Field, U: Sequence[int], cond: ConditionalOperators) -> Tuple[Field, Field]:
    """
    Split h on U into smooth (conditional mean) and fine (independent membrane on U) parts

    Both parts are returned as fields on V_N that vanish outside U.
    """
    inner = np.sort(np.asarray(U, dtype=np.int64).ravel())
    if not np.array_equal(inner, cond.inner):
        raise ValueError("Sub-domain does not match the conditional operators")
    smooth = np.zeros(h.lattice.vertex_count)
    fine = np.zeros(h.lattice.vertex_count)
    smooth[inner] = cond.conditional_mean(h.flat)
    fine[inner] = h.flat[inner] - smooth[inner]
    return (
        Field(h.lattice, smooth, Provenance.SMOOTH, h.seed),
        Field(h.lattice, fine, Provenance.FINE, h.seed),
    )


def dysonize(h1: Field, h2: Field, params: DysonParams) -> Field:
    if h1.lattice != h2.lattice:
        raise ValueError(f"Fields live on different lattices: N={h1.N} and N={h2.N}")
    if params.N != h1.N:
        raise ValueError(f"Dyson parameters are for N={params.N}, fields have N={h1.N}")
    a, b = params.coefficients
    return Field(h1.lattice, a * h1.values + b * h2.values, Provenance.INTERPOLATED, h1.seed)


def interpolated_covariance(green: np.ndarray, params: DysonParams) -> np.ndarray:
    """Covariance of the Dysonized field when both copies have covariance `green`"""
    a, b = params.coefficients
    return a * a * green + b * b * green


def m_N(N: int) -> float:
    """
    Centering of the maximum: (8/π) ln N - (3/(2π)) ln ln N

    Raises:
        ValueError: N < 4
    """
    if N < 4:
        raise ValueError(f"m_N needs N >= 4 so that ln ln N > 0, got {N}")
    return 8.0 / np.pi * np.log(N) - 3.0 / (2.0 * np.pi) * np.log(np.log(N))
