"""Branching random walk θ and modified branching random walk ξ on V_N, N = 2^n.

BRW: one unit Gaussian per level for the dyadic box floor(v / 2^k) holding v.
MBRW: at level k < n the sum of the 2^{4k} periodic boxes of side 2^k holding
v, each with variance 2^{-4k}. Level n realises Π(1 - t_i/N) exactly: each
factor is split as (N/2 - t_i) + N/2 and the sixteen products are carried
by independent sub-fields, boxes of side N/2 on the axes in S and the whole
torus on the others.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import cached_property
from typing import List, Optional, Sequence, Tuple

import numpy as np

from membrane.field_sampler import Field, Provenance
from membrane.lattice import DIM, Lattice4, PrefixSum4, periodic_window_sum, torus_distances

# scale of R_{ℓ,N} in the top-ℓ trend: 2√(2 ln 2)/π
BRW_SCALE = 2.0 * np.sqrt(2.0 * np.log(2.0)) / np.pi


@dataclass(frozen=True)
class DyadicDepth:
    n: int

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 1:
            raise ValueError(f"Dyadic depth must be an integer >= 1, got {self.n}")

    @property
    def N(self) -> int:
        return 2 ** self.n

    @cached_property
    def lattice(self) -> Lattice4:
        return Lattice4(self.N)

    @classmethod
    def from_side(cls, N: int) -> "DyadicDepth":
        n = int(N).bit_length() - 1
        if N < 2 or 2 ** n != N:
            raise ValueError(f"Side {N} is not a power of two >= 2")
        return cls(n)


@dataclass(frozen=True, eq=False)
class LevelNoise:
    """
    Scaled box variables of one MBRW level

    `grid` has extent N on the axes that carry boxes of side `sides[i]` and
    extent 1 on axes where the box spans the whole torus (those variables are
    pre-summed, so their variance is already multiplied by N).
    """

    level: int
    grid: np.ndarray
    sides: Tuple[int, int, int, int]

    def window_sums(self) -> np.ndarray:
        if all(extent == self.grid.shape[0] for extent in self.grid.shape) and self.grid.shape[0] > 1:
            return PrefixSum4(self.grid).window_sums(self.sides)
        out = self.grid
        for axis in range(DIM):
            if out.shape[axis] > 1:
                out = periodic_window_sum(out, self.sides[axis], axis)
        return out


def _top_level_subsets():
    """Axis subsets S in a fixed order (bit pattern, first axis most significant)"""
    return [tuple(axis for axis in range(DIM) if bits[axis]) for bits in itertools.product((0, 1), repeat=DIM)]


def draw_mbrw_noise(depth: DyadicDepth, rng: np.random.Generator) -> List[LevelNoise]:
    """All box variables of one MBRW sample, level-major, subsets of the top level in fixed order"""
    N = depth.N
    levels = []
    for k in range(depth.n):
        side = 2 ** k
        grid = rng.standard_normal((N,) * DIM) * 2.0 ** (-2 * k)
        levels.append(LevelNoise(level=k, grid=grid, sides=(side,) * DIM))
    half = N // 2
    for subset in _top_level_subsets():
        shape = tuple(N if axis in subset else 1 for axis in range(DIM))
        # per-box variance N^-4 2^-(4-|S|), times N for each pre-summed axis
        variance = float(N) ** (-len(subset)) * 2.0 ** (-(DIM - len(subset)))
        grid = rng.standard_normal(shape) * np.sqrt(variance)
        sides = tuple(half if axis in subset else N for axis in range(DIM))
        levels.append(LevelNoise(level=depth.n, grid=grid, sides=sides))
    return levels


def _lift_torus(values: np.ndarray) -> np.ndarray:
    """Extend a torus field of side N to V_N by identifying coordinate N with 0"""
    return np.pad(values, [(0, 1)] * DIM, mode="wrap")


def mbrw_from_noise(depth: DyadicDepth, levels: Sequence[LevelNoise]) -> np.ndarray:
    total = np.zeros((depth.N,) * DIM)
    for noise in levels:
        total = total + noise.window_sums()
    return _lift_torus(total)


def sample_mbrw(depth: DyadicDepth, rng: np.random.Generator, seed: int = 0) -> Field:
    values = mbrw_from_noise(depth, draw_mbrw_noise(depth, rng))
    return Field(depth.lattice, values, Provenance.MBRW, seed)


def _bruteforce_value(depth: DyadicDepth, levels: Sequence[LevelNoise], vertex: Sequence[int]) -> float:
    N = depth.N
    v = [int(c) % N for c in vertex]
    total = 0.0
    for noise in levels:
        ranges = []
        for axis in range(DIM):
            if noise.grid.shape[axis] == 1:
                ranges.append([0])
            else:
                ranges.append([(v[axis] - j) % N for j in range(noise.sides[axis])])
        for corner in itertools.product(*ranges):
            total += noise.grid[corner]
    return total


def sample_mbrw_bruteforce(
    depth: DyadicDepth,
    rng: np.random.Generator,
    vertices: Optional[Sequence[Sequence[int]]] = None,
) -> np.ndarray:
    """
    Per-vertex loop over every box holding the vertex, same stream as sample_mbrw

    Returns:
        values at `vertices` (all of V_N when omitted), shape (k,)
    """
    levels = draw_mbrw_noise(depth, rng)
    points = depth.lattice.coordinates if vertices is None else np.asarray(vertices, dtype=np.int64)
    return np.array([_bruteforce_value(depth, levels, v) for v in points])


def sample_brw(depth: DyadicDepth, rng: np.random.Generator, seed: int = 0) -> Field:
    """θ_v = Σ_k a_{k, floor(v/2^k)} over the disjoint dyadic partition of Z^4"""
    N = depth.N
    axis = np.arange(N + 1)
    values = np.zeros(depth.lattice.shape)
    for k in range(depth.n + 1):
        owner = axis // 2 ** k
        boxes = rng.standard_normal((int(owner[-1]) + 1,) * DIM)
        values += boxes[np.ix_(owner, owner, owner, owner)]
    return Field(depth.lattice, values, Provenance.BRW, seed)


def brw_cov(u: Sequence[int], v: Sequence[int], depth: DyadicDepth) -> float:
    """Number of dyadic levels at which u and v share a box"""
    a = np.asarray(u, dtype=np.int64)
    b = np.asarray(v, dtype=np.int64)
    if not (depth.lattice.contains(a) and depth.lattice.contains(b)):
        raise IndexError(f"Vertices must lie in V_{depth.N}")
    return float(sum(np.array_equal(a // 2 ** k, b // 2 ** k) for k in range(depth.n + 1)))


def mbrw_cov(u: Sequence[int], v: Sequence[int], depth: DyadicDepth) -> float:
    """
    Σ_{k=⌈log₂ d∞⌉}^{n} Π_i (1 - t_i/2^k), torus distances taken mod N

    The sum starts at k = 0 when d∞ = 0.
    """
    N = depth.N
    a = np.asarray(u, dtype=np.int64)
    b = np.asarray(v, dtype=np.int64)
    if not (depth.lattice.contains(a) and depth.lattice.contains(b)):
        raise IndexError(f"Vertices must lie in V_{N}")
    t, d_inf = torus_distances(a % N, b % N, N)
    d_inf = int(d_inf)
    start = 0 if d_inf == 0 else (d_inf - 1).bit_length()
    total = 0.0
    for k in range(start, depth.n + 1):
        total += float(np.prod(1.0 - t / 2.0 ** k))
    return total
