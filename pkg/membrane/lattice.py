"""Lattice geometry for the box V_N = ([0, N] ∩ Z)^4.

Vertices are ordered lexicographically with the last coordinate varying
fastest, which is numpy's C order on an array of shape (N+1,)*4. Every
flat vector in the package uses this ordering.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence, Tuple, Union

import numpy as np

DIM = 4
NORMS = ("l1", "linf")

Vertex = Union[Sequence[int], np.ndarray]
Sides = Union[int, Sequence[int]]


@dataclass(frozen=True)
class Lattice4:
    """The box V_N with its canonical vertex ordering"""

    N: int

    def __post_init__(self):
        if int(self.N) != self.N or self.N < 1:
            raise ValueError(f"Lattice side must be a positive integer, got {self.N}")

    @property
    def side_points(self) -> int:
        return self.N + 1

    @property
    def shape(self) -> Tuple[int, int, int, int]:
        return (self.N + 1,) * DIM

    @property
    def vertex_count(self) -> int:
        return (self.N + 1) ** DIM

    @property
    def center(self) -> Tuple[int, int, int, int]:
        return (self.N // 2,) * DIM

    def contains(self, coords: Vertex) -> bool:
        c = np.asarray(coords)
        return bool(np.all((c >= 0) & (c <= self.N)))

    def index(self, coords: Vertex) -> Union[int, np.ndarray]:
        """
        Flat index of one vertex or of an (k, 4) array of vertices

        Raises:
            IndexError: a coordinate lies outside [0, N]
        """
        c = np.asarray(coords, dtype=np.int64)
        if c.shape[-1] != DIM:
            raise ValueError(f"Vertices need {DIM} coordinates, got shape {c.shape}")
        if np.any((c < 0) | (c > self.N)):
            raise IndexError(f"Vertex outside V_{self.N}: {c.tolist()}")
        flat = np.ravel_multi_index(tuple(np.moveaxis(c, -1, 0)), self.shape)
        return int(flat) if c.ndim == 1 else flat

    def coords(self, index: Union[int, np.ndarray]) -> np.ndarray:
        """Coordinates of one flat index (shape (4,)) or of an index array (shape (k, 4))"""
        idx = np.asarray(index, dtype=np.int64)
        if np.any((idx < 0) | (idx >= self.vertex_count)):
            raise IndexError(f"Vertex index outside [0, {self.vertex_count}): {idx.tolist()}")
        return np.stack(np.unravel_index(idx, self.shape), axis=-1)

    @cached_property
    def coordinates(self) -> np.ndarray:
        """All vertices as a read-only (vertex_count, 4) array in canonical order"""
        grid = np.indices(self.shape).reshape(DIM, -1).T.copy()
        grid.setflags(write=False)
        return grid

    def box_vertices(self, corner: Vertex, extent: Sides) -> np.ndarray:
        """
        Flat indices of the sub-box corner + [0, extent)^4

        Args:
            corner: lowest vertex of the box
            extent: number of points per axis (int or one per axis)

        Returns:
            Sorted index array
        """
        lo = np.asarray(corner, dtype=np.int64)
        ext = _per_axis(extent)
        if np.any(ext < 1):
            raise ValueError(f"Box extent must be positive, got {ext.tolist()}")
        hi = lo + ext - 1
        if not (self.contains(lo) and self.contains(hi)):
            raise IndexError(f"Box {lo.tolist()} + {ext.tolist()} leaves V_{self.N}")
        axes = [np.arange(a, b + 1) for a, b in zip(lo, hi)]
        block = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, DIM)
        return self.index(block)


def _per_axis(sides: Sides) -> np.ndarray:
    s = np.asarray(sides, dtype=np.int64)
    if s.ndim == 0:
        s = np.full(DIM, int(s), dtype=np.int64)
    if s.shape != (DIM,):
        raise ValueError(f"Expected one side or {DIM} sides, got {s.tolist()}")
    return s


def torus_distance(u: Vertex, v: Vertex, N: int) -> Tuple[Tuple[int, ...], int]:
    """
    Per-coordinate wrapped distances t_i(u, v) and their maximum d_inf

    Args:
        u, v: vertices with coordinates in [0, N)
        N: torus side

    Returns:
        (t, d_inf)
    """
    t, d = torus_distances(np.asarray(u), np.asarray(v), N)
    return tuple(int(x) for x in t), int(d)


def torus_distances(u: np.ndarray, v: np.ndarray, N: int) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorised torus_distance over broadcastable (..., 4) arrays"""
    a = np.asarray(u, dtype=np.int64)
    b = np.asarray(v, dtype=np.int64)
    for name, arr in (("u", a), ("v", b)):
        if arr.shape[-1] != DIM:
            raise ValueError(f"{name} needs {DIM} coordinates, got shape {arr.shape}")
        if np.any((arr < 0) | (arr >= N)):
            raise ValueError(f"Torus coordinates of {name} must lie in [0, {N}): {arr.tolist()}")
    diff = a - b
    t = np.minimum(np.abs(diff), np.minimum(np.abs(diff - N), np.abs(diff + N)))
    return t, t.max(axis=-1)


def ball(x: Vertex, r: int, norm: str, lattice: Lattice4) -> np.ndarray:
    """
    Vertices of V_N within distance r of x

    For norm="l1" this is Λ_r(x), the set over which r-local maxima are taken.

    Returns:
        Sorted flat indices
    """
    if norm not in NORMS:
        raise ValueError(f"Unsupported norm: {norm}")
    if r < 0:
        raise ValueError(f"Radius must be non-negative, got {r}")
    center = np.asarray(x, dtype=np.int64)
    if not lattice.contains(center):
        raise IndexError(f"Vertex outside V_{lattice.N}: {center.tolist()}")
    axes = [np.arange(max(c - r, 0), min(c + r, lattice.N) + 1) for c in center]
    block = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, DIM)
    offset = np.abs(block - center)
    radius = offset.sum(axis=1) if norm == "l1" else offset.max(axis=1)
    return lattice.index(block[radius <= r])


def periodic_window_sum(grid: np.ndarray, side: int, axis: int) -> np.ndarray:
    """
    Sum of the `side` entries ending at each position along one periodic axis

    out[..., v, ...] = sum_{j=0}^{side-1} grid[..., (v - j) mod n, ...]
    """
    n = grid.shape[axis]
    if not 1 <= side <= n:
        raise ValueError(f"Window side must lie in [1, {n}], got {side}")
    if side == n:
        return np.broadcast_to(grid.sum(axis=axis, keepdims=True), grid.shape).copy()
    head = np.take(grid, np.arange(n - side, n), axis=axis)
    acc = np.cumsum(np.concatenate([head, grid], axis=axis), axis=axis)
    upper = np.take(acc, np.arange(side, n + side), axis=axis)
    lower = np.take(acc, np.arange(0, n), axis=axis)
    return upper - lower


class PrefixSum4:
    """Summed-area table of a periodic 4D grid of side N"""

    def __init__(self, grid: np.ndarray):
        values = np.asarray(grid, dtype=np.float64)
        if values.ndim != DIM or len(set(values.shape)) != 1:
            raise ValueError(f"PrefixSum4 needs a cubic {DIM}D grid, got shape {values.shape}")
        self.N = values.shape[0]
        self.grid = values.copy()
        self.grid.setflags(write=False)

    @cached_property
    def table(self) -> np.ndarray:
        """Inclusive prefix sums with a zero leading slab: table[i] = sum(grid[:i])"""
        acc = self.grid
        for axis in range(DIM):
            acc = np.cumsum(acc, axis=axis)
        table = np.zeros((self.N + 1,) * DIM)
        table[(slice(1, None),) * DIM] = acc
        table.setflags(write=False)
        return table

    def _sides(self, side: Sides) -> np.ndarray:
        sides = _per_axis(side)
        if np.any((sides < 1) | (sides > self.N)):
            raise ValueError(f"Box side must lie in [1, {self.N}], got {sides.tolist()}")
        return sides

    def _segments(self, start: int, length: int):
        start %= self.N
        end = start + length
        if end <= self.N:
            return [(start, end)]
        return [(start, self.N), (0, end - self.N)]

    def _plain_sum(self, lo: Sequence[int], hi: Sequence[int]) -> float:
        total = 0.0
        for picks in itertools.product((0, 1), repeat=DIM):
            point = tuple(hi[i] if p else lo[i] for i, p in enumerate(picks))
            sign = -1.0 if (DIM - sum(picks)) % 2 else 1.0
            total += sign * self.table[point]
        return total

    def box_sum(self, corner: Vertex, side: Sides) -> float:
        """
        Sum over the periodic box corner + [0, side)^4

        Args:
            corner: anchor with coordinates in [0, N)
            side: box side (int or one per axis), 1 <= side <= N
        """
        anchor = np.asarray(corner, dtype=np.int64)
        if anchor.shape != (DIM,) or np.any((anchor < 0) | (anchor >= self.N)):
            raise ValueError(f"Box corner must lie in [0, {self.N})^{DIM}, got {anchor.tolist()}")
        sides = self._sides(side)
        total = 0.0
        pieces = [self._segments(int(c), int(s)) for c, s in zip(anchor, sides)]
        for combo in itertools.product(*pieces):
            total += self._plain_sum([lo for lo, _ in combo], [hi for _, hi in combo])
        return total

    def window_sums(self, side: Sides) -> np.ndarray:
        """
        Box sums for every anchor at once

        out[v] is the sum over the periodic box of the given side(s) whose far
        corner is v, i.e. box_sum(v - side + 1, side). One accumulation pass per axis.
        """
        sides = self._sides(side)
        out = self.grid
        for axis in range(DIM):
            out = periodic_window_sum(out, int(sides[axis]), axis)
        return out
