"""Extreme statistics of a field on V_N.

Heights are centered by m_N everywhere a point process is involved. Local
maxima are taken over ℓ¹ balls Λ_r(x) ∩ V_N and ties are kept.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Callable, Optional, Tuple, Union

import numpy as np
from numpy.polynomial.hermite import hermgauss
from scipy import integrate, ndimage, special, stats

from membrane.errors import QuadratureError
from membrane.field_sampler import Field, m_N
from membrane.lattice import DIM
from utils.logger import logger

# rate of the height intensity e^{-πt} dt of the limiting process
INTENSITY_RATE = np.pi
PAIR_NORMS = ("linf", "l2")
GH_NODES = 41
GH_MAX_NODES = GH_NODES * 2 ** 4
GH_TOLERANCE = 1e-6
CSV_HEADER = "x1,x2,x3,x4,height"
LOG_SPACE_EXPONENT = 700.0


def _side(h: Field, N: Optional[int]) -> int:
    if N is not None and N != h.N:
        raise ValueError(f"Side N={N} does not match the field (N={h.N})")
    return h.N


@dataclass(frozen=True, eq=False)
class PointProcessSample:
    """Atoms (x/N, h_x - m_N) of the r-local extremal process"""

    vertices: np.ndarray
    heights: np.ndarray
    N: int
    r: int

    @property
    def positions(self) -> np.ndarray:
        return self.vertices / float(self.N)

    def __len__(self) -> int:
        return len(self.heights)


@dataclass(frozen=True)
class PairStatistic:
    """max h_u + h_v over r <= ‖u - v‖ <= N/r; `value` is None when the window is empty"""

    value: Optional[float]
    u: Optional[Tuple[int, ...]]
    v: Optional[Tuple[int, ...]]
    r: int
    upper: float
    norm: str = "linf"

    @property
    def empty(self) -> bool:
        return self.value is None


@dataclass(frozen=True, eq=False)
class TestFunction:
    """
    Non-negative f on [0,1]^4 × R, zero outside its windows

    `callback(x, h)` broadcasts x of shape (..., 4) against h of shape (...).
    """

    __test__ = False

    callback: Callable[[np.ndarray, np.ndarray], np.ndarray]
    height_window: Tuple[float, float] = (-np.inf, np.inf)
    spatial_window: Tuple[Tuple[float, float], ...] = ((0.0, 1.0),) * DIM
    smooth: bool = True

    def __call__(self, x, h) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        h = np.asarray(h, dtype=np.float64)
        lo = np.array([w[0] for w in self.spatial_window])
        hi = np.array([w[1] for w in self.spatial_window])
        inside = np.all((x >= lo) & (x <= hi), axis=-1) & (h >= self.height_window[0]) & (h <= self.height_window[1])
        values = np.broadcast_to(self.callback(x, h), inside.shape)
        return np.where(inside, values, 0.0)


def extract_extremal_process(h: Field, r: int, N: Optional[int] = None) -> PointProcessSample:
    """
    Atoms at every x with h_x = max over Λ_r(x)

    The ℓ¹ ball max is r passes of the radius-1 cross max; a box is
    coordinate convex, so every point of Λ_r(x) is reached by a monotone path.
    """
    side = _side(h, N)
    if r < 1:
        raise ValueError(f"Radius must be >= 1, got {r}")
    values = h.values
    if r >= DIM * side:
        is_max = values == values.max()
    else:
        cross = ndimage.generate_binary_structure(DIM, 1)
        neighbourhood = values
        for _ in range(r):
            neighbourhood = ndimage.maximum_filter(neighbourhood, footprint=cross, mode="constant", cval=-np.inf)
        is_max = values >= neighbourhood
    vertices = np.argwhere(is_max)
    return PointProcessSample(vertices=vertices, heights=values[is_max] - m_N(side), N=side, r=r)


def level_set(h: Field, lam: float, N: Optional[int] = None) -> np.ndarray:
    """A_{N,λ} = {v : h_v >= m_N - λ} as an (k, 4) coordinate array"""
    side = _side(h, N)
    return np.argwhere(h.values >= m_N(side) - lam)


def _pair_distance(a: np.ndarray, block: np.ndarray, norm: str) -> np.ndarray:
    diff = np.abs(block - a)
    if norm == "linf":
        return diff.max(axis=1).astype(np.float64)
    return np.sqrt((diff ** 2).sum(axis=1))


def pair_max(h: Field, r: int, N: Optional[int] = None, norm: str = "linf") -> PairStatistic:
    """
    h⋄_{N,r}: the best pair sum over Ξ_{N,r}

    Values are scanned in decreasing order; a row stops once its best partner
    cannot beat the current optimum. Ties go to the lexicographically smallest (u, v).
    """
    side = _side(h, N)
    if norm not in PAIR_NORMS:
        raise ValueError(f"Unsupported pair norm: {norm}")
    if r < 1:
        raise ValueError(f"Radius must be >= 1, got {r}")
    upper = side / r
    if r > upper:
        return PairStatistic(None, None, None, r, upper, norm)

    values = h.flat
    order = np.argsort(-values, kind="stable")
    ranked = values[order]
    descending = -ranked
    coords = h.lattice.coordinates[order]
    best = -np.inf
    winners = []
    for i in range(len(ranked) - 1):
        if ranked[i] + ranked[i + 1] < best:
            break
        # partners j > i with ranked[i] + ranked[j] >= best
        stop = len(ranked) if best == -np.inf else int(np.searchsorted(descending, ranked[i] - best, side="right"))
        if stop <= i + 1:
            continue
        partners = np.arange(i + 1, stop)
        dist = _pair_distance(coords[i], coords[partners], norm)
        valid = partners[(dist >= r) & (dist <= upper)]
        if len(valid) == 0:
            continue
        sums = ranked[i] + ranked[valid]
        top = sums.max()
        if top > best:
            best = top
            winners = []
        if top == best:
            winners.extend((min(order[i], order[j]), max(order[i], order[j])) for j in valid[sums == top])
    if not winners:
        return PairStatistic(None, None, None, r, upper, norm)
    u, v = min(winners)
    lattice = h.lattice
    return PairStatistic(
        value=float(best),
        u=tuple(int(c) for c in lattice.coords(u)),
        v=tuple(int(c) for c in lattice.coords(v)),
        r=r,
        upper=upper,
        norm=norm,
    )


def top_ell_sum(h: Field, ell: int) -> float:
    """S_{ℓ,N}: sum of the ℓ largest values at distinct vertices"""
    values = h.flat
    if not 1 <= ell <= len(values):
        raise ValueError(f"ℓ must lie in [1, {len(values)}], got {ell}")
    top = np.partition(values, len(values) - ell)[len(values) - ell:]
    return float(np.sort(top)[::-1].sum())


def max_centered(h: Field, N: Optional[int] = None) -> float:
    """M_N - m_N"""
    side = _side(h, N)
    return float(h.values.max() - m_N(side))


def derivative_martingale(h: Field, N: Optional[int] = None) -> float:
    """
    Z_N = Σ_v (8 ln N - π h_v)/√8 · e^{π h_v - 8 ln N}

    Falls back to a signed log-sum-exp when an exponent exceeds 700.
    """
    side = _side(h, N)
    if side < 2:
        raise ValueError(f"Z_N needs N >= 2, got {side}")
    exponent = np.pi * h.flat - 8.0 * np.log(side)
    weights = -exponent / np.sqrt(8.0)
    if exponent.max() <= LOG_SPACE_EXPONENT:
        return float(np.sum(weights * np.exp(exponent)))
    log_abs, sign = special.logsumexp(exponent, b=weights, return_sign=True)
    if log_abs > LOG_SPACE_EXPONENT:
        logger.warning(f"Z_N overflows float64 (log|Z_N| = {log_abs:.1f})")
    with np.errstate(over="ignore"):
        return float(sign * np.exp(log_abs))


@lru_cache(maxsize=16)
def _hermite_rule(nodes: int) -> Tuple[np.ndarray, np.ndarray]:
    z, w = hermgauss(nodes)
    return z, w / np.sqrt(np.pi)


def _gauss_hermite_transform(f: TestFunction, t: float, x: np.ndarray, h: np.ndarray, nodes: int) -> np.ndarray:
    z, w = _hermite_rule(nodes)
    shifted = h[..., None] + np.sqrt(2.0 * t) * z - np.pi * t / 2.0
    # E[e^{-f} - 1] keeps f ≡ 0 exactly at zero
    return -np.log1p(np.expm1(-f(x[..., None, :], shifted)) @ w)


def _quad_transform(f: TestFunction, t: float, x: np.ndarray, h: np.ndarray, tolerance: float) -> np.ndarray:
    out = np.zeros(h.shape)
    law = stats.norm(scale=np.sqrt(t))
    lo, hi = f.height_window
    for idx in np.ndindex(h.shape):
        a = max(lo - h[idx] + np.pi * t / 2.0, -12.0 * np.sqrt(t))
        b = min(hi - h[idx] + np.pi * t / 2.0, 12.0 * np.sqrt(t))
        if a >= b:
            continue
        point = x[idx]
        value, error = integrate.quad(
            lambda w: float(law.pdf(w) * np.expm1(-f(point, h[idx] + w - np.pi * t / 2.0))), a, b, epsabs=tolerance / 10
        )
        if error > tolerance:
            raise QuadratureError(error, 0)
        out[idx] = -np.log1p(value)
    return out


def f_t_transform(
    f: TestFunction,
    t: float,
    nodes: int = GH_NODES,
    tolerance: float = GH_TOLERANCE,
    max_nodes: int = GH_MAX_NODES,
) -> TestFunction:
    """
    f_t(x, h) = -log E[exp(-f(x, h + W_t - πt/2))], W_t ~ N(0, t)

    Smooth f: Gauss-Hermite, node count doubled until the value moves by at
    most `tolerance`. Other f: adaptive quad on the height window.
    """
    if t <= 0:
        raise ValueError(f"Diffusion time must be positive, got {t}")

    def transformed(x, h):
        x = np.asarray(x, dtype=np.float64)
        h = np.asarray(h, dtype=np.float64)
        shape = np.broadcast_shapes(x.shape[:-1], h.shape)
        x = np.broadcast_to(x, shape + (DIM,))
        h = np.broadcast_to(h, shape)
        if not f.smooth:
            return _quad_transform(f, t, x, h, tolerance)
        count = nodes
        previous = _gauss_hermite_transform(f, t, x, h, count)
        while True:
            count *= 2
            current = _gauss_hermite_transform(f, t, x, h, count)
            change = float(np.max(np.abs(current - previous), initial=0.0))
            if change <= tolerance:
                return current
            if count >= max_nodes:
                logger.error(f"Gauss-Hermite unstable at {count} nodes: change {change:.3e}")
                raise QuadratureError(change, count)
            previous = current

    return TestFunction(callback=transformed, spatial_window=f.spatial_window, smooth=True)


def standard_bump(amplitude: float = 1.0, center: float = 0.0, halfwidth: float = 2.0) -> TestFunction:
    """
    amplitude · exp(1 - 1/(1 - s²)), s = (h - center)/halfwidth, on the whole unit cube

    Peak value `amplitude` at h = center, C^∞ and supported on |s| < 1.
    """
    if amplitude < 0 or halfwidth <= 0:
        raise ValueError(f"Bump needs amplitude >= 0 and halfwidth > 0, got {amplitude}, {halfwidth}")

    def bump(x, h):
        s = (np.asarray(h, dtype=np.float64) - center) / halfwidth
        with np.errstate(divide="ignore", over="ignore"):
            profile = np.where(np.abs(s) < 1.0, np.exp(1.0 - 1.0 / np.maximum(1.0 - s * s, 1e-300)), 0.0)
        return amplitude * profile

    return TestFunction(callback=bump, height_window=(center - halfwidth, center + halfwidth))


def laplace_functional(pp: PointProcessSample, f: TestFunction) -> Tuple[float, float]:
    """(⟨η, f⟩, e^{-⟨η, f⟩})"""
    if len(pp) == 0:
        return 0.0, 1.0
    inner = float(np.sum(f(pp.positions, pp.heights)))
    return inner, float(np.exp(-inner))


def write_point_process_csv(pp: PointProcessSample, path: Union[str, Path]) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    rows = np.column_stack([pp.positions, pp.heights]) if len(pp) else np.empty((0, DIM + 1))
    np.savetxt(target, rows, delimiter=",", fmt="%.12g", header=CSV_HEADER, comments="")
    logger.debug(f"Point process written: {target} ({len(pp)} atoms)")
    return target


def read_point_process_csv(path: Union[str, Path]) -> np.ndarray:
    """Rows (x1, x2, x3, x4, height) of a point-process CSV"""
    source = Path(path)
    header = source.read_text().splitlines()[0] if source.stat().st_size else ""
    if header != CSV_HEADER:
        raise ValueError(f"Unexpected point-process header in {source}: {header!r}")
    return np.loadtxt(source, delimiter=",", skiprows=1, ndmin=2).reshape(-1, DIM + 1)
