from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.distance import pdist

from membrane.biharmonic import SolverMode, green_column
from membrane.extremes import (
    TestFunction,
    derivative_martingale,
    extract_extremal_process,
    f_t_transform,
    laplace_functional,
    level_set,
    max_centered,
    pair_max,
    standard_bump,
    top_ell_sum,
)
from membrane.field_sampler import DysonParams, Field, Provenance, dysonize, m_N
from membrane.harness import (
    MIN_COV_REPLICATES,
    EstimatorResult,
    ExperimentConfig,
    GumbelFit,
    ReplicateRunner,
    TailFit,
    empirical_cov,
    fit_exponential_tail,
    fit_gumbel,
)
from membrane.hierarchical import DyadicDepth, brw_cov, mbrw_cov
from membrane.lattice import torus_distance
from utils.logger import logger
from utils.rng import StreamFactory

# stream family reserved for choosing covariance pairs
PAIR_STREAM = 99


@dataclass(frozen=True)
class CovarianceRow:
    u: Tuple[int, ...]
    v: Tuple[int, ...]
    empirical: float
    std_error: float
    oracle: float
    replicates: int

    @property
    def z_score(self) -> float:
        if self.std_error == 0:
            return 0.0 if self.empirical == self.oracle else float("inf")
        return (self.empirical - self.oracle) / self.std_error


@dataclass(frozen=True)
class DysonComparison:
    lhs: EstimatorResult
    rhs: EstimatorResult
    interpolated: EstimatorResult
    level_set_inclusion: EstimatorResult
    t: float

    @property
    def gap(self) -> float:
        return abs(self.lhs.estimate - self.rhs.estimate)

    @property
    def combined_se(self) -> float:
        return float(np.hypot(self.lhs.std_error, self.rhs.std_error))


@dataclass(frozen=True)
class TopEllSummary:
    averages: Dict[int, EstimatorResult]
    gaps: Dict[int, EstimatorResult]
    monotone: bool


@dataclass(frozen=True)
class MaxLawSummary:
    centered_max: EstimatorResult
    derivative_martingale: EstimatorResult
    gumbel: GumbelFit
    samples: np.ndarray


def violating_pair(h: Field, r: int, c: float, norm: str = "linf") -> int:
    """
    1 if two vertices at distance in [r, N/r] both reach m_N - c·ln ln r

    Pairs are searched inside the level set only, so the cost is quadratic in
    its size rather than in the vertex count.
    """
    if r < 3:
        raise ValueError(f"The geometry bar needs r >= 3 (ln ln r > 0), got {r}")
    if r * r > h.N:
        return 0
    points = level_set(h, c * np.log(np.log(r)))
    if len(points) < 2:
        return 0
    distances = pdist(points, metric="chebyshev" if norm == "linf" else "euclidean")
    return int(np.any((distances >= r) & (distances <= h.N / r)))


def extremes_summary(h: Field, config: ExperimentConfig) -> Dict[str, Any]:
    """The per-field extreme statistics written by the extremes command"""
    pair = pair_max(h, config.r, norm=config.norm)
    return {
        "max_centered": max_centered(h),
        "level_set_size": int(len(level_set(h, config.lam))),
        "pair_max": pair.value,
        "top_ell_sum": top_ell_sum(h, config.ell),
        "derivative_martingale": derivative_martingale(h),
    }


class ExperimentHelper:
    """Named Monte Carlo experiments built on a ReplicateRunner"""

    def __init__(self, runner: Optional[ReplicateRunner] = None):
        self.runner = runner or ReplicateRunner()

    def _estimate(self, config: ExperimentConfig, values) -> EstimatorResult:
        return EstimatorResult.from_samples(
            values, config.seed, self.runner.last_wall_time if config.record_timing else None
        )

    def _pick_pairs(self, config: ExperimentConfig) -> List[Tuple[Tuple[int, ...], Tuple[int, ...]]]:
        lattice = config.lattice
        rng = StreamFactory(config.seed).stream(0, PAIR_STREAM)
        picks = rng.integers(0, lattice.vertex_count, size=(config.pairs, 2))
        pairs = [(tuple(int(c) for c in lattice.coords(a)), tuple(int(c) for c in lattice.coords(b))) for a, b in picks]
        if config.field == "membrane":
            pairs.insert(0, (lattice.center, lattice.center))
        return pairs

    def _oracle(self, config: ExperimentConfig, pairs) -> List[float]:
        if config.field == "membrane":
            lattice = config.lattice
            handle = self.runner.cache.handle(config.side, SolverMode(config.solver) if config.solver else None)
            columns = {}
            values = []
            for u, v in pairs:
                col = lattice.index(v)
                if col not in columns:
                    columns[col] = green_column(handle, col)
                values.append(float(columns[col][lattice.index(u)]))
            return values
        depth = DyadicDepth(config.depth)
        exact = brw_cov if config.field == "brw" else mbrw_cov
        return [exact(u, v, depth) for u, v in pairs]

    def covariance_check(self, config: ExperimentConfig) -> List[CovarianceRow]:
        """
        Empirical covariances of random vertex pairs against their exact values

        Args:
            config: field, side or depth, reps (>= 1000), pairs, seed

        Returns:
            One row per pair (the center variance first for membrane fields)
        """
        logger.info(f"Covariance check: {config.field}, N={config.side}, {config.pairs} pairs")
        lattice = config.lattice
        pairs = self._pick_pairs(config)
        columns = sorted({lattice.index(x) for pair in pairs for x in pair})
        position = {col: i for i, col in enumerate(columns)}
        values = np.array(self.runner.collect(config, lambda h: h.flat[columns]))
        estimates = empirical_cov(
            values,
            [(position[lattice.index(u)], position[lattice.index(v)]) for u, v in pairs],
            min_replicates=MIN_COV_REPLICATES,
        )
        oracle = self._oracle(config, pairs)
        return [
            CovarianceRow(u=u, v=v, empirical=e.estimate, std_error=e.std_error, oracle=o, replicates=e.replicates)
            for (u, v), e, o in zip(pairs, estimates, oracle)
        ]

    def covariance_comparison(
        self, depth: int, pairs: int = 50, seed: int = 0, include_membrane: bool = False
    ) -> List[Dict[str, float]]:
        """
        Exact MBRW covariances against the envelope n - log₂ d∞ (no sampling)

        With include_membrane the membrane Green entry of the same pair is added.
        """
        dyadic = DyadicDepth(depth)
        lattice = dyadic.lattice
        rng = StreamFactory(seed).stream(0, PAIR_STREAM)
        handle = self.runner.cache.handle(dyadic.N) if include_membrane else None
        rows = []
        while len(rows) < pairs:
            u, v = rng.integers(0, dyadic.N, size=(2, 4))
            _, d_inf = torus_distance(u, v, dyadic.N)
            if d_inf == 0:
                continue
            row = {
                "u": tuple(int(c) for c in u),
                "v": tuple(int(c) for c in v),
                "d_inf": d_inf,
                "mbrw_cov": mbrw_cov(u, v, dyadic),
                "envelope": dyadic.n - float(np.log2(d_inf)),
            }
            if handle is not None:
                row["membrane_cov"] = float(green_column(handle, lattice.index(v))[lattice.index(u)])
            rows.append(row)
        return rows

    def center_variance_profile(self, sides: Sequence[int], solver: Optional[str] = None) -> Dict[int, float]:
        """Exact G_N(center, center) for each N, one solve per side"""
        profile = {}
        for N in sides:
            handle = self.runner.cache.handle(N, SolverMode(solver) if solver else None)
            center = handle.lattice.index(handle.lattice.center)
            profile[N] = float(green_column(handle, center)[center])
            logger.info(f"Center variance N={N}: {profile[N]:.6f}")
        return profile

    def geometry_experiment(self, config: ExperimentConfig) -> Dict[int, EstimatorResult]:
        """
        P(some pair in Ξ_{N,r} reaches m_N - c·ln ln r), one estimate per r in config.r_values

        Returns:
            r -> probability estimate with standard error
        """
        logger.info(f"Geometry experiment: N={config.side}, r={config.r_values}, c={config.c}")
        radii = config.r_values
        indicators = np.array(self.runner.collect(
            config, lambda h: np.array([violating_pair(h, r, config.c, config.norm) for r in radii], dtype=float)
        ))
        return {r: self._estimate(config, indicators[:, i]) for i, r in enumerate(radii)}

    def dyson_experiment(self, config: ExperimentConfig, f: Optional[TestFunction] = None) -> DysonComparison:
        """
        E[e^{-⟨η, f⟩}] against E[e^{-⟨η, f_t⟩}] on independent membrane replicates

        Also reports the Laplace functional of the interpolated field ĥ¹ + ĥ²
        and how often A¹_{N,λ} (level set of ĥ¹) sits inside A_{N,2λ}.
        """
        if config.field != "membrane":
            raise ValueError("Dysonization compares membrane fields")
        params = DysonParams(config.t, config.side)
        f = f or standard_bump()
        f_t = f_t_transform(f, config.t) if config.t > 0 else f
        r = config.r
        logger.info(f"Dyson experiment: N={config.side}, r={r}, t={config.t}, reps={config.reps}")

        def laplace(test: TestFunction):
            return lambda h: laplace_functional(extract_extremal_process(h, r), test)[1]

        lhs = self._estimate(config, self.runner.collect(config, laplace(f), side=0))
        rhs = self._estimate(config, self.runner.collect(config, laplace(f_t), side=1))

        draw = self.runner.sampler(config)
        a, _ = params.coefficients
        bar = config.lam

        def pair_sampler(rng, seed):
            h1 = draw(rng, seed)
            h2 = draw(rng, seed)
            return h1, dysonize(h1, h2, params)

        def interpolated_stats(fields):
            h1, mixed = fields
            scaled = Field(h1.lattice, a * h1.values, Provenance.INTERPOLATED, h1.seed)
            first = level_set(scaled, bar)
            inside = bool(np.all(mixed.values[tuple(first.T)] >= m_N(mixed.N) - 2 * bar))
            return laplace(f)(mixed), float(inside)

        pairs = np.array(self.runner.collect(config, interpolated_stats, side=2, sampler=pair_sampler))
        return DysonComparison(
            lhs=lhs,
            rhs=rhs,
            interpolated=self._estimate(config, pairs[:, 0]),
            level_set_inclusion=self._estimate(config, pairs[:, 1]),
            t=config.t,
        )

    def intensity_experiment(self, config: ExperimentConfig) -> Tuple[TailFit, int]:
        """
        Exponential rate of pooled local-maximum excesses above config.threshold

        Returns:
            (fit, number of pooled local maxima)
        """
        logger.info(f"Intensity experiment: N={config.side}, r={config.r}, threshold={config.threshold}")
        heights = self.runner.collect(config, lambda h: extract_extremal_process(h, config.r).heights)
        pooled = np.concatenate(heights)
        return fit_exponential_tail(pooled, config.threshold), len(pooled)

    def tightness_experiment(self, config: ExperimentConfig, sides: Sequence[int] = (16, 32)) -> Dict[int, EstimatorResult]:
        """log(1 + |A_{N,λ}|) at λ = config.lam for each side"""
        results = {}
        for N in sides:
            sized = config.replace(n_side=N, depth=None) if config.field == "membrane" else config.replace(
                n_side=N, depth=DyadicDepth.from_side(N).n)
            logger.info(f"Tightness: N={N}, λ={config.lam}")
            sizes = self.runner.collect(sized, lambda h: float(np.log1p(len(level_set(h, config.lam)))))
            results[N] = self._estimate(sized, sizes)
        return results

    def top_ell_experiment(self, config: ExperimentConfig) -> TopEllSummary:
        """S_{ℓ,N}/ℓ for ℓ in config.ell_values, their gaps to M_N and per-replicate monotonicity"""
        ells = sorted(config.ell_values)

        def averages(h):
            return np.array([top_ell_sum(h, ell) / ell for ell in ells] + [float(h.values.max())])

        rows = np.array(self.runner.collect(config, averages))
        means, maxima = rows[:, :-1], rows[:, -1]
        monotone = bool(np.all(np.diff(means, axis=1) <= 1e-12))
        if not monotone:
            logger.error("S_ℓ/ℓ increased in ℓ for some replicate")
        return TopEllSummary(
            averages={ell: self._estimate(config, means[:, i]) for i, ell in enumerate(ells)},
            gaps={ell: self._estimate(config, means[:, i] - maxima) for i, ell in enumerate(ells)},
            monotone=monotone,
        )

    def max_law_experiment(self, config: ExperimentConfig) -> MaxLawSummary:
        """M_N - m_N samples, their Gumbel fit and the mean of Z_N"""
        rows = np.array(self.runner.collect(config, lambda h: (max_centered(h), derivative_martingale(h))))
        return MaxLawSummary(
            centered_max=self._estimate(config, rows[:, 0]),
            derivative_martingale=self._estimate(config, rows[:, 1]),
            gumbel=fit_gumbel(rows[:, 0]),
            samples=rows[:, 0],
        )
