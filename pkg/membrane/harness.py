"""Monte Carlo orchestration: replicate runs, estimators, fits and results documents."""
from __future__ import annotations

import dataclasses
import json
import subprocess
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import stats

from membrane.biharmonic import CG_TOLERANCE, GAMMA, OperatorCache, SolverMode
from membrane.errors import InsufficientDataError, ReplicateError
from membrane.extremes import INTENSITY_RATE, PAIR_NORMS
from membrane.field_sampler import Field, sample_membrane
from membrane.hierarchical import DyadicDepth, sample_brw, sample_mbrw
from membrane.lattice import Lattice4
from utils.logger import logger
from utils.rng import StreamFactory

FIELDS = ("membrane", "brw", "mbrw")
DEFAULT_GEOMETRY_C = 0.25
DEFAULT_INTENSITY_THRESHOLD = -1.5
MIN_COV_REPLICATES = 1000
MIN_EXCEEDANCES = 50
# experiments that persist raw fields and may run a single replicate
PERSISTENCE_EXPERIMENTS = ("sample", "extremes")
# experiments whose statistics centre heights by m_N
CENTERED_EXPERIMENTS = ("extremes", "dyson-check", "geometry", "intensity")
MIN_CENTERED_SIDE = 4
MIN_GEOMETRY_RADIUS = 3

CONSTANTS = {
    "gamma": GAMMA,
    "intensity_rate": INTENSITY_RATE,
    "geometry_c_default": DEFAULT_GEOMETRY_C,
    "intensity_threshold_default": DEFAULT_INTENSITY_THRESHOLD,
    "cg_tolerance": CG_TOLERANCE,
}

Sampler = Callable[[np.random.Generator, int], Field]
Statistic = Callable[[Field], Any]


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated parameters of one experiment; echoed into its results document"""

    experiment: str = "custom"
    field: str = "membrane"
    n_side: Optional[int] = None
    depth: Optional[int] = None
    r: int = 2
    r_values: Tuple[int, ...] = (3, 4, 6)
    t: float = 0.5
    lam: float = 2.0
    ell: int = 4
    ell_values: Tuple[int, ...] = (1, 2, 4, 8)
    c: float = DEFAULT_GEOMETRY_C
    threshold: float = DEFAULT_INTENSITY_THRESHOLD
    pairs: int = 20
    norm: str = "linf"
    reps: int = 100
    seed: int = 0
    solver: Optional[str] = None
    threads: int = 1
    out: Optional[str] = None
    record_timing: bool = False

    def __post_init__(self):
        if self.field not in FIELDS:
            raise ValueError(f"Unknown field '{self.field}', expected one of {FIELDS}")
        if self.n_side is None and self.depth is None:
            raise ValueError("Either n_side or depth is required")
        if self.depth is not None:
            depth = DyadicDepth(self.depth)
            if self.n_side is not None and self.n_side != depth.N:
                raise ValueError(f"n_side={self.n_side} contradicts depth={self.depth} (N={depth.N})")
            object.__setattr__(self, "n_side", depth.N)
        elif self.field != "membrane":
            object.__setattr__(self, "depth", DyadicDepth.from_side(self.n_side).n)
        if self.field == "membrane" and self.n_side < 2:
            raise ValueError(f"Membrane fields need N >= 2, got {self.n_side}")
        if self.experiment in CENTERED_EXPERIMENTS and self.n_side < MIN_CENTERED_SIDE:
            raise ValueError(f"'{self.experiment}' centres heights by m_N, which needs N >= {MIN_CENTERED_SIDE}, "
                             f"got {self.n_side}")
        min_reps = 1 if self.experiment in PERSISTENCE_EXPERIMENTS else 2
        if self.reps < min_reps:
            raise ValueError(f"Replicate count must be >= {min_reps} for '{self.experiment}', got {self.reps}")
        if self.experiment == "cov-check" and self.reps < MIN_COV_REPLICATES:
            raise ValueError(f"Covariance checks need >= {MIN_COV_REPLICATES} replicates, got {self.reps}")
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError(f"Seed must fit in 64 unsigned bits, got {self.seed}")
        if self.threads < 1:
            raise ValueError(f"Thread count must be >= 1, got {self.threads}")
        if self.r < 1 or any(r < 1 for r in self.r_values):
            raise ValueError(f"Radii must be >= 1, got r={self.r}, r_values={self.r_values}")
        if self.experiment == "geometry" and min(self.r_values, default=0) < MIN_GEOMETRY_RADIUS:
            raise ValueError(f"Geometry radii must be >= {MIN_GEOMETRY_RADIUS} so that ln ln r > 0, "
                             f"got r_values={self.r_values}")
        if self.ell < 1 or any(ell < 1 for ell in self.ell_values):
            raise ValueError(f"ℓ must be >= 1, got ell={self.ell}, ell_values={self.ell_values}")
        if self.t < 0:
            raise ValueError(f"t must be non-negative, got {self.t}")
        if self.experiment == "dyson-check" and self.t >= GAMMA * np.log(self.n_side):
            raise ValueError(f"t={self.t} must stay below g ln N = {GAMMA * np.log(self.n_side):.6f} for N={self.n_side}")
        if self.c <= 0:
            raise ValueError(f"Geometry constant c must be positive, got {self.c}")
        if self.pairs < 1:
            raise ValueError(f"Pair count must be >= 1, got {self.pairs}")
        if self.norm not in PAIR_NORMS:
            raise ValueError(f"Unsupported pair norm '{self.norm}'")
        if self.solver is not None:
            SolverMode(self.solver)
        object.__setattr__(self, "r_values", tuple(int(r) for r in self.r_values))
        object.__setattr__(self, "ell_values", tuple(int(ell) for ell in self.ell_values))

    @property
    def side(self) -> int:
        return self.n_side

    @property
    def lattice(self) -> Lattice4:
        return Lattice4(self.n_side)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> Dict[str, Any]:
        data = dataclasses.asdict(self)
        data["r_values"] = list(self.r_values)
        data["ell_values"] = list(self.ell_values)
        return data


@dataclass(frozen=True)
class EstimatorResult:
    estimate: float
    std_error: float
    replicates: int
    seed: int
    wall_time: Optional[float] = None

    @classmethod
    def from_samples(cls, samples: Iterable[float], seed: int, wall_time: Optional[float] = None) -> "EstimatorResult":
        """Mean with standard error sd/√n"""
        values = np.asarray(list(samples) if not isinstance(samples, np.ndarray) else samples, dtype=np.float64)
        if values.ndim != 1 or len(values) < 2:
            raise InsufficientDataError(f"An estimate needs at least 2 scalar replicates, got shape {values.shape}")
        return cls(
            estimate=float(values.mean()),
            std_error=float(values.std(ddof=1) / np.sqrt(len(values))),
            replicates=len(values),
            seed=seed,
            wall_time=wall_time,
        )

    def to_entry(self, name: str) -> Dict[str, Any]:
        return {"name": name, "value": self.estimate, "std_error": self.std_error, "replicates": self.replicates}


@dataclass(frozen=True)
class CovarianceEstimate:
    u: int
    v: int
    estimate: float
    std_error: float
    replicates: int


@dataclass(frozen=True)
class TailFit:
    rate: float
    std_error: float
    exceedances: int
    threshold: float


@dataclass(frozen=True)
class GumbelFit:
    location: float
    scale: float
    samples: int


class ReplicateRunner:
    """Runs a sampler and a per-replicate statistic over independent streams

    Outputs are gathered in replicate order whatever the number of threads,
    so a run is a pure function of (config, master seed).
    """

    def __init__(self, threads: int = 1, cache: Optional[OperatorCache] = None):
        if threads < 1:
            raise ValueError(f"Thread count must be >= 1, got {threads}")
        self.threads = threads
        self.cache = cache or OperatorCache()
        self.last_wall_time = 0.0

    def sampler(self, config: ExperimentConfig) -> Sampler:
        """Field sampler for config.field, sharing one cached solver handle"""
        if config.field == "membrane":
            handle = self.cache.handle(config.side, SolverMode(config.solver) if config.solver else None)
            return lambda rng, seed: sample_membrane(handle, rng, seed)
        depth = DyadicDepth(config.depth)
        if config.field == "brw":
            return lambda rng, seed: sample_brw(depth, rng, seed)
        return lambda rng, seed: sample_mbrw(depth, rng, seed)

    def collect(
        self,
        config: ExperimentConfig,
        statistic: Statistic,
        side: int = 0,
        sampler: Optional[Sampler] = None,
    ) -> List[Any]:
        """
        Per-replicate outputs of `statistic`, in replicate order

        Args:
            config: experiment configuration (reps, seed, field)
            statistic: reducer applied to each sampled field
            side: stream family, for independent sides of one comparison
            sampler: override of the configured field sampler

        Raises:
            ReplicateError: first failing replicate (in index order)
        """
        streams = StreamFactory(config.seed)
        draw = sampler or self.sampler(config)

        def one(replicate: int):
            try:
                rng = streams.stream(replicate, side)
                return statistic(draw(rng, streams.stream_id(replicate, side)))
            except Exception as e:
                logger.error(f"Replicate {replicate} (side {side}) failed: {str(e)}")
                raise ReplicateError(replicate, str(e)) from e

        logger.info(
            f"Running {config.reps} replicates of '{config.experiment}' "
            f"({config.field}, N={config.side}, side {side}) on {self.threads} thread(s)"
        )
        start = time.perf_counter()
        if self.threads == 1:
            outputs = [one(i) for i in range(config.reps)]
        else:
            with ThreadPoolExecutor(max_workers=self.threads) as pool:
                outputs = list(pool.map(one, range(config.reps)))
        self.last_wall_time = time.perf_counter() - start
        logger.info(f"Replicates of '{config.experiment}' finished in {self.last_wall_time:.2f}s")
        return outputs

    def run(self, config: ExperimentConfig, statistic: Statistic, side: int = 0) -> EstimatorResult:
        values = self.collect(config, statistic, side)
        return EstimatorResult.from_samples(
            np.asarray(values, dtype=np.float64),
            config.seed,
            self.last_wall_time if config.record_timing else None,
        )


def run_replicates(config: ExperimentConfig, statistic: Statistic, side: int = 0) -> EstimatorResult:
    """Mean and standard error of a scalar statistic over config.reps replicates"""
    return ReplicateRunner(config.threads).run(config, statistic, side)


def collect_replicates(config: ExperimentConfig, statistic: Statistic, side: int = 0) -> List[Any]:
    return ReplicateRunner(config.threads).collect(config, statistic, side)


def _as_sample_matrix(samples) -> Tuple[np.ndarray, Optional[Lattice4]]:
    if isinstance(samples, np.ndarray):
        return np.asarray(samples, dtype=np.float64), None
    fields = list(samples)
    if fields and isinstance(fields[0], Field):
        return np.stack([f.flat for f in fields]), fields[0].lattice
    return np.asarray(fields, dtype=np.float64), None


def _column(ref, lattice: Optional[Lattice4]) -> int:
    if np.ndim(ref) == 0:
        return int(ref)
    if lattice is None:
        raise ValueError("Coordinate pairs need Field samples (or flat column indices)")
    return int(lattice.index(ref))


def empirical_cov(
    samples: Union[np.ndarray, Iterable[Field]],
    pairs: Sequence[Tuple[Any, Any]],
    min_replicates: int = MIN_COV_REPLICATES,
) -> List[CovarianceEstimate]:
    """
    Unbiased covariance per pair with a leave-one-out jackknife standard error

    Args:
        samples: (replicates, columns) array or an iterable of Fields (columns = vertex indices)
        pairs: column indices, or vertex coordinates when Fields are given
        min_replicates: smallest accepted replicate count

    Raises:
        InsufficientDataError: fewer than `min_replicates` replicates
    """
    matrix, lattice = _as_sample_matrix(samples)
    n = matrix.shape[0]
    if n < max(min_replicates, 3):
        raise InsufficientDataError(f"Covariance estimates need >= {max(min_replicates, 3)} replicates, got {n}")
    columns = [(_column(u, lattice), _column(v, lattice)) for u, v in pairs]
    a = matrix[:, [u for u, _ in columns]]
    b = matrix[:, [v for _, v in columns]]
    da = a - a.mean(axis=0)
    db = b - b.mean(axis=0)
    cross = da * db
    total = cross.sum(axis=0)
    estimate = total / (n - 1)
    # removing replicate i leaves S - n/(n-1) da_i db_i of centered cross products
    leave_one_out = (total - n / (n - 1) * cross) / (n - 2)
    spread = leave_one_out - leave_one_out.mean(axis=0)
    std_error = np.sqrt((n - 1) / n * (spread ** 2).sum(axis=0))
    return [
        CovarianceEstimate(u=u, v=v, estimate=float(e), std_error=float(s), replicates=n)
        for (u, v), e, s in zip(columns, estimate, std_error)
    ]


def fit_exponential_tail(
    heights: Iterable[float], threshold: float, min_exceedances: int = MIN_EXCEEDANCES
) -> TailFit:
    """
    Exponential rate of the excesses above `threshold` (MLE: 1 / mean excess)

    Raises:
        InsufficientDataError: fewer than `min_exceedances` strict exceedances
    """
    values = np.asarray(list(heights) if not isinstance(heights, np.ndarray) else heights, dtype=np.float64)
    excess = values[values > threshold] - threshold
    if len(excess) < min_exceedances:
        raise InsufficientDataError(
            f"Only {len(excess)} exceedances above {threshold}, need at least {min_exceedances}"
        )
    rate = 1.0 / excess.mean()
    return TailFit(rate=float(rate), std_error=float(rate / np.sqrt(len(excess))),
                   exceedances=len(excess), threshold=float(threshold))


def fit_gumbel(samples: Iterable[float]) -> GumbelFit:
    """Location and scale of a right-skewed Gumbel law by maximum likelihood"""
    values = np.asarray(list(samples) if not isinstance(samples, np.ndarray) else samples, dtype=np.float64)
    if len(values) < 2:
        raise InsufficientDataError(f"A Gumbel fit needs at least 2 samples, got {len(values)}")
    location, scale = stats.gumbel_r.fit(values)
    return GumbelFit(location=float(location), scale=float(scale), samples=len(values))


def git_describe() -> str:
    try:
        result = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            capture_output=True, text=True, timeout=5, cwd=Path(__file__).resolve().parent,
        )
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return result.stdout.strip() or "unknown"


def build_results_document(
    experiment: str,
    config: ExperimentConfig,
    estimates: Sequence[Dict[str, Any]],
    wall_time_s: Optional[float] = None,
    details: Optional[Dict[str, Any]] = None,
) -> Dict[str, Any]:
    """Results JSON body; timing stays null unless config.record_timing is set"""
    document = {
        "experiment": experiment,
        "config": config.to_dict(),
        "estimates": list(estimates),
        "seed": config.seed,
        "wall_time_s": wall_time_s if config.record_timing else None,
        "git_describe": git_describe(),
        "constants": dict(CONSTANTS),
    }
    if details:
        document["details"] = details
    return document


def write_results_document(document: Dict[str, Any], path: Union[str, Path]) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(json.dumps(document, indent=2, allow_nan=False) + "\n")
    logger.info(f"Results written to {target}")
    return target
