import pytest
import os
from dotenv import load_dotenv

# Load environment variables
load_dotenv()


def pytest_addoption(parser):
    """Add custom command line options"""
    parser.addoption(
        "--solver",
        action="store",
        default=None,
        help="Force a solver tier for membrane fields: direct_dense, direct_sparse, iterative"
    )
    parser.addoption(
        "--threads",
        action="store",
        type=int,
        default=1,
        help="Worker threads for replicate runs"
    )
    parser.addoption(
        "--reps-scale",
        action="store",
        type=float,
        default=1.0,
        help="Multiplier applied to replicate counts of statistical tests"
    )


@pytest.fixture(scope="session")
def solver(request):
    """Solver tier from command line (None picks by lattice size)"""
    return request.config.getoption("--solver")


@pytest.fixture(scope="session")
def threads(request):
    return request.config.getoption("--threads")


@pytest.fixture(scope="session")
def reps(request):
    """Scale a replicate count by --reps-scale (never below 2)"""
    scale = request.config.getoption("--reps-scale")
    return lambda count: max(2, int(round(count * scale)))


@pytest.fixture(scope="session")
def operator_cache():
    """Process-wide operator and solver cache"""
    from membrane.biharmonic import OperatorCache
    cache = OperatorCache()
    yield cache
    cache.clear()


@pytest.fixture(scope="session")
def runner(threads, operator_cache):
    """Replicate runner sharing the session operator cache"""
    from membrane.harness import ReplicateRunner
    return ReplicateRunner(threads, operator_cache)


@pytest.fixture
def stream():
    """Factory of reproducible random streams: stream(seed, replicate=0, side=0)"""
    from utils.rng import make_stream
    return make_stream


@pytest.fixture
def tmp_out(tmp_path):
    """Output directory for CLI artifacts"""
    out = tmp_path / "out"
    out.mkdir()
    return out


@pytest.fixture
def expect():
    """Custom expect fixture"""
    from utils.custom_expect import expect
    return expect


# Hook for test setup
def pytest_configure(config):
    """Configure pytest"""
    # Create test results directory
    os.makedirs("test-results", exist_ok=True)
    os.makedirs(os.getenv("MBR4_LOG_DIR", "logs"), exist_ok=True)
