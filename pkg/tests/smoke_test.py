import numpy as np
import pytest

from membrane import cli
from membrane.biharmonic import SolverHandle, SolverMode, assemble_precision, green_diag
from membrane.extremes import extract_extremal_process
from membrane.field_sampler import sample_membrane
from membrane.harness import ExperimentConfig
from membrane.hierarchical import DyadicDepth, sample_brw, sample_mbrw
from membrane.lattice import Lattice4


@pytest.mark.smoke
class TestSmoke:
    """Smoke tests for the samplers and the command line"""

    def test_membrane_sample(self, stream, expect):
        """Membrane Sample"""
        handle = SolverHandle(assemble_precision(Lattice4(2)))
        h = sample_membrane(handle, stream(1))

        expect.to_equal(h.values.shape, (3, 3, 3, 3))
        expect.to_be_truthy(np.all(np.isfinite(h.values)))

    def test_solver_tiers_available(self, expect):
        """Solver Tiers Available"""
        lattice = Lattice4(3)
        variances = [
            green_diag(SolverHandle(assemble_precision(lattice, mode)), [0])[0]
            for mode in SolverMode
        ]

        expect.to_be_close(variances, np.full(3, variances[0]), rel=1e-6)

    def test_hierarchical_samples(self, stream, expect):
        """Hierarchical Samples"""
        depth = DyadicDepth(2)

        expect.to_equal(sample_brw(depth, stream(2)).values.shape, (5, 5, 5, 5))
        expect.to_equal(sample_mbrw(depth, stream(3)).values.shape, (5, 5, 5, 5))

    def test_extremal_process(self, runner, expect):
        """Extremal Process"""
        config = ExperimentConfig(field="mbrw", depth=2, reps=2)
        counts = runner.collect(config, lambda h: len(extract_extremal_process(h, 2)))

        expect.to_be_greater_than_or_equal(min(counts), 1)

    def test_cli_sample(self, tmp_out, expect):
        """CLI Sample"""
        code = cli.run(["sample", "--n-side", "2", "--seed", "1", "--threads", "1", "--out", str(tmp_out)])

        expect.to_equal(code, 0)
        expect.to_be_truthy((tmp_out / "membrane_N2_rep0000.mbr4").exists())
