import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

# methods run on the fixed sampling-shift suite; fine+mr-inr+sst reuses the
# fine+mr-inr stage 1 and plain fine is the without-INR comparison
SUITE_METHODS = ("fine", "fine+mr-inr", "fine+mr-inr+sst")


@pytest.fixture(scope="session")
def sampling_run():
    """Full-size sampling-shift experiment, run once and shared.

    Returns (report, wall seconds, stage-1 initial latents of the INR branch).
    """
    from d2sa.inr import MRINR
    from d2sa.mri import make_shift_scenario
    from d2sa.pipeline import ExperimentConfig, run_experiment

    cfg = ExperimentConfig()
    sc = make_shift_scenario("sampling", 0)
    seeds = np.random.SeedSequence(cfg.seed).generate_state(5)
    z0 = np.stack(
        [z.value.copy() for z in MRINR(cfg.n_target_slices, sc.target.height, sc.target.width, cfg.inr, int(seeds[4])).latents]
    )
    t0 = time.perf_counter()
    report = run_experiment(sc, SUITE_METHODS, cfg)
    return report, time.perf_counter() - t0, z0


def pytest_terminal_summary(terminalreporter):
    from fixtures import ACCEPTANCE, MEASURED

    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for name, ok, detail in ACCEPTANCE:
            terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    if MEASURED:
        terminalreporter.section("fixed-suite measurements")
        for line in MEASURED:
            terminalreporter.write_line(line)
