import numpy as np
import pytest

from spiralcine import phantom, trajectory


@pytest.fixture(scope="session")
def spiral():
    """Default 13-arm spiral interleave set (1.29 mm / 320 mm FOV)."""
    return trajectory.design_spiral()


@pytest.fixture(scope="session")
def spiral_coarse():
    """Coarser spiral matched to the 64-grid test phantom."""
    return trajectory.design_spiral(resolution_mm=2.58)


@pytest.fixture(scope="session")
def schedule(spiral):
    return trajectory.build_schedule(spiral, 8, 1)


@pytest.fixture(scope="session")
def small_phantom():
    cfg = phantom.PhantomConfig.for_ejection_fraction(
        60.0, grid_size=64, pixel_size_mm=2.58, n_slices=2, n_frames=40)
    return phantom.generate_phantom(cfg)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    """One pass/fail line per acceptance criterion, shown even when
    pytest captures test output."""
    import sys
    lines = []
    for name, mod in sys.modules.items():
        if name.rpartition(".")[2] == "test_acceptance" and mod is not None:
            lines = getattr(mod, "REPORT_LINES", [])
            if lines:
                break
    REPORT_LINES = lines
    if REPORT_LINES:
        terminalreporter.section("acceptance criteria")
        for line in REPORT_LINES:
            terminalreporter.write_line(line)
