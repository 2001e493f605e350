import re

import numpy as np
import pytest
import torch

torch.set_num_threads(1)

_CRITERION = re.compile(r"test_acceptance\.py::test_criterion_(\d+)(\w*)")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One pass/fail line per acceptance criterion."""
    rows = {}
    for outcome in ("passed", "failed", "error", "skipped"):
        for rep in terminalreporter.stats.get(outcome, []):
            m = _CRITERION.search(getattr(rep, "nodeid", ""))
            if m:
                rows[int(m.group(1))] = (m.group(2).lstrip("_"), outcome)
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(rows):
        name, outcome = rows[num]
        status = {"passed": "PASS", "skipped": "SKIP"}.get(outcome, "FAIL")
        terminalreporter.write_line(f"criterion {num} ({name}): {status}")


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def tiny_grid():
    from raysurf.field import HashGridConfig

    return HashGridConfig(
        num_levels=4,
        base_resolution=4,
        max_resolution=32,
        features_per_level=2,
        table_size_log2=12,
    )


@pytest.fixture(scope="session")
def sphere_field():
    """A field fitted to the unit-cube sphere SDF; shared, treat as read-only."""
    from raysurf.field import SurfaceField

    f = SurfaceField(seed=0)
    f.init_sphere()
    return f
