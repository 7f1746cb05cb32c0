import numpy as np
import pytest

from needlekit.core import PointCloud, VolumeMeta, mask_to_points


def line_cloud(meta: VolumeMeta, tracks) -> PointCloud:
    """Thin single-voxel needles: each track maps slice k -> (i, j)."""
    mask = np.zeros(meta.dims, dtype=bool)
    for track in tracks:
        for k, (i, j) in track.items():
            mask[i, j, k] = True
    return mask_to_points(mask, meta)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance results, printed in the terminal summary
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
