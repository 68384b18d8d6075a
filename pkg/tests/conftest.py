import numpy as np
import pytest
from hypothesis import settings

from geomae.region_store import Region, SourceProfile, SourceTensor, Timestamp

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


def make_region(region_id="r0", t=2, c=3, h=4, w=5, dtype="u16", seed=0, name="toy"):
    rng = np.random.default_rng(seed)
    prof = SourceProfile(name, c, 10.0, h, w, dtype)
    if dtype == "f32":
        data = rng.normal(size=(t, c, h, w)).astype(np.float32)
    else:
        hi = 256 if dtype == "u8" else 65536
        data = rng.integers(0, hi, size=(t, c, h, w)).astype(prof.numpy_dtype.newbyteorder("="))
    stamps = tuple(Timestamp(2018, 1 + k % 12, 1 + k, k % 24) for k in range(t))
    return Region(region_id, (1.0, 2.0, 1.5, 2.5), {name: SourceTensor(prof, data, stamps)})


@pytest.fixture
def region_factory():
    return make_region


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
