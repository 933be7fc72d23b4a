import numpy as np
import pytest

from nmaborrow.core import Arm, Network, Study
from nmaborrow.mcmc import SamplerConfig


def two_arm(sid, a, b, ya, yb, n=50, sd=10.0, subgroup="P1", high_rob=None):
    return Study(sid, subgroup, (Arm(a, n, ya, sd), Arm(b, n, yb, sd)), high_rob)


@pytest.fixture
def quick():
    """Short chains for smoke-level fits."""
    return SamplerConfig(n_chains=2, iterations=3000, burn_in=1000, seed=7)


@pytest.fixture
def triangle():
    """Pbo-A-B loop plus a B-C spur; every treatment is connected."""
    studies = [
        two_arm("s1", "Pbo", "A", -10.0, -14.0),
        two_arm("s2", "Pbo", "B", -10.0, -12.5),
        two_arm("s3", "A", "B", -13.0, -11.0),
        two_arm("s4", "Pbo", "A", -9.0, -13.5),
        Study("s5", "P1", (Arm("B", 40, -12.0, 9.0), Arm("C", 45, -10.5, 11.0), Arm("Pbo", 42, -9.5, 10.0))),
    ]
    return Network("P1", tuple(studies), "Pbo")


@pytest.fixture
def rng():
    return np.random.default_rng(2024)


def pytest_terminal_summary(terminalreporter):
    """One pass/fail line per acceptance criterion, when that module ran."""
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'} | {detail}")
