import os
import time

import pytest
from hypothesis import HealthCheck, settings

from pupilfield import experiments as ex
from pupilfield import spc

settings.register_profile("default", deadline=None, max_examples=100,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def preset_a():
    return spc.preset("presetA")


@pytest.fixture(scope="session")
def preset_inf():
    return spc.preset("presetA_inf")


@pytest.fixture(scope="session")
def aligned_a(preset_a):
    return spc.align_to_pixels(preset_a)


# The synthetic sweeps are the slow part of the suite; every module that
# needs them shares one run per preset.

@pytest.fixture(scope="session")
def sweep_cache():
    return {}


def _sweep(cache, name, kind):
    key = (name, kind)
    if key not in cache:
        t0 = time.perf_counter()
        c = spc.preset(name)
        if kind == "shift":
            cache[key] = ex.exp_shift_sweep(c, inverse=False)
        elif kind == "inverse":
            cache[key] = [r for r in ex.exp_shift_sweep(c, inverse=True)
                          if r.experiment == "II-inverse"]
        else:
            cache[key] = ex.exp_error_sweeps(c, shift_records=_sweep(cache, name, "shift"))
        cache["seconds", name, kind] = time.perf_counter() - t0
    return cache[key]


@pytest.fixture(scope="session")
def sweeps(sweep_cache):
    return lambda name, kind="shift": _sweep(sweep_cache, name, kind)


# One line per acceptance criterion, repeated in the terminal summary so the
# verdicts survive output capture.
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
