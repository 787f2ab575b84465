import functools

import pytest

from flockcert.certificates import check_certificates
from flockcert.integrator import integrate
from flockcert.presets import CORE_PRESETS, preset

ACCEPTANCE_LINES = {}


@functools.lru_cache(maxsize=None)
def preset_trajectory(name):
    return integrate(preset(name))


@functools.lru_cache(maxsize=None)
def preset_report(name):
    return check_certificates(preset_trajectory(name))


@pytest.fixture(params=CORE_PRESETS)
def core_name(request):
    return request.param


def record_acceptance(number, passed, detail):
    ACCEPTANCE_LINES[number] = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])
