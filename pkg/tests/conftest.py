import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one PASS/FAIL line per acceptance criterion, printed after the run

_criteria = {}


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            item.user_properties.append(("criterion", mark.args[0]))


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    name = props.get("criterion")
    if name is None:
        return
    entry = _criteria.setdefault(name, {"ok": True, "ran": False, "notes": {}})
    if report.when == "call":
        entry["ran"] = True
    if report.failed:
        entry["ok"] = False
    entry["notes"].update({k: v for k, v in props.items() if k != "criterion"})


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for name, entry in _criteria.items():
        status = "PASS" if entry["ok"] and entry["ran"] else "FAIL"
        notes = ", ".join(f"{k}={v}" for k, v in entry["notes"].items())
        terminalreporter.write_line(f"{status}  {name}" + (f"  [{notes}]" if notes else ""))
