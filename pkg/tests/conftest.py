import numpy as np
import pytest
import torch

_ACCEPTANCE = []


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    if "test_acceptance.py" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    detail = "; ".join(f"{k}={v}" for k, v in report.user_properties)
    _ACCEPTANCE.append((name, report.outcome, report.duration, detail))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome, duration, detail in _ACCEPTANCE:
        status = "PASS" if outcome == "passed" else "FAIL"
        extra = f"  [{detail}]" if detail else ""
        terminalreporter.write_line(f"{status}  {name}  ({duration:.1f} s){extra}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)
