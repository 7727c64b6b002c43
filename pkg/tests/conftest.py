import numpy as np
import pytest

from ccdec import synthetic


@pytest.fixture(scope="session")
def toy():
    """Small clustered dataset shared by the unit tests (d=16)."""
    s = synthetic.splits(3000, 2000, 50, d=16, seed=7)
    return s


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_outcomes: dict[int, list[tuple[str, str, str]]] = {}
_titles: dict[int, str] = {}


def pytest_configure(config):
    config.addinivalue_line(
        "markers", "criterion(number, title, optional=False): acceptance criterion checked by the test; "
        "a skipped optional test does not block the criterion",
    )


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    _titles[number] = title
    if report.when == "call" or (report.when == "setup" and not report.passed):
        if report.skipped:
            reason = report.longrepr[2] if isinstance(report.longrepr, tuple) else str(report.longrepr)
            status = "SKIPPED" if mark.kwargs.get("optional") else "BLOCKED"
        elif report.failed:
            status, reason = "FAIL", str(report.longrepr).strip().splitlines()[-1][:160]
        else:
            status, reason = "PASS", ""
        _outcomes.setdefault(number, []).append((item.name, status, reason))


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for number in sorted(_outcomes):
        results = _outcomes[number]
        states = {s for _, s, _ in results}
        overall = "FAIL" if "FAIL" in states else "BLOCKED" if "BLOCKED" in states else "PASS"
        parts = [f"{name}={s}" + (f" ({why.removeprefix('Skipped: ')})" if why else "") for name, s, why in results]
        tr.write_line(f"criterion {number} [{overall}] {_titles[number]}: " + "; ".join(parts))
