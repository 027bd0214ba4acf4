import collections

import pytest

_CRITERIA = {}
_OUTCOMES = collections.defaultdict(list)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("criterion")
        if m is not None:
            _CRITERIA[m.args[0]] = m.args[1]


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = item.get_closest_marker("criterion")
    if m is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        if hasattr(rep, "wasxfail"):
            status = "xpass" if rep.passed else "xfail"
        else:
            status = rep.outcome
        _OUTCOMES[m.args[0]].append((item.name, status))


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        results = _OUTCOMES.get(n, [])
        if not results:
            verdict = "NOT RUN"
        elif all(s == "passed" for _, s in results):
            verdict = "PASS"
        elif any(s == "skipped" for _, s in results) and not any(s in ("failed", "xfail") for _, s in results):
            verdict = "SKIPPED"
        else:
            bad = [name for name, s in results if s != "passed"]
            verdict = "FAIL (" + ", ".join(bad) + ")"
        tr.write_line(f"criterion {n:2d}: {verdict:6s}  {_CRITERIA[n]}")
