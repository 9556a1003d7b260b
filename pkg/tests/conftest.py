import pytest

_outcomes: dict[int, list] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        detail = dict(item.user_properties).get("detail", "")
        _outcomes.setdefault(marker.args[0], []).append((item.name, report.outcome, detail,
                                                         report.duration))


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_outcomes):
        rows = _outcomes[n]
        ok = all(o == "passed" for _, o, _, _ in rows)
        status = "PASS" if ok else ("SKIP" if all(o == "skipped" for _, o, _, _ in rows) else "FAIL")
        secs = sum(d for *_, d in rows)
        details = "; ".join(d for _, _, d, _ in rows if d)
        tr.write_line(f"criterion {n:2d}: {status} ({secs:.1f}s) {details}".rstrip())
