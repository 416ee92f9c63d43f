import pytest

CRITERIA = {
    1: "autodiff vs central differences",
    2: "oracle vs linear-quadratic closed form",
    3: "2D benchmark replication",
    4: "operator vs LS method ordering",
    5: "LS coefficient error rate in M",
    6: "reconstruction loss non-increasing in p",
    7: "bicycle single obstacle",
    8: "quadcopter smoke test",
    9: "exact-structure property suite",
    10: "oracle dominance invariant",
}

_outcomes: dict[int, list[tuple[str, str]]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number checked by the test")


def pytest_runtest_logreport(report):
    crit = getattr(report, "criterion", None)
    if crit is None:
        return
    if report.when == "call" or report.outcome != "passed":
        _outcomes.setdefault(crit, []).append((report.nodeid, report.outcome))


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        outcome.get_result().criterion = marker.args[0]


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n, label in CRITERIA.items():
        results = _outcomes.get(n)
        if not results:
            terminalreporter.write_line(f"C{n:<2} NOT RUN  {label}")
            continue
        failed = [nid.split("::")[-1] for nid, out in results if out != "passed"]
        status = "FAIL" if failed else "PASS"
        extra = f"  (failing: {', '.join(failed)})" if failed else ""
        terminalreporter.write_line(f"C{n:<2} {status:<8} {label}{extra}")
