import os
import re

# Single-threaded BLAS: reproducible and faster for this package's small matrices.
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")

try:
    import threadpoolctl

    threadpoolctl.threadpool_limits(limits=1)
except Exception:
    pass

_CRITERION = re.compile(r"test_criterion_(\d+)_(\w+)")
_results = {}


def pytest_runtest_logreport(report):
    m = _CRITERION.search(report.nodeid)
    if not m:
        return
    num, name = int(m.group(1)), m.group(2)
    if report.when == "call":
        _results[num] = (name, report.outcome)
    elif report.when == "setup" and report.skipped:
        _results[num] = (name, "skipped")


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    tw = terminalreporter
    tw.section("acceptance criteria")
    for num in sorted(_results):
        name, outcome = _results[num]
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIPPED"}.get(outcome, outcome)
        tw.write_line(f"criterion {num:>2} ({name.replace('_', ' ')}): {status}")
