import os
import sys

sys.path.insert(0, os.path.dirname(__file__))

import acceptance_log  # noqa: E402


def pytest_terminal_summary(terminalreporter):
    if not acceptance_log.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for ac in sorted(acceptance_log.RESULTS, key=lambda a: int(a[2:])):
        ok, detail = acceptance_log.RESULTS[ac]
        terminalreporter.write_line(f"{ac:5} {'PASS' if ok else 'FAIL'}  {detail}")
