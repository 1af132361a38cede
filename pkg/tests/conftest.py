from __future__ import annotations

import re

_AC = re.compile(r"test_acceptance\.py::test_ac(\d+)_")


def pytest_terminal_summary(terminalreporter):
    rows = {}
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            m = _AC.search(getattr(rep, "nodeid", ""))
            if not m or rep.when not in ("call", "setup"):
                continue
            n = int(m.group(1))
            if rep.when == "setup" and rep.passed:
                continue
            detail = dict(getattr(rep, "user_properties", ())).get("detail", "")
            rows[n] = ("PASS" if rep.passed else "FAIL", detail)
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(rows):
        status, detail = rows[n]
        terminalreporter.write_line(f"AC-{n:<3} {status}  {detail}")
