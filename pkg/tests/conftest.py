import re


def pytest_terminal_summary(terminalreporter):
    """One pass/fail line per acceptance criterion."""
    rows = {}
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            m = re.search(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)", getattr(rep, "nodeid", ""))
            if not m:
                continue
            num = int(m.group(1))
            failed = rep.failed or outcome == "error"
            detail = dict(getattr(rep, "user_properties", [])).get("detail", "")
            status, _, details = rows.get(num, ("PASS", m.group(2), []))
            if detail:
                details.append(detail)
            rows[num] = ("FAIL" if failed or status == "FAIL" else "PASS", m.group(2), details)
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(rows):
        status, name, details = rows[num]
        detail = "; ".join(details)
        line = f"criterion {num}: {status}  {name}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
