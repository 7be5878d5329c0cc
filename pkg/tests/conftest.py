import re


def pytest_terminal_summary(terminalreporter):
    lines = []
    for outcome in ("passed", "failed"):
        for rep in terminalreporter.stats.get(outcome, []):
            if rep.when != "call" or "test_acceptance.py::" not in rep.nodeid:
                continue
            m = re.search(r"test_c(\d+)_(\w+)", rep.nodeid)
            if m:
                lines.append((int(m.group(1)), m.group(2).replace("_", " "), outcome.upper()[:4]))
    if lines:
        terminalreporter.section("acceptance criteria")
        for num, name, verdict in sorted(lines):
            terminalreporter.write_line(f"criterion {num:2d} {verdict}  {name}")
