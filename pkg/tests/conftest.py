import sys
from pathlib import Path


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    rows = getattr(mod, "REPORT", None)
    if not rows:
        return
    lines = []
    for n, ok, detail in sorted(rows, key=lambda r: (isinstance(r[0], str), r[0])):
        tag = "INFO" if isinstance(n, str) else ("PASS" if ok else "FAIL")
        label = "reported" if isinstance(n, str) else f"criterion {n:2d}"
        lines.append(f"{tag} {label}: {detail}")
    terminalreporter.section("acceptance criteria")
    for line in lines:
        terminalreporter.write_line(line)
    Path(__file__).resolve().parents[1].joinpath("acceptance_report.txt").write_text("\n".join(lines) + "\n")
