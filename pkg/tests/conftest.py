import sys
from pathlib import Path

# Make tests/oracles.py importable as a plain module.
sys.path.insert(0, str(Path(__file__).parent))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 12):
        terminalreporter.write_line(mod.LINES.get(n, f"criterion {n:2d}: FAIL  (did not run to completion)"))
