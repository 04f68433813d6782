import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import re

    lines = {}
    for status in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(status, []):
            m = re.search(r"test_criterion_(\d+)_(\w+)", getattr(rep, "nodeid", ""))
            if m and (rep.when == "call" or status != "passed"):
                lines[int(m.group(1))] = f"criterion {m.group(1)} ({m.group(2)}): " \
                                         f"{'PASS' if status == 'passed' else 'FAIL'}"
    if lines:
        terminalreporter.section("acceptance criteria")
        for k in sorted(lines):
            terminalreporter.write_line(lines[k])
