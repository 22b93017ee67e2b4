import re

import pytest

CRITERION = re.compile(r"test_criterion_(\d+)_")


@pytest.fixture
def detail(request):
    """Attach a one-line measurement to the acceptance summary."""
    def add(text):
        request.node.user_properties.append(("detail", str(text)))
    return add


def pytest_terminal_summary(terminalreporter):
    lines = {}
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            m = CRITERION.search(getattr(rep, "nodeid", ""))
            if not m or (rep.when != "call" and outcome != "error"):
                continue
            text = "; ".join(v for k, v in rep.user_properties if k == "detail")
            lines[int(m.group(1))] = f"criterion {int(m.group(1)):2d}: {'PASS' if outcome == 'passed' else 'FAIL'}" \
                                     + (f"  ({text})" if text else "")
    if lines:
        terminalreporter.section("acceptance criteria")
        for k in sorted(lines):
            terminalreporter.write_line(lines[k])
