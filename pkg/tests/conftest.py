import pytest

from tscimpute.road_network import build_grid


@pytest.fixture(scope="session")
def grid4():
    return build_grid(4, 4)


@pytest.fixture(scope="session")
def grid1():
    return build_grid(1, 1)


# one summary line per acceptance criterion, printed after the test run
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_report():
    def report(number, name, ok, detail, soft=False):
        verdict = "PASS" if ok else ("SOFT-FAIL" if soft else "FAIL")
        line = f"criterion {number:>2} [{verdict}] {name}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
