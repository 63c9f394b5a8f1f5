import pytest

from delayed_hedge.model_core import ModelParams, butterfly, capped_call, two_plateau


@pytest.fixture
def unit():
    return ModelParams(s0=0.0, sigma=1.0, mu=0.0, T=1.0)


@pytest.fixture(params=["capped_call", "butterfly", "two_plateau"])
def payoff_case(request):
    # (spec, s0): each payoff centred on its non-flat region
    return {
        "capped_call": (capped_call(), 0.5),
        "butterfly": (butterfly(), 0.0),
        "two_plateau": (two_plateau(), 0.5),
    }[request.param]


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s[7:9])):
            terminalreporter.write_line(line)
