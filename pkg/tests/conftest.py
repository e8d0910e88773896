import pytest

from agentcache.callgraph import build_call_graph


def chain_spec():
    return {
        "agents": ["A", "B"],
        "edges": [["A", "B"]],
        "kernel": {"A": {"B": 1.0}, "B": {"END": 1.0}},
        "entry": {"A": 1.0},
    }


def loop_spec(p_back=0.4):
    # A -> B -> C, C either loops back to B or ends
    return {
        "agents": ["A", "B", "C"],
        "edges": [["A", "B"], ["B", "C"], ["C", "B"]],
        "kernel": {
            "A": {"B": 1.0},
            "B": {"C": 0.8, "END": 0.2},
            "C": {"B": p_back, "END": 1.0 - p_back},
        },
        "entry": {"A": 1.0},
        "max_steps": 40,
    }


def retry_spec(p_retry=0.5):
    return {
        "agents": ["Planner", "Coder", "Tester", "Analyzer"],
        "edges": [["Planner", "Coder"], ["Coder", "Tester"], ["Tester", "Analyzer"], ["Analyzer", "Coder"]],
        "kernel": {
            "Planner": {"Coder": 1.0},
            "Coder": {"Tester": 1.0},
            "Tester": {"Analyzer": p_retry, "END": 1.0 - p_retry},
            "Analyzer": {"Coder": 1.0},
        },
        "entry": {"Planner": 1.0},
        "max_steps": 60,
    }


@pytest.fixture
def chain():
    return build_call_graph(chain_spec())


@pytest.fixture
def loop():
    return build_call_graph(loop_spec())


@pytest.fixture
def retry():
    return build_call_graph(retry_spec())


CRITERIA: list[str] = []


def report(number, ok, detail):
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    CRITERIA.append(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in CRITERIA:
            terminalreporter.write_line(line)
