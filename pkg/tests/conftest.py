import pytest

from flashrec.config import Timings
from flashrec.harness import FaultSpec, Scenario

# Lines printed by the acceptance suite, repeated in the terminal summary so
# they survive output capture.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


FAST = Timings(jitter_ticks=3, container_start_mean=2, container_start_sd=0, agent_ticks=1, hang_timeout=10)


@pytest.fixture
def fast_timings():
    return FAST


def small_scenario(**kw) -> Scenario:
    base = dict(seed=1, topo=(4, 1, 1, 1), n_nodes=4, devices_per_node=1, horizon_steps=8, timings=FAST,
                param_len=16)
    base.update(kw)
    return Scenario(**base)


def fault(step, phase="ForwardBackward", node="node-1", **kw) -> FaultSpec:
    return FaultSpec(at_step=step, phase=phase, target_node=node, **kw)
