"""The same runtime on a wall clock with one thread per process."""

from dataclasses import replace

from flashrec.harness import reference_losses, run_scenario

from conftest import FAST, fault, small_scenario


def test_real_clock_flash_recovery():
    # a 100 ms heartbeat window: thread scheduling jitter must not look like a lost node
    sc = small_scenario(topo=(2, 1, 1, 1), n_nodes=2, horizon_steps=6, clock_mode="real", tick_seconds=0.01,
                        timings=replace(FAST, miss_threshold=10), faults=(fault(3, node="node-1"),))
    res = run_scenario(sc)
    assert res.exit_status == 0
    assert res.losses == reference_losses(sc)
    assert res.rows[0].redone_steps <= 1
    assert not res.worker_violations
