import threading

import pytest

from flashrec.config import Timings
from flashrec.controller import (
    CheckpointFallback,
    Controller,
    FailureKind,
    Registry,
    ResourceExhausted,
    StaleRanktable,
    StepTagConflict,
    StopDecision,
    StopKind,
    UnknownRank,
    container_start_ticks,
    decide_stop_moment,
    detect_failures,
    ingest_heartbeat,
    plan_recovery,
    publish_ranktable,
    tag_transition_ok,
)
from flashrec.failures import FailureClass
from flashrec.harness import Scenario
from flashrec.harness.runner import build_context
from flashrec.protocol import Action, HeartbeatRecord, Phase
from flashrec.topology import build_ranktable, build_topology, read_ranktable_file, replace_node
from flashrec.worker import DevicePlugin


def hb(rank, tag, at, inc=0):
    return HeartbeatRecord(rank, f"node-{rank}", tag, Phase.FORWARD_BACKWARD, at, incarnation=inc)


def test_tag_automaton():
    assert tag_transition_ok(5, 5, -1)
    assert tag_transition_ok(-1, 5, 6)
    assert tag_transition_ok(6, 6, 6)
    assert not tag_transition_ok(5, 5, 7)
    assert not tag_transition_ok(-1, 5, 7)
    assert not tag_transition_ok(5, 5, 6)


def test_ingest_accepts_legal_sequence_and_flags_skips():
    reg = Registry(build_ranktable(2, 1))
    reg.rebase(0, 5, 0)
    reg.rebase(1, 5, 0)
    for t, tag in enumerate([5, -1, 6]):
        assert ingest_heartbeat(reg, hb(0, tag, t)) is None
    assert reg.records[0].tag == 6 and reg.records[0].last_seen == 2
    event = ingest_heartbeat(reg, hb(1, 7, 1))
    assert event is not None and event.kind is FailureKind.PROTOCOL_VIOLATION and event.rank == 1
    # later beats from the failed incarnation are ignored
    assert ingest_heartbeat(reg, hb(1, 8, 2)) is None
    assert not reg.records[1].monitored
    with pytest.raises(UnknownRank):
        ingest_heartbeat(reg, hb(9, 0, 0))


def test_heartbeat_miss_threshold():
    reg = Registry(build_ranktable(2, 1), heartbeat_period=2, miss_threshold=3)
    ingest_heartbeat(reg, hb(0, 0, 10))
    ingest_heartbeat(reg, hb(1, 0, 16))
    assert detect_failures(reg, 15) == []
    events = detect_failures(reg, 17)
    assert [(e.rank, e.kind, e.evidence_at) for e in events] == [(0, FailureKind.HEARTBEAT_MISS, 10)]
    assert detect_failures(reg, 18) == []  # reported once


def test_all_beating_means_no_failures():
    reg = Registry(build_ranktable(4, 1))
    for t in range(20):
        for r in range(4):
            ingest_heartbeat(reg, hb(r, 0, t))
        assert detect_failures(reg, t) == []


@pytest.mark.parametrize("tags,kind,resume", [
    ({0: 42, 1: 42, 3: 42}, StopKind.FORWARD_BACKWARD, 42),
    ({0: 43, 1: 43, 3: 43}, StopKind.OPTIMIZER_STEP, 43),
    ({0: 42, 1: -1, 3: 43}, StopKind.WAIT, None),
    ({0: 41, 1: 42, 3: 42}, StopKind.WAIT, None),
])
def test_decide_stop_moment(tags, kind, resume):
    d = decide_stop_moment(42, tags)
    assert d.kind is kind and d.resume_step == resume
    assert d.authorized == (kind is not StopKind.WAIT)


def test_staggered_optimizer_completion_converges():
    tags = {0: -1, 1: -1, 3: -1}
    for r in tags:
        assert not decide_stop_moment(42, tags).authorized
        tags[r] = 43
    assert decide_stop_moment(42, tags).kind is StopKind.OPTIMIZER_STEP


@pytest.mark.parametrize("tags", [{0: 42, 1: 43}, {0: 44, 1: 42}])
def test_impossible_tags_conflict(tags):
    with pytest.raises(StepTagConflict):
        decide_stop_moment(42, tags)


def test_plan_single_node_forward_backward():
    topo = build_topology(dp=4)
    rt = build_ranktable(4, 1)
    plan = plan_recovery(StopDecision(StopKind.FORWARD_BACKWARD, 10, 10), [2], topo, rt, ["spare-0", "spare-1"])
    assert plan.resume_step == 10 and plan.failure_phase is Phase.FORWARD_BACKWARD
    assert plan.replacements == (("node-2", "spare-0"),)
    assert plan.targets(Action.RECREATE) == ["node-2"]
    assert plan.donor_map == {2: 0}
    assert [(a.target, a.arg) for a in plan.actions if a.action is Action.RESTORE] == [(2, 0)]
    assert plan.targets(Action.STOP) == [0, 1, 3]
    assert plan.targets(Action.CONTINUE) == [0, 1, 2, 3]
    assert plan.ranktable_version_after == 1
    order = [a.action for a in plan.actions]
    assert order.index(Action.CLEAN) < order.index(Action.RESET) < order.index(Action.RESTORE) < \
        order.index(Action.ROLLBACK) < order.index(Action.CONTINUE)


def test_plan_optimizer_phase_and_multi_rank_node():
    topo = build_topology(dp=2, zero=2)
    rt = build_ranktable(4, 2)
    plan = plan_recovery(StopDecision(StopKind.OPTIMIZER_STEP, 10, 11), [2, 3], topo, rt, ["s0"])
    assert plan.resume_step == 11 and plan.failure_phase is Phase.OPTIMIZER
    assert plan.donor_map == {2: 0, 3: 1}
    assert plan.faulty_nodes == frozenset({"node-1"})


def test_plan_errors():
    topo = build_topology(dp=2)
    rt = build_ranktable(2, 1)
    decision = StopDecision(StopKind.FORWARD_BACKWARD, 3, 3)
    with pytest.raises(CheckpointFallback):
        plan_recovery(decision, [0, 1], topo, rt, ["s0", "s1"])
    with pytest.raises(ResourceExhausted):
        plan_recovery(decision, [1], topo, rt, [])
    with pytest.raises(ValueError):
        plan_recovery(StopDecision(StopKind.WAIT, 3), [1], topo, rt, ["s0"])


def _versioned(v):
    rt = build_ranktable(64, 8)
    for _ in range(v):
        rt = rt.with_status([], rt.entries[0].status)
    return rt


def test_publish_rejects_stale(tmp_path):
    path = tmp_path / "rt.json"
    publish_ranktable(_versioned(6), path)
    publish_ranktable(_versioned(7), path)
    assert read_ranktable_file(path).version == 7
    with pytest.raises(StaleRanktable):
        publish_ranktable(_versioned(6), path)
    with pytest.raises(StaleRanktable):
        publish_ranktable(_versioned(7), path)


def test_publish_never_exposes_torn_file(tmp_path):
    path = tmp_path / "rt.json"
    publish_ranktable(_versioned(6), path)
    tables = [_versioned(v) for v in range(7, 40)]
    seen, errors = [], []

    def reader():
        last = -1
        for _ in range(250):
            try:
                v = read_ranktable_file(path).version
            except Exception as exc:  # a torn read would fail to parse
                errors.append(exc)
                return
            if v < last:
                errors.append(f"version went back {last} -> {v}")
            last = v
            seen.append(v)

    threads = [threading.Thread(target=reader) for _ in range(4)]
    for th in threads:
        th.start()
    for rt in tables:
        publish_ranktable(rt, path)
    for th in threads:
        th.join()
    assert not errors
    assert len(seen) == 1000 and set(seen) <= set(range(6, 40))


def test_container_start_is_deterministic():
    a = container_start_ticks(7, "spare-0", 20, 3)
    assert a == container_start_ticks(7, "spare-0", 20, 3)
    assert container_start_ticks(7, "x", 0, 0) == 1
    assert {container_start_ticks(s, "spare-0", 20, 3) for s in range(30)} != {a}


def test_plugin_report_detected_on_delivery(tmp_path):
    sc = Scenario(topo=(2, 1, 1, 1), n_nodes=2, timings=Timings(miss_threshold=1000))
    ctx = build_context(sc, tmp_path / "rt.json")
    rt = build_ranktable(2, 1)
    ctrl = Controller(ctx, rt, ["spare-0"]).start()
    plugin = DevicePlugin(ctx, "node-1", 1)
    ctx.clock.call_later(5, lambda: plugin.inject(0, FailureClass.NETWORK_ANOMALY))
    ctx.clock.run(until=5 + sc.timings.latency)
    [event] = ctrl.failures
    assert event.kind is FailureKind.PLUGIN_REPORT and event.node_id == "node-1"
    assert event.evidence_at == 5 and event.detected_at == 5 + sc.timings.latency
    assert event.failure_class is FailureClass.NETWORK_ANOMALY


def test_replace_node_bumps_version_per_node():
    rt = build_ranktable(4, 1)
    rt = replace_node(replace_node(rt, "node-1", "spare-0"), "node-3", "spare-1")
    assert rt.version == 2
