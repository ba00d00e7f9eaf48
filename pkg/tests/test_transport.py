import math
import time

import numpy as np
import pytest

from flashrec.topology import RankStatus, build_ranktable
from flashrec.transport import (
    Cluster,
    CollectiveTimeout,
    EventLog,
    Interrupt,
    RealClock,
    RestoreError,
    SimClock,
    Store,
    StoreKeyError,
    StoreTimeout,
    Timeout,
    Wait,
    all_reduce_sum,
    barrier,
    copy_state,
    establish_store,
    form_group,
    run_until_done,
    serve_state,
    store_rounds,
)
from flashrec.transport.collectives import GroupFormationError, max_neighbors, ring_links, tree_links


def test_sim_clock_orders_by_time_then_fifo():
    clock = SimClock()
    seen = []

    def proc(name, delay):
        yield Timeout(delay)
        seen.append((clock.now, name))

    for name, delay in [("a", 3), ("b", 1), ("c", 3), ("d", 0)]:
        clock.spawn(proc(name, delay), name)
    clock.run()
    assert seen == [(0, "d"), (1, "b"), (3, "a"), (3, "c")]


def test_real_clock_keeps_call_order_for_equal_delays():
    clock = RealClock(tick_seconds=0.001)
    seen = []
    with clock._lock:
        for i in range(50):
            clock.call_later(2, lambda i=i: seen.append(i))
    deadline = time.monotonic() + 2
    while len(seen) < 50 and time.monotonic() < deadline:
        time.sleep(0.005)
    clock.stop()
    assert seen == list(range(50))


def test_wait_timeout_and_interrupt():
    clock = SimClock()
    ev = clock.event()
    out = []

    def waiter():
        fired = yield Wait(ev, 5)
        out.append(("timeout", clock.now, fired))
        try:
            yield Timeout(100)
        except Interrupt as exc:
            out.append(("interrupted", clock.now, str(exc)))

    p = clock.spawn(waiter())
    clock.call_later(7, lambda: p.interrupt(Interrupt("stop")))
    clock.run()
    assert out == [("timeout", 5, False), ("interrupted", 7, "stop")]


def test_messages_are_fifo_per_link():
    clock = SimClock()
    log = EventLog()
    cluster = Cluster(clock, latency=2, event_log=log)
    a, b = cluster.register("n0"), cluster.register("n1")
    got = []

    def rx():
        for _ in range(3):
            msg = yield from b.recv("data")
            got.append((clock.now, msg.payload))

    clock.spawn(rx())
    for i in range(3):
        cluster.send(a, b, "data", i)
    clock.run()
    assert got == [(2, 0), (2, 1), (2, 2)]
    assert cluster.sent_by_kind["data"] == 3
    assert "deliver" in log.text()


@pytest.mark.parametrize("n,p", [(1, 1), (7, 1), (8, 2), (9, 2), (100, 16), (2048, 16), (5, 10)])
def test_store_rounds(n, p):
    assert store_rounds(n, p) == (n if p == 1 else math.ceil(n / p))
    clock = SimClock()
    report = run_until_done(clock, establish_store(n, p, clock))
    assert report.rounds == store_rounds(n, p)
    assert report.elapsed == report.rounds


def test_store_rounds_via_helper():
    clock = SimClock()
    report = run_until_done(clock, establish_store(33, 8, clock, per_connection_cost=2))
    assert report.rounds == 5 and report.elapsed == 10 and clock.now == 10


def test_store_wait_and_timeout():
    clock = SimClock()
    store = Store(clock)
    out = []

    def reader(key, timeout):
        try:
            out.append((key, (yield from store.wait(key, timeout)), clock.now))
        except StoreTimeout:
            out.append((key, "timeout", clock.now))

    clock.spawn(reader("a", 10))
    clock.spawn(reader("b", 3))
    clock.call_later(4, lambda: store.put("a", b"1"))
    clock.run()
    assert sorted(out) == [("a", b"1", 4), ("b", "timeout", 3)]
    with pytest.raises(StoreKeyError):
        store.get("missing")


def _run_members(clock, members, body):
    results = {}

    def proc(r):
        results[r] = yield from body(r)

    for r in members:
        clock.spawn(proc(r))
    clock.run()
    return results


def test_form_group_cost_and_validation():
    rt = build_ranktable(8, 4)
    clock = SimClock()
    group = run_until_done(clock, form_group(range(8), rt, clock, "ring", link_cost=3))
    assert group.elapsed == 6 and clock.now == 6
    assert max_neighbors(range(8), ring_links(range(8))) == 2
    assert max_neighbors(range(8), tree_links(range(8))) == 3
    bad = rt.with_status([3], RankStatus.FAULTY)
    with pytest.raises(GroupFormationError):
        run_until_done(SimClock(), form_group(range(8), bad, SimClock()))


def test_all_reduce_matches_sequential_sum():
    rng = np.random.default_rng(3)
    parts = {r: rng.normal(size=5) for r in range(4)}
    expected = np.zeros(5)
    for r in range(4):
        expected = expected + parts[r]
    clock = SimClock()
    group = run_until_done(clock, form_group(range(4), build_ranktable(4, 1), clock))
    res = _run_members(clock, range(4), lambda r: all_reduce_sum(group, r, parts[r]))
    for r in range(4):
        assert np.array_equal(res[r], expected)


def test_barrier_and_dead_member_block():
    clock = SimClock()
    group = run_until_done(clock, form_group(range(3), build_ranktable(3, 1), clock))
    done = _run_members(clock, range(3), lambda r: barrier(group, r))
    assert set(done) == {0, 1, 2}

    group.mark_dead(2)
    outcomes = {}

    def member(r):
        try:
            yield from barrier(group, r, timeout=5)
            outcomes[r] = "ok"
        except CollectiveTimeout:
            outcomes[r] = ("timeout", clock.now)

    t0 = clock.now
    for r in range(3):
        clock.spawn(member(r))
    clock.run()
    assert outcomes == {r: ("timeout", t0 + 5) for r in range(3)}


def test_copy_state_and_dead_donor():
    clock = SimClock()
    cluster = Cluster(clock, latency=1)
    donor, target = cluster.register("d"), cluster.register("t")

    def donor_proc():
        msg = yield from donor.recv("state_request")
        serve_state(cluster, donor, msg.src, b"payload", cost=4)

    clock.spawn(donor_proc())
    assert run_until_done(clock, copy_state(cluster, target, donor.addr, timeout=20)) == b"payload"

    cluster.deregister(donor)
    with pytest.raises(RestoreError):
        run_until_done(clock, copy_state(cluster, target, donor.addr, timeout=5))
