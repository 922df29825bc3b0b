import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import cluster, inference, stage, training
from lemix.allocator import (
    AllocationDecision, ClusterState, NodeHistory, Policy, SchedulerParams, allocate, idleness_profit,
    length_consistency, luf_assign, partition_sizes, priority_score, rr_assign, separate_assign,
    separate_dynamic_partition, should_deprioritize,
)
from lemix.cluster import forward_latency
from lemix.errors import ConfigError, ContractViolation
from lemix.planner import ExecPath


def hist_of(lengths):
    h = NodeHistory()
    for i, x in enumerate(lengths):
        h.add(x, float(i))
    return h


def test_idleness_profit_examples():
    assert idleness_profit(0.0, 1, 2.0, 0.0) == 0.0
    assert idleness_profit(5.0, 1, 0.0, 1.0) == -5.0
    assert idleness_profit(0.5, 1, 0.0, 1.0) == -1.0


@given(ii=st.floats(0, 100), s=st.integers(1, 8), gap=st.floats(0, 100), tau=st.floats(-10, 10))
def test_ip_bounded_by_tau(ii, s, gap, tau):
    assert idleness_profit(ii, s, gap, tau) <= -tau


def test_length_consistency_examples():
    h = NodeHistory(count=10, mean=100.0, m2=10 * 100.0)  # std 10
    assert length_consistency(100, h) == pytest.approx(1 / (10 * math.sqrt(2 * math.pi)), rel=1e-12)
    assert length_consistency(110, h) == pytest.approx(0.024197072451914336, rel=1e-12)
    assert length_consistency(50, NodeHistory(), lc_cold=0.3) == 0.3
    assert length_consistency(50, hist_of([50]), lc_cold=0.7) == 0.7


def test_sigma_floor_for_constant_history():
    h = hist_of([64, 64, 64])
    assert length_consistency(64, h, sigma_floor=2.0) == pytest.approx(1 / (2 * math.sqrt(2 * math.pi)))


@given(lengths=st.lists(st.integers(1, 2000), min_size=2, max_size=30), d1=st.floats(0, 500), d2=st.floats(0, 500))
def test_lc_peaks_at_mean(lengths, d1, d2):
    h = hist_of(lengths)
    near, far = sorted((d1, d2))
    assert length_consistency(h.mean + near, h) >= length_consistency(h.mean + far, h)
    assert length_consistency(h.mean - far, h) <= length_consistency(h.mean, h)


@given(lengths=st.lists(st.integers(1, 5000), min_size=1, max_size=50))
def test_history_matches_numpy(lengths):
    import numpy as np
    h = hist_of(lengths)
    assert h.mean == pytest.approx(np.mean(lengths))
    assert h.std == pytest.approx(np.std(lengths), abs=1e-6)


def test_priority_score_examples():
    p = SchedulerParams(lambda1=1.0, lambda2=2.0)
    assert priority_score(-1.0, 0.5, 2.0, p) == 0.0
    assert priority_score(-3.0, 0.0, 1.5, SchedulerParams(lambda1=2.0)) == -1.0
    with pytest.raises(ContractViolation):
        priority_score(0.0, 0.0, 0.0, p)


def test_score_must_be_finite():
    with pytest.raises(ContractViolation):
        AllocationDecision(0, math.nan, 0.0, 1.0)


@given(st.lists(st.tuples(st.floats(-50, 0), st.floats(0, 1), st.floats(0.01, 50)), min_size=1, max_size=8),
       st.floats(0.01, 100))
def test_argmax_invariant_under_lambda1(rows, c):
    base = SchedulerParams(lambda1=1.0)
    scaled = SchedulerParams(lambda1=c)
    pick = lambda p: max(range(len(rows)), key=lambda i: (priority_score(*rows[i], p), -i))
    assert pick(base) == pick(scaled)


def test_identical_empty_nodes_pick_node_zero():
    st_ = ClusterState(cluster(4))
    d = allocate(inference(0, 0.0), st_, SchedulerParams())
    assert d.node_id == 0


def test_idle_node_preferred_over_conflicting_backward():
    # Node 0 holds a training task whose backward sits at [5, 7] on its only
    # stage; the 4 s candidate cannot fit in the [1.5, 5] gap.
    c = cluster(2, 1, stages=[stage(eta_f=1e-4, eta_b=2e-4)])
    state = ClusterState(c)
    state.queues[0].enqueue(training(0, 1.0, 50), ExecPath([1.0], [1.5], [5.0], [7.0]))
    state.history[0].add(50, 1.0)
    t = inference(1, 1.5, 200)
    d = allocate(t, state, SchedulerParams())
    # node 0: start 7, II = (7 - 1.5) - 2 = 3.5, gap 0.5 -> IP = -3, R = 9.5, f = -3/9.5
    # node 1: start 1.5, II = 0 -> IP = 0, R = 4, f = 0
    assert d.node_id == 1
    assert d.response_time == pytest.approx(4.0)
    from lemix.allocator import score_node
    f0, plan0 = score_node(state, 0, inference(2, 1.5, 200), SchedulerParams())
    assert plan0.ii == pytest.approx(3.5)
    assert f0 == pytest.approx(-3.0 / 9.5)


def test_allocate_updates_history_and_queues():
    state = ClusterState(cluster(2))
    allocate(training(0, 0.0, 80), state, SchedulerParams(policy="round_robin"))
    allocate(inference(1, 0.1, 40), state, SchedulerParams(policy="round_robin"))
    assert state.history[0].lengths == [80] and state.history[1].lengths == [40]
    assert 0 in state.queues[0] and 1 in state.queues[1]


@given(n_tasks=st.integers(1, 30), seed=st.integers(0, 1000),
       policy=st.sampled_from(["lemix", "round_robin", "separate", "luf", "separate_dynamic"]))
def test_every_task_assigned_once(n_tasks, seed, policy):
    import numpy as np
    rng = np.random.default_rng(seed)
    state = ClusterState(cluster(3))
    p = SchedulerParams(policy=policy, train_rate=0.5)
    t = 0.0
    for i in range(n_tasks):
        t += float(rng.exponential(0.3))
        task = (training if rng.random() < 0.5 else inference)(i, t, int(rng.integers(10, 200)))
        d = allocate(task, state, p, now=t)
        assert 0 <= d.node_id < 3
    assert sum(h.count for h in state.history) == n_tasks


def test_deprioritize_examples():
    c = cluster(2, 1, stages=[stage(eta_f=1e-4)])
    state = ClusterState(c)
    p = SchedulerParams(slo_multiple=5.0)
    nxt = inference(2, 0.0, 100)  # forward 1 s, budget 5 s
    assert not should_deprioritize(training(1, 0.0), nxt, state, p)
    for n in range(2):
        state.queues[n].enqueue(inference(10 + n, 0.0), ExecPath([9.0], [10.0]))
    assert should_deprioritize(training(1, 0.0), nxt, state, p)
    assert not should_deprioritize(training(1, 0.0), None, state, p)


@given(st.lists(st.lists(st.floats(0, 30), min_size=0, max_size=3), min_size=1, max_size=4),
       st.floats(0, 10), st.integers(10, 300), st.floats(0.5, 10))
def test_deprioritize_matches_exhaustive(ends, a, length, mult):
    c = cluster(len(ends), 1, stages=[stage(eta_f=1e-5)])
    state = ClusterState(c)
    tid = 100
    for n, row in enumerate(ends):
        for e in row:
            state.queues[n].enqueue(inference(tid, 0.0), ExecPath([e], [e]))
            tid += 1
    nxt = inference(1, a, length)
    fwd = forward_latency(c.nodes[0].stages[0], 1, length)
    best = min(max(row + [0.0]) + fwd for row in ends)  # never earlier than now = 0
    expected = best - a > mult * fwd
    assert should_deprioritize(training(0, 0.0), nxt, state, SchedulerParams(slo_multiple=mult)) == expected


@pytest.mark.parametrize("alpha,expected", [(0.5, (2, 2)), (0.1, (1, 3)), (0.9, (3, 1))])
def test_partition_sizes(alpha, expected):
    assert partition_sizes(4, alpha) == expected


def test_partition_needs_two_nodes():
    with pytest.raises(ConfigError):
        partition_sizes(1, 0.5)


def test_separate_routes_within_partitions():
    state = ClusterState(cluster(4))
    inf_nodes = [separate_assign(inference(i, 0.0), state, 0.5) for i in range(4)]
    train_nodes = [separate_assign(training(i, 0.0), state, 0.5) for i in range(4)]
    assert inf_nodes == [0, 1, 0, 1]
    assert train_nodes == [2, 3, 2, 3]


def test_separate_dynamic_adds_training_node_when_quiet():
    assert separate_dynamic_partition(4, 0.5, recent_rate=10.0) == 3
    assert separate_dynamic_partition(4, 0.5, recent_rate=80.0) == 2


def test_round_robin_cycle():
    state = ClusterState(cluster(4))
    picks = [rr_assign(t, state) for t in [inference(0, 0), training(1, 0), inference(2, 0), training(3, 0),
                                              inference(4, 0)]]
    assert picks == [0, 1, 2, 3, 0]


def test_luf_picks_least_utilized():
    state = ClusterState(cluster(4))
    state.utilization = [0.9, 0.1, 0.5, 0.5]
    assert luf_assign(inference(0, 0), state) == 1
    state.utilization = [0.3] * 4
    assert luf_assign(inference(0, 0), state) == 0


def test_luf_decision_latency_default():
    assert SchedulerParams(policy="luf").resolved_decision_latency == pytest.approx(0.076)


def test_policy_aliases_and_errors():
    assert Policy.parse("RR") is Policy.ROUND_ROBIN
    assert Policy.parse("naivemix") is Policy.ROUND_ROBIN
    with pytest.raises(ConfigError):
        Policy.parse("fastest")
    with pytest.raises(ConfigError):
        SchedulerParams(lambda1=0)
