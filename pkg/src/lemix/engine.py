"""Deterministic discrete-event simulation of a co-located cluster.

One event loop drives everything: arrivals, a serial dispatcher that runs the
allocation policy, per-GPU stage execution under a memory model with
wait-or-drop admission, iteration-level decode, and model-version tracking.

Each GPU runs its pending stage operations in planned-start order. The head
operation must be ready (its upstream stage finished) before the GPU moves
on, so with exact cost coefficients the simulated timeline is the planned
one.
"""

from __future__ import annotations

import bisect
import enum
import heapq
import json
import logging
import math
import time as _wall
from collections import deque
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .allocator import ClusterState, Policy, SchedulerParams, allocate, should_deprioritize, slo_budget
from .cluster import GB, ClusterConfig, backward_latency, decode_latency, forward_latency, memory_threshold, node_forward_latency
from .errors import InfeasibleTaskError, LivelockError
from .planner import BACKWARD, FORWARD, ExecPath, calibrate
from .workload import Task, TaskKind, workload_hash

log = logging.getLogger(__name__)


class EventKind(enum.IntEnum):
    ARRIVAL = 0
    DISPATCH = 1
    STAGE_FORWARD_DONE = 2
    STAGE_BACKWARD_DONE = 3
    MEMORY_CHECK = 4
    DECODE_STEP_DONE = 5
    BATCH_TIMER = 6
    SYNC_DONE = 7


class Event(NamedTuple):
    time: float
    seq: int
    kind: EventKind
    payload: object


# -- memory -------------------------------------------------------------


@dataclass
class GpuMemState:
    weights: float
    capacity: float
    threshold: float
    resident: float = 0.0
    held: dict = field(default_factory=dict)  # task id -> [act, kv, offloaded bytes]
    peak: float = 0.0
    offloads: int = 0
    violations: int = 0
    ooms: int = 0

    def __post_init__(self):
        self.resident = self.weights
        self.peak = self.weights

    def available(self, demand: float) -> bool:
        return self.resident + demand <= self.threshold

    def _bump(self):
        if self.resident > self.peak:
            self.peak = self.resident

    def claim(self, transient: float, holds: dict) -> None:
        self.resident += transient
        for tid, (act, kv) in holds.items():
            rec = self.held.setdefault(tid, [0.0, 0.0, 0.0])
            rec[0] += act
            rec[1] += kv
            self.resident += act + kv
        self._bump()

    def claim_offloaded(self, holds: dict) -> None:
        for tid, (act, kv) in holds.items():
            rec = self.held.setdefault(tid, [0.0, 0.0, 0.0])
            rec[2] += act + kv

    def release_transient(self, transient: float) -> None:
        self.resident -= transient

    def offload(self, task_ids) -> float:
        """Move the named tasks' resident bytes to the host; return bytes moved."""
        moved = 0.0
        for tid in task_ids:
            rec = self.held.get(tid)
            if rec is None:
                continue
            moved += rec[0] + rec[1]
            rec[2] += rec[0] + rec[1]
            rec[0] = rec[1] = 0.0
        self.resident -= moved
        if moved or task_ids:
            self.offloads += 1
        return moved

    def free_activations(self, task_id) -> None:
        rec = self.held.get(task_id)
        if rec is None:
            return
        self.resident -= rec[0]
        rec[0] = 0.0
        self._maybe_drop(task_id)

    def free_task(self, task_id) -> None:
        rec = self.held.pop(task_id, None)
        if rec is not None:
            self.resident -= rec[0] + rec[1]

    def _maybe_drop(self, task_id):
        rec = self.held[task_id]
        if rec[0] == 0.0 and rec[1] == 0.0 and rec[2] == 0.0:
            del self.held[task_id]

    def take_offloaded(self, task_id) -> float:
        """Bytes that must be streamed back for this task (charged once)."""
        rec = self.held.get(task_id)
        if rec is None or rec[2] == 0.0:
            return 0.0
        moved = rec[2]
        rec[2] = 0.0
        self._maybe_drop(task_id)
        return moved


class Outcome(NamedTuple):
    kind: str  # "executed" | "waited" | "offloaded"
    wait: float


def wait_or_drop(available, start: float, delta_t: float, t_max: float) -> Outcome:
    """Poll ``available(t)`` every ``delta_t`` from ``start``.

    Returns ``executed`` with zero wait if memory is free at once, ``waited``
    with the time spent if it frees up before ``t_max``, and ``offloaded``
    once the accumulated wait reaches ``t_max``.
    """
    ticks = 0
    while True:
        wait = ticks * delta_t
        if available(start + wait):
            return Outcome("executed" if ticks == 0 else "waited", wait)
        if wait >= t_max:
            return Outcome("offloaded", wait)
        ticks += 1


# -- batching -----------------------------------------------------------


@dataclass
class Batch:
    members: list
    formed_at: float
    kind: str = "prefill"

    @property
    def size(self) -> int:
        return sum(t.batch_size for t in self.members)

    @property
    def padded_length(self) -> int:
        return max(t.length for t in self.members)


def continuous_batch(queue: Sequence, c_max: int, t_w: float, now: float, t_start: Optional[float] = None) -> Optional[Batch]:
    """Greedy FCFS fill of up to ``c_max`` inference requests.

    Filling stops at the first training task. A batch is emitted when it is
    full or once ``t_start + t_w`` has passed; otherwise ``None``.
    """
    t_start = now if t_start is None else t_start
    members = []
    for task in queue:
        if len(members) >= c_max or task.is_training:
            break
        members.append(task)
    if not members:
        return None
    if len(members) >= c_max or now >= t_start + t_w:
        return Batch(members, now)
    return None


# -- model versions -----------------------------------------------------


@dataclass
class ModelVersionState:
    co_located: bool
    node_versions: list
    trainer: int = 0
    serving: int = 0
    pending_syncs: list = field(default_factory=list)

    @classmethod
    def create(cls, n_nodes: int, co_located: bool) -> "ModelVersionState":
        return cls(co_located, [0] * n_nodes)

    def version_for(self, node: int) -> int:
        return self.node_versions[node] if self.co_located else self.serving


def apply_model_update(versions: ModelVersionState, node: int, now: float = 0.0,
                       sync_latency: float = 0.0, sync_interval: int = 100):
    """Record one finished backward on ``node``.

    Co-located nodes bump their own counter. In separate mode the trainer
    counter advances and every ``sync_interval`` updates a sync is due at
    ``now + sync_latency``; returns ``(due_time, version)`` or ``None``.
    """
    if versions.co_located:
        versions.node_versions[node] += 1
        return None
    versions.trainer += 1
    if versions.trainer % sync_interval == 0:
        due = (now + sync_latency, versions.trainer)
        versions.pending_syncs.append(due)
        return due
    return None


def complete_sync(versions: ModelVersionState, version: int) -> None:
    versions.serving = max(versions.serving, version)
    versions.pending_syncs = [p for p in versions.pending_syncs if p[1] > version]


# -- decode ---------------------------------------------------------------


@dataclass
class _DecodeReq:
    task: Task
    remaining: int
    context: int
    tokens: list = field(default_factory=list)


def decode_step(node, members: Sequence, stage: int) -> float:
    """Latency of one decode iteration on one stage for the active set."""
    total = sum(m.task.batch_size for m in members)
    ctx = max(m.context for m in members)
    return decode_latency(node.stages[stage], total, ctx)


# -- engine ---------------------------------------------------------------


@dataclass
class EngineOptions:
    unlimited_memory: bool = False
    latency_noise: float = 0.0  # sigma of a multiplicative lognormal factor
    idle_event_budget: int = 200_000
    record_plans: bool = False


@dataclass(eq=False)
class _Op:
    kind: str  # "F", "B", "D"
    node: int
    stage: int
    key: float
    seq: int
    duration: float
    job: object
    ready: bool = False
    transient: float = 0.0
    holds: dict = field(default_factory=dict)
    start: float = math.nan
    offloaded: bool = False

    def __lt__(self, other):
        return (self.key, self.seq) < (other.key, other.seq)


class _Gpu:
    __slots__ = ("node", "stage", "pending", "running", "wait_op", "wait_ticks", "wait_since",
                 "starts", "ends", "busy", "mem")

    def __init__(self, node, stage, mem):
        self.node = node
        self.stage = stage
        self.pending = []
        self.running = None
        self.wait_op = None
        self.wait_ticks = 0
        self.wait_since = 0.0
        self.starts = []
        self.ends = []
        self.busy = 0.0
        self.mem = mem

    def busy_between(self, lo: float, hi: float) -> float:
        if hi <= lo:
            return 0.0
        i = bisect.bisect_right(self.ends, lo)
        total = 0.0
        while i < len(self.starts) and self.starts[i] < hi:
            total += min(self.ends[i], hi) - max(self.starts[i], lo)
            i += 1
        return total


@dataclass
class SimResult:
    policy: str
    seed: int
    horizon: float
    records: list
    gpus: list
    decision_wall_times: list
    events: int
    plans: Optional[dict] = None
    slo_multiple: float = 5.0
    workload_hash: str = ""
    tasks: list = field(default_factory=list, repr=False)

    def record_by_id(self):
        return {r["id"]: r for r in self.records}

    def to_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for r in self.records:
                fh.write(json.dumps(r, sort_keys=True) + "\n")

    def ledger_rows(self):
        return [
            {k: g[k] for k in ("node", "stage", "busy_s", "idle_s", "peak_mem_bytes", "offloads")}
            for g in self.gpus
        ]

    def write_ledger(self, path) -> None:
        import csv

        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=["node", "stage", "busy_s", "idle_s", "peak_mem_bytes", "offloads"])
            w.writeheader()
            for row in self.ledger_rows():
                w.writerow(row)


class Simulator:
    def __init__(self, cluster: ClusterConfig, tasks: Sequence[Task], params: SchedulerParams,
                 seed: int = 0, options: Optional[EngineOptions] = None):
        self.cluster = cluster
        self.params = params
        self.options = options or EngineOptions()
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self.tasks = sorted(tasks, key=lambda t: (t.arrival_time, t.id))
        if params.train_rate is None and params.policy in (Policy.SEPARATE, Policy.SEPARATE_DYNAMIC):
            frac = sum(t.is_training for t in self.tasks) / max(len(self.tasks), 1)
            params.train_rate = frac
        self.state = ClusterState(cluster)
        self.latency = params.resolved_decision_latency
        self.now = 0.0
        self._events = []
        self._seq = 0
        self._op_seq = 0
        self.gpus = [
            [_Gpu(n, s, self._make_mem(node, s)) for s in range(node.n_stages)]
            for n, node in enumerate(cluster.nodes)
        ]
        self.versions = ModelVersionState.create(cluster.n_nodes, params.policy.co_located)
        self.queue = deque()
        self.train_backlog = deque()
        self.gate_open = True
        self.held = None  # (training task, inference id it waits behind)
        self.reordered = {}
        self.dispatch_busy = False
        self.batch_start = None
        self.batch_timer_set = False
        self.members = {}  # job id -> member tasks
        self.decode_active = [[] for _ in cluster.nodes]
        self.decode_running = [False] * cluster.n_nodes
        self.ops_left = {}  # job id -> remaining ops
        self.rec = {}
        self.job_actual = {}
        self.job_info = {}
        self.arrival_times = []
        self.decision_wall = []
        self.plans = {} if self.options.record_plans else None
        self._next_job_id = max((t.id for t in self.tasks), default=-1) + 1
        self._inference_order = [t for t in self.tasks if not t.is_training]
        self._inf_ptr = 0
        self._arrived = set()
        self.t_w = params.t_w
        if self.t_w is None:
            lengths = [t.length for t in self._inference_order] or [1]
            ref = min(node_forward_latency(n, 1, float(np.mean(lengths))) for n in cluster.nodes)
            self.t_w = 0.5 * ref
        self.events = 0
        self._idle_events = 0

    # -- setup -------------------------------------------------------------
    def _make_mem(self, node, s):
        p = node.stages[s]
        if self.options.unlimited_memory:
            return GpuMemState(0.0, math.inf, math.inf)
        return GpuMemState(p.mem_weights, p.mem_capacity, memory_threshold(node, s))

    def _check_feasible(self):
        if self.options.unlimited_memory:
            return
        for t in self.tasks:
            for node in self.cluster.nodes:
                for s, p in enumerate(node.stages):
                    need = (p.mem_weights + p.mem_act_coeff * t.batch_size * t.length
                            + p.mem_kv_coeff * t.batch_size * (t.length + t.output_length))
                    if need > memory_threshold(node, s):
                        raise InfeasibleTaskError(
                            f"task {t.id} needs {need / GB:.2f} GB on node {node.id} stage {s}, "
                            f"threshold is {memory_threshold(node, s) / GB:.2f} GB")

    def _push(self, t, kind, payload=None):
        heapq.heappush(self._events, Event(t, self._seq, kind, payload))
        self._seq += 1

    # -- main loop ---------------------------------------------------------
    def run(self) -> SimResult:
        self._check_feasible()
        for t in self.tasks:
            self.rec[t.id] = self._new_record(t)
            self._push(t.arrival_time, EventKind.ARRIVAL, t)
        handlers = {
            EventKind.ARRIVAL: self._on_arrival,
            EventKind.DISPATCH: self._on_dispatch,
            EventKind.STAGE_FORWARD_DONE: self._on_op_done,
            EventKind.STAGE_BACKWARD_DONE: self._on_op_done,
            EventKind.DECODE_STEP_DONE: self._on_op_done,
            EventKind.MEMORY_CHECK: self._on_memory_check,
            EventKind.BATCH_TIMER: self._on_batch_timer,
            EventKind.SYNC_DONE: self._on_sync,
        }
        budget = self.options.idle_event_budget
        while self._events:
            ev = heapq.heappop(self._events)
            self.now = ev.time
            self.events += 1
            self._idle_events += 1
            handlers[ev.kind](ev.payload)
            if self._idle_events > budget:
                raise LivelockError(f"no stage completed in {budget} events at t={self.now:.6f}; "
                                    f"state: {self._dump_state()}")
        if self.queue or self.held or self.train_backlog or any(self.ops_left.values()):
            raise LivelockError(f"event queue drained with work outstanding: {self._dump_state()}")
        return self._result()

    def _dump_state(self):
        gpus = {
            f"{g.node}/{g.stage}": {
                "pending": [(o.kind, getattr(o.job, "id", None), o.key, o.ready) for o in sorted(g.pending)[:5]],
                "running": None if g.running is None else g.running.kind,
                "waiting": None if g.wait_op is None else g.wait_op.kind,
                "resident": g.mem.resident,
            }
            for row in self.gpus for g in row
        }
        return json.dumps({"queue": [t.id for t in self.queue], "held": None if self.held is None else self.held[0].id,
                           "backlog": [t.id for t in self.train_backlog], "gpus": gpus}, default=str)

    # -- arrivals and the global queue ---------------------------------------
    def _new_record(self, t: Task) -> dict:
        return {
            "id": t.id, "kind": t.kind.value, "arrival": t.arrival_time, "length": t.length,
            "batch_size": t.batch_size, "output_length": t.output_length,
            "release": None, "node": None, "dispatch": None,
            "planned": None, "actual": None,
            "pred_ii": None, "pred_r": None, "actual_ii": None, "actual_r": None,
            "prev": None, "plan_start": None,
            "ttft": None, "tokens": 0, "tbt": None, "completion": None,
            "version": None, "deprioritized": 0, "offloaded": False, "slo_deadline": None,
            "job": None,
        }

    def _on_arrival(self, task: Task):
        self._arrived.add(task.id)
        self.arrival_times.append(self.now)
        if task.is_training:
            self.train_backlog.append(task)
            self._try_release()
        else:
            rec = self.rec[task.id]
            rec["release"] = self.now
            budget = slo_budget(task, self.cluster, self.params.slo_multiple)
            rec["slo_deadline"] = task.arrival_time + budget
            self.queue.append(task)
            while self._inf_ptr < len(self._inference_order) and self._inference_order[self._inf_ptr].id in self._arrived:
                self._inf_ptr += 1
            if self.held is not None and self.held[1] == task.id:
                self.queue.append(self.held[0])
                self.held = None
        self._kick_dispatcher()

    def _try_release(self):
        if self.gate_open and self.train_backlog:
            t = self.train_backlog.popleft()
            self.gate_open = False
            self.rec[t.id]["release"] = self.now
            # the planner measures R from the effective arrival
            self.queue.append(replace(t, arrival_time=self.now))

    def _next_inference_after(self, idx):
        for j in range(idx + 1, len(self.queue)):
            if not self.queue[j].is_training:
                return self.queue[j], j
        if self._inf_ptr < len(self._inference_order):
            return self._inference_order[self._inf_ptr], None
        return None, None

    def _select(self):
        """Pop the next job from the global queue, applying reordering and batching."""
        p = self.params
        while self.queue:
            head = self.queue[0]
            if head.is_training and p.policy is Policy.LEMIX and p.deprioritize:
                nxt, pos = self._next_inference_after(0)
                done = self.reordered.setdefault(head.id, set())
                if nxt is not None and nxt.id not in done:
                    done.add(nxt.id)
                    if should_deprioritize(head, nxt, self.state, p, self.now):
                        self.rec[head.id]["deprioritized"] += 1
                        self.queue.popleft()
                        if pos is not None:
                            self.queue.insert(pos, head)
                        else:
                            self.held = (head, nxt.id)
                        continue
            if head.is_training or p.c_max <= 1:
                return self.queue.popleft()
            if self.batch_start is None:
                self.batch_start = self.now
            batch = continuous_batch(self.queue, p.c_max, self.t_w, self.now, self.batch_start)
            if batch is None:
                if not self.batch_timer_set:
                    self.batch_timer_set = True
                    self._push(self.batch_start + self.t_w, EventKind.BATCH_TIMER)
                return None
            self.batch_start = None
            for _ in batch.members:
                self.queue.popleft()
            return self._merge(batch)
        return None

    def _merge(self, batch: Batch):
        if len(batch.members) == 1:
            return batch.members[0]
        job = Task(self._next_job_id, TaskKind.INFERENCE, min(t.arrival_time for t in batch.members),
                   batch.padded_length, batch.size)
        self._next_job_id += 1
        self.members[job.id] = list(batch.members)
        return job

    def _on_batch_timer(self, _):
        self.batch_timer_set = False
        self._kick_dispatcher()

    def _kick_dispatcher(self):
        while not self.dispatch_busy:
            job = self._select()
            if job is None:
                return
            if self.latency > 0:
                self.dispatch_busy = True
                self._push(self.now + self.latency, EventKind.DISPATCH, job)
                return
            self._commit(job)

    def _on_dispatch(self, job):
        self.dispatch_busy = False
        self._commit(job)
        self._kick_dispatcher()

    # -- allocation commit ---------------------------------------------------
    def _refresh_state(self):
        st = self.state
        st.now = self.now
        p = self.params
        if p.policy is Policy.LUF:
            lo = self.now - p.luf_window
            for n, row in enumerate(self.gpus):
                busy = 0.0
                for g in row:
                    busy += g.busy_between(lo, self.now)
                    if g.running is not None and g.running.start < self.now:
                        busy += self.now - max(g.running.start, lo)
                st.utilization[n] = busy / (p.luf_window * len(row))
        elif p.policy is Policy.SEPARATE_DYNAMIC:
            lo = self.now - p.rate_window
            i = bisect.bisect_right(self.arrival_times, lo)
            st.recent_rate = (len(self.arrival_times) - i) / p.rate_window

    def _commit(self, job):
        self._refresh_state()
        prev = [q.last for q in self.state.queues]
        t0 = _wall.perf_counter()
        decision = allocate(job, self.state, self.params, self.now)
        self.decision_wall.append(_wall.perf_counter() - t0)
        n = decision.node_id
        node = self.cluster.nodes[n]
        path = decision.plan.path
        prev_entry = prev[n]
        prev_id = None if prev_entry is None else prev_entry.task.id
        plan_start = max(job.arrival_time, self.now)
        actual = {"start_f": [None] * node.n_stages, "end_f": [None] * node.n_stages}
        if job.is_training:
            actual["start_b"] = [None] * node.n_stages
            actual["end_b"] = [None] * node.n_stages
        self.job_actual[job.id] = actual
        self.job_info[job.id] = (n, prev_id, plan_start)
        for m in self.members.get(job.id, [job]):
            self.rec[m.id].update(
                node=n, dispatch=self.now, planned=path.to_dict(), pred_ii=decision.ii,
                pred_r=path.end_f[-1] - m.arrival_time, plan_start=plan_start, prev=prev_id,
                job=job.id, actual=actual)
        if self.plans is not None:
            self.plans[str(job.id)] = {"node": n, "ii": decision.ii, "r": decision.response_time,
                                       "path": path.to_dict(), "score": decision.score}
        self._create_ops(job, n, node, path)

    def _create_ops(self, job, n, node, path: ExecPath):
        S = node.n_stages
        C, L = job.batch_size, job.length
        members = self.members.get(job.id, [job])
        ops = []
        for s in range(S):
            p = node.stages[s]
            act = p.mem_act_coeff * C * L
            if job.is_training:
                transient, holds = 0.0, {job.id: (act, 0.0)}
            else:
                holds = {}
                for m in members:
                    if m.output_length > 0:
                        holds[m.id] = (0.0, p.mem_kv_coeff * m.batch_size * m.length)
                transient = act
            op = _Op("F", n, s, path.start_f[s], self._next_op_seq(), forward_latency(p, C, L), job,
                     ready=(s == 0), transient=transient, holds=holds)
            ops.append(op)
        if job.is_training:
            for s in range(S - 1, -1, -1):
                p = node.stages[s]
                op = _Op("B", n, s, path.start_b[s], self._next_op_seq(), backward_latency(p, C, L), job,
                         transient=p.mem_act_coeff * C * L)
                ops.append(op)
        self.ops_left[job.id] = {(o.kind, o.stage): o for o in ops}
        for o in ops:
            heapq.heappush(self.gpus[n][o.stage].pending, o)
        self._kick_gpu(self.gpus[n][0])

    def _next_op_seq(self):
        self._op_seq += 1
        return self._op_seq

    # -- stage execution -------------------------------------------------------
    def _kick_gpu(self, g: _Gpu):
        if g.running is not None or g.wait_op is not None or not g.pending:
            return
        op = g.pending[0]
        if not op.ready:
            return
        heapq.heappop(g.pending)
        node = self.cluster.nodes[g.node]
        demand = op.transient + sum(a + k for a, k in op.holds.values())
        if not self.params.memory_aware or g.mem.available(demand):
            self._start(g, op)
            return
        g.wait_op = op
        g.wait_ticks = 0
        g.wait_since = self.now
        self._push(self.now + node.delta_t, EventKind.MEMORY_CHECK, g)

    def _on_memory_check(self, g: _Gpu):
        op = g.wait_op
        if op is None:
            return
        node = self.cluster.nodes[g.node]
        g.wait_ticks += 1
        wait = g.wait_ticks * node.delta_t
        demand = op.transient + sum(a + k for a, k in op.holds.values())
        if g.mem.available(demand):
            g.wait_op = None
            self._start(g, op)
        elif wait >= node.t_max:
            g.wait_op = None
            op.offloaded = True
            self._start(g, op)
        else:
            self._push(g.wait_since + (g.wait_ticks + 1) * node.delta_t, EventKind.MEMORY_CHECK, g)

    def _member_ids(self, op: _Op):
        if op.kind == "D":
            return [m.task.id for m in op.job]
        return [m.id for m in self.members.get(op.job.id, [op.job])]

    def _start(self, g: _Gpu, op: _Op):
        node = self.cluster.nodes[g.node]
        mem = g.mem
        dur = op.duration
        if self.options.latency_noise > 0:
            dur *= float(np.exp(self.rng.normal(0.0, self.options.latency_noise)))
        ids = self._member_ids(op) if op.kind != "B" else [op.job.id]
        moved = 0.0
        for tid in ids:
            moved += mem.take_offloaded(tid)
        if op.offloaded:
            moved += mem.offload(ids)
            moved += op.transient + sum(a + k for a, k in op.holds.values())
            mem.claim_offloaded(op.holds)
            for tid in ids:
                if tid in self.rec:
                    self.rec[tid]["offloaded"] = True
        else:
            mem.claim(op.transient, op.holds)
            if mem.resident > mem.threshold + 1e-6:
                mem.violations += 1
            if mem.resident > mem.capacity + 1e-6:
                mem.ooms += 1
        dur += node.offload_penalty * moved / GB
        op.start = self.now
        g.running = op
        kind = {"F": EventKind.STAGE_FORWARD_DONE, "B": EventKind.STAGE_BACKWARD_DONE,
                "D": EventKind.DECODE_STEP_DONE}[op.kind]
        if op.kind == "F" and op.stage == 0:
            for tid in self._member_ids(op):
                r = self.rec[tid]
                if r["kind"] == "inference":
                    r["version"] = self.versions.version_for(g.node)
        self._push(self.now + dur, kind, op)

    def _on_op_done(self, op: _Op):
        self._idle_events = 0
        g = self.gpus[op.node][op.stage]
        g.running = None
        g.starts.append(op.start)
        g.ends.append(self.now)
        g.busy += self.now - op.start
        if not op.offloaded:
            g.mem.release_transient(op.transient)
        if op.kind == "F":
            self._forward_done(op)
        elif op.kind == "B":
            self._backward_done(op)
        else:
            self._decode_done(op)
        self._kick_gpu(g)

    def _set_actual(self, job, key_s, key_e, s, start, end):
        a = self.job_actual[job.id]
        a[key_s][s] = start
        a[key_e][s] = end

    def _forward_done(self, op: _Op):
        job, s, n = op.job, op.stage, op.node
        S = self.cluster.nodes[n].n_stages
        self._set_actual(job, "start_f", "end_f", s, op.start, self.now)
        q = self.state.queues[n]
        if job.id in q:
            calibrate(q, job.id, s, op.start, self.now, FORWARD)
        left = self.ops_left[job.id]
        del left[("F", s)]
        if job.is_training and s == 0:
            self.gate_open = True
            self._try_release()
            self._kick_dispatcher()
        if s + 1 < S:
            nxt = left[("F", s + 1)]
            nxt.ready = True
            self._kick_gpu(self.gpus[n][s + 1])
            return
        if job.is_training:
            nxt = left[("B", S - 1)]
            nxt.ready = True
            self._kick_gpu(self.gpus[n][S - 1])
            return
        for m in self.members.get(job.id, [job]):
            r = self.rec[m.id]
            r["ttft"] = self.now - m.arrival_time
            if m.output_length > 0:
                self.decode_active[n].append(_DecodeReq(m, m.output_length, m.length))
            else:
                r["completion"] = self.now
        self._finish_job(job)
        self._maybe_decode(n)

    def _backward_done(self, op: _Op):
        job, s, n = op.job, op.stage, op.node
        self._set_actual(job, "start_b", "end_b", s, op.start, self.now)
        self.gpus[n][s].mem.free_activations(job.id)
        q = self.state.queues[n]
        if job.id in q:
            calibrate(q, job.id, s, op.start, self.now, BACKWARD)
        left = self.ops_left[job.id]
        del left[("B", s)]
        if s > 0:
            nxt = left[("B", s - 1)]
            nxt.ready = True
            self._kick_gpu(self.gpus[n][s - 1])
            return
        self.rec[job.id]["completion"] = self.now
        for g in self.gpus[n]:
            g.mem.free_task(job.id)
        due = apply_model_update(self.versions, n, self.now, self.cluster.sync_latency(), self.cluster.sync_interval)
        if due is not None:
            self._push(due[0], EventKind.SYNC_DONE, due[1])
        self._finish_job(job)

    def _finish_job(self, job):
        if not self.ops_left.get(job.id):
            self.ops_left.pop(job.id, None)

    def _on_sync(self, version):
        complete_sync(self.versions, version)

    # -- decode ------------------------------------------------------------
    def _maybe_decode(self, n):
        if self.decode_running[n] or not self.decode_active[n]:
            return
        self.decode_running[n] = True
        self._decode_stage(n, 0, list(self.decode_active[n]))

    def _decode_stage(self, n, s, members):
        node = self.cluster.nodes[n]
        p = node.stages[s]
        holds = {m.task.id: (0.0, p.mem_kv_coeff * m.task.batch_size) for m in members}
        op = _Op("D", n, s, self.now, self._next_op_seq(), decode_step(node, members, s), members,
                 ready=True, holds=holds)
        g = self.gpus[n][s]
        heapq.heappush(g.pending, op)
        self._kick_gpu(g)

    def _decode_done(self, op: _Op):
        n, s, members = op.node, op.stage, op.job
        S = self.cluster.nodes[n].n_stages
        if s + 1 < S:
            self._decode_stage(n, s + 1, members)
            return
        finished = []
        for m in members:
            m.remaining -= 1
            m.context += 1
            m.tokens.append(self.now)
            if m.remaining == 0:
                finished.append(m)
        for m in finished:
            self.decode_active[n].remove(m)
            r = self.rec[m.task.id]
            r["completion"] = self.now
            r["tokens"] = len(m.tokens)
            first = r["arrival"] + r["ttft"]
            r["tbt"] = (m.tokens[-1] - first) / len(m.tokens)
            for g in self.gpus[n]:
                g.mem.free_task(m.task.id)
        self.decode_running[n] = False
        self._maybe_decode(n)

    # -- result ------------------------------------------------------------
    def _actual_ii(self, job_id):
        """Idle time the job's forward left on each GPU since its predecessor."""
        n, prev_id, plan_start = self.job_info[job_id]
        a = self.job_actual[job_id]
        prev_end = None if prev_id is None else self.job_actual[prev_id]["end_f"]
        ii = 0.0
        stage_ready = plan_start
        for s in range(len(a["end_f"])):
            pe = prev_end[s] if prev_end is not None else stage_ready
            st = a["start_f"][s]
            ii += (st - pe) - self.gpus[n][s].busy_between(pe, st)
            stage_ready = a["end_f"][s]
        return max(ii, 0.0)

    def _result(self) -> SimResult:
        horizon = self.now
        records = []
        for t in self.tasks:
            r = self.rec[t.id]
            if r["job"] is not None:
                r["actual_r"] = r["actual"]["end_f"][-1] - r["release"]
                r["actual_ii"] = self._actual_ii(r["job"])
            records.append(r)
        gpus = []
        for row in self.gpus:
            for g in row:
                busy, idle = split_horizon(math.fsum(e - s for s, e in zip(g.starts, g.ends)), horizon)
                gpus.append({
                    "node": g.node, "stage": g.stage, "busy_s": busy, "idle_s": idle,
                    "peak_mem_bytes": g.mem.peak, "offloads": g.mem.offloads,
                    "violations": g.mem.violations, "ooms": g.mem.ooms,
                    "capacity": g.mem.capacity, "threshold": g.mem.threshold,
                    "intervals": list(zip(g.starts, g.ends)),
                })
        return SimResult(
            policy=self.params.policy.value, seed=self.seed, horizon=horizon, records=records, gpus=gpus,
            decision_wall_times=self.decision_wall, events=self.events, plans=self.plans,
            slo_multiple=self.params.slo_multiple,
        )


def split_horizon(busy: float, horizon: float):
    """Return ``(busy, idle)`` floats whose sum is exactly ``horizon``.

    ``horizon - busy`` is exact when busy is the larger part; otherwise busy
    is re-derived from the rounded idle time, which is exact for the same
    reason. Either way each value moves by at most one ulp of the horizon.
    """
    idle = horizon - busy
    if busy + idle != horizon:
        busy = horizon - idle
    return busy, idle


def run(cluster: ClusterConfig, tasks: Sequence[Task], params: SchedulerParams, seed: int = 0,
        options: Optional[EngineOptions] = None) -> SimResult:
    """Simulate ``tasks`` on ``cluster`` under ``params`` and return the trace."""
    params = replace(params)  # the engine may fill in train_rate
    tasks = [replace(t, planned_path=None, actual_path=None) for t in tasks]
    sim = Simulator(cluster, tasks, params, seed, options)
    result = sim.run()
    result.workload_hash = workload_hash(tasks)
    by_id = {t.id: t for t in tasks}
    for r in result.records:
        t = by_id[r["id"]]
        if r["planned"] is not None:
            t.planned_path = _path_from(r["planned"])
            t.actual_path = _path_from(r["actual"])
    result.tasks = tasks
    return result


def _path_from(d):
    return ExecPath(list(d["start_f"]), list(d["end_f"]),
                    None if "start_b" not in d else list(d["start_b"]),
                    None if "end_b" not in d else list(d["end_b"]))


__all__ = [
    "EventKind", "Event", "GpuMemState", "ModelVersionState", "Batch", "SimResult", "EngineOptions",
    "Outcome", "wait_or_drop", "continuous_batch", "decode_step", "apply_model_update", "complete_sync",
    "Simulator", "run",
]
