"""Per-node execution forecasting.

Each node keeps trace queues of the forward/backward paths it expects to run.
A candidate task's forward path is placed stage by stage after the node's
most recent task, slipping into idle gaps before pending backwards when it
fits and otherwise waiting for them. The result carries the idleness the
task adds (II) and its response time (R).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import _kernels
from .cluster import NodeConfig, backward_latency, forward_latency
from .errors import ContractViolation

FORWARD = "forward"
BACKWARD = "backward"


@dataclass
class ExecPath:
    start_f: list
    end_f: list
    start_b: Optional[list] = None
    end_b: Optional[list] = None

    @property
    def n_stages(self) -> int:
        return len(self.start_f)

    @property
    def has_backward(self) -> bool:
        return self.start_b is not None

    def copy(self) -> "ExecPath":
        return ExecPath(
            list(self.start_f), list(self.end_f),
            None if self.start_b is None else list(self.start_b),
            None if self.end_b is None else list(self.end_b),
        )

    def check(self, tol: float = 1e-9) -> None:
        """Raise ContractViolation if the path breaks ordering rules."""
        S = self.n_stages
        for s in range(S):
            if self.start_f[s] > self.end_f[s] + tol:
                raise ContractViolation(f"forward stage {s} ends before it starts")
            if s + 1 < S and self.end_f[s] > self.start_f[s + 1] + tol:
                raise ContractViolation(f"forward stage {s + 1} starts before stage {s} ends")
        if self.has_backward:
            for s in range(S):
                if self.start_b[s] > self.end_b[s] + tol:
                    raise ContractViolation(f"backward stage {s} ends before it starts")
                if self.start_b[s] < self.end_f[-1] - tol:
                    raise ContractViolation(f"backward stage {s} starts before the forward pass ends")
                if s + 1 < S and self.start_b[s] < self.end_b[s + 1] - tol:
                    raise ContractViolation(f"backward stage {s} starts before stage {s + 1} finishes")

    def to_dict(self) -> dict:
        d = {"start_f": self.start_f, "end_f": self.end_f}
        if self.has_backward:
            d["start_b"] = self.start_b
            d["end_b"] = self.end_b
        return d


@dataclass
class PlanResult:
    ii: float
    response_time: float
    path: ExecPath
    retire: tuple = ()  # training task ids the caller should drop from q_train


@dataclass
class _Entry:
    task: object
    path: ExecPath


class TraceQueues:
    """Forecast of one node's pending work.

    ``q_train`` holds ids of training tasks whose backward may still delay
    new forwards; ``q_inference`` holds inference tasks whose forward has not
    finished. ``last`` is the most recently enqueued entry and survives its
    task's completion, because later tasks are placed relative to it.
    """

    def __init__(self, n_stages: int):
        self.n_stages = n_stages
        self.q_train: list = []
        self.q_inference: list = []
        self.entries: dict = {}
        self.last: Optional[_Entry] = None
        self._done_backward_end = [-np.inf] * n_stages
        self.finished_backwards: list = []  # paths of completed training tasks still inside a gap
        self._arrays = None

    # -- read side -----------------------------------------------------
    def __contains__(self, task_id) -> bool:
        return task_id in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def last_task(self):
        return None if self.last is None else self.last.task

    def path_of(self, task_id) -> ExecPath:
        return self.entries[task_id].path

    def train_arrays(self):
        """``(bstart, bend, bdur, head0)``; finished backwards come first."""
        if self._arrays is None:
            paths = self.finished_backwards + [self.entries[tid].path for tid in self.q_train]
            K, S = len(paths), self.n_stages
            bstart = np.empty((K, S))
            bend = np.empty((K, S))
            for i, p in enumerate(paths):
                bstart[i] = p.start_b
                bend[i] = p.end_b
            self._arrays = (bstart, bend, bend - bstart, len(self.finished_backwards))
        return self._arrays

    def last_backward_end(self, stage: int) -> float:
        out = self._done_backward_end[stage]
        for e in self.entries.values():
            if e.path.has_backward and e.path.end_b[stage] > out:
                out = e.path.end_b[stage]
        return out

    def latest_forward_end(self) -> float:
        """Latest planned final-stage forward end over pending tasks."""
        out = -np.inf
        for e in self.entries.values():
            if e.path.end_f[-1] > out:
                out = e.path.end_f[-1]
        return out

    # -- write side ----------------------------------------------------
    def _touch(self):
        self._arrays = None

    def enqueue(self, task, path: ExecPath, retire=()) -> None:
        """Commit a planned task to this node."""
        for tid in retire:
            if tid in self.q_train:
                self.q_train.remove(tid)
        entry = _Entry(task, path)
        self.entries[task.id] = entry
        # a finished backward matters only while it can sit after the last forward
        self.finished_backwards = [
            p for p in self.finished_backwards
            if any(p.start_b[s] >= path.end_f[s] for s in range(self.n_stages))
        ]
        if task.is_training:
            self.q_train.append(task.id)
        else:
            self.q_inference.append(task.id)
        self.last = entry
        self._touch()

    def remove(self, task_id) -> None:
        entry = self.entries.pop(task_id)
        if entry.path.has_backward:
            for s in range(self.n_stages):
                if entry.path.end_b[s] > self._done_backward_end[s]:
                    self._done_backward_end[s] = entry.path.end_b[s]
            last_end = self.last.path.end_f if self.last is not None else None
            if last_end is not None and any(entry.path.start_b[s] >= last_end[s] for s in range(self.n_stages)):
                self.finished_backwards.append(entry.path)
        if task_id in self.q_train:
            self.q_train.remove(task_id)
        if task_id in self.q_inference:
            self.q_inference.remove(task_id)
        self._touch()

    def snapshot(self) -> dict:
        return {
            "q_train": list(self.q_train),
            "q_inference": list(self.q_inference),
            "last_task": None if self.last is None else self.last.task.id,
            "finished_backwards": [p.to_dict() for p in self.finished_backwards],
            "paths": {tid: e.path.to_dict() for tid, e in self.entries.items()},
        }


def _forward_durations(node: NodeConfig, task) -> np.ndarray:
    return np.array([forward_latency(p, task.batch_size, task.length) for p in node.stages])


def compute_idleness(q: TraceQueues, node: NodeConfig, task, now: Optional[float] = None) -> PlanResult:
    """Forecast ``task``'s forward path on ``node`` without mutating ``q``.

    Planning starts at ``max(task.arrival_time, now)``. With no earlier task
    on the node, each stage is compared against the task's own previous
    stage, so an untouched node reports zero idleness.
    """
    start0 = task.arrival_time if now is None else max(task.arrival_time, now)
    fwd = _forward_durations(node, task)
    has_prev = q.last is not None
    prev_end = np.asarray(q.last.path.end_f, dtype=np.float64) if has_prev else np.zeros(node.n_stages)
    bstart, bend, bdur, head0 = q.train_arrays()
    start_f, end_f, ii, retire = _kernels.plan_forward(
        float(start0), fwd, prev_end, has_prev, bstart, bend, bdur, head0
    )
    path = ExecPath(start_f.tolist(), end_f.tolist())
    retired = tuple(q.q_train[k - head0] for k in np.flatnonzero(retire))
    return PlanResult(float(ii), float(end_f[-1] - task.arrival_time), path, retired)


def plan_backward(task, path: ExecPath, node: NodeConfig, q: Optional[TraceQueues] = None) -> ExecPath:
    """Return ``path`` extended with a reverse-order backward chain.

    Each stage's backward waits for the next stage's backward and for any
    backward already planned on that stage in ``q``.
    """
    if not task.is_training:
        raise ContractViolation(f"task {task.id} is inference; it has no backward pass")
    S = node.n_stages
    start_b = [0.0] * S
    end_b = [0.0] * S
    ready = path.end_f[-1]
    for s in range(S - 1, -1, -1):
        busy_until = q.last_backward_end(s) if q is not None else -np.inf
        start_b[s] = max(ready, busy_until)
        end_b[s] = start_b[s] + backward_latency(node.stages[s], task.batch_size, task.length)
        ready = end_b[s]
    return ExecPath(list(path.start_f), list(path.end_f), start_b, end_b)


def calibrate(q: TraceQueues, task_id, stage: int, actual_start: float, actual_end: float, op: str = FORWARD) -> TraceQueues:
    """Overwrite one stage's planned times with what actually happened.

    Later stages of the same task keep their planned durations and are
    pushed back if the new times would violate stage ordering. A training
    task whose first-stage backward is calibrated, or an inference task whose
    last-stage forward is calibrated, leaves the queues.
    """
    try:
        entry = q.entries[task_id]
    except KeyError:
        raise KeyError(f"task {task_id} is not in this node's trace queues") from None
    p = entry.path
    S = p.n_stages
    if op == FORWARD:
        p.start_f[stage], p.end_f[stage] = actual_start, actual_end
        ready = actual_end
        for s in range(stage + 1, S):
            ready = _shift(p.start_f, p.end_f, s, ready)
        if p.has_backward:
            for s in range(S - 1, -1, -1):
                ready = _shift(p.start_b, p.end_b, s, ready)
        elif stage == S - 1:
            q.remove(task_id)
            return q
    elif op == BACKWARD:
        if not p.has_backward:
            raise ContractViolation(f"task {task_id} has no backward path")
        p.start_b[stage], p.end_b[stage] = actual_start, actual_end
        ready = actual_end
        for s in range(stage - 1, -1, -1):
            ready = _shift(p.start_b, p.end_b, s, ready)
        if stage == 0:
            q.remove(task_id)
            return q
    else:
        raise ContractViolation(f"unknown op {op!r}")
    q._touch()
    return q


def _shift(starts, ends, s, ready):
    if starts[s] < ready:
        dur = ends[s] - starts[s]
        starts[s] = ready
        ends[s] = ready + dur
    return ends[s]


def dump_plans(plans: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(plans, fh, indent=1, sort_keys=True)


__all__ = [
    "ExecPath", "PlanResult", "TraceQueues", "compute_idleness", "plan_backward", "calibrate",
    "FORWARD", "BACKWARD", "dump_plans",
]
