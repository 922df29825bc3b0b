"""Synthetic task streams and trace ingestion.

Arrivals follow a Poisson process: inter-arrival gaps are i.i.d. exponential
with mean ``1 / rate``. Each task is a training task with probability
``train_rate``; query lengths come from a :class:`LengthDistribution`.
"""

from __future__ import annotations

import csv
import enum
import hashlib
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import TYPE_CHECKING, Optional, Sequence

import numpy as np

from .errors import ConfigError, TraceParseError

if TYPE_CHECKING:
    from .planner import ExecPath


class TaskKind(str, enum.Enum):
    INFERENCE = "inference"
    TRAINING = "training"


@dataclass
class Task:
    id: int
    kind: TaskKind
    arrival_time: float
    length: int
    batch_size: int = 1
    output_length: int = 0
    slo_deadline: Optional[float] = None
    planned_path: Optional["ExecPath"] = field(default=None, compare=False, repr=False)
    actual_path: Optional["ExecPath"] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        self.kind = TaskKind(self.kind)
        if self.arrival_time < 0:
            raise ConfigError("arrival_time", f"must be >= 0, got {self.arrival_time}")
        if self.length < 1:
            raise ConfigError("length", f"must be >= 1, got {self.length}")
        if self.batch_size < 1:
            raise ConfigError("batch_size", f"must be >= 1, got {self.batch_size}")
        if self.output_length < 0:
            raise ConfigError("output_length", f"must be >= 0, got {self.output_length}")
        if self.kind is TaskKind.TRAINING and self.output_length:
            raise ConfigError("output_length", "training tasks do not generate tokens")

    @property
    def is_training(self) -> bool:
        return self.kind is TaskKind.TRAINING


_FAMILIES = ("lognormal", "normal", "empirical")


@dataclass(frozen=True)
class LengthDistribution:
    """Query-length distribution in tokens, clamped to ``[min_len, max_len]``."""

    family: str = "lognormal"
    mean: float = 256.0
    std: float = 128.0
    min_len: int = 16
    max_len: int = 2048
    samples: tuple = ()

    def __post_init__(self):
        if self.family not in _FAMILIES:
            raise ConfigError("length_dist.family", f"expected one of {_FAMILIES}, got {self.family!r}")
        if self.min_len < 1 or self.max_len < self.min_len:
            raise ConfigError("length_dist.min_len", "need 1 <= min_len <= max_len")
        if self.std < 0:
            raise ConfigError("length_dist.std", "must be >= 0")
        if self.family == "empirical":
            if not self.samples:
                raise ConfigError("length_dist.samples", "empirical family needs samples")
        elif self.mean <= 0:
            raise ConfigError("length_dist.mean", "must be > 0")

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.family == "empirical":
            raw = rng.choice(np.asarray(self.samples, dtype=np.float64), size=n, replace=True)
        elif self.std == 0:
            raw = np.full(n, self.mean)
        elif self.family == "lognormal":
            sigma2 = math.log1p((self.std / self.mean) ** 2)
            mu = math.log(self.mean) - sigma2 / 2
            raw = rng.lognormal(mu, math.sqrt(sigma2), size=n)
        else:
            raw = rng.normal(self.mean, self.std, size=n)
        return np.clip(np.rint(raw), self.min_len, self.max_len).astype(np.int64)


@dataclass(frozen=True)
class WorkloadSpec:
    rate: float
    train_rate: float
    horizon: Optional[float] = None
    task_count: Optional[int] = None
    length_dist: LengthDistribution = LengthDistribution()
    seed: int = 0
    batch_size: int = 1
    output_dist: Optional[LengthDistribution] = None

    def __post_init__(self):
        if not self.rate > 0:
            raise ConfigError("rate", f"must be > 0, got {self.rate}")
        if not 0 <= self.train_rate <= 1:
            raise ConfigError("train_rate", f"must be in [0, 1], got {self.train_rate}")
        if (self.horizon is None) == (self.task_count is None):
            raise ConfigError("horizon", "set exactly one of horizon / task_count")
        if self.horizon is not None and self.horizon <= 0:
            raise ConfigError("horizon", "must be > 0")
        if self.task_count is not None and self.task_count < 0:
            raise ConfigError("task_count", "must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size", "must be >= 1")


def generate_poisson(spec: WorkloadSpec) -> list[Task]:
    """Sample a task stream; identical specs give identical lists."""
    gap_rng, kind_rng, len_rng, out_rng = (
        np.random.default_rng(s) for s in np.random.SeedSequence(spec.seed).spawn(4)
    )
    scale = 1.0 / spec.rate
    if spec.task_count is not None:
        arrivals = np.cumsum(gap_rng.exponential(scale, size=spec.task_count))
    else:
        chunks, t = [], 0.0
        chunk = max(16, int(spec.rate * spec.horizon * 1.2) + 16)
        while t <= spec.horizon:
            gaps = gap_rng.exponential(scale, size=chunk)
            part = t + np.cumsum(gaps)
            chunks.append(part)
            t = float(part[-1])
        arrivals = np.concatenate(chunks)
        arrivals = arrivals[arrivals <= spec.horizon]
    n = len(arrivals)
    training = kind_rng.random(n) < spec.train_rate
    lengths = spec.length_dist.sample(len_rng, n)
    if spec.output_dist is not None:
        outputs = spec.output_dist.sample(out_rng, n)
    else:
        outputs = np.zeros(n, dtype=np.int64)

    tasks = []
    for i in range(n):
        train = bool(training[i])
        tasks.append(
            Task(
                id=i,
                kind=TaskKind.TRAINING if train else TaskKind.INFERENCE,
                arrival_time=float(arrivals[i]),
                length=int(lengths[i]),
                batch_size=spec.batch_size,
                output_length=0 if train else int(outputs[i]),
            )
        )
    return tasks


TRACE_HEADER = ("arrival_time", "kind", "length", "batch_size", "output_length")


def load_trace(path, rescale_window: Optional[float] = None) -> list[Task]:
    """Read a CSV trace (header ``arrival_time,kind,length,batch_size,output_length``).

    Lines starting with ``#`` are comments. With ``rescale_window`` the
    timestamps are mapped affinely onto ``[0, rescale_window]``.
    """
    path = Path(path)
    rows = []
    with path.open(newline="", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            fields = next(csv.reader([stripped]))
            fields = [f.strip() for f in fields]
            if tuple(f.lower() for f in fields) == TRACE_HEADER:
                continue
            if len(fields) != len(TRACE_HEADER):
                raise TraceParseError(path, lineno, f"expected {len(TRACE_HEADER)} fields, got {len(fields)}")
            try:
                arrival = float(fields[0])
                kind = TaskKind(fields[1].lower())
                length, batch, out = int(fields[2]), int(fields[3]), int(fields[4])
            except ValueError as exc:
                raise TraceParseError(path, lineno, str(exc)) from None
            if not math.isfinite(arrival) or arrival < 0:
                raise TraceParseError(path, lineno, f"bad arrival_time {fields[0]!r}")
            rows.append((arrival, kind, length, batch, out, lineno))

    rows.sort(key=lambda r: r[0])
    if rows and rescale_window is not None:
        if rescale_window <= 0:
            raise ConfigError("rescale_window", "must be > 0")
        t0, t1 = rows[0][0], rows[-1][0]
        span = t1 - t0
        factor = rescale_window / span if span > 0 else 0.0
        rows = [((r[0] - t0) * factor,) + r[1:] for r in rows]

    tasks = []
    for i, (arrival, kind, length, batch, out, lineno) in enumerate(rows):
        try:
            tasks.append(Task(i, kind, arrival, length, batch, out))
        except ConfigError as exc:
            raise TraceParseError(path, lineno, str(exc)) from None
    return tasks


def write_trace(tasks: Sequence[Task], path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_HEADER)
        for t in tasks:
            writer.writerow([repr(t.arrival_time), t.kind.value, t.length, t.batch_size, t.output_length])


def workload_hash(tasks: Sequence[Task]) -> str:
    h = hashlib.sha256()
    for t in tasks:
        h.update(f"{t.id},{t.kind.value},{t.arrival_time!r},{t.length},{t.batch_size},{t.output_length};".encode())
    return h.hexdigest()[:16]


def _subset_with_std(samples: np.ndarray, target: float) -> np.ndarray:
    # Candidates: the k samples nearest the mean (std grows with k) and the k
    # farthest from it (std shrinks toward the full-set value as k grows).
    order = np.argsort(np.abs(samples - samples.mean()), kind="stable")
    ranked = samples[order]
    k = np.arange(1, len(ranked) + 1)

    def stds(values):
        s1, s2 = np.cumsum(values), np.cumsum(values * values)
        return np.sqrt(np.maximum(s2 / k - (s1 / k) ** 2, 0.0))

    head_err = np.abs(stds(ranked) - target)
    tail_err = np.abs(stds(ranked[::-1]) - target)
    if head_err.min() <= tail_err.min():
        return ranked[: int(head_err.argmin()) + 1]
    return ranked[::-1][: int(tail_err.argmin()) + 1]


def make_heterogeneity_sweep(base: LengthDistribution, variance_levels: Sequence[float]) -> list[LengthDistribution]:
    """One distribution per level: same mean as ``base``, std set to the level."""
    out = []
    for level in variance_levels:
        if level < 0:
            raise ConfigError("variance_levels", f"levels must be >= 0, got {level}")
        if base.family != "empirical":
            out.append(replace(base, std=float(level)))
            continue
        samples = np.asarray(base.samples, dtype=np.float64)
        subset = _subset_with_std(samples, float(level))
        if level > 0 and abs(subset.std() - level) > 0.05 * level:
            raise ConfigError(
                "variance_levels", f"no subset of the empirical samples has std within 5% of {level}"
            )
        out.append(
            replace(base, mean=float(samples.mean()), std=float(level), samples=tuple(int(x) for x in subset))
        )
    return out
