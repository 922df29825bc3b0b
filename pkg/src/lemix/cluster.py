"""Simulated hardware description and offline cost-model fitting.

Stage-level execution time is quadratic in query length and linear in batch
size: ``forward = eta_f * C * l**2`` and ``backward = eta_b * C * l**2``.
A decode step over a cached context costs ``eta_d * C * context``.
"""

from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Optional

from .errors import ConfigError, ProfilingIncompleteError, TraceParseError

GB = 1e9

# Reference shape at which preset latencies are matched.
REF_BATCH = 1
REF_LENGTH = 500


@dataclass(frozen=True)
class StageProfile:
    eta_f: float
    eta_b: float
    eta_d: float
    mem_capacity: float
    mem_weights: float
    mem_act_coeff: float
    mem_kv_coeff: float

    def __post_init__(self):
        for name in ("eta_f", "eta_b", "eta_d", "mem_capacity", "mem_weights", "mem_act_coeff", "mem_kv_coeff"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"stage.{name}", f"must be > 0, got {getattr(self, name)}")
        if self.mem_weights >= self.mem_capacity:
            raise ConfigError("stage.mem_weights", "static weights must be smaller than mem_capacity")


@dataclass(frozen=True)
class NodeConfig:
    id: int
    stages: tuple
    kappa: float = 0.9
    t_max: float = 1.0
    delta_t: float = 0.01
    offload_penalty: float = 0.05  # seconds per GB moved

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        if not self.stages:
            raise ConfigError("node.stages", "need at least one stage")
        if not 0 < self.kappa <= 1:
            raise ConfigError("node.kappa", f"must be in (0, 1], got {self.kappa}")
        for s, st in enumerate(self.stages):
            if self.kappa * st.mem_capacity <= st.mem_weights:
                raise ConfigError("node.kappa", f"threshold on stage {s} does not cover static weights")
        if not 0 < self.delta_t < self.t_max:
            raise ConfigError("node.delta_t", "need 0 < delta_t < t_max")
        if self.offload_penalty < 0:
            raise ConfigError("node.offload_penalty", "must be >= 0")

    @property
    def n_stages(self) -> int:
        return len(self.stages)


@dataclass(frozen=True)
class ClusterConfig:
    nodes: tuple
    sync_interval: int = 100
    sync_base: float = 0.5
    sync_per_node: float = 0.25
    model_bytes: float = GB
    sync_ref_bytes: float = GB
    name: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        if not self.nodes:
            raise ConfigError("cluster.nodes", "need at least one node")
        if self.sync_interval < 1:
            raise ConfigError("cluster.sync_interval", "must be >= 1")
        if self.sync_base < 0 or self.sync_per_node < 0:
            raise ConfigError("cluster.sync_base", "sync latency terms must be >= 0")
        if self.model_bytes <= 0 or self.sync_ref_bytes <= 0:
            raise ConfigError("cluster.model_bytes", "must be > 0")

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    def sync_latency(self) -> float:
        return sync_latency(self.model_bytes, self.n_nodes, self.sync_base, self.sync_per_node, self.sync_ref_bytes)


@dataclass(frozen=True)
class ProfilingObservation:
    stage: int
    op: str  # "forward" | "backward"
    batch: int
    length: int
    latency: float

    def __post_init__(self):
        if self.op not in ("forward", "backward"):
            raise ConfigError("op", f"expected forward/backward, got {self.op!r}")
        if not self.latency > 0:
            raise ConfigError("latency", "must be > 0")
        if self.batch < 1 or self.length < 1:
            raise ConfigError("batch", "batch and length must be >= 1")


def forward_latency(p: StageProfile, batch: float, length: float) -> float:
    return p.eta_f * batch * length * length


def backward_latency(p: StageProfile, batch: float, length: float) -> float:
    return p.eta_b * batch * length * length


def decode_latency(p: StageProfile, batch: float, context: float) -> float:
    return p.eta_d * batch * context


def node_forward_latency(node: NodeConfig, batch: float, length: float) -> float:
    """Full pipeline forward on one node, no contention."""
    return sum(forward_latency(p, batch, length) for p in node.stages)


def memory_threshold(node: NodeConfig, stage: int) -> float:
    return node.kappa * node.stages[stage].mem_capacity


def sync_latency(model_bytes: float, n_nodes: int, base: float, per_node: float, ref_bytes: float = GB) -> float:
    """Checkpoint broadcast time; affine in node count, linear in model size."""
    if n_nodes < 2:
        return 0.0
    return (base + per_node * (n_nodes - 1)) * (model_bytes / ref_bytes)


def fit_coefficients(observations: Iterable[ProfilingObservation], stages: Optional[Iterable[int]] = None):
    """Average ``latency / (C * l**2)`` per (stage, op).

    Returns ``{stage: (eta_f, eta_b)}``. Raises
    :class:`ProfilingIncompleteError` listing every missing (stage, op).
    """
    ratios = defaultdict(list)
    for ob in observations:
        ratios[(ob.stage, ob.op)].append(ob.latency / (ob.batch * ob.length * ob.length))
    wanted = set(stages) if stages is not None else {s for s, _ in ratios}
    gaps = [(s, op) for s in sorted(wanted) for op in ("forward", "backward") if (s, op) not in ratios]
    if gaps or not wanted:
        raise ProfilingIncompleteError(gaps or [(0, "forward"), (0, "backward")])
    return {
        s: (sum(ratios[(s, "forward")]) / len(ratios[(s, "forward")]),
            sum(ratios[(s, "backward")]) / len(ratios[(s, "backward")]))
        for s in sorted(wanted)
    }


def read_observations(path) -> list[ProfilingObservation]:
    """Parse a ``stage,op,batch,length,latency`` CSV."""
    path = Path(path)
    out = []
    with path.open(newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or row[0].strip().startswith("#"):
                continue
            if row[0].strip().lower() == "stage":
                continue
            if len(row) != 5:
                raise TraceParseError(path, lineno, f"expected 5 fields, got {len(row)}")
            try:
                out.append(ProfilingObservation(
                    int(row[0]), row[1].strip().lower(), int(row[2]), int(row[3]), float(row[4])))
            except ValueError as exc:
                raise TraceParseError(path, lineno, str(exc)) from None
    return out


@dataclass(frozen=True)
class ModelPreset:
    name: str
    size_bytes: float
    layers: int
    hidden: int
    forward_s: float
    backward_s: float
    gpu_mem_bytes: float


# Forward/backward latencies are matched at the reference shape (C=1, l=500).
PRESETS = {
    p.name: p
    for p in (
        ModelPreset("gpt-400m", 1.0 * GB, 12, 768, 0.03, 0.04, 48 * GB),
        ModelPreset("gpt-1.4b", 2.3 * GB, 24, 1024, 0.08, 0.09, 48 * GB),
        ModelPreset("gpt-2.5b", 4.5 * GB, 36, 1280, 0.12, 0.14, 48 * GB),
        ModelPreset("llama-8b", 13 * GB, 32, 4096, 0.11, 0.15, 80 * GB),
        ModelPreset("llama-13b", 26 * GB, 40, 5120, 0.24, 0.36, 80 * GB),
        ModelPreset("llama-70b", 132 * GB, 80, 8192, 0.73, 1.05, 80 * GB),
    )
}


def preset_stage(preset: ModelPreset, n_stages: int, time_scale: float = 1.0) -> StageProfile:
    """Per-stage profile; ``time_scale`` multiplies every latency coefficient."""
    ref = REF_BATCH * REF_LENGTH ** 2
    layers = preset.layers / n_stages
    return StageProfile(
        eta_f=time_scale * preset.forward_s / ref,
        eta_b=time_scale * preset.backward_s / ref,
        # one decode step at the reference context costs 1/20 of a prefill
        eta_d=time_scale * preset.forward_s / (20 * REF_LENGTH),
        mem_capacity=preset.gpu_mem_bytes,
        mem_weights=preset.size_bytes / n_stages,
        # fp16 activations (~34 bytes per hidden unit per layer) and K+V cache
        mem_act_coeff=34.0 * preset.hidden * layers,
        mem_kv_coeff=4.0 * preset.hidden * layers,
    )


def preset_cluster(
    model: str = "gpt-2.5b",
    n_nodes: int = 4,
    n_stages: int = 2,
    kappa: float = 0.9,
    t_max: Optional[float] = None,
    delta_t: Optional[float] = None,
    offload_penalty: float = 0.05,
    time_scale: float = 1.0,
    **cluster_kw,
) -> ClusterConfig:
    try:
        preset = PRESETS[model.lower()]
    except KeyError:
        raise ConfigError("cluster.preset", f"unknown model {model!r}; choose from {sorted(PRESETS)}") from None
    if n_nodes < 1:
        raise ConfigError("cluster.nodes", "must be >= 1")
    if n_stages < 1:
        raise ConfigError("cluster.stages", "must be >= 1")
    if not time_scale > 0:
        raise ConfigError("cluster.time_scale", "must be > 0")
    stage = preset_stage(preset, n_stages, time_scale)
    ref_fwd = forward_latency(stage, REF_BATCH, REF_LENGTH)
    t_max = 10 * ref_fwd if t_max is None else t_max
    delta_t = 0.1 * ref_fwd if delta_t is None else delta_t
    nodes = [
        NodeConfig(i, (stage,) * n_stages, kappa=kappa, t_max=t_max, delta_t=delta_t,
                   offload_penalty=offload_penalty)
        for i in range(n_nodes)
    ]
    cluster_kw.setdefault("model_bytes", preset.size_bytes)
    cluster_kw.setdefault("name", preset.name)
    return ClusterConfig(nodes=tuple(nodes), **cluster_kw)


def with_stage_coefficients(cluster: ClusterConfig, coefficients: dict) -> ClusterConfig:
    """Return a copy whose stage ``s`` uses fitted ``(eta_f, eta_b)``."""
    nodes = []
    for node in cluster.nodes:
        stages = list(node.stages)
        for s, (eta_f, eta_b) in coefficients.items():
            if not 0 <= s < len(stages):
                raise ConfigError("cluster.stages", f"coefficient for unknown stage {s}")
            stages[s] = replace(stages[s], eta_f=eta_f, eta_b=eta_b)
        nodes.append(replace(node, stages=tuple(stages)))
    return replace(cluster, nodes=tuple(nodes))


__all__ = [
    "GB", "StageProfile", "NodeConfig", "ClusterConfig", "ProfilingObservation", "PRESETS",
    "forward_latency", "backward_latency", "decode_latency", "node_forward_latency",
    "memory_threshold", "sync_latency", "fit_coefficients", "read_observations",
    "preset_cluster", "preset_stage", "with_stage_coefficients",
]
