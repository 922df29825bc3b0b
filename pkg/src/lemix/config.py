"""Run configuration files.

A run config is one TOML file with ``[cluster]``, ``[workload]``,
``[scheduler]`` and ``[engine]`` tables plus top-level ``seeds`` and
``output_dir``. ``include = ["other.toml"]`` merges other files underneath
the including one (the including file wins), which is how fitted stage
coefficients from ``lemix fit`` are pulled in.
"""

from __future__ import annotations

import copy
import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised only on 3.10
    import tomli as tomllib

from .allocator import SchedulerParams
from .cluster import ClusterConfig, preset_cluster, with_stage_coefficients
from .engine import EngineOptions
from .errors import ConfigError
from .workload import LengthDistribution, Task, WorkloadSpec, generate_poisson, load_trace

DEFAULTS = {
    "seeds": [0],
    "output_dir": "results",
    "cluster": {"preset": "gpt-2.5b", "nodes": 4, "stages": 2, "time_scale": 1.0},
    "workload": {"rate": 10.0, "train_rate": 0.5, "horizon": 10.0},
    "scheduler": {"policy": "lemix"},
    "engine": {},
}

_CLUSTER_KEYS = {
    "preset", "nodes", "stages", "time_scale", "kappa", "t_max", "delta_t", "offload_penalty",
    "sync_interval", "sync_base", "sync_per_node", "model_bytes", "sync_ref_bytes", "coefficients",
}
_WORKLOAD_KEYS = {"rate", "train_rate", "horizon", "task_count", "batch_size", "lengths", "outputs",
                  "trace", "rescale_window"}
_SCHEDULER_KEYS = {f.name for f in fields(SchedulerParams)}
_ENGINE_KEYS = {f.name for f in fields(EngineOptions)}
_LENGTH_KEYS = {f.name for f in fields(LengthDistribution)}


def deep_merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def read_toml(path, _seen=None) -> dict:
    """Parse ``path`` and resolve its ``include`` list recursively."""
    path = Path(path).resolve()
    seen = set() if _seen is None else _seen
    if path in seen:
        raise ConfigError("include", f"include cycle through {path}")
    seen = seen | {path}
    try:
        with path.open("rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError("config", f"file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError("config", f"{path}: {exc}") from None
    includes = data.pop("include", [])
    if isinstance(includes, str):
        includes = [includes]
    merged: dict = {}
    for inc in includes:
        merged = deep_merge(merged, read_toml(path.parent / inc, seen))
    base_dir = data.get("workload", {}).get("trace")
    if base_dir is not None and not Path(base_dir).is_absolute():
        data["workload"]["trace"] = str(path.parent / base_dir)
    return deep_merge(merged, data)


def _check_keys(table: dict, allowed: set, prefix: str) -> None:
    for k in table:
        if k not in allowed:
            raise ConfigError(f"{prefix}.{k}", f"unknown setting; expected one of {sorted(allowed)}")


@dataclass
class RunConfig:
    cluster: ClusterConfig
    scheduler: SchedulerParams
    engine: EngineOptions
    seeds: list
    output_dir: Path
    workload: Optional[WorkloadSpec] = None
    trace: Optional[str] = None
    rescale_window: Optional[float] = None
    raw: dict = field(default_factory=dict, repr=False)

    @property
    def config_hash(self) -> str:
        return config_hash(self.raw)

    def tasks(self, seed: int) -> list[Task]:
        if self.trace is not None:
            return load_trace(self.trace, self.rescale_window)
        return generate_poisson(replace(self.workload, seed=seed))

    def scheduler_for(self, policy=None) -> SchedulerParams:
        if policy is None:
            return replace(self.scheduler)
        return SchedulerParams(**{**asdict(self.scheduler), "policy": policy})


def config_hash(raw: dict) -> str:
    """Short digest of every setting that can change results."""
    raw = {k: v for k, v in raw.items() if k != "output_dir"}
    blob = json.dumps(raw, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _length_dist(table: dict, prefix: str) -> LengthDistribution:
    _check_keys(table, _LENGTH_KEYS, prefix)
    t = dict(table)
    if "samples" in t:
        t["samples"] = tuple(t["samples"])
    return LengthDistribution(**t)


def build_cluster(table: dict) -> ClusterConfig:
    _check_keys(table, _CLUSTER_KEYS, "cluster")
    t = dict(table)
    coeffs = t.pop("coefficients", None)
    preset = t.pop("preset", "gpt-2.5b")
    nodes = int(t.pop("nodes", 4))
    stages = int(t.pop("stages", 2))
    cluster = preset_cluster(preset, nodes, stages, **t)
    if coeffs:
        try:
            parsed = {int(s): (float(v[0]), float(v[1])) for s, v in coeffs.items()}
        except (TypeError, ValueError, IndexError):
            raise ConfigError("cluster.coefficients", 'expected entries like "0" = [eta_f, eta_b]') from None
        cluster = with_stage_coefficients(cluster, parsed)
    return cluster


def build(raw: dict) -> RunConfig:
    """Validate a merged config dict and build the typed RunConfig."""
    data = deep_merge(DEFAULTS, raw)
    _check_keys(data, {"seeds", "output_dir", "cluster", "workload", "scheduler", "engine"}, "config")
    cluster = build_cluster(data["cluster"])

    wl = dict(data["workload"])
    _check_keys(wl, _WORKLOAD_KEYS, "workload")
    trace = wl.pop("trace", None)
    rescale = wl.pop("rescale_window", None)
    spec = None
    if trace is None:
        if "task_count" in raw.get("workload", {}):
            wl.pop("horizon", None)
        lengths = _length_dist(wl.pop("lengths", {}), "workload.lengths")
        outputs = wl.pop("outputs", None)
        out_dist = _length_dist(outputs, "workload.outputs") if outputs else None
        spec = WorkloadSpec(length_dist=lengths, output_dist=out_dist, **{
            k: v for k, v in wl.items() if k in {"rate", "train_rate", "horizon", "task_count", "batch_size"}})
    elif not Path(trace).exists():
        raise ConfigError("workload.trace", f"trace file not found: {trace}")

    _check_keys(data["scheduler"], _SCHEDULER_KEYS, "scheduler")
    scheduler = SchedulerParams(**data["scheduler"])
    _check_keys(data["engine"], _ENGINE_KEYS, "engine")
    engine = EngineOptions(**data["engine"])

    seeds = data["seeds"]
    if isinstance(seeds, int):
        seeds = [seeds]
    if not seeds or not all(isinstance(s, int) for s in seeds):
        raise ConfigError("seeds", "expected a non-empty list of integers")
    if len(set(seeds)) != len(seeds):
        raise ConfigError("seeds", "seeds must be distinct")
    return RunConfig(cluster, scheduler, engine, list(seeds), Path(data["output_dir"]), spec, trace, rescale, data)


def load(path=None, overrides: Optional[dict] = None) -> RunConfig:
    """Read ``path`` (if any), apply ``overrides`` on top and build."""
    raw = read_toml(path) if path is not None else {}
    if overrides:
        raw = deep_merge(raw, overrides)
    return build(raw)


def coefficients_toml(coefficients: dict) -> str:
    """Render fitted ``{stage: (eta_f, eta_b)}`` as an includable TOML snippet."""
    lines = ["[cluster.coefficients]"]
    for s in sorted(coefficients):
        eta_f, eta_b = coefficients[s]
        lines.append(f'"{s}" = [{eta_f!r}, {eta_b!r}]')
    return "\n".join(lines) + "\n"


__all__ = ["RunConfig", "load", "build", "read_toml", "deep_merge", "config_hash", "coefficients_toml",
           "build_cluster", "DEFAULTS"]
