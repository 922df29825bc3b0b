"""Run-level metrics and cross-policy comparison tables."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .cluster import ClusterConfig, node_forward_latency
from .errors import ComparisonError


@dataclass
class MetricsReport:
    policy: str
    seed: int
    completed: int
    makespan: float
    throughput: float
    training_throughput: float
    inference_throughput: float
    ttft_mean: float
    ttft_p50: float
    ttft_p95: float
    tbt_mean: float
    tbt_p50: float
    tbt_p95: float
    slo_attainment: float
    slo_vacuous: bool
    active_nodes: int
    mean_utilization: float
    utilization: list
    e2e_latency: list
    mean_version_at_inference: float
    per_node_length_std: list
    mean_length_std: float
    decision_latency_mean: float
    decision_latency_p99: float
    offloads: int
    threshold_violations: int
    oom_events: int
    peak_mem_fraction: float
    mean_pred_ii: float
    workload_hash: str = ""
    config_hash: str = ""

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, path, extra: Optional[dict] = None) -> None:
        d = self.to_dict()
        if extra:
            d.update(extra)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(d, fh, indent=1, sort_keys=True)


def _pct(values, q):
    return float(np.percentile(values, q)) if len(values) else math.nan


def _mean(values):
    return float(np.mean(values)) if len(values) else math.nan


def slo_budget_for(record, cluster: ClusterConfig, slo_multiple: float) -> float:
    return slo_multiple * min(node_forward_latency(n, record["batch_size"], record["length"]) for n in cluster.nodes)


def summarize(result, cluster: ClusterConfig, slo_multiple: Optional[float] = None,
              decision_latency: Optional[float] = None) -> MetricsReport:
    """Reduce a SimResult to a MetricsReport.

    ``slo_multiple`` overrides the run's deadline multiple; ``decision_latency``
    is the simulated per-decision cost the run charged.
    """
    mult = result.slo_multiple if slo_multiple is None else slo_multiple
    recs = result.records
    done = [r for r in recs if r["completion"] is not None]
    arrivals = [r["arrival"] for r in recs]
    if done:
        makespan = max(r["completion"] for r in done) - min(arrivals)
    else:
        makespan = 0.0
    thr = len(done) / makespan if makespan > 0 else 0.0
    n_train = sum(1 for r in done if r["kind"] == "training")
    inf = [r for r in recs if r["kind"] == "inference"]
    ttft = [r["ttft"] for r in inf if r["ttft"] is not None]
    tbt = [r["tbt"] for r in inf if r["tbt"] is not None]
    if inf:
        met = sum(1 for r in inf if r["ttft"] is not None and r["ttft"] <= slo_budget_for(r, cluster, mult))
        slo, vacuous = met / len(inf), False
    else:
        slo, vacuous = 1.0, True

    horizon = result.horizon
    util = [g["busy_s"] / horizon if horizon > 0 else 0.0 for g in result.gpus]
    n_nodes = cluster.n_nodes
    active = sorted({r["node"] for r in recs if r["node"] is not None})
    e2e = []
    for n in range(n_nodes):
        spans = [iv for g in result.gpus if g["node"] == n for iv in g["intervals"]]
        node_recs = [r for r in recs if r["node"] == n]
        if not spans and not node_recs:
            e2e.append(0.0)
            continue
        first = min([r["arrival"] for r in node_recs] + [a for a, _ in spans])
        last = max([b for _, b in spans] + [r["completion"] for r in node_recs if r["completion"] is not None])
        e2e.append(last - first)
    lengths = [[r["length"] for r in recs if r["node"] == n] for n in range(n_nodes)]
    stds = [float(np.std(ls)) if len(ls) else 0.0 for ls in lengths]
    versions = [r["version"] for r in inf if r["version"] is not None]
    dl = 0.0 if decision_latency is None else decision_latency
    peak_frac = max((g["peak_mem_bytes"] / g["capacity"] for g in result.gpus if math.isfinite(g["capacity"])), default=0.0)
    preds = [r["pred_ii"] for r in recs if r["pred_ii"] is not None]
    return MetricsReport(
        policy=result.policy, seed=result.seed, completed=len(done), makespan=makespan, throughput=thr,
        training_throughput=n_train / makespan if makespan > 0 else 0.0,
        inference_throughput=(len(done) - n_train) / makespan if makespan > 0 else 0.0,
        ttft_mean=_mean(ttft), ttft_p50=_pct(ttft, 50), ttft_p95=_pct(ttft, 95),
        tbt_mean=_mean(tbt), tbt_p50=_pct(tbt, 50), tbt_p95=_pct(tbt, 95),
        slo_attainment=slo, slo_vacuous=vacuous, active_nodes=len(active),
        mean_utilization=_mean(util), utilization=util, e2e_latency=e2e,
        mean_version_at_inference=_mean(versions), per_node_length_std=stds,
        mean_length_std=_mean([s for s, ls in zip(stds, lengths) if ls]),
        decision_latency_mean=dl, decision_latency_p99=dl,
        offloads=sum(g["offloads"] for g in result.gpus),
        threshold_violations=sum(g["violations"] for g in result.gpus),
        oom_events=sum(g["ooms"] for g in result.gpus),
        peak_mem_fraction=peak_frac, mean_pred_ii=_mean(preds),
        workload_hash=result.workload_hash,
    )


SCALAR_METRICS = (
    "throughput", "training_throughput", "inference_throughput", "ttft_mean", "ttft_p95",
    "tbt_mean", "slo_attainment", "active_nodes", "mean_utilization", "mean_version_at_inference",
    "mean_length_std", "decision_latency_mean",
)


@dataclass
class ComparisonTable:
    baseline: str
    rows: list = field(default_factory=list)  # (policy, metric, value, baseline_value, ratio)

    def ratio(self, policy: str, metric: str) -> float:
        for p, m, _, _, r in self.rows:
            if p == policy and m == metric:
                return r
        raise KeyError((policy, metric))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["policy", "metric", "value", "baseline_value", "ratio"])
            w.writerows(self.rows)


def compare(reports: dict, baseline: str = "separate", metrics=SCALAR_METRICS) -> ComparisonTable:
    """Per-metric ratios of each policy against ``baseline``.

    Refuses to compare reports produced from different workloads.
    """
    if not reports:
        raise ComparisonError("nothing to compare")
    hashes = {r.workload_hash for r in reports.values()}
    if len(hashes) > 1:
        raise ComparisonError(f"reports come from different workloads: {sorted(hashes)}")
    if baseline not in reports:
        baseline = next(iter(reports))
    base = reports[baseline]
    table = ComparisonTable(baseline)
    for policy, rep in reports.items():
        for m in metrics:
            v, b = float(getattr(rep, m)), float(getattr(base, m))
            if b == 0:
                ratio = 1.0 if v == 0 else math.inf
            else:
                ratio = v / b
            table.rows.append((policy, m, v, b, ratio))
    return table


def mean_reports(reports) -> dict:
    """Seed-average of the scalar fields of several reports."""
    out = {}
    for m in SCALAR_METRICS + ("makespan", "completed", "threshold_violations", "offloads"):
        vals = [v for v in (float(getattr(r, m)) for r in reports) if not math.isnan(v)]
        out[m] = float(np.mean(vals)) if vals else math.nan
    return out


__all__ = ["MetricsReport", "ComparisonTable", "summarize", "compare", "mean_reports", "SCALAR_METRICS"]
