"""Small builders shared by the test modules."""

from lemix.cluster import ClusterConfig, NodeConfig, StageProfile
from lemix.workload import Task

BIG = 1e15


def stage(eta_f=1e-4, eta_b=2e-4, eta_d=1e-5, capacity=BIG, weights=1.0, act=1.0, kv=1.0):
    return StageProfile(eta_f=eta_f, eta_b=eta_b, eta_d=eta_d, mem_capacity=capacity, mem_weights=weights,
                        mem_act_coeff=act, mem_kv_coeff=kv)


def node(node_id=0, stages=None, n_stages=2, **kw):
    stages = stages if stages is not None else [stage() for _ in range(n_stages)]
    return NodeConfig(node_id, stages, **kw)


def cluster(n_nodes=2, n_stages=2, stages=None, **kw):
    node_kw = {k: kw.pop(k) for k in ("kappa", "t_max", "delta_t", "offload_penalty") if k in kw}
    return ClusterConfig([node(i, stages, n_stages, **node_kw) for i in range(n_nodes)], **kw)


def inference(i, a, length=100, batch=1, out=0):
    return Task(i, "inference", a, length, batch, out)


def training(i, a, length=100, batch=1):
    return Task(i, "training", a, length, batch)
