"""Dyadic fairness metrics, the two edge-mass regularizers and the disparity bounds.

All pair statistics run over ordered pairs ``i != j`` unless a function says
otherwise. Regularizers accept either a plain matrix (evaluation only) or a
:class:`~fairgraph.tensor.Tensor` that sits on a training tape.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as tt
from .graph import (Graph, GroupEdgeMass, SensitivePartition, check_symmetric_prob,
                    group_edge_mass, offdiag)
from .tensor import Tensor


class UndefinedMetricError(ValueError):
    """A conditional mean has no pairs to average over."""


def _truth_matrix(truth, n: int) -> np.ndarray:
    if isinstance(truth, Graph):
        return truth.adjacency()
    a = np.asarray(truth, dtype=np.float64)
    if a.shape != (n, n):
        raise ValueError(f"truth adjacency must be {n}x{n}, got {a.shape}")
    return a


def _gap(prob: np.ndarray, same: np.ndarray, mask: np.ndarray) -> float:
    intra = mask & same
    inter = mask & ~same
    if not intra.any():
        raise UndefinedMetricError("no same-group pairs to condition on")
    if not inter.any():
        raise UndefinedMetricError("no cross-group pairs to condition on")
    return float(abs(prob[intra].mean() - prob[inter].mean()))


def delta_sp(prob, partition: SensitivePartition, include_self_pairs: bool = False) -> float:
    """Statistical parity gap between same-group and cross-group pair scores.

    ``include_self_pairs`` adds the ``i == j`` pairs to the same-group mean,
    which is the pair distribution under which the inner-product bound of
    :func:`prop1_bound` is derived. Scores need not be probabilities.
    """
    p = np.asarray(prob, dtype=np.float64)
    if partition.n_groups < 2:
        raise UndefinedMetricError("statistical parity needs at least two groups")
    mask = np.ones(p.shape, dtype=bool)
    if not include_self_pairs:
        np.fill_diagonal(mask, False)
    return _gap(p, partition.same_group(), mask)


def delta_eo(prob, truth, partition: SensitivePartition) -> float:
    """Equal-opportunity gap: the parity gap restricted to true edges."""
    p = np.asarray(prob, dtype=np.float64)
    a = _truth_matrix(truth, p.shape[0])
    mask = a > 0
    np.fill_diagonal(mask, False)
    try:
        return _gap(p, partition.same_group(), mask)
    except UndefinedMetricError as exc:
        raise UndefinedMetricError(f"equal opportunity undefined: {exc}") from None


# ------------------------------------------------------------- regularizers

def optimal_targets(total_mass: float, partition: SensitivePartition) -> tuple[np.ndarray, np.ndarray]:
    """Per-group intra/inter masses that zero both topological disparity factors."""
    n = partition.n_nodes
    sizes = partition.group_sizes.astype(np.float64)
    intra = total_mass * sizes ** 2 / n ** 2
    inter = total_mass * (n * sizes - sizes ** 2) / n ** 2
    return intra, inter


def _masked_prob(prob) -> Tensor:
    p = tt.tensor(prob)
    n = p.shape[0]
    if p.data.ndim != 2 or p.shape[1] != n:
        raise ValueError(f"edge probability matrix must be square, got {p.shape}")
    return tt.mul(p, 1.0 - np.eye(n))


def _block_masses(p: Tensor, onehot: np.ndarray) -> tuple[Tensor, Tensor]:
    k = onehot.shape[1]
    block = tt.matmul(tt.matmul(onehot.T, p), onehot)
    eye = np.eye(k)
    intra = tt.tsum(tt.mul(block, eye), axis=1)
    inter = tt.tsum(tt.mul(block, 1.0 - eye), axis=1)
    return intra, inter


def regularizer_full(prob, partition: SensitivePartition, total_mass: float | None = None) -> Tensor:
    """Sum over groups of |intra mass - target| + |inter mass - target|.

    The targets are computed from ``total_mass`` when given, otherwise from
    the total mass of ``prob`` itself (which then also receives gradient).
    """
    p = _masked_prob(prob)
    intra, inter = _block_masses(p, partition.onehot)
    n = partition.n_nodes
    sizes = partition.group_sizes.astype(np.float64)
    total = tt.tsum(p) if total_mass is None else tt.Tensor(float(total_mass))
    intra_target = tt.mul(total, sizes ** 2 / n ** 2)
    inter_target = tt.mul(total, (n * sizes - sizes ** 2) / n ** 2)
    return tt.add(tt.tsum(tt.tabs(tt.sub(intra, intra_target))),
                  tt.tsum(tt.tabs(tt.sub(inter, inter_target))))


def fairwire_block(block, batch_onehot: np.ndarray, group_sizes, n_nodes: int) -> Tensor:
    """Batch regularizer on an already-extracted batch block of edge probabilities.

    ``batch_onehot`` holds the group one-hot rows of the batch nodes in the
    block's order; ``group_sizes`` and ``n_nodes`` are the global counts.
    """
    p = _masked_prob(block)
    intra, inter = _block_masses(p, np.asarray(batch_onehot, dtype=np.float64))
    sizes = np.asarray(group_sizes, dtype=np.float64)
    ratio_gap = tt.sub(tt.mul(intra, 1.0 / sizes), tt.mul(inter, 1.0 / (n_nodes - sizes)))
    return tt.tsum(tt.tabs(ratio_gap))


def regularizer_fairwire(prob, partition: SensitivePartition, batch) -> Tensor:
    """Batch-wise intra/inter ratio regularizer over the node set ``batch``."""
    batch = np.asarray(batch, dtype=np.int64).reshape(-1)
    if batch.size < 2:
        raise ValueError("the batch needs at least two nodes")
    if np.unique(batch).size != batch.size:
        raise ValueError("batch nodes must be distinct")
    block = tt.take_block(tt.tensor(prob), batch)
    return fairwire_block(block, partition.onehot[batch], partition.group_sizes,
                          partition.n_nodes)


# ------------------------------------------------------------------- bounds

@dataclass(frozen=True)
class BoundParams:
    lipschitz: float = 1.0
    feature_bound: float = 1.0
    deviation: float = 0.0
    embed_norm: float = 1.0
    decoder_norm: float = 1.0
    hidden_dim: int = 1

    def __post_init__(self):
        if min(self.lipschitz, self.feature_bound, self.embed_norm, self.decoder_norm) <= 0:
            raise ValueError("L, delta, q and decoder norm must be positive")
        if self.deviation < 0 or self.hidden_dim < 1:
            raise ValueError("deviation must be >= 0 and hidden_dim >= 1")


def alpha_terms(mass: GroupEdgeMass, partition: SensitivePartition) -> tuple[np.ndarray, np.ndarray]:
    n = partition.n_nodes
    sizes = partition.group_sizes.astype(np.float64)
    intra, inter = np.asarray(mass.intra), np.asarray(mass.inter)
    a1 = np.abs(intra / sizes - inter / (n - sizes))
    a2 = np.abs((mass.total - intra - 2 * inter) / (n - sizes) - inter / sizes)
    return a1, a2


def theorem1_bound(mass: GroupEdgeMass, params: BoundParams, partition: SensitivePartition) -> np.ndarray:
    a1, a2 = alpha_terms(mass, partition)
    n = partition.n_nodes
    return params.lipschitz * (params.feature_bound * np.sqrt(params.hidden_dim) * (a1 + a2)
                               + 2.0 * np.sqrt(n) * params.deviation)


def prop1_bound(delta_k_max, params: BoundParams, partition: SensitivePartition) -> float:
    d = np.asarray(delta_k_max, dtype=np.float64)
    if (d < 0).any():
        raise ValueError("disparities must be nonnegative")
    w = partition.group_sizes / partition.n_nodes
    return float((w * params.embed_norm * params.decoder_norm * d).sum())


def corollary_bound(mass: GroupEdgeMass, params: BoundParams, partition: SensitivePartition) -> float:
    return prop1_bound(theorem1_bound(mass, params, partition), params, partition)


def representation_disparity(h, partition: SensitivePartition) -> np.ndarray:
    """Per group, 2-norm between the group's mean row and the mean row of all others."""
    h = np.asarray(h, dtype=np.float64)
    lab = partition.labels
    out = np.empty(partition.n_groups)
    for k in range(partition.n_groups):
        inside = lab == k
        if inside.all():
            out[k] = 0.0
            continue
        out[k] = np.linalg.norm(h[inside].mean(axis=0) - h[~inside].mean(axis=0))
    return out


def aggregate(prob, c) -> np.ndarray:
    """Expected aggregation ``z_i = sum_j P_ij c_j`` over off-diagonal entries."""
    return offdiag(np.asarray(prob, dtype=np.float64)) @ np.asarray(c, dtype=np.float64)


def aggregation_deviation(z) -> float:
    z = np.asarray(z, dtype=np.float64)
    return float(np.abs(z - z.mean(axis=0)).max())


def expected_representations(prob, c) -> np.ndarray:
    """One ReLU aggregation layer evaluated on the edge-probability matrix."""
    return np.maximum(aggregate(prob, c), 0.0)


# -------------------------------------------------------------- assumptions

@dataclass(frozen=True)
class AssumptionCheck:
    holds: bool
    worst_node: int
    margin: float


@dataclass(frozen=True)
class AssumptionFlags:
    a1: AssumptionCheck
    a2: AssumptionCheck
    a3: AssumptionCheck

    @property
    def all_hold(self) -> bool:
        return self.a1.holds and self.a2.holds and self.a3.holds


def check_assumptions(prob, partition: SensitivePartition, c_vectors=None,
                      feature_bound: float | None = None, a3_factor: float = 10.0) -> AssumptionFlags:
    """Evaluate the three topology/representation assumptions behind the bound.

    A1: every ``|c_i|_inf <= feature_bound`` (default: the observed max, so
    it holds by construction). A2: per node, intra-degree / |S_k| >=
    inter-degree / (N - |S_k|). A3: total mass >= ``a3_factor`` times the
    largest inter-degree. Margins are positive when the assumption holds.
    """
    p = offdiag(check_symmetric_prob(prob))
    n = p.shape[0]
    lab = partition.labels
    sizes = partition.group_sizes.astype(np.float64)
    same = partition.same_group()
    d_intra = (p * same).sum(axis=1)
    d_inter = (p * ~same).sum(axis=1)

    if c_vectors is None:
        a1 = AssumptionCheck(True, -1, float("inf"))
    else:
        norms = np.abs(np.asarray(c_vectors, dtype=np.float64)).max(axis=1)
        bound = norms.max() if feature_bound is None else feature_bound
        worst = int(norms.argmax())
        a1 = AssumptionCheck(bool(norms.max() <= bound), worst, float(bound - norms.max()))

    slack = d_intra / sizes[lab] - d_inter / (n - sizes[lab])
    worst = int(slack.argmin())
    a2 = AssumptionCheck(bool(slack[worst] >= 0), worst, float(slack[worst]))

    total = p.sum()
    worst = int(d_inter.argmax())
    margin = total - a3_factor * d_inter[worst]
    a3 = AssumptionCheck(bool(margin >= 0), worst, float(margin))
    return AssumptionFlags(a1, a2, a3)


def bound_params_from_model(gcn, graph: Graph, prob, train_edges=None) -> BoundParams:
    """Measure every bound constant from a GCN and the graph it runs on.

    ``c_i = W^T x_i``; ``feature_bound`` is max |c|, ``deviation`` is the
    largest inf-norm gap between an aggregated ``z_i`` (over ``prob``) and
    the node mean, ``embed_norm`` the largest embedding 2-norm. ReLU gives
    L = 1 and the inner-product decoder has spectral norm 1.
    """
    from .linkpred import encode

    c = graph.features @ gcn.weight.data
    z = aggregate(prob, c)
    h = encode(graph, gcn, train_edges).data
    return BoundParams(
        lipschitz=1.0,
        feature_bound=max(float(np.abs(c).max()), np.finfo(float).tiny),
        deviation=aggregation_deviation(z),
        embed_norm=max(float(np.linalg.norm(h, axis=1).max()), np.finfo(float).tiny),
        decoder_norm=1.0,
        hidden_dim=int(gcn.weight.shape[1]),
    )


# ------------------------------------------------------------------- report

@dataclass
class FairnessReport:
    delta_sp: float
    delta_eo: float
    alpha1: np.ndarray
    alpha2: np.ndarray
    theorem1_bounds: np.ndarray
    prop1_bound: float
    corollary_bound: float
    assumptions: AssumptionFlags | None = None
    extra: dict = field(default_factory=dict)

    def to_record(self) -> dict:
        rec: dict = {"delta_sp": self.delta_sp, "delta_eo": self.delta_eo}
        for name in ("alpha1", "alpha2", "theorem1_bounds"):
            for k, v in enumerate(np.asarray(getattr(self, name))):
                rec[f"{name}_{k}"] = float(v)
        rec["prop1_bound"] = self.prop1_bound
        rec["corollary_bound"] = self.corollary_bound
        if self.assumptions is not None:
            for key, chk in asdict(self.assumptions).items():
                rec[f"{key}_holds"] = int(chk["holds"])
                rec[f"{key}_worst_node"] = chk["worst_node"]
                rec[f"{key}_margin"] = chk["margin"]
        rec.update(self.extra)
        return rec

    def to_text(self) -> str:
        return "".join(f"{k} {format_value(v)}\n" for k, v in self.to_record().items())


def format_value(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def build_report(prob, truth, partition: SensitivePartition, topology, embeddings,
                 params: BoundParams, c_vectors=None, extra: dict | None = None) -> FairnessReport:
    """Assemble metrics on ``prob`` and bounds on ``topology`` into one report."""
    mass = group_edge_mass(topology, partition)
    a1, a2 = alpha_terms(mass, partition)
    t1 = theorem1_bound(mass, params, partition)
    dmax = representation_disparity(embeddings, partition)
    return FairnessReport(
        delta_sp=delta_sp(prob, partition),
        delta_eo=delta_eo(prob, truth, partition),
        alpha1=a1, alpha2=a2, theorem1_bounds=t1,
        prop1_bound=prop1_bound(dmax, params, partition),
        corollary_bound=prop1_bound(t1, params, partition),
        assumptions=check_assumptions(topology, partition, c_vectors),
        extra=dict(extra or {}),
    )
