"""One-layer GCN encoder with an inner-product decoder for link prediction."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import rankdata

from . import tensor as tt
from .fairness import (FairnessReport, bound_params_from_model, build_report, delta_sp,
                       fairwire_block)
from .graph import EdgeSplit, Graph, SensitivePartition
from .tensor import Tensor
from .weights import load_weights, save_weights

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, detail: str = ""):
        super().__init__(f"non-finite loss at epoch {epoch}{': ' + detail if detail else ''}")
        self.epoch = epoch


@dataclass
class GcnParams:
    weight: Tensor
    init: str = "glorot"
    seed: int = 0
    self_loops: bool = True
    activation: str = "identity"

    def __post_init__(self):
        if self.activation not in ("identity", "relu"):
            raise ValueError(f"unknown output activation {self.activation!r}")
        if self.weight.data.ndim != 2 or self.weight.shape[1] < 1:
            raise ValueError("GCN weight must be a F x d matrix with d >= 1")
        if not np.isfinite(self.weight.data).all():
            raise ValueError("GCN weight has non-finite entries")

    def copy(self) -> "GcnParams":
        return replace(self, weight=Tensor(self.weight.data.copy(), requires_grad=True))

    def save(self, path) -> None:
        save_weights(path, "gcn", {"weight": self.weight.data},
                     {"init": self.init, "seed": self.seed, "self_loops": int(self.self_loops),
                      "activation": self.activation})

    @classmethod
    def load(cls, path) -> "GcnParams":
        kind, arrays, meta = load_weights(path)
        if kind != "gcn":
            raise ValueError(f"{path} holds a {kind!r} model, not a GCN")
        return cls(Tensor(arrays["weight"], requires_grad=True), meta.get("init", "glorot"),
                   int(meta.get("seed", 0)), bool(int(meta.get("self_loops", 1))),
                   meta.get("activation", "identity"))


def init_gcn(in_dim: int, hidden: int, seed: int = 0, self_loops: bool = True,
             activation: str = "identity") -> GcnParams:
    rng = np.random.default_rng(seed)
    return GcnParams(Tensor(tt.glorot(rng, in_dim, hidden), requires_grad=True), "glorot", seed,
                     self_loops, activation)


@dataclass
class TrainConfig:
    lam: float = 0.0
    learning_rate: float = 1e-2
    epochs: int = 300
    batch_size: int = 64
    negative_ratio: float = 1.0
    seed: int = 0
    hidden: int = 32
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    self_loops: bool = True
    activation: str = "identity"

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if self.epochs < 1 or self.learning_rate <= 0 or self.negative_ratio <= 0:
            raise ValueError("epochs, learning rate and negative ratio must be positive")
        if self.batch_size < 2:
            raise ValueError("batch size must be at least 2")
        if self.activation not in ("identity", "relu"):
            raise ValueError(f"unknown output activation {self.activation!r}")


def normalized_adjacency(n: int, edges, self_loops: bool = True) -> np.ndarray:
    """``D^-1/2 (A [+ I]) D^-1/2``; rows of isolated nodes stay zero without self-loops."""
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    a = np.zeros((n, n))
    a[e[:, 0], e[:, 1]] = 1.0
    a[e[:, 1], e[:, 0]] = 1.0
    if self_loops:
        a += np.eye(n)
    deg = a.sum(axis=1)
    inv = np.divide(1.0, np.sqrt(deg), out=np.zeros_like(deg), where=deg > 0)
    return a * inv[:, None] * inv[None, :]


def encode(graph: Graph, params: GcnParams, train_edges=None, propagated=None) -> Tensor:
    """Node embeddings ``sigma(A_hat X W)`` over the training adjacency.

    ``sigma`` is the identity by default (a ReLU output cannot score any pair
    below 0.5 under the inner-product decoder) or ReLU. ``propagated`` may
    carry a precomputed ``A_hat X`` to skip the product.
    """
    if propagated is None:
        if graph.n_features != params.weight.shape[0]:
            raise ValueError(f"features have {graph.n_features} columns, weight expects {params.weight.shape[0]}")
        edges = graph.edges if train_edges is None else train_edges
        propagated = normalized_adjacency(graph.n_nodes, edges, params.self_loops) @ graph.features
    z = tt.matmul(propagated, params.weight)
    return tt.relu(z) if params.activation == "relu" else z


def decode(h_i, h_j) -> float:
    h_i, h_j = np.asarray(h_i, dtype=np.float64), np.asarray(h_j, dtype=np.float64)
    if h_i.shape != h_j.shape:
        raise ValueError("embedding dimensions differ")
    return float(tt._sigmoid(np.atleast_1d(h_i @ h_j))[0])


def score_matrix(h) -> np.ndarray:
    """Raw inner-product scores for every node pair."""
    h = h.data if isinstance(h, Tensor) else np.asarray(h, dtype=np.float64)
    return h @ h.T


def prob_matrix(h) -> np.ndarray:
    return tt._sigmoid(score_matrix(h))


def pair_scores(h: np.ndarray, pairs) -> np.ndarray:
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    return np.einsum("ij,ij->i", h[pairs[:, 0]], h[pairs[:, 1]])


def auc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative (ties count half)."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both positive and negative labels")
    ranks = rankdata(s)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def _split_auc(h: np.ndarray, pos, neg) -> float:
    scores = np.concatenate([pair_scores(h, pos), pair_scores(h, neg)])
    labels = np.concatenate([np.ones(len(pos)), np.zeros(len(neg))])
    return auc(scores, labels)


def _sample_batch_negatives(batch: np.ndarray, adj: np.ndarray, count: int,
                            rng: np.random.Generator) -> np.ndarray:
    """Uniform non-edge pairs (by local index) inside the batch."""
    b = batch.size
    free = ~(adj[np.ix_(batch, batch)] > 0)
    np.fill_diagonal(free, False)
    cand = np.flatnonzero(free.reshape(-1))
    if cand.size == 0 or count == 0:
        return np.zeros((0, 2), dtype=np.int64)
    pick = rng.choice(cand, size=min(count, cand.size), replace=False)
    return np.stack([pick // b, pick % b], axis=1)


def lp_loss(params: GcnParams, propagated: np.ndarray, batch: np.ndarray, pos_local, neg_local,
            onehot: np.ndarray, group_sizes, n_nodes: int, lam: float):
    """Mean BCE over sampled batch pairs plus ``lam`` times the batch regularizer.

    Returns ``(loss, ce, reg)``; ``reg`` is evaluated but kept off the tape
    when ``lam == 0``.
    """
    h = encode(None, params, propagated=propagated)
    hb = tt.take_rows(h, batch)
    pairs = np.concatenate([pos_local, neg_local]).astype(np.int64)
    labels = np.concatenate([np.ones(len(pos_local)), np.zeros(len(neg_local))])
    logits = tt.tsum(tt.mul(tt.take_rows(hb, pairs[:, 0]), tt.take_rows(hb, pairs[:, 1])), axis=1)
    ce = tt.bce_with_logits(logits, labels)
    if lam > 0:
        block = tt.sigmoid(tt.matmul(hb, tt.transpose(hb)))
        reg = fairwire_block(block, onehot[batch], group_sizes, n_nodes)
        loss = tt.add(ce, tt.mul(reg, lam))
    else:
        hbd = hb.data
        reg = fairwire_block(tt._sigmoid(hbd @ hbd.T), onehot[batch], group_sizes, n_nodes)
        loss = ce
    return loss, ce, reg


@dataclass
class TrainResult:
    params: GcnParams
    history: list = field(default_factory=list)
    best_epoch: int = 0


def train_lp(graph: Graph, split: EdgeSplit, config: TrainConfig,
             labels_for_reg=None) -> tuple[GcnParams, list]:
    """Train on ``split.train_pos`` and keep the epoch with the best validation AUC.

    ``labels_for_reg`` overrides the group labels used by the regularizer and
    the validation parity (defaults to ``graph.sensitive``).
    """
    result = train_lp_full(graph, split, config, labels_for_reg)
    return result.params, result.history


def train_lp_full(graph: Graph, split: EdgeSplit, config: TrainConfig, labels_for_reg=None) -> TrainResult:
    rng = np.random.default_rng(config.seed)
    n = graph.n_nodes
    params = init_gcn(graph.n_features, config.hidden, config.seed, config.self_loops,
                      config.activation)
    adj = graph.adjacency(split.train_pos)
    propagated = normalized_adjacency(n, split.train_pos, config.self_loops) @ graph.features
    labels = graph.sensitive if labels_for_reg is None else np.asarray(labels_for_reg)
    part = SensitivePartition.from_labels(labels, graph.n_groups)
    opt = tt.Adam([params.weight], config.learning_rate, (config.beta1, config.beta2), config.eps)
    b = min(config.batch_size, n)

    history, best_auc, best_epoch, best_w = [], -np.inf, 0, params.weight.data.copy()
    for epoch in range(1, config.epochs + 1):
        batch = np.arange(n) if b == n else np.sort(rng.choice(n, size=b, replace=False))
        local = np.full(n, -1)
        local[batch] = np.arange(b)
        tp = split.train_pos
        inside = (local[tp[:, 0]] >= 0) & (local[tp[:, 1]] >= 0)
        pos_local = local[tp[inside]]
        neg_local = _sample_batch_negatives(batch, adj, int(round(config.negative_ratio * len(pos_local))), rng)
        if len(pos_local) == 0:
            continue
        opt.zero_grad()
        loss, ce, reg = lp_loss(params, propagated, batch, pos_local, neg_local, part.onehot,
                                part.group_sizes, n, config.lam)
        if not np.isfinite(loss.item()):
            raise TrainingDivergedError(epoch, f"ce={ce.item()}, reg={reg.item()}")
        tt.backward(loss)
        opt.step()

        h = encode(None, params, propagated=propagated).data
        val_auc = _split_auc(h, split.val_pos, split.val_neg)
        val_dsp = delta_sp(prob_matrix(h), part)
        history.append({"epoch": epoch, "loss": loss.item(), "ce": ce.item(), "reg": reg.item(),
                        "val_auc": val_auc, "val_dsp": val_dsp})
        if val_auc > best_auc:
            best_auc, best_epoch, best_w = val_auc, epoch, params.weight.data.copy()
    params.weight = Tensor(best_w, requires_grad=True)
    return TrainResult(params, history, best_epoch)


def history_csv(history: list) -> str:
    cols = ["epoch", "loss", "ce", "reg", "val_auc", "val_dsp"]
    rows = [",".join(cols)]
    for h in history:
        rows.append(",".join(str(h[c]) if c == "epoch" else repr(float(h[c])) for c in cols))
    return "\n".join(rows) + "\n"


def evaluate_lp(params: GcnParams, graph: Graph, split: EdgeSplit,
                embed_from: tuple[Graph, np.ndarray] | None = None) -> FairnessReport:
    """Test AUC and fairness of a trained model on ``graph`` with its split.

    Parity is measured over all node pairs of the decoded probability matrix;
    equal opportunity over the true test edges. The report's ``extra`` holds
    ``auc`` and the parity restricted to the test pairs.

    ``embed_from = (other_graph, other_train_edges)`` computes the embeddings
    on an index-aligned graph of the same size instead (the bounds then
    describe that graph), while labels and test pairs still come from
    ``graph`` and ``split``.
    """
    source, source_edges = (graph, split.train_pos) if embed_from is None else embed_from
    if source.n_nodes != graph.n_nodes:
        raise ValueError(f"embedding graph has {source.n_nodes} nodes, evaluation graph {graph.n_nodes}")
    part = graph.partition()
    h = encode(source, params, source_edges).data
    prob = prob_matrix(h)
    test_auc = _split_auc(h, split.test_pos, split.test_neg)
    truth = graph.adjacency(split.test_pos)

    pairs = np.concatenate([split.test_pos, split.test_neg])
    lab = graph.sensitive
    same = lab[pairs[:, 0]] == lab[pairs[:, 1]]
    pp = prob[pairs[:, 0], pairs[:, 1]]
    test_pair_dsp = float(abs(pp[same].mean() - pp[~same].mean())) if same.any() and (~same).any() else float("nan")

    topology = source.adjacency(source_edges)
    bparams = bound_params_from_model(params, source, topology, source_edges)
    c = source.features @ params.weight.data
    return build_report(prob, truth, part, topology, h, bparams, c_vectors=c,
                        extra={"auc": test_auc, "delta_sp_test_pairs": test_pair_dsp,
                               "measured_score_gap": delta_sp(score_matrix(h), part, include_self_pairs=True)})
