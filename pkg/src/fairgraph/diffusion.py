"""Discrete denoising diffusion over binary edge and feature channels.

Edges and each feature column are two-state chains corrupted toward their
data marginals under a cosine schedule. A message-passing denoiser guided by
the sensitive one-hot predicts the clean graph, and sampling walks the chain
backwards with the closed-form Bayes posterior.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tt
from .fairness import fairwire_block
from .graph import Graph, GraphValidationError, SensitivePartition
from .tensor import Tensor
from .weights import load_weights, save_weights

log = logging.getLogger(__name__)

PAIR_CHUNK = 200_000


class DiffusionDivergedError(RuntimeError):
    def __init__(self, step: int, detail: str = ""):
        super().__init__(f"non-finite diffusion loss at step {step}{': ' + detail if detail else ''}")
        self.step = step


# ----------------------------------------------------------------- schedule

@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """``alpha[t-1]`` and ``alpha_bar[t-1]`` hold the values for step ``t`` in 1..T."""
    T: int
    s: float
    alpha: np.ndarray
    alpha_bar: np.ndarray
    alpha_bar0: float

    def bar(self, t: int) -> float:
        """Cumulative keep-probability at step ``t``; step 0 is the clean data (1.0)."""
        if t == 0:
            return 1.0
        if not 1 <= t <= self.T:
            raise ValueError(f"step {t} outside 0..{self.T}")
        return float(self.alpha_bar[t - 1])

    def step(self, t: int) -> float:
        if not 1 <= t <= self.T:
            raise ValueError(f"step {t} outside 1..{self.T}")
        return float(self.alpha[t - 1])


def cosine_alpha_bar(t, T: int, s: float):
    return np.cos(0.5 * np.pi * (np.asarray(t, dtype=np.float64) / T + s) / (1.0 + s)) ** 2


def build_schedule(T: int = 3, s: float = 0.008) -> NoiseSchedule:
    """Cosine schedule.

    The first step keeps ``alpha^1 = alpha_bar^1`` so the chain starts from the
    clean data exactly; later steps use ratios of consecutive cumulative values.
    """
    if T < 1:
        raise ValueError("T must be at least 1")
    if s <= 0:
        raise ValueError("s must be positive")
    raw = np.clip(cosine_alpha_bar(np.arange(T + 1), T, s), 0.0, 1.0)
    alpha = np.empty(T)
    alpha[0] = raw[1]
    for t in range(2, T + 1):
        alpha[t - 1] = raw[t] / raw[t - 1] if raw[t - 1] > 0 else 0.0
    alpha = np.clip(alpha, 0.0, 1.0)
    alpha_bar = np.cumprod(alpha)
    for arr in (alpha, alpha_bar):
        arr.setflags(write=False)
    return NoiseSchedule(T, float(s), alpha, alpha_bar, float(raw[0]))


@dataclass(frozen=True, eq=False)
class TransitionKernel:
    """Two-state kernel ``Q = alpha I + (1 - alpha) 1 m^T``."""
    alpha: float
    m: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.m, dtype=np.float64).reshape(2)
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha {self.alpha} outside [0, 1]")
        if (m < 0).any() or abs(m.sum() - 1.0) > 1e-12:
            raise ValueError(f"marginal {m} is not a distribution")
        object.__setattr__(self, "m", m)

    @property
    def Q(self) -> np.ndarray:
        return self.alpha * np.eye(2) + (1.0 - self.alpha) * np.outer(np.ones(2), self.m)


def step_kernel(schedule: NoiseSchedule, t: int, m) -> TransitionKernel:
    return TransitionKernel(schedule.step(t), m)


def cumulative_kernel(schedule: NoiseSchedule, t: int, m) -> TransitionKernel:
    return TransitionKernel(schedule.bar(t), m)


# ---------------------------------------------------------------- marginals

@dataclass(frozen=True, eq=False)
class Marginals:
    edge: np.ndarray      # (2,)
    features: np.ndarray  # (F, 2)


def _check_binary(x: np.ndarray, what: str) -> None:
    if not np.isin(x, (0.0, 1.0)).all():
        raise ValueError(f"{what} must be binary for the two-state diffusion")


def marginals(graph: Graph) -> Marginals:
    """Edge density over ordered off-diagonal pairs and per-feature Bernoulli rates."""
    n = graph.n_nodes
    if n < 2:
        raise ValueError("marginals need at least two nodes")
    _check_binary(graph.features, "node features")
    density = 2.0 * graph.n_edges / (n * (n - 1))
    rate = graph.features.mean(axis=0) if graph.n_features else np.zeros(0)
    return Marginals(np.array([1.0 - density, density]), np.stack([1.0 - rate, rate], axis=1))


# ------------------------------------------------------------ forward noise

@dataclass(frozen=True, eq=False)
class NoisyGraph:
    t: int
    A_t: np.ndarray
    X_t: np.ndarray

    def __post_init__(self):
        a = self.A_t
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError("A_t must be square")
        if not np.array_equal(a, a.T) or np.diag(a).any():
            raise ValueError("A_t must be symmetric with a zero diagonal")
        if self.X_t.shape[0] != a.shape[0]:
            raise ValueError("X_t rows do not match A_t")


def _noisy_rate(clean: np.ndarray, keep: float, m1) -> np.ndarray:
    """P(label 1 at step t) = clean * keep + (1 - keep) * m1, i.e. the row of the cumulative kernel."""
    return clean * keep + (1.0 - keep) * np.asarray(m1)


def forward_noise(clean: Graph, t: int, schedule: NoiseSchedule, marg: Marginals,
                  rng: np.random.Generator) -> NoisyGraph:
    """Corrupt edges (upper triangle, then mirrored) and features to step ``t``."""
    if not 1 <= t <= schedule.T:
        raise ValueError(f"step {t} outside 1..{schedule.T}")
    n = clean.n_nodes
    keep = schedule.bar(t)
    iu, ju = np.triu_indices(n, k=1)
    a0 = clean.adjacency()[iu, ju]
    flips = rng.random(iu.size) < _noisy_rate(a0, keep, marg.edge[1])
    a = np.zeros((n, n))
    a[iu, ju] = flips
    a[ju, iu] = flips
    x = (rng.random(clean.features.shape) < _noisy_rate(clean.features, keep, marg.features[:, 1])).astype(np.float64)
    return NoisyGraph(t, a, x)


# ----------------------------------------------------------------- denoiser

@dataclass(frozen=True, eq=False)
class DenoiserParams:
    """Named parameter tensors plus the sizes that fix their shapes.

    Layer ``l`` owns ``W_TH{l}``, ``b_H{l}``, ``W_HS{l}``, ``b_S{l}`` and
    ``W_SS{l}``; the embedders are ``t_*`` and ``x_*``, the heads ``fx_*``
    (features) and ``e_*`` (edges).
    """
    tensors: dict
    n_features: int
    n_groups: int
    hidden: int = 32
    s_hidden: int = 8
    edge_hidden: int = 32
    layers: int = 2
    T: int = 3

    def __post_init__(self):
        expected = _param_shapes(self.n_features, self.n_groups, self.hidden, self.s_hidden,
                                 self.edge_hidden, self.layers)
        if set(expected) != set(self.tensors):
            raise ValueError(f"parameter names differ: missing {sorted(set(expected) - set(self.tensors))}, "
                             f"extra {sorted(set(self.tensors) - set(expected))}")
        for name, shape in expected.items():
            got = self.tensors[name].shape
            if got != shape:
                raise ValueError(f"parameter {name} has shape {got}, expected {shape}")
            if not np.isfinite(self.tensors[name].data).all():
                raise ValueError(f"parameter {name} has non-finite entries")

    @property
    def rep_dim(self) -> int:
        return _rep_dim(self.hidden, self.s_hidden, self.n_groups, self.layers)

    def parameters(self) -> list[Tensor]:
        return [self.tensors[k] for k in sorted(self.tensors)]

    def copy(self) -> "DenoiserParams":
        return DenoiserParams({k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.tensors.items()},
                              self.n_features, self.n_groups, self.hidden, self.s_hidden,
                              self.edge_hidden, self.layers, self.T)

    def save(self, path) -> None:
        meta = {"n_features": self.n_features, "n_groups": self.n_groups, "hidden": self.hidden,
                "s_hidden": self.s_hidden, "edge_hidden": self.edge_hidden, "layers": self.layers,
                "T": self.T}
        save_weights(path, "denoiser", {k: self.tensors[k].data for k in sorted(self.tensors)}, meta)

    @classmethod
    def load(cls, path) -> "DenoiserParams":
        kind, arrays, meta = load_weights(path)
        if kind != "denoiser":
            raise ValueError(f"{path} holds a {kind!r} model, not a denoiser")
        sizes = {k: int(meta[k]) for k in ("n_features", "n_groups", "hidden", "s_hidden",
                                            "edge_hidden", "layers", "T")}
        return cls({k: Tensor(v, requires_grad=True) for k, v in arrays.items()}, **sizes)


def _rep_dim(hidden: int, s_hidden: int, n_groups: int, layers: int) -> int:
    # all H layers (input embedding included), raw S plus every S layer, and h_t
    return (layers + 1) * hidden + n_groups + layers * s_hidden + hidden


def _param_shapes(f: int, k: int, d: int, ds: int, de: int, layers: int) -> dict:
    shapes = {
        "t_W1": (1, d), "t_b1": (d,), "t_W2": (d, d), "t_b2": (d,),
        "x_W1": (f, d), "x_b1": (d,), "x_W2": (d, d), "x_b2": (d,),
    }
    s_in = k
    for l in range(layers):
        shapes[f"W_TH{l}"] = (d, d)
        shapes[f"b_H{l}"] = (d,)
        shapes[f"W_HS{l}"] = (d + s_in, d)
        shapes[f"W_SS{l}"] = (s_in, ds)
        shapes[f"b_S{l}"] = (ds,)
        s_in = ds
    r = _rep_dim(d, ds, k, layers)
    shapes.update({
        "fx_W1": (r, d), "fx_b1": (d,), "fx_W2": (d, f), "fx_b2": (f,),
        "e_P": (r, de), "e_W1": (de, de), "e_b1": (de,), "e_W2": (de, 1), "e_b2": (1,),
    })
    return shapes


def init_denoiser(n_features: int, n_groups: int, hidden: int = 32, s_hidden: int = 8,
                  edge_hidden: int = 32, layers: int = 2, T: int = 3, seed: int = 0) -> DenoiserParams:
    if min(hidden, s_hidden, edge_hidden) < 2 or layers < 1:
        raise ValueError("hidden sizes must be >= 2 and layers >= 1")
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in _param_shapes(n_features, n_groups, hidden, s_hidden, edge_hidden, layers).items():
        data = np.zeros(shape) if len(shape) == 1 else tt.glorot(rng, *shape)
        tensors[name] = Tensor(data, requires_grad=True)
    return DenoiserParams(tensors, n_features, n_groups, hidden, s_hidden, edge_hidden, layers, T)


def _act(x) -> Tensor:
    return tt.layernorm_rows(tt.relu(x))


def _mlp(x, p: dict, prefix: str) -> Tensor:
    h = tt.relu(tt.add(tt.matmul(x, p[prefix + "_W1"]), p[prefix + "_b1"]))
    return tt.add(tt.matmul(h, p[prefix + "_W2"]), p[prefix + "_b2"])


def node_representations(params: DenoiserParams, A_t: np.ndarray, X_t: np.ndarray,
                         onehot: np.ndarray, t: int) -> Tensor:
    """Final per-node representation ``[H^0..H^L || S^0..S^L || h_t]``."""
    p = params.tensors
    n = A_t.shape[0]
    if X_t.shape != (n, params.n_features) or onehot.shape != (n, params.n_groups):
        raise ValueError(f"input shapes {A_t.shape}, {X_t.shape}, {onehot.shape} do not fit the denoiser "
                         f"({params.n_features} features, {params.n_groups} groups)")
    h_t = _mlp(np.array([[t / params.T]]), p, "t")          # 1 x d
    h = _mlp(X_t, p, "x")
    s = tt.tensor(onehot)
    hs, ss = [h], [s]
    for l in range(params.layers):
        time_term = tt.add(tt.matmul(h_t, p[f"W_TH{l}"]), p[f"b_H{l}"])
        msg = tt.matmul(tt.row_mean_aggregate(A_t, tt.concat_rows([h, s])), p[f"W_HS{l}"])
        h_next = _act(tt.add(msg, time_term))
        s = _act(tt.add(tt.matmul(tt.row_mean_aggregate(A_t, s), p[f"W_SS{l}"]), p[f"b_S{l}"]))
        h = h_next
        hs.append(h)
        ss.append(s)
    ht_rows = tt.matmul(np.ones((n, 1)), h_t)
    return tt.concat_rows(hs + ss + [ht_rows])


def edge_logits(params: DenoiserParams, rep: Tensor, rows, cols) -> Tensor:
    """Edge-head scores for the listed pairs; symmetric because ``P_i * P_j`` commutes."""
    p = params.tensors
    proj = tt.matmul(rep, p["e_P"])
    z = tt.mul(tt.take_rows(proj, rows), tt.take_rows(proj, cols))
    return tt.reshape(_mlp(z, p, "e"), (-1,))


def feature_logits(params: DenoiserParams, rep: Tensor) -> Tensor:
    return _mlp(rep, params.tensors, "fx")


def denoise(noisy: NoisyGraph, partition: SensitivePartition, t: int,
            params: DenoiserParams) -> tuple[np.ndarray, np.ndarray]:
    """Clean-graph predictions ``(X_prob N x F, A_prob N x N)``; the edge matrix is
    symmetric with a zero diagonal. Large graphs run the edge head in chunks."""
    n = noisy.A_t.shape[0]
    if partition.n_nodes != n:
        raise ValueError(f"partition covers {partition.n_nodes} nodes, noisy graph has {n}")
    rep = node_representations(params, noisy.A_t, noisy.X_t, partition.onehot, t).detach()
    x_prob = tt._sigmoid(feature_logits(params, rep).data)
    iu, ju = np.triu_indices(n, k=1)
    vals = np.empty(iu.size)
    for start in range(0, iu.size, PAIR_CHUNK):
        sl = slice(start, start + PAIR_CHUNK)
        vals[sl] = edge_logits(params, rep, iu[sl], ju[sl]).data
    a_prob = np.zeros((n, n))
    a_prob[iu, ju] = tt._sigmoid(vals)
    a_prob[ju, iu] = a_prob[iu, ju]
    return x_prob, a_prob


def diffusion_loss(params: DenoiserParams, noisy: NoisyGraph, clean: Graph, partition: SensitivePartition,
                   batch, lam: float) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Feature CE + edge CE + ``lam`` times the batch regularizer on the predicted edge block.

    The denoiser runs on the whole noisy graph; the losses cover the nodes in
    ``batch`` (features of those rows, edges among them). Cross-entropies are
    means. Returns ``(loss, ce_x, ce_e, reg)``; ``reg`` stays off the tape at
    ``lam == 0``.
    """
    batch = np.asarray(batch, dtype=np.int64).reshape(-1)
    b = batch.size
    if b < 2 or np.unique(batch).size != b:
        raise ValueError("the batch needs at least two distinct nodes")
    rep = node_representations(params, noisy.A_t, noisy.X_t, partition.onehot, noisy.t)
    rep_b = tt.take_rows(rep, batch)
    ce_x = tt.bce_with_logits(feature_logits(params, rep_b), clean.features[batch])
    iu, ju = np.triu_indices(b, k=1)
    logits = edge_logits(params, rep_b, iu, ju)
    a0 = clean.adjacency()[np.ix_(batch, batch)][iu, ju]
    ce_e = tt.bce_with_logits(logits, a0)
    if lam > 0:
        block = tt.pairs_to_symmetric(tt.sigmoid(logits), b, iu, ju)
        reg = fairwire_block(block, partition.onehot[batch], partition.group_sizes, partition.n_nodes)
        loss = tt.add(tt.add(ce_x, ce_e), tt.mul(reg, lam))
    else:
        block = np.zeros((b, b))
        block[iu, ju] = tt._sigmoid(logits.data)
        block[ju, iu] = block[iu, ju]
        reg = fairwire_block(block, partition.onehot[batch], partition.group_sizes, partition.n_nodes)
        loss = tt.add(ce_x, ce_e)
    return loss, ce_x, ce_e, reg


# ----------------------------------------------------------------- training

@dataclass
class DiffusionConfig:
    lam: float = 0.0
    epochs: int = 10000
    learning_rate: float = 1e-3
    seed: int = 0
    T: int = 3
    s: float = 0.008
    batch_size: int = 512
    hidden: int = 32
    s_hidden: int = 8
    edge_hidden: int = 32
    layers: int = 2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if self.epochs < 1 or self.learning_rate <= 0:
            raise ValueError("epochs and learning rate must be positive")
        if self.batch_size < 2:
            raise ValueError("batch size must be at least 2")


@dataclass
class DiffusionResult:
    params: DenoiserParams
    schedule: NoiseSchedule
    marginals: Marginals
    history: list = field(default_factory=list)


def train_diffusion(graph: Graph, config: DiffusionConfig) -> DiffusionResult:
    """One optimizer step per epoch: random step ``t``, forward noise, loss over a node batch."""
    rng = np.random.default_rng(config.seed)
    schedule = build_schedule(config.T, config.s)
    marg = marginals(graph)
    part = graph.partition()
    params = init_denoiser(graph.n_features, graph.n_groups, config.hidden, config.s_hidden,
                           config.edge_hidden, config.layers, config.T, config.seed)
    opt = tt.Adam(params.parameters(), config.learning_rate, (config.beta1, config.beta2), config.eps)
    n = graph.n_nodes
    b = min(config.batch_size, n)
    history = []
    for epoch in range(1, config.epochs + 1):
        t = int(rng.integers(1, config.T + 1))
        noisy = forward_noise(graph, t, schedule, marg, rng)
        batch = np.arange(n) if b == n else np.sort(rng.choice(n, size=b, replace=False))
        opt.zero_grad()
        loss, ce_x, ce_e, reg = diffusion_loss(params, noisy, graph, part, batch, config.lam)
        if not np.isfinite(loss.item()):
            raise DiffusionDivergedError(epoch, f"t={t}, ce_x={ce_x.item()}, ce_e={ce_e.item()}, reg={reg.item()}")
        tt.backward(loss)
        opt.step()
        history.append({"epoch": epoch, "t": t, "loss": loss.item(), "ce_x": ce_x.item(),
                        "ce_e": ce_e.item(), "reg": reg.item()})
    return DiffusionResult(params, schedule, marg, history)


def diffusion_history_csv(history: list) -> str:
    cols = ["epoch", "t", "loss", "ce_x", "ce_e", "reg"]
    rows = [",".join(cols)]
    for h in history:
        rows.append(",".join(str(h[c]) if c in ("epoch", "t") else repr(float(h[c])) for c in cols))
    return "\n".join(rows) + "\n"


# ---------------------------------------------------------------- posterior

def posterior_batch(e_probs: np.ndarray, a_t: np.ndarray, t: int, schedule: NoiseSchedule,
                    m) -> np.ndarray:
    """Vectorised reverse step for many two-state entries.

    ``e_probs`` is ``(n, 2)`` predicted clean distributions, ``a_t`` the current
    labels, ``m`` a marginal of shape ``(2,)`` or ``(n, 2)``. For each clean label
    ``e`` the one-step Bayes posterior ``q(a_{t-1} | a_0 = e, a_t)`` is weighted
    by ``e_probs[:, e]``; labels ``e`` that cannot reach ``a_t`` contribute
    nothing. Rows whose total mass vanishes fall back to the marginal.
    """
    e_probs = np.asarray(e_probs, dtype=np.float64).reshape(-1, 2)
    a_t = np.asarray(a_t, dtype=np.int64).reshape(-1)
    m = np.broadcast_to(np.asarray(m, dtype=np.float64), e_probs.shape)
    a_step, keep_prev = schedule.step(t), schedule.bar(t - 1)
    rows = np.arange(a_t.size)
    # Q^t[a, a_t] for a in {0, 1}: alpha * [a == a_t] + (1 - alpha) * m[a_t]
    step_to = (1.0 - a_step) * m[rows, a_t][:, None] + a_step * (np.arange(2)[None, :] == a_t[:, None])
    out = np.zeros_like(e_probs)
    for e in (0, 1):
        prev = (1.0 - keep_prev) * m + keep_prev * (np.arange(2)[None, :] == e)   # Qbar^{t-1}[e, a]
        joint = prev * step_to
        den = joint.sum(axis=1)
        ok = den > 0
        out[ok] += e_probs[ok, e][:, None] * joint[ok] / den[ok, None]
    total = out.sum(axis=1)
    bad = ~(total > 0)
    if bad.any():
        log.warning("posterior mass vanished for %d entries at step %d; using the marginal", int(bad.sum()), t)
        out[bad] = m[bad]
        total[bad] = 1.0
    return out / total[:, None]


def posterior(e_probs, a_t: int, t: int, schedule: NoiseSchedule, m) -> np.ndarray:
    """Distribution over the previous label of one entry (see :func:`posterior_batch`)."""
    e = np.asarray(e_probs, dtype=np.float64).reshape(2)
    if (e < 0).any() or abs(e.sum() - 1.0) > 1e-9:
        raise ValueError(f"e_probs {e} is not a distribution")
    if not 1 <= t <= schedule.T:
        raise ValueError(f"step {t} outside 1..{schedule.T}")
    return posterior_batch(e[None, :], np.array([int(a_t)]), t, schedule, np.asarray(m).reshape(2))[0]


# ----------------------------------------------------------------- sampling

def sample_sensitive(n: int, group_distribution, rng: np.random.Generator, max_tries: int = 1000) -> np.ndarray:
    """Draw group labels, redrawing until every group has a member."""
    p = np.asarray(group_distribution, dtype=np.float64)
    if (p < 0).any() or abs(p.sum() - 1.0) > 1e-9:
        raise ValueError("group distribution must be a probability vector")
    if n < (p > 0).sum() or (p == 0).any():
        raise ValueError("every group needs positive probability and N must cover all groups")
    for _ in range(max_tries):
        lab = rng.choice(p.size, size=n, p=p)
        if np.bincount(lab, minlength=p.size).min() > 0:
            return lab
    raise GraphValidationError("could not draw a label vector with every group present")


def sample_graph(params: DenoiserParams, n: int, group_distribution, schedule: NoiseSchedule,
                 marg: Marginals, rng: np.random.Generator, sensitive=None) -> Graph:
    """Ancestral sampling from pure marginal noise down to a clean synthetic graph.

    Synthetic group labels are drawn once (or taken from ``sensitive``) and held
    fixed for every reverse step.
    """
    if n < 2:
        raise ValueError("need at least two nodes")
    k = params.n_groups
    if sensitive is None:
        labels = sample_sensitive(n, group_distribution, rng)
    else:
        labels = np.asarray(sensitive, dtype=np.int64).reshape(-1)
    part = SensitivePartition.from_labels(labels, k)
    iu, ju = np.triu_indices(n, k=1)
    a_up = (rng.random(iu.size) < marg.edge[1]).astype(np.int64)
    x = (rng.random((n, params.n_features)) < marg.features[:, 1]).astype(np.int64)
    for t in range(schedule.T, 0, -1):
        a = np.zeros((n, n))
        a[iu, ju] = a_up
        a[ju, iu] = a_up
        x_prob, a_prob = denoise(NoisyGraph(t, a, x.astype(np.float64)), part, t, params)
        pe = a_prob[iu, ju]
        post_e = posterior_batch(np.stack([1.0 - pe, pe], axis=1), a_up, t, schedule, marg.edge)
        a_up = (rng.random(iu.size) < post_e[:, 1]).astype(np.int64)
        fx = x_prob.reshape(-1)
        m_x = np.tile(marg.features, (n, 1))
        post_x = posterior_batch(np.stack([1.0 - fx, fx], axis=1), x.reshape(-1), t, schedule, m_x)
        x = (rng.random(fx.size) < post_x[:, 1]).astype(np.int64).reshape(n, -1)
    edges = np.stack([iu[a_up == 1], ju[a_up == 1]], axis=1)
    return Graph(n, edges, x.astype(np.float64), labels, k, synthetic=True)
