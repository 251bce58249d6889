"""Experiment drivers: bias amplification through generated graphs, distribution
distances between graphs, and intra/inter edge listings."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import wasserstein_distance

from .diffusion import DenoiserParams, Marginals, NoiseSchedule, sample_graph
from .fairness import delta_sp, optimal_targets
from .graph import EdgeSplit, Graph, SensitivePartition, group_edge_mass, split_edges
from .linkpred import TrainConfig, evaluate_lp, train_lp_full

log = logging.getLogger(__name__)

ALIGNMENT_NOTE = ("index alignment: synthetic graphs have the real node count and synthetic node i "
                  "carries real node i's group; each synthetic LP model embeds its own graph and "
                  "is scored on the real test pairs with real group labels")


# --------------------------------------------------------------- distances

def degree_wasserstein(g1: Graph, g2: Graph) -> float:
    """W1 between the empirical node-degree distributions."""
    return float(wasserstein_distance(g1.degrees(), g2.degrees()))


def clustering_coefficients(graph: Graph) -> np.ndarray:
    """Local clustering per node; nodes of degree below 2 get 0."""
    a = graph.adjacency()
    deg = a.sum(axis=1)
    tri = np.einsum("ij,jk,ki->i", a, a, a) / 2.0
    pairs = deg * (deg - 1) / 2.0
    return np.divide(tri, pairs, out=np.zeros_like(tri), where=pairs > 0)


def clustering_wasserstein(g1: Graph, g2: Graph) -> float:
    return float(wasserstein_distance(clustering_coefficients(g1), clustering_coefficients(g2)))


# ---------------------------------------------------------------- listings

@dataclass
class IntraInterListing:
    records: list                 # (u, v, "intra" | "inter"), one per undirected edge
    intra_count: int
    inter_count: int
    group_intra: np.ndarray       # per group, undirected edges inside the group
    group_inter: np.ndarray       # per group, undirected edges leaving the group
    observed_ratio: np.ndarray    # group_intra / group_inter
    target_ratio: np.ndarray      # |S_k| / (N - |S_k|)

    def to_csv(self) -> str:
        lines = ["u,v,tag"] + [f"{u},{v},{tag}" for u, v, tag in self.records]
        return "\n".join(lines) + "\n"

    def summary_text(self) -> str:
        lines = [f"intra {self.intra_count}", f"inter {self.inter_count}"]
        for k in range(len(self.group_intra)):
            lines.append(f"group{k}_intra {int(self.group_intra[k])}")
            lines.append(f"group{k}_inter {int(self.group_inter[k])}")
            lines.append(f"group{k}_ratio {_fmt(self.observed_ratio[k])}")
            lines.append(f"group{k}_target_ratio {_fmt(self.target_ratio[k])}")
        return "\n".join(lines) + "\n"


def intra_inter_listing(graph: Graph, partition: SensitivePartition | None = None) -> IntraInterListing:
    part = graph.partition() if partition is None else partition
    lab = part.labels
    e = graph.edges
    same = lab[e[:, 0]] == lab[e[:, 1]]
    records = [(int(u), int(v), "intra" if s else "inter") for (u, v), s in zip(e, same)]
    # ordered-pair masses count each undirected edge twice
    mass = group_edge_mass(graph.adjacency(), part)
    g_intra, g_inter = mass.intra / 2.0, mass.inter
    n = part.n_nodes
    sizes = part.group_sizes.astype(np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        observed = np.where(g_inter > 0, g_intra / np.where(g_inter > 0, g_inter, 1.0), np.inf)
    observed = np.where((g_intra == 0) & (g_inter == 0), np.nan, observed)
    return IntraInterListing(records, int(same.sum()), int((~same).sum()), g_intra, g_inter,
                             observed, sizes / (n - sizes))


# ------------------------------------------------------------- generators

@dataclass(frozen=True, eq=False)
class DiffusionGenerator:
    """Samples graph ``i`` from a trained denoiser with its own rng keyed on ``(seed, i)``.

    ``sensitive`` fixes the synthetic labels instead of drawing them.
    """
    params: DenoiserParams
    schedule: NoiseSchedule
    marginals: Marginals
    group_distribution: np.ndarray
    n_nodes: int
    seed: int = 0
    sensitive: np.ndarray | None = None

    def sample(self, index: int) -> Graph:
        rng = np.random.default_rng([self.seed, index])
        return sample_graph(self.params, self.n_nodes, self.group_distribution, self.schedule,
                            self.marginals, rng, sensitive=self.sensitive)

    def aligned_to(self, real: Graph) -> "DiffusionGenerator":
        """Copy whose samples carry the real labels node by node.

        The denoiser is permutation equivariant and the starting noise is
        i.i.d., so this equals drawing labels with the real group counts and
        matching synthetic to real nodes within each group.
        """
        if real.n_nodes != self.n_nodes:
            raise ValueError("alignment needs the real node count")
        return replace(self, sensitive=np.asarray(real.sensitive))


@dataclass(frozen=True, eq=False)
class IdentityGenerator:
    """Degenerate generator that hands back the real graph."""
    graph: Graph

    def sample(self, index: int) -> Graph:
        return self.graph


# ------------------------------------------------------------------ study

ROW_FIELDS = ["graph", "auc", "delta_sp", "delta_eo", "degree_w1", "clustering_w1",
              "n_edges", "intra_edges", "inter_edges", "structural_delta_sp"]
METRICS = ["auc", "delta_sp", "delta_eo", "degree_w1", "clustering_w1", "n_edges",
           "intra_edges", "inter_edges", "structural_delta_sp"]


@dataclass
class GenerationReport:
    rows: list                     # dicts keyed by ROW_FIELDS; rows[0] is the real graph
    mean: dict
    std: dict
    amplified: bool
    note: str = ALIGNMENT_NOTE
    extra: dict = field(default_factory=dict)

    @property
    def real(self) -> dict:
        return self.rows[0]

    @property
    def synthetic(self) -> list:
        return self.rows[1:]

    def to_csv(self) -> str:
        lines = [",".join(ROW_FIELDS)]
        for r in self.rows:
            lines.append(",".join([r["graph"]] + [_fmt(r[c]) for c in ROW_FIELDS[1:]]))
        lines.append(",".join(["synthetic_mean"] + [_fmt(self.mean[c]) for c in ROW_FIELDS[1:]]))
        lines.append(",".join(["synthetic_std"] + [_fmt(self.std[c]) for c in ROW_FIELDS[1:]]))
        return "\n".join(lines) + "\n"

    def to_record(self) -> dict:
        rec = {"n_synthetic": len(self.synthetic), "amplified": int(self.amplified)}
        for c in METRICS:
            rec[f"real_{c}"] = self.real[c]
            rec[f"synthetic_mean_{c}"] = self.mean[c]
            rec[f"synthetic_std_{c}"] = self.std[c]
        rec.update(self.extra)
        return rec

    def to_text(self) -> str:
        lines = [f"{k} {_fmt(v)}" for k, v in self.to_record().items()]
        lines.append(f"note {self.note}")
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _graph_row(name: str, g: Graph, real: Graph, params, split: EdgeSplit, embed_edges) -> dict:
    rep = evaluate_lp(params, real, split, embed_from=(g, embed_edges))
    listing = intra_inter_listing(g)
    return {
        "graph": name,
        "auc": rep.extra["auc"],
        "delta_sp": rep.delta_sp,
        "delta_eo": rep.delta_eo,
        "degree_w1": degree_wasserstein(g, real),
        "clustering_w1": clustering_wasserstein(g, real),
        "n_edges": g.n_edges,
        "intra_edges": listing.intra_count,
        "inter_edges": listing.inter_count,
        "structural_delta_sp": delta_sp(g.adjacency(), g.partition()),
    }


def _synthetic_row(args) -> dict:
    index, generator, real, split, lp_config, train_frac = args
    g = generator.sample(index)
    if g.n_nodes != real.n_nodes or not np.array_equal(g.sensitive, real.sensitive):
        raise ValueError("synthetic graphs must be index-aligned with the real graph")
    # fairness-agnostic LP on the synthetic graph with its own labels
    syn_split = split_edges(g, train_frac, seed=lp_config.seed + index)
    result = train_lp_full(g, syn_split, replace(lp_config, lam=0.0))
    return _graph_row(f"synthetic_{index}", g, real, result.params, split, syn_split.train_pos)


def bias_amplification_study(real: Graph, split: EdgeSplit, generator, n_samples: int,
                             lp_config: TrainConfig, jobs: int = 1,
                             train_frac: float = 0.8) -> GenerationReport:
    """Train an LP model on the real graph and on each generated graph; score all on the real test split.

    ``generator`` is any object with ``sample(index) -> Graph`` whose samples
    are index-aligned with ``real`` (same size, same label per node; see
    :meth:`DiffusionGenerator.aligned_to`). Rows are merged by sample index,
    so the report does not depend on ``jobs``.
    """
    if n_samples < 1:
        raise ValueError("need at least one synthetic graph")
    real_result = train_lp_full(real, split, replace(lp_config, lam=0.0))
    rows = [_graph_row("real", real, real, real_result.params, split, split.train_pos)]
    tasks = [(i, generator, real, split, lp_config, train_frac) for i in range(n_samples)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            syn = list(pool.map(_synthetic_row, tasks))
    else:
        syn = [_synthetic_row(t) for t in tasks]
    rows += syn
    mean = {c: float(np.mean([r[c] for r in syn])) for c in METRICS}
    std = {c: float(np.std([r[c] for r in syn], ddof=1)) if len(syn) > 1 else 0.0 for c in METRICS}
    amplified = mean["delta_sp"] > rows[0]["delta_sp"]
    return GenerationReport(rows, mean, std, bool(amplified))
