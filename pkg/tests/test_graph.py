import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fairgraph.graph import (Graph, GraphFormatError, GraphValidationError, GroupEdgeMass,
                             SensitivePartition, SplitSizeError, group_edge_mass, load_graph,
                             read_graph, read_split, save_graph, save_split, sbm_generate,
                             split_edges)


def write_dataset(tmp_path, edges, feats, labels):
    (tmp_path / "e.txt").write_text("".join(f"{u} {v}\n" for u, v in edges))
    (tmp_path / "x.csv").write_text("".join(",".join(str(x) for x in r) + "\n" for r in feats))
    (tmp_path / "s.txt").write_text("".join(f"{s}\n" for s in labels))
    return tmp_path / "e.txt", tmp_path / "x.csv", tmp_path / "s.txt"


def test_load_three_node_graph(tmp_path):
    g, loops = load_graph(*write_dataset(tmp_path, [(0, 1), (1, 2)], np.eye(3), [0, 0, 1]))
    assert g.n_edges == 2 and loops == 0
    assert g.partition().group_sizes.tolist() == [2, 1]


def test_load_drops_self_loop_with_count(tmp_path, caplog):
    with caplog.at_level(logging.WARNING):
        g, loops = load_graph(*write_dataset(tmp_path, [(0, 0), (0, 1), (1, 0)], np.eye(2), [0, 1]))
    assert loops == 1 and g.n_edges == 1
    assert "self-loop" in caplog.text


def test_load_parse_error_has_line_number(tmp_path):
    paths = write_dataset(tmp_path, [(0, 1)], np.eye(2), [0, 1])
    paths[0].write_text("0 1\n1 x\n")
    with pytest.raises(GraphFormatError, match=":2:"):
        load_graph(*paths)


def test_load_group_count_inconsistent(tmp_path):
    paths = write_dataset(tmp_path, [(0, 1)], np.eye(3), [0, 1, 2])
    with pytest.raises(GraphValidationError):
        load_graph(*paths, n_groups=2)
    with pytest.raises(GraphValidationError):
        load_graph(*paths, n_groups=4)   # group 3 has no members


def test_cora_shaped_input_validates():
    rng = np.random.default_rng(0)
    n, m, f, k = 2708, 10556 // 2, 1433, 7
    edges = set()
    while len(edges) < m:
        u, v = rng.integers(0, n, 2)
        if u != v:
            edges.add((min(u, v), max(u, v)))
    labels = np.concatenate([np.arange(k), rng.integers(0, k, n - k)])
    g = Graph(n, np.array(sorted(edges)), np.zeros((n, f)), labels, k)
    assert (g.n_nodes, g.n_edges, g.n_features, g.n_groups) == (n, m, f, k)
    assert len(split_edges(g, 0.8, 0).train_pos) == round(0.8 * m)


def test_graph_invariants_enforced():
    with pytest.raises(GraphValidationError):
        Graph(3, [(0, 0)], np.zeros((3, 1)), [0, 1, 1], 2)
    with pytest.raises(GraphValidationError):
        Graph(3, [(0, 1)], np.zeros((2, 1)), [0, 1, 1], 2)
    with pytest.raises(GraphValidationError):
        Graph(3, [(0, 1)], np.zeros((3, 1)), [0, 0, 0], 2)
    g = Graph(3, [(1, 0), (0, 1)], np.zeros((3, 1)), [0, 1, 1], 2)
    assert g.edges.tolist() == [[0, 1]]
    a = g.adjacency()
    assert np.array_equal(a, a.T) and not np.diag(a).any()


def test_partition_fields():
    p = SensitivePartition.from_labels([0, 2, 1, 2], 3)
    assert p.onehot.sum(axis=1).tolist() == [1, 1, 1, 1]
    assert p.group_sizes.tolist() == [1, 1, 2]
    assert [m.tolist() for m in p.group_members] == [[0], [2], [1, 3]]


def test_sbm_degenerate_probabilities():
    g = sbm_generate([5, 5], 1.0, 0.0, 4, seed=0)
    assert g.n_edges == 20
    lab = g.sensitive
    assert (lab[g.edges[:, 0]] == lab[g.edges[:, 1]]).all()


def test_sbm_intra_rate_concentration():
    g = sbm_generate([100, 100, 100], 0.3, 0.05, 8, seed=3)
    lab = g.sensitive
    intra = int((lab[g.edges[:, 0]] == lab[g.edges[:, 1]]).sum())
    pairs = 3 * 100 * 99 // 2
    sigma = np.sqrt(pairs * 0.3 * 0.7)
    assert abs(intra - 0.3 * pairs) < 3 * sigma


def test_sbm_deterministic():
    a = sbm_generate([10, 12], 0.4, 0.1, 3, seed=9)
    b = sbm_generate([10, 12], 0.4, 0.1, 3, seed=9)
    assert np.array_equal(a.edges, b.edges) and np.array_equal(a.features, b.features)


def test_split_ten_edges():
    g = Graph(6, [(0, 1), (0, 2), (0, 3), (0, 4), (0, 5), (1, 2), (1, 3), (1, 4), (1, 5), (2, 3)],
              np.zeros((6, 1)), [0, 0, 0, 1, 1, 1], 2)
    sp = split_edges(g, 0.8, seed=1)
    assert (len(sp.train_pos), len(sp.val_pos), len(sp.test_pos)) == (8, 1, 1)


def test_split_too_small():
    g = Graph(4, [(0, 1), (2, 3)], np.zeros((4, 1)), [0, 0, 1, 1], 2)
    with pytest.raises(SplitSizeError):
        split_edges(g)


def test_split_partition_and_negatives():
    g = sbm_generate([15, 15], 0.3, 0.1, 2, seed=2)
    edges = {tuple(e) for e in g.edges.tolist()}
    for seed in range(100):
        sp = split_edges(g, 0.8, seed)
        joined = np.concatenate([sp.train_pos, sp.val_pos, sp.test_pos])
        assert sorted(map(tuple, joined.tolist())) == sorted(edges)
        negs = np.concatenate([sp.val_neg, sp.test_neg])
        assert not ({tuple(e) for e in negs.tolist()} & edges)
        assert (negs[:, 0] != negs[:, 1]).all()
        assert abs(len(sp.val_pos) - len(sp.test_pos)) <= 1
        assert len(sp.val_neg) == len(sp.val_pos) and len(sp.test_neg) == len(sp.test_pos)


def brute_mass(p, labels, k):
    n = len(labels)
    intra, inter = np.zeros(k), np.zeros(k)
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            g = labels[i]
            if labels[j] == g:
                intra[g] += p[i, j]
            else:
                inter[g] += p[i, j]
    return intra, inter


def random_prob(rng, n):
    p = rng.random((n, n))
    p = (p + p.T) / 2
    np.fill_diagonal(p, 0.0)
    return p


def test_group_mass_degenerate_sbm():
    g = sbm_generate([5, 5], 1.0, 0.0, 1, seed=0)
    m = group_edge_mass(g.adjacency(), g.partition())
    assert m.intra.tolist() == [20.0, 20.0] and m.inter.tolist() == [0.0, 0.0]


def test_group_mass_constant_matrix():
    c, sizes = 0.3, [4, 6]
    part = SensitivePartition.from_labels([0] * 4 + [1] * 6)
    p = np.full((10, 10), c)
    np.fill_diagonal(p, 0)
    m = group_edge_mass(p, part)
    np.testing.assert_allclose(m.intra, [c * n * (n - 1) for n in sizes])
    np.testing.assert_allclose(m.inter, [c * n * (10 - n) for n in sizes])


def test_group_mass_brute_force_and_identity(rng):
    for _ in range(20):
        n = int(rng.integers(4, 9))
        labels = np.concatenate([[0, 1, 2], rng.integers(0, 3, n - 3)])
        p = random_prob(rng, n)
        m = group_edge_mass(p, SensitivePartition.from_labels(labels, 3))
        bi, bo = brute_mass(p, labels, 3)
        np.testing.assert_allclose(m.intra, bi, atol=1e-12)
        np.testing.assert_allclose(m.inter, bo, atol=1e-12)
        assert (m.intra + m.inter <= m.total + 1e-12).all()
        assert abs((m.intra + m.inter).sum() - m.total) < 1e-12


def test_group_mass_rejects_negative():
    with pytest.raises(GraphValidationError):
        GroupEdgeMass(np.array([-1.0]), np.array([0.0]), 1.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.booleans())
def test_serialization_round_trip(tmp_path_factory, seed, synthetic):
    rng = np.random.default_rng(seed)
    g0 = sbm_generate([4, 5], 0.5, 0.2, 3, seed=seed)
    feats = rng.normal(size=g0.features.shape) * 10.0 ** rng.integers(-5, 5)
    g = Graph(g0.n_nodes, g0.edges, feats, g0.sensitive, 2, synthetic)
    d = tmp_path_factory.mktemp("g")
    save_graph(g, d / "g.txt")
    back = read_graph(d / "g.txt")
    assert np.array_equal(back.edges, g.edges)
    assert np.array_equal(back.features, g.features)
    assert np.array_equal(back.sensitive, g.sensitive) and back.synthetic == synthetic
    save_graph(back, d / "h.txt")
    assert (d / "g.txt").read_bytes() == (d / "h.txt").read_bytes()


def test_split_round_trip(tmp_path):
    g = sbm_generate([10, 10], 0.4, 0.1, 2, seed=4)
    sp = split_edges(g, 0.8, seed=5)
    save_split(sp, tmp_path / "s.txt")
    back = read_split(tmp_path / "s.txt")
    for name in ("train_pos", "val_pos", "test_pos", "val_neg", "test_neg"):
        assert np.array_equal(getattr(back, name), getattr(sp, name))
    assert back.seed == 5


def test_read_graph_rejects_bad_header(tmp_path):
    (tmp_path / "g.txt").write_text("nope\n")
    with pytest.raises(GraphFormatError):
        read_graph(tmp_path / "g.txt")
