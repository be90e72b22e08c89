import math

import numpy as np
import pytest

from curvclust.graph import (
    Graph,
    GraphFormatError,
    GraphValidationError,
    bfs_distances,
    convert_planetoid_raw,
    load_graph,
    save_graph,
    shortest_hop_distance,
    stochastic_block_model,
)


def write(path, text):
    path.write_text(text)
    return path


def test_edges_are_symmetrised_and_deduplicated():
    g = Graph.from_edges(4, [(1, 0), (0, 1), (2, 2), (3, 1)], np.zeros((4, 2)))
    assert g.edges.tolist() == [[0, 1], [1, 3]]
    assert g.degrees.tolist() == [1, 2, 0, 1]
    assert g.has_edge(1, 0) and g.has_edge(0, 1) and not g.has_edge(2, 2)


def test_graph_is_read_only():
    g = Graph.from_edges(2, [(0, 1)], np.zeros((2, 1)))
    with pytest.raises(ValueError):
        g.edges[0, 0] = 5
    with pytest.raises(Exception):
        g.num_nodes = 3


def test_bad_endpoint_reported():
    with pytest.raises(GraphValidationError, match="outside"):
        Graph.from_edges(3, [(0, 7)], np.zeros((3, 1)))


def test_row_count_mismatch():
    with pytest.raises(GraphValidationError):
        Graph.from_edges(3, [], np.zeros((2, 1)))
    with pytest.raises(GraphValidationError):
        Graph.from_edges(2, [], np.zeros((2, 1)), labels=[0, 1, 2])


def test_hop_distances():
    path = Graph.from_edges(5, [(0, 1), (1, 2), (2, 3)], np.zeros((5, 1)))
    assert shortest_hop_distance(path, 0, 3) == 3
    assert shortest_hop_distance(path, 2, 2) == 0
    assert shortest_hop_distance(path, 0, 4) == math.inf
    assert bfs_distances(path, 0, max_depth=2) == {0: 0, 1: 1, 2: 2}


def test_file_roundtrip(tmp_path):
    g = stochastic_block_model([4, 5], 0.6, 0.1, feature_dim=3, seed=2)
    save_graph(g, tmp_path / "e.tsv", tmp_path / "f.csv", tmp_path / "l.csv")
    h = load_graph(tmp_path / "e.tsv", tmp_path / "f.csv", tmp_path / "l.csv")
    np.testing.assert_array_equal(h.edges, g.edges)
    np.testing.assert_array_equal(h.features, g.features)
    np.testing.assert_array_equal(h.labels, g.labels)
    assert h.content_hash() == g.content_hash()


def test_malformed_edge_line_reports_line_number(tmp_path):
    e = write(tmp_path / "e.tsv", "0\t1\n1 2\n")
    f = write(tmp_path / "f.csv", "1,2\n3,4\n5,6\n")
    with pytest.raises(GraphFormatError) as info:
        load_graph(e, f)
    assert info.value.line == 2


def test_ragged_features_rejected(tmp_path):
    e = write(tmp_path / "e.tsv", "0\t1\n")
    f = write(tmp_path / "f.csv", "1,2\n3\n")
    with pytest.raises(GraphFormatError) as info:
        load_graph(e, f)
    assert info.value.line == 2


def test_non_numeric_label(tmp_path):
    e = write(tmp_path / "e.tsv", "0\t1\n")
    f = write(tmp_path / "f.csv", "1\n2\n")
    lab = write(tmp_path / "l.csv", "0\nx\n")
    with pytest.raises(GraphFormatError):
        load_graph(e, f, lab)


def test_missing_file(tmp_path):
    with pytest.raises(OSError):
        load_graph(tmp_path / "nope.tsv", tmp_path / "nope.csv")


def test_row_normalisation(tmp_path):
    g = Graph.from_edges(2, [(0, 1)], np.array([[1.0, 3.0], [0.0, 0.0]]))
    np.testing.assert_allclose(g.row_normalized().features, [[0.25, 0.75], [0.0, 0.0]])


def test_content_hash_ignores_features():
    a = Graph.from_edges(3, [(0, 1)], np.zeros((3, 1)))
    b = Graph.from_edges(3, [(1, 0)], np.ones((3, 1)))
    c = Graph.from_edges(3, [(1, 2)], np.zeros((3, 1)))
    assert a.content_hash() == b.content_hash() != c.content_hash()


def test_planetoid_conversion(tmp_path):
    content = "p9\t1\t0\tB\np2\t0\t1\tA\np5\t1\t1\tB\n"
    cites = "p2 p9\np9 p5\np2 missing\n"
    g = convert_planetoid_raw(write(tmp_path / "x.content", content),
                              write(tmp_path / "x.cites", cites), tmp_path / "out")
    assert g.num_nodes == 3
    assert g.edges.tolist() == [[0, 1], [0, 2]]
    assert g.labels.tolist() == [1, 0, 1]
    h = load_graph(tmp_path / "out" / "edges.tsv", tmp_path / "out" / "features.csv",
                   tmp_path / "out" / "labels.csv")
    np.testing.assert_array_equal(h.features, [[1, 0], [0, 1], [1, 1]])


def test_sbm_is_reproducible_and_planted():
    a = stochastic_block_model([30, 30], 0.5, 0.02, seed=7)
    b = stochastic_block_model([30, 30], 0.5, 0.02, seed=7)
    np.testing.assert_array_equal(a.edges, b.edges)
    np.testing.assert_array_equal(a.features, b.features)
    same = a.labels[a.edges[:, 0]] == a.labels[a.edges[:, 1]]
    assert same.mean() > 0.9
