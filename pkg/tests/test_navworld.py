import json
import math
from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from crossmap import navworld as nw


def flat_views(d=2):
    views = []
    for k, el in enumerate(nw.ELEVATIONS):
        for a in range(nw.N_AZIMUTHS):
            views.append(nw.ViewFeature(np.zeros(d), np.zeros(d), a * nw.TWO_PI / nw.N_AZIMUTHS, el))
    return tuple(views)


def line_graph():
    """A -(2 m)- B -(3 m)- C along the y axis."""
    pos = {"A": (0.0, 0.0, 0.0), "B": (0.0, 2.0, 0.0), "C": (0.0, 5.0, 0.0)}
    nodes = {k: nw.NavNode(k, p, flat_views()) for k, p in pos.items()}
    edges = {k: [] for k in pos}
    for a, b in (("A", "B"), ("B", "C")):
        edges[a].append(nw._make_edge(pos, a, b))
        edges[b].append(nw._make_edge(pos, b, a))
    return nw.NavGraph("line", nodes, edges, 2, 2)


def bfs_reachable(graph, start):
    seen, queue = {start}, deque([start])
    while queue:
        u = queue.popleft()
        for e in graph.edges[u]:
            if e.to_id not in seen:
                seen.add(e.to_id)
                queue.append(e.to_id)
    return seen


def bellman_ford(graph, source):
    dist = {n: math.inf for n in graph.nodes}
    dist[source] = 0.0
    edges = [e for out in graph.edges.values() for e in out]
    for _ in range(len(graph.nodes) - 1):
        for e in edges:
            if dist[e.from_id] + e.distance < dist[e.to_id]:
                dist[e.to_id] = dist[e.from_id] + e.distance
    return dist


def test_world_is_deterministic():
    a, _ = nw.generate_world(7, nw.WorldSpec(num_nodes=15, d_sem=4, d_vis=4))
    b, _ = nw.generate_world(7, nw.WorldSpec(num_nodes=15, d_sem=4, d_vis=4))
    assert json.dumps(nw.world_to_dict(a), sort_keys=True) == json.dumps(nw.world_to_dict(b), sort_keys=True)


def test_two_node_world_single_edge():
    g, _ = nw.generate_world(0, nw.WorldSpec(num_nodes=2, d_sem=3, d_vis=3))
    a, b = sorted(g.nodes)
    assert [e.to_id for e in g.edges[a]] == [b]
    assert [e.to_id for e in g.edges[b]] == [a]
    assert nw.validate_graph(g) == []


def test_forty_nodes_connected_by_bfs():
    g, ann = nw.generate_world(7, nw.WorldSpec(num_nodes=40))
    assert bfs_reachable(g, next(iter(g.nodes))) == set(g.nodes)
    assert nw.validate_graph(g) == []
    assert set(ann) == set(g.nodes)
    for node in g.nodes.values():
        assert len(node.views) == nw.N_VIEWS
        assert node.views[0].feature.shape == (40 + 128,)


def test_degenerate_spec_rejected():
    with pytest.raises(nw.WorldGenerationError):
        nw.generate_world(0, nw.WorldSpec(num_nodes=1))
    with pytest.raises(nw.WorldGenerationError):
        nw.generate_world(0, nw.WorldSpec(num_nodes=5, avg_degree=0.5))


def test_line_distances():
    g = line_graph()
    assert nw.shortest_path_length(g, "A", "A") == 0.0
    assert nw.shortest_path_length(g, "A", "C") == pytest.approx(5.0, abs=1e-12)
    assert nw.shortest_path(g, "A", "C") == ["A", "B", "C"]
    assert nw.next_hop(g, "A", "C") == "B"
    assert nw.next_hop(g, "C", "C") is None


def test_unreachable_is_none():
    g = line_graph()
    g.edges["B"] = [e for e in g.edges["B"] if e.to_id != "C"]
    g.edges["C"] = []
    assert nw.shortest_path_length(g, "A", "C") is None
    with pytest.raises(KeyError):
        nw.shortest_path_length(g, "A", "Z")


def test_dijkstra_matches_bellman_ford(world20):
    for s in world20.nodes:
        oracle = bellman_ford(world20, s)
        for t in world20.nodes:
            assert nw.shortest_path_length(world20, s, t) == pytest.approx(oracle[t], abs=1e-9)


def test_geodesic_symmetric_and_triangle(world20):
    ids = sorted(world20.nodes)
    d = {(a, b): nw.shortest_path_length(world20, a, b) for a in ids for b in ids}
    for a in ids:
        for b in ids:
            assert d[a, b] == d[b, a]
            for c in ids[::4]:
                assert d[a, b] <= d[a, c] + d[c, b] + 1e-9


def test_candidates_stop_last(world20):
    for nid in world20.nodes:
        cs = nw.candidate_actions(world20, nw.Pose(nid, 0.3))
        assert len(cs) == len(world20.neighbors(nid)) + 1
        assert cs[-1].is_stop and all(not c.is_stop for c in cs[:-1])
        assert cs[-1].positional5 == (1.0, 0.0, 1.0, 0.0, 0.0)


def test_north_edge_with_north_heading():
    g = line_graph()
    cs = nw.candidate_actions(g, nw.Pose("A", 0.0))
    cos_t, sin_t, _, _, rho = cs[0].positional5
    assert (cos_t, rho) == (pytest.approx(1.0), pytest.approx(2.0))
    assert sin_t == pytest.approx(0.0, abs=1e-12)


def test_step_semantics():
    g = line_graph()
    pose = nw.Pose("A", 1.0)
    cs = nw.candidate_actions(g, pose)
    nxt = nw.step(pose, cs[0], g)
    assert nxt.node_id == "B"
    assert nxt.heading == pytest.approx(nw.wrap_angle(cs[0].edge.azimuth))
    assert nw.step(nxt, cs[-1]) is nw.TERMINAL
    with pytest.raises(nw.ContractViolation):
        nw.step(nxt, cs[0])


def test_relative_angles_rotate_with_heading():
    g = line_graph()
    base = nw.relative_view_angles(g, nw.Pose("A", 0.0))
    turned = nw.relative_view_angles(g, nw.Pose("A", math.radians(30)))
    # one azimuth step is 30 degrees, so the zero-azimuth view moves by one slot
    np.testing.assert_allclose(turned[1], base[0], atol=1e-12)
    assert base[0, 0] == pytest.approx(1.0)


@settings(max_examples=200, deadline=None)
@given(st.floats(-100, 100, allow_nan=False))
def test_wrap_angle_range(a):
    w = nw.wrap_angle(a)
    assert 0.0 <= w < nw.TWO_PI
    assert math.cos(w) == pytest.approx(math.cos(a), abs=1e-9)


def test_episodes_empty_and_valid(world20):
    assert nw.generate_episodes(0, world20, 0) == []
    eps = nw.generate_episodes(4, world20, 25)
    assert eps == nw.generate_episodes(4, world20, 25)
    for ep in eps:
        assert nw.validate_episode(world20, ep) == []
        assert list(ep.path) == nw.shortest_path(world20, ep.path[0], ep.goal)
        assert nw.path_length(world20, ep.path) == pytest.approx(bellman_ford(world20, ep.path[0])[ep.goal])
        assert nw.shortest_path_length(world20, ep.path[0], ep.goal) > 3.0


def test_episodes_impossible_length(world20):
    with pytest.raises(nw.EpisodeGenerationError, match="achievable"):
        nw.generate_episodes(0, world20, 3, path_len_range=(60, 70))


def test_validate_episode_flags_problems():
    g = line_graph()
    bad = nw.Episode("x", "line", "go", ("A", "C"))
    assert any("not adjacent" in p for p in nw.validate_episode(g, bad))
    loop = nw.Episode("y", "line", "go", ("A", "B", "A"))
    assert any("back-and-forth" in p for p in nw.validate_episode(g, loop))


def test_world_round_trip(tmp_path, world20):
    path = tmp_path / "w.json"
    nw.save_world(world20, path)
    back = nw.load_world(path)
    assert json.dumps(nw.world_to_dict(back), sort_keys=True) == json.dumps(nw.world_to_dict(world20), sort_keys=True)
    for nid in world20.nodes:
        np.testing.assert_array_equal(back.view_feature_matrix(nid), world20.view_feature_matrix(nid))


def test_episode_round_trip(tmp_path, world20):
    eps = nw.generate_episodes(1, world20, 5, role="val_seen")
    path = tmp_path / "e.jsonl"
    nw.save_episodes(eps, path)
    assert nw.load_episodes(path) == eps


def test_r2r_loader(tmp_path):
    path = tmp_path / "r2r.json"
    path.write_text("[]")
    assert nw.load_r2r_json(path) == []
    rec = {"path_id": 9, "scan": "s1", "heading": 1.5, "instructions": ["a", "b", "c"], "path": ["n0", "n1", "n2"]}
    path.write_text(json.dumps([rec]))
    eps = nw.load_r2r_json(path)
    assert len(eps) == 3
    assert {ep.path for ep in eps} == {("n0", "n1", "n2")}
    assert [ep.id for ep in eps] == ["9_0", "9_1", "9_2"]


@pytest.mark.parametrize("field", ["path_id", "scan", "heading", "instructions", "path"])
def test_r2r_missing_field_named(tmp_path, field):
    rec = {"path_id": 1, "scan": "s", "heading": 0.0, "instructions": ["x"], "path": ["a", "b"]}
    del rec[field]
    path = tmp_path / "r2r.json"
    path.write_text(json.dumps([rec, rec]))
    with pytest.raises(nw.R2RFormatError, match=f"record 0: missing field '{field}'"):
        nw.load_r2r_json(path)
