"""Navigation graphs, synthetic world and episode generation, shortest paths.

A world is a connected graph of waypoints spread over two floors.  Every node
carries a 36-view panorama (3 elevation tiers x 12 azimuths); each view has a
semantic vector (noisy one-hot over room / landmark categories seen in that
direction) and a visual vector (a per-category Gaussian prototype plus noise).
"""

from __future__ import annotations

import base64
import heapq
import json
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

N_VIEWS = 36
N_AZIMUTHS = 12
ELEVATIONS = (-math.pi / 6, 0.0, math.pi / 6)
WORLD_FORMAT_VERSION = 1
TWO_PI = 2.0 * math.pi

ROOMS = (
    "kitchen", "bedroom", "bathroom", "hallway", "office",
    "living room", "dining room", "laundry room", "closet", "garage",
)
LANDMARKS = (
    "sofa", "table", "lamp", "sink", "bed", "plant", "fridge", "stairs", "door",
    "window", "chair", "desk", "painting", "rug", "shelf", "mirror", "piano",
    "fireplace", "counter", "bookcase", "tv", "dresser", "washer", "bench",
    "clock", "vase", "couch", "cabinet", "toilet", "bathtub",
)


class WorldGenerationError(RuntimeError):
    pass


class EpisodeGenerationError(RuntimeError):
    pass


class ContractViolation(ValueError):
    pass


def wrap_angle(a: float) -> float:
    """Map an angle into [0, 2*pi)."""
    r = math.fmod(a, TWO_PI)
    if r < 0:
        r += TWO_PI
    return 0.0 if r >= TWO_PI else r


@dataclass(frozen=True)
class ViewFeature:
    semantic: np.ndarray
    visual: np.ndarray
    azimuth: float
    elevation: float

    @property
    def feature(self) -> np.ndarray:
        return np.concatenate([self.semantic, self.visual])


@dataclass(frozen=True)
class NavNode:
    id: str
    position: tuple[float, float, float]
    views: tuple[ViewFeature, ...]
    room: str = ""
    landmark: str = ""

    def __post_init__(self):
        if len(self.views) != N_VIEWS:
            raise ValueError(f"node {self.id} has {len(self.views)} views, expected {N_VIEWS}")


@dataclass(frozen=True)
class NavEdge:
    from_id: str
    to_id: str
    azimuth: float
    elevation: float
    distance: float


@dataclass
class NavGraph:
    id: str
    nodes: dict[str, NavNode]
    edges: dict[str, list[NavEdge]]
    d_sem: int
    d_vis: int
    _dist_cache: dict = field(default_factory=dict, repr=False, compare=False)

    def neighbors(self, node_id: str) -> list[NavEdge]:
        return self.edges.get(node_id, [])

    def edge(self, a: str, b: str) -> NavEdge | None:
        for e in self.edges.get(a, []):
            if e.to_id == b:
                return e
        return None

    def view_feature_matrix(self, node_id: str) -> np.ndarray:
        """All 36 view features of a node stacked as ``[36, d_sem + d_vis]``."""
        key = ("views", node_id)
        if key not in self._dist_cache:
            node = self.nodes[node_id]
            self._dist_cache[key] = np.stack([v.feature for v in node.views])
        return self._dist_cache[key]


@dataclass(frozen=True)
class Episode:
    id: str
    graph_id: str
    instruction: str
    path: tuple[str, ...]
    start_heading: float = 0.0
    role: str = "train"

    @property
    def goal(self) -> str:
        return self.path[-1]

    def with_instruction(self, text: str, new_id: str | None = None, role: str | None = None) -> "Episode":
        return Episode(new_id or self.id, self.graph_id, text, self.path, self.start_heading, role or self.role)


@dataclass(frozen=True)
class Pose:
    node_id: str
    heading: float = 0.0
    elevation: float = 0.0


TERMINAL = None
"""Returned by :func:`step` when the STOP action is taken."""


@dataclass(frozen=True)
class ActionCandidate:
    """One selectable action: an outgoing edge or STOP (``edge is None``)."""

    feature: np.ndarray | None
    positional5: tuple[float, float, float, float, float]
    edge: NavEdge | None

    @property
    def is_stop(self) -> bool:
        return self.edge is None


@dataclass
class WorldSpec:
    num_nodes: int = 40
    d_sem: int = 40
    d_vis: int = 128
    room_labels: Sequence[str] = ROOMS
    avg_degree: float = 3.0
    spacing: float = 3.0
    floor_height: float = 3.0
    feature_noise: float = 0.1


# ---------------------------------------------------------------------------
# geometry helpers


def _direction(a: Sequence[float], b: Sequence[float]) -> tuple[float, float, float]:
    dx, dy, dz = b[0] - a[0], b[1] - a[1], b[2] - a[2]
    horiz = math.hypot(dx, dy)
    # azimuth measured clockwise from +y ("north")
    azimuth = wrap_angle(math.atan2(dx, dy))
    elevation = math.atan2(dz, horiz)
    return azimuth, elevation, math.sqrt(dx * dx + dy * dy + dz * dz)


def view_index(azimuth: float, elevation: float) -> int:
    """Index of the panorama view closest to a world-frame direction."""
    tier = int(np.argmin([abs(elevation - e) for e in ELEVATIONS]))
    az = int(round(wrap_angle(azimuth) / (TWO_PI / N_AZIMUTHS))) % N_AZIMUTHS
    return tier * N_AZIMUTHS + az


def _make_edge(nodes_pos: dict[str, tuple], a: str, b: str) -> NavEdge:
    az, el, dist = _direction(nodes_pos[a], nodes_pos[b])
    return NavEdge(a, b, az, el, dist)


# ---------------------------------------------------------------------------
# world generation


def generate_world(seed: int, spec: WorldSpec | None = None, graph_id: str | None = None) -> tuple[NavGraph, dict]:
    """Build a connected two-floor random geometric graph with synthetic panoramas.

    Returns the graph and landmark annotations ``{node_id: {"room", "landmark"}}``.
    Identical ``(seed, spec)`` yields an identical world.
    """
    spec = spec or WorldSpec()
    if spec.num_nodes < 2:
        raise WorldGenerationError("num_nodes must be >= 2")
    if spec.avg_degree < 1:
        raise WorldGenerationError("avg_degree must be >= 1")
    rng = np.random.default_rng(seed)
    n = spec.num_nodes
    ids = [f"n{i:03d}" for i in range(n)]

    # jittered grid on two floors; floor 1 gets the remainder
    per_floor = [n - n // 2, n // 2] if n >= 4 else [n, 0]
    positions: dict[str, tuple[float, float, float]] = {}
    k = 0
    for floor, count in enumerate(per_floor):
        if count == 0:
            continue
        cols = max(1, int(math.ceil(math.sqrt(count))))
        cells = rng.permutation(cols * cols)[:count]
        for cell in sorted(cells):
            r, c = divmod(int(cell), cols)
            x = c * spec.spacing + rng.uniform(-0.25, 0.25) * spec.spacing
            y = r * spec.spacing + rng.uniform(-0.25, 0.25) * spec.spacing
            positions[ids[k]] = (float(x), float(y), float(floor * spec.floor_height))
            k += 1

    floors = {i: positions[i][2] for i in ids}
    pos_arr = np.array([positions[i] for i in ids])
    dmat = np.linalg.norm(pos_arr[:, None, :] - pos_arr[None, :, :], axis=-1)
    undirected: set[tuple[int, int]] = set()

    # k-nearest links on the same floor until the target degree is reached
    want = max(1, int(round(spec.avg_degree)))
    for i in range(n):
        order = np.argsort(dmat[i], kind="stable")
        added = 0
        for j in order[1:]:
            if floors[ids[i]] != floors[ids[j]]:
                continue
            if added >= want:
                break
            if dmat[i, j] > 2.0 * spec.spacing and added >= 1:
                break
            undirected.add((min(i, j), max(i, j)))
            added += 1

    # connect components through their closest node pair (stairs between floors)
    def components() -> list[list[int]]:
        adj: dict[int, list[int]] = {i: [] for i in range(n)}
        for a, b in undirected:
            adj[a].append(b)
            adj[b].append(a)
        seen, comps = set(), []
        for s in range(n):
            if s in seen:
                continue
            comp, queue = [], deque([s])
            seen.add(s)
            while queue:
                u = queue.popleft()
                comp.append(u)
                for v in adj[u]:
                    if v not in seen:
                        seen.add(v)
                        queue.append(v)
            comps.append(sorted(comp))
        return comps

    comps = components()
    while len(comps) > 1:
        base = comps[0]
        best = None
        for other in comps[1:]:
            sub = dmat[np.ix_(base, other)]
            a, b = np.unravel_index(int(np.argmin(sub)), sub.shape)
            cand = (float(sub[a, b]), base[a], other[b])
            if best is None or cand < best:
                best = cand
        if best is None:
            raise WorldGenerationError("cannot connect world components")
        _, a, b = best
        undirected.add((min(a, b), max(a, b)))
        comps = components()

    # rooms are contiguous-ish: label by coarse spatial blocks per floor
    room_labels = list(spec.room_labels)
    if not room_labels:
        raise WorldGenerationError("room_labels must be non-empty")
    block = 2.0 * spec.spacing
    block_room: dict[tuple, str] = {}
    node_room: dict[str, str] = {}
    node_landmark: dict[str, str] = {}
    for i in ids:
        x, y, z = positions[i]
        key = (int(x // block), int(y // block), int(round(z / spec.floor_height)))
        if key not in block_room:
            block_room[key] = room_labels[int(rng.integers(len(room_labels)))]
        node_room[i] = block_room[key]
        node_landmark[i] = LANDMARKS[int(rng.integers(len(LANDMARKS)))]

    categories = list(dict.fromkeys(room_labels + list(LANDMARKS)))
    if spec.d_sem < len(categories):
        # fold categories onto the available semantic width
        cat_slot = {c: i % spec.d_sem for i, c in enumerate(categories)}
    else:
        cat_slot = {c: i for i, c in enumerate(categories)}
    prototypes = rng.normal(0.0, 1.0, size=(len(categories), spec.d_vis))
    cat_index = {c: i for i, c in enumerate(categories)}

    edges: dict[str, list[NavEdge]] = {i: [] for i in ids}
    for a, b in sorted(undirected):
        edges[ids[a]].append(_make_edge(positions, ids[a], ids[b]))
        edges[ids[b]].append(_make_edge(positions, ids[b], ids[a]))
    for i in ids:
        edges[i].sort(key=lambda e: e.to_id)

    nodes: dict[str, NavNode] = {}
    for i in ids:
        # what each view direction sees: the neighbour landmark at eye level,
        # the neighbour room above / below; own room when nothing is there
        seen_at: dict[int, tuple[str, str]] = {}
        for e in edges[i]:
            az_idx = int(round(e.azimuth / (TWO_PI / N_AZIMUTHS))) % N_AZIMUTHS
            seen_at[az_idx] = (node_landmark[e.to_id], node_room[e.to_id])
        views = []
        for tier, elev in enumerate(ELEVATIONS):
            for a in range(N_AZIMUTHS):
                az = a * TWO_PI / N_AZIMUTHS
                if a in seen_at:
                    cat = seen_at[a][0] if tier == 1 else seen_at[a][1]
                else:
                    cat = node_room[i]
                sem = rng.normal(0.0, spec.feature_noise, size=spec.d_sem)
                sem[cat_slot[cat]] += 1.0
                vis = prototypes[cat_index[cat]] + rng.normal(0.0, spec.feature_noise, size=spec.d_vis)
                views.append(ViewFeature(sem, vis, az, elev))
        nodes[i] = NavNode(i, positions[i], tuple(views), node_room[i], node_landmark[i])

    graph = NavGraph(graph_id or f"world{seed}", nodes, edges, spec.d_sem, spec.d_vis)
    annotations = {i: {"room": node_room[i], "landmark": node_landmark[i]} for i in ids}
    return graph, annotations


def validate_graph(graph: NavGraph) -> list[str]:
    """Return a list of invariant violations (empty when the graph is sound)."""
    problems = []
    for nid, node in graph.nodes.items():
        if len(node.views) != N_VIEWS:
            problems.append(f"{nid}: {len(node.views)} views")
        for v in node.views:
            if v.semantic.shape != (graph.d_sem,) or v.visual.shape != (graph.d_vis,):
                problems.append(f"{nid}: view width mismatch")
                break
            if not (np.all(np.isfinite(v.semantic)) and np.all(np.isfinite(v.visual))):
                problems.append(f"{nid}: non-finite view feature")
                break
    for a, out in graph.edges.items():
        for e in out:
            if e.from_id != a:
                problems.append(f"edge stored under {a} starts at {e.from_id}")
            if e.to_id == a:
                problems.append(f"self-loop at {a}")
            if graph.edge(e.to_id, a) is None:
                problems.append(f"missing reverse edge {e.to_id}->{a}")
            pa, pb = graph.nodes[a].position, graph.nodes[e.to_id].position
            if abs(math.dist(pa, pb) - e.distance) > 1e-6:
                problems.append(f"edge {a}->{e.to_id} distance inconsistent")
    if graph.nodes and not is_connected(graph):
        problems.append("graph is not connected")
    return problems


def is_connected(graph: NavGraph) -> bool:
    start = next(iter(graph.nodes))
    seen = {start}
    queue = deque([start])
    while queue:
        u = queue.popleft()
        for e in graph.neighbors(u):
            if e.to_id not in seen:
                seen.add(e.to_id)
                queue.append(e.to_id)
    return len(seen) == len(graph.nodes)


# ---------------------------------------------------------------------------
# shortest paths


def _dijkstra(graph: NavGraph, source: str) -> tuple[dict[str, float], dict[str, str]]:
    dist = {source: 0.0}
    prev: dict[str, str] = {}
    heap = [(0.0, source)]
    while heap:
        d, u = heapq.heappop(heap)
        if d > dist.get(u, math.inf):
            continue
        for e in graph.neighbors(u):
            nd = d + e.distance
            # ties broken by node id for deterministic paths
            if nd < dist.get(e.to_id, math.inf) - 1e-12 or (
                abs(nd - dist.get(e.to_id, math.inf)) <= 1e-12 and u < prev.get(e.to_id, "~")
            ):
                dist[e.to_id] = nd
                prev[e.to_id] = u
                heapq.heappush(heap, (nd, e.to_id))
    return dist, prev


def _sssp(graph: NavGraph, source: str):
    key = ("sssp", source)
    if key not in graph._dist_cache:
        graph._dist_cache[key] = _dijkstra(graph, source)
    return graph._dist_cache[key]


def shortest_path_length(graph: NavGraph, a: str, b: str) -> float | None:
    """Geodesic distance in meters along edges; ``None`` when ``b`` is unreachable."""
    for x in (a, b):
        if x not in graph.nodes:
            raise KeyError(f"unknown node {x!r}")
    if a == b:
        return 0.0
    # canonical direction keeps the result exactly symmetric
    s, t = (a, b) if a < b else (b, a)
    return _sssp(graph, s)[0].get(t)


def shortest_path(graph: NavGraph, a: str, b: str) -> list[str] | None:
    if a == b:
        return [a]
    dist, prev = _sssp(graph, a)
    if b not in dist:
        return None
    path = [b]
    while path[-1] != a:
        path.append(prev[path[-1]])
    return path[::-1]


def next_hop(graph: NavGraph, current: str, goal: str) -> str | None:
    """First node after ``current`` on a shortest path to ``goal``; ``None`` at the goal."""
    if current == goal:
        return None
    best = None
    for e in graph.neighbors(current):
        rest = shortest_path_length(graph, e.to_id, goal)
        if rest is None:
            continue
        total = e.distance + rest
        if best is None or total < best[0] - 1e-9 or (abs(total - best[0]) <= 1e-9 and e.to_id < best[1]):
            best = (total, e.to_id)
    return None if best is None else best[1]


def path_length(graph: NavGraph, path: Sequence[str]) -> float:
    total = 0.0
    for a, b in zip(path, path[1:]):
        e = graph.edge(a, b)
        if e is None:
            raise ContractViolation(f"{a} and {b} are not adjacent")
        total += e.distance
    return total


# ---------------------------------------------------------------------------
# actions


STOP_POSITIONAL = (1.0, 0.0, 1.0, 0.0, 0.0)


def relative_view_angles(graph: NavGraph, pose: Pose) -> np.ndarray:
    """``[36, 4]`` array of [cos, sin] relative azimuth and [cos, sin] relative elevation."""
    node = graph.nodes[pose.node_id]
    out = np.empty((N_VIEWS, 4))
    for i, v in enumerate(node.views):
        th = v.azimuth - pose.heading
        ph = v.elevation - pose.elevation
        out[i] = (math.cos(th), math.sin(th), math.cos(ph), math.sin(ph))
    return out


def candidate_actions(graph: NavGraph, pose: Pose) -> list[ActionCandidate]:
    """One candidate per outgoing edge followed by STOP (always last)."""
    node = graph.nodes[pose.node_id]
    out = []
    for e in graph.neighbors(pose.node_id):
        th = e.azimuth - pose.heading
        ph = e.elevation - pose.elevation
        view = node.views[view_index(e.azimuth, e.elevation)]
        out.append(
            ActionCandidate(
                view.feature,
                (math.cos(th), math.sin(th), math.cos(ph), math.sin(ph), e.distance),
                e,
            )
        )
    out.append(ActionCandidate(None, STOP_POSITIONAL, None))
    return out


def step(pose: Pose, action: ActionCandidate, graph: NavGraph | None = None) -> Pose | None:
    """Apply an action.  STOP returns :data:`TERMINAL`."""
    if action.is_stop:
        return TERMINAL
    e = action.edge
    if e.from_id != pose.node_id:
        raise ContractViolation(f"edge {e.from_id}->{e.to_id} does not leave {pose.node_id}")
    if graph is not None and graph.edge(e.from_id, e.to_id) is None:
        raise ContractViolation(f"edge {e.from_id}->{e.to_id} not in graph")
    return Pose(e.to_id, wrap_angle(e.azimuth), 0.0)


# ---------------------------------------------------------------------------
# episode generation


DEFAULT_TEMPLATES = {
    "openers": ["walk", "go", "head", "move"],
    "moves": [
        "{verb} past the {landmark}",
        "{verb} toward the {landmark}",
        "{verb} by the {landmark}",
    ],
    "joins": ["and", "then"],
    "endings": [
        "and stop in the {room} near the {landmark}",
        "and wait by the {landmark} in the {room}",
        "then stop at the {landmark}",
    ],
}


def _render_instruction(rng: np.random.Generator, graph: NavGraph, path: Sequence[str], grammar: dict) -> str:
    mids = list(path[1:-1])
    keep = [m for m in mids if rng.random() < 0.8] or mids[:1]
    parts = []
    for j, nid in enumerate(keep):
        verb = grammar["openers"][int(rng.integers(len(grammar["openers"])))]
        tmpl = grammar["moves"][int(rng.integers(len(grammar["moves"])))]
        clause = tmpl.format(verb=verb, landmark=graph.nodes[nid].landmark)
        if j > 0:
            clause = grammar["joins"][int(rng.integers(len(grammar["joins"])))] + " " + clause
        parts.append(clause)
    goal = graph.nodes[path[-1]]
    ending = grammar["endings"][int(rng.integers(len(grammar["endings"])))]
    ending = ending.format(room=goal.room, landmark=goal.landmark)
    if not parts:
        verb = grammar["openers"][int(rng.integers(len(grammar["openers"])))]
        ending = verb + " " + ending.split(" ", 1)[1]
    text = " ".join(parts + [ending])
    words = text.split()
    return " ".join(words[:40])


def generate_episodes(
    seed: int,
    graph: NavGraph,
    count: int,
    path_len_range: tuple[int, int] = (3, 5),
    template_grammar: dict | None = None,
    min_goal_distance: float = 3.0,
    role: str = "train",
    id_prefix: str = "ep",
    exclude_pairs: Iterable[tuple[str, str]] = (),
) -> list[Episode]:
    """Sample shortest-path episodes with template instructions.

    ``path_len_range`` counts nodes (inclusive).  Goals are strictly farther than
    ``min_goal_distance`` from the start so a stay-put policy always fails.
    """
    if count == 0:
        return []
    grammar = template_grammar or DEFAULT_TEMPLATES
    lo, hi = path_len_range
    if lo < 2 or hi < lo:
        raise EpisodeGenerationError(f"invalid path_len_range {path_len_range}")
    rng = np.random.default_rng(seed)
    ids = sorted(graph.nodes)
    excluded = set(exclude_pairs)
    pairs = []
    achievable = set()
    for a in ids:
        for b in ids:
            if a == b:
                continue
            p = shortest_path(graph, a, b)
            if p is None:
                continue
            achievable.add(len(p))
            d = shortest_path_length(graph, a, b)
            if lo <= len(p) <= hi and d > min_goal_distance and (a, b) not in excluded:
                pairs.append((a, b, tuple(p)))
    if not pairs:
        span = (min(achievable), max(achievable)) if achievable else (1, 1)
        raise EpisodeGenerationError(
            f"no endpoint pair with path length in {path_len_range}; achievable node counts {span[0]}..{span[1]}"
        )
    order = rng.permutation(len(pairs))
    episodes = []
    for k in range(count):
        a, b, path = pairs[int(order[k % len(pairs)])]
        text = _render_instruction(rng, graph, path, grammar)
        episodes.append(Episode(f"{id_prefix}{k:04d}", graph.id, text, path, 0.0, role))
    return episodes


def validate_episode(graph: NavGraph, ep: Episode) -> list[str]:
    problems = []
    if len(ep.path) < 2:
        problems.append(f"{ep.id}: path shorter than 2")
    for a, b in zip(ep.path, ep.path[1:]):
        if a not in graph.nodes or b not in graph.nodes:
            problems.append(f"{ep.id}: unknown node on path")
            break
        if graph.edge(a, b) is None:
            problems.append(f"{ep.id}: {a} and {b} not adjacent")
    for a, c in zip(ep.path, ep.path[2:]):
        if a == c:
            problems.append(f"{ep.id}: immediate back-and-forth at {a}")
    return problems


# ---------------------------------------------------------------------------
# serialisation


def _b64(arr: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(arr, dtype="<f8").tobytes()).decode("ascii")


def _unb64(s: str) -> np.ndarray:
    return np.frombuffer(base64.b64decode(s), dtype="<f8").astype(np.float64)


def world_to_dict(graph: NavGraph) -> dict:
    nodes = []
    for nid in sorted(graph.nodes):
        node = graph.nodes[nid]
        sem = np.stack([v.semantic for v in node.views])
        vis = np.stack([v.visual for v in node.views])
        nodes.append({
            "id": nid,
            "position": list(node.position),
            "room": node.room,
            "landmark": node.landmark,
            "azimuths": [v.azimuth for v in node.views],
            "elevations": [v.elevation for v in node.views],
            "semantic": _b64(sem),
            "visual": _b64(vis),
        })
    edges = [
        {"from": e.from_id, "to": e.to_id, "azimuth": e.azimuth, "elevation": e.elevation, "distance": e.distance}
        for nid in sorted(graph.edges)
        for e in graph.edges[nid]
    ]
    return {
        "format_version": WORLD_FORMAT_VERSION,
        "id": graph.id,
        "d_sem": graph.d_sem,
        "d_vis": graph.d_vis,
        "nodes": nodes,
        "edges": edges,
    }


def world_from_dict(data: dict) -> NavGraph:
    if data.get("format_version") != WORLD_FORMAT_VERSION:
        raise ValueError(f"unsupported world format version {data.get('format_version')}")
    d_sem, d_vis = int(data["d_sem"]), int(data["d_vis"])
    nodes = {}
    for rec in data["nodes"]:
        sem = _unb64(rec["semantic"]).reshape(N_VIEWS, d_sem)
        vis = _unb64(rec["visual"]).reshape(N_VIEWS, d_vis)
        views = tuple(
            ViewFeature(sem[i].copy(), vis[i].copy(), float(rec["azimuths"][i]), float(rec["elevations"][i]))
            for i in range(N_VIEWS)
        )
        nodes[rec["id"]] = NavNode(rec["id"], tuple(rec["position"]), views, rec.get("room", ""), rec.get("landmark", ""))
    edges: dict[str, list[NavEdge]] = {nid: [] for nid in nodes}
    for e in data["edges"]:
        edges[e["from"]].append(NavEdge(e["from"], e["to"], e["azimuth"], e["elevation"], e["distance"]))
    return NavGraph(data["id"], nodes, edges, d_sem, d_vis)


def save_world(graph: NavGraph, path) -> None:
    Path(path).write_text(json.dumps(world_to_dict(graph), sort_keys=True))


def load_world(path) -> NavGraph:
    return world_from_dict(json.loads(Path(path).read_text()))


def episode_to_dict(ep: Episode) -> dict:
    return {
        "id": ep.id,
        "graph_id": ep.graph_id,
        "instruction": ep.instruction,
        "path": list(ep.path),
        "start_heading": ep.start_heading,
        "role": ep.role,
    }


def episode_from_dict(d: dict) -> Episode:
    return Episode(
        str(d["id"]), str(d["graph_id"]), str(d.get("instruction", "")), tuple(d["path"]),
        float(d.get("start_heading", 0.0)), str(d.get("role", "train")),
    )


def save_episodes(episodes: Iterable[Episode], path) -> None:
    with open(path, "w") as fh:
        for ep in episodes:
            fh.write(json.dumps(episode_to_dict(ep), sort_keys=True) + "\n")


def load_episodes(path, role: str | None = None) -> list[Episode]:
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                ep = episode_from_dict(json.loads(line))
                if role is not None:
                    ep = Episode(ep.id, ep.graph_id, ep.instruction, ep.path, ep.start_heading, role)
                out.append(ep)
    return out


class R2RFormatError(ValueError):
    pass


def load_r2r_json(path, role: str = "train") -> list[Episode]:
    """Read R2R-style records; each instruction string becomes its own episode."""
    records = json.loads(Path(path).read_text())
    if not isinstance(records, list):
        raise R2RFormatError("top-level value must be an array")
    out = []
    for idx, rec in enumerate(records):
        for key in ("path_id", "scan", "heading", "instructions", "path"):
            if key not in rec:
                raise R2RFormatError(f"record {idx}: missing field {key!r}")
        if not isinstance(rec["instructions"], list):
            raise R2RFormatError(f"record {idx}: field 'instructions' must be a list")
        if not isinstance(rec["path"], list) or len(rec["path"]) < 2:
            raise R2RFormatError(f"record {idx}: field 'path' must list at least 2 nodes")
        try:
            heading = float(rec["heading"])
        except (TypeError, ValueError) as exc:
            raise R2RFormatError(f"record {idx}: field 'heading' is not a number") from exc
        for k, text in enumerate(rec["instructions"]):
            out.append(Episode(f"{rec['path_id']}_{k}", str(rec["scan"]), str(text), tuple(rec["path"]), heading, role))
    return out
