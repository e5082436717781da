"""Latent roadmap: cluster covered states, link them with witnessed actions,
and plan shortest sequences of intermediate states.

Nodes are connected components of the covered latent points under the union
of an epsilon-ball relation and the no-action pairing. Edges are undirected
records of action transitions, but each stored action remembers the direction
it was witnessed in, and path search only traverses an edge along a witnessed
direction (folds are not invertible).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import (EpsilonTooLarge, FormatError, InsufficientPairs, NoPath)
from .latent import EncodedDataset, EncoderModel, encode
from .sim import ClothState, FoldAction, Observation

ROADMAP_VERSION = 1

EPSILON_NO_ACTION_FACTOR = 2.0
DEFAULT_PATH_CAP = 64


@dataclass
class RoadmapNode:
    node_id: int
    centroid: np.ndarray
    representative_ref: int  # index into the dataset-derived state bank
    representative: ClothState
    members: list  # covered latent indices (2*i for z0 of tuple i, 2*i+1 for z1)


@dataclass
class RoadmapEdge:
    a: int
    b: int  # node ids, a < b
    actions: list  # FoldActions witnessed on this edge
    directions: list  # (src, dst) node ids per action


@dataclass
class Roadmap:
    nodes: list
    edges: list
    epsilon: float
    forward: dict = field(default_factory=dict)  # node -> sorted successor ids

    def node_count(self) -> int:
        return len(self.nodes)

    def centroid_matrix(self) -> np.ndarray:
        return np.asarray([n.centroid for n in self.nodes])


@dataclass
class Plan:
    """A chosen shortest node path with decoded interior states.

    The full sub-goal sequence is start observation, interior representative
    states, goal observation; endpoints stay the raw query inputs.
    """

    node_ids: list
    interior_states: list
    start_obs: Observation
    goal_obs: Observation
    length: int
    start_covered: bool
    goal_covered: bool
    n_candidates: int
    path_index: int


def tune_epsilon(enc: EncodedDataset, c: float = EPSILON_NO_ACTION_FACTOR) -> float:
    """Clustering radius from the corpus distance structure.

    epsilon = min(c * median no-action distance, half the minimum action
    distance); the no-action term is skipped when it degenerates to zero so
    the radius stays positive.
    """
    a0 = enc.a == 0
    a1 = enc.a == 1
    if not a0.any() or not a1.any():
        raise InsufficientPairs(
            "epsilon tuning needs at least one action and one no-action pair")
    d0 = np.linalg.norm(enc.z0[a0] - enc.z1[a0], axis=1)
    d1 = np.linalg.norm(enc.z0[a1] - enc.z1[a1], axis=1)
    action_bound = 0.5 * float(d1.min())
    med0 = float(np.median(d0))
    if med0 == 0.0:
        return action_bound
    return min(c * med0, action_bound)


def build_lsr(enc: EncodedDataset, bank, epsilon: float) -> Roadmap:
    """Cluster covered states and accumulate action edges between clusters.

    Raises EpsilonTooLarge if any action pair ends up inside one cluster
    (the caller should shrink epsilon).
    """
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    n = enc.n
    pts = np.empty((2 * n, enc.z0.shape[1]))
    pts[0::2] = enc.z0
    pts[1::2] = enc.z1

    parent = list(range(2 * n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    def union(i, j):
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)

    for i in range(2 * n):
        d = np.linalg.norm(pts[i + 1:] - pts[i], axis=1)
        for off in np.nonzero(d <= epsilon)[0]:
            union(i, i + 1 + int(off))
    for t in range(n):
        if enc.a[t] == 0:
            union(2 * t, 2 * t + 1)

    members = {}
    for i in range(2 * n):
        members.setdefault(find(i), []).append(i)
    roots = sorted(members, key=lambda r: min(members[r]))
    comp_of = {}
    nodes = []
    bank_z = np.asarray([entry[0] for entry in bank]) if bank else None
    for node_id, root in enumerate(roots):
        idx = members[root]
        for i in idx:
            comp_of[i] = node_id
        centroid = pts[idx].mean(axis=0)
        if bank_z is None:
            raise ValueError("build_lsr needs a non-empty state bank")
        ref = int(np.argmin(np.linalg.norm(bank_z - centroid, axis=1)))
        nodes.append(RoadmapNode(
            node_id=node_id, centroid=centroid, representative_ref=ref,
            representative=bank[ref][1], members=idx))

    edge_map = {}
    for t in range(n):
        if enc.a[t] != 1:
            continue
        u = comp_of[2 * t]
        v = comp_of[2 * t + 1]
        if u == v:
            raise EpsilonTooLarge(
                f"epsilon {epsilon} merged the endpoints of action tuple {t}")
        key = (min(u, v), max(u, v))
        edge = edge_map.get(key)
        if edge is None:
            edge = RoadmapEdge(a=key[0], b=key[1], actions=[], directions=[])
            edge_map[key] = edge
        edge.actions.append(enc.actions[t])
        edge.directions.append((u, v))

    edges = [edge_map[k] for k in sorted(edge_map)]
    forward = {}
    for edge in edges:
        for src, dst in edge.directions:
            forward.setdefault(src, set()).add(dst)
    forward = {u: sorted(vs) for u, vs in forward.items()}
    return Roadmap(nodes=nodes, edges=edges, epsilon=epsilon, forward=forward)


def map_to_node(rm: Roadmap, z: np.ndarray):
    """Nearest node centroid; covered means within the clustering radius."""
    if not rm.nodes:
        raise ValueError("roadmap has no nodes")
    dists = np.linalg.norm(rm.centroid_matrix() - np.asarray(z)[None, :],
                           axis=1)
    node_id = int(np.argmin(dists))
    return node_id, bool(dists[node_id] <= rm.epsilon)


def all_shortest_paths(rm: Roadmap, s: int, g: int,
                       cap: int = DEFAULT_PATH_CAP):
    """Every minimal-length node path from s to g, lexicographic, capped.

    Traversal honors witnessed edge directions only.
    """
    n = rm.node_count()
    if not (0 <= s < n and 0 <= g < n):
        raise ValueError(f"node ids {s}, {g} outside 0..{n - 1}")
    if s == g:
        return [[s]]
    dist = {s: 0}
    frontier = [s]
    while frontier:
        nxt = []
        for u in frontier:
            for v in rm.forward.get(u, ()):
                if v not in dist:
                    dist[v] = dist[u] + 1
                    nxt.append(v)
        frontier = nxt
    if g not in dist:
        raise NoPath(f"node {g} unreachable from node {s}")

    # Restrict to nodes that still reach g along strictly increasing levels.
    useful = {g}
    by_level = {}
    for v, d in dist.items():
        by_level.setdefault(d, []).append(v)
    for level in range(dist[g] - 1, -1, -1):
        for u in by_level.get(level, ()):
            for v in rm.forward.get(u, ()):
                if dist.get(v) == level + 1 and v in useful:
                    useful.add(u)
                    break

    paths = []
    stack = [s]

    def walk(u):
        if len(paths) >= cap:
            return
        if u == g:
            paths.append(list(stack))
            return
        for v in rm.forward.get(u, ()):
            if dist.get(v) == dist[u] + 1 and v in useful:
                stack.append(v)
                walk(v)
                stack.pop()
                if len(paths) >= cap:
                    return

    walk(s)
    return paths


def plan(rm: Roadmap, model: EncoderModel, obs_start: Observation,
         obs_goal: Observation, seed: int,
         cap: int = DEFAULT_PATH_CAP) -> Plan:
    """Map both observations into the roadmap and pick one shortest path.

    The path is chosen uniformly among all shortest candidates with the given
    seed; interior nodes decode to their representative states. Uncovered
    queries still plan from/to the nearest node, flagged via the covered
    fields.
    """
    z_start = encode(model, obs_start)
    z_goal = encode(model, obs_goal)
    s, s_cov = map_to_node(rm, z_start)
    g, g_cov = map_to_node(rm, z_goal)
    paths = all_shortest_paths(rm, s, g, cap)
    rng = np.random.default_rng(seed)
    idx = int(rng.integers(len(paths)))
    node_ids = paths[idx]
    return Plan(
        node_ids=node_ids,
        interior_states=[rm.nodes[i].representative for i in node_ids[1:-1]],
        start_obs=obs_start, goal_obs=obs_goal,
        length=len(node_ids) - 1,
        start_covered=s_cov, goal_covered=g_cov,
        n_candidates=len(paths), path_index=idx)


# ---------------------------------------------------------------------------
# Persistence and export
# ---------------------------------------------------------------------------

def save_roadmap(rm: Roadmap, path) -> None:
    record = {
        "version": ROADMAP_VERSION,
        "epsilon": rm.epsilon,
        "nodes": [{"id": n.node_id,
                   "centroid": [float(v) for v in n.centroid],
                   "representative_ref": n.representative_ref,
                   "members": list(n.members)} for n in rm.nodes],
        "edges": [{"a": e.a, "b": e.b,
                   "actions": [dict(a.to_dict(), src=src, dst=dst)
                               for a, (src, dst)
                               in zip(e.actions, e.directions)]}
                  for e in rm.edges],
    }
    with open(path, "w", encoding="ascii") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def load_roadmap(path, bank) -> Roadmap:
    """Rebuild a roadmap; representative states resolve through the bank."""
    with open(path, "r", encoding="ascii") as fh:
        try:
            record = json.loads(fh.read())
        except json.JSONDecodeError as e:
            raise FormatError(f"{path}: offset {e.pos}: {e.msg}") from e
    version = record.get("version")
    if version != ROADMAP_VERSION:
        raise FormatError(f"{path}: unsupported roadmap version {version!r}, "
                          f"expected {ROADMAP_VERSION}")
    nodes = []
    for nd in record["nodes"]:
        ref = int(nd["representative_ref"])
        if ref >= len(bank):
            raise FormatError(
                f"{path}: representative_ref {ref} outside bank of "
                f"{len(bank)} states")
        nodes.append(RoadmapNode(
            node_id=int(nd["id"]),
            centroid=np.asarray(nd["centroid"], dtype=np.float64),
            representative_ref=ref, representative=bank[ref][1],
            members=[int(m) for m in nd["members"]]))
    edges = []
    forward = {}
    for ed in record["edges"]:
        actions = [FoldAction(a["grasp"], a["place"]) for a in ed["actions"]]
        directions = [(int(a["src"]), int(a["dst"])) for a in ed["actions"]]
        edges.append(RoadmapEdge(a=int(ed["a"]), b=int(ed["b"]),
                                 actions=actions, directions=directions))
        for src, dst in directions:
            forward.setdefault(src, set()).add(dst)
    forward = {u: sorted(vs) for u, vs in forward.items()}
    return Roadmap(nodes=nodes, edges=edges,
                   epsilon=float(record["epsilon"]), forward=forward)


def to_dot(rm: Roadmap) -> str:
    """Graphviz text of the node/edge structure."""
    lines = ["graph roadmap {"]
    for n in rm.nodes:
        lines.append(f'  {n.node_id} [label="{n.node_id} '
                     f'({len(n.members)} states)"];')
    for e in rm.edges:
        lines.append(f'  {e.a} -- {e.b} [label="{len(e.actions)}"];')
    lines.append("}")
    return "\n".join(lines) + "\n"
