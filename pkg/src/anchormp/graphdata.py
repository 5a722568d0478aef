"""Text-rich graph model: tokenizer, JSON-lines IO, ego sampling, transforms.

The tokenizer is byte-level and lossless: ids 0..2 are reserved specials
(pad, end-of-sequence, summary placeholder) and ids 3..258 map the 256 byte
values, so ordinary text never produces a reserved id.

Graphs are undirected, self-loop free, with symmetric adjacency. The graph
file format is one JSON object per line:

    {"node": {"id": "a", "text": "...", "label": "x"}}
    {"edge": {"src": "a", "dst": "b", "label": "optional"}}
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ParseError, ValidationError

log = logging.getLogger(__name__)

PAD_ID = 0
EOS_ID = 1
SUMMARY_ID = 2
N_SPECIALS = 3
VOCAB_SIZE = N_SPECIALS + 256

PROMPT_NODE_ID = "__prompt__"


def tokenize_bytes(data: bytes) -> list[int]:
    return [N_SPECIALS + b for b in data]


def detokenize_bytes(ids) -> bytes:
    return bytes(i - N_SPECIALS for i in ids if i >= N_SPECIALS)


def tokenize(text: str) -> list[int]:
    """Byte-level ids offset past the reserved specials; lossless."""
    return tokenize_bytes(text.encode("utf-8"))


def detokenize(ids) -> str:
    """Inverse of tokenize; reserved ids are dropped."""
    return detokenize_bytes(ids).decode("utf-8", errors="replace")


@dataclass
class NodeRecord:
    id: str
    text: str
    label: str | None = None
    tokens: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not self.tokens:
            self.tokens = tokenize(self.text)

    @property
    def token_len(self) -> int:
        return len(self.tokens)


@dataclass
class TextRichGraph:
    nodes: dict[str, NodeRecord]
    adjacency: dict[str, list[str]]          # sorted neighbor ids
    undirected: bool = True
    edge_labels: dict[tuple[str, str], str] = field(default_factory=dict)

    def neighbors(self, node_id: str) -> list[str]:
        if node_id not in self.nodes:
            raise KeyError(f"unknown node {node_id!r}")
        return self.adjacency[node_id]

    def edge_count(self) -> int:
        return sum(len(v) for v in self.adjacency.values()) // 2

    def edges(self) -> list[tuple[str, str]]:
        out = []
        for u in sorted(self.adjacency):
            for v in self.adjacency[u]:
                if u < v:
                    out.append((u, v))
        return out

    def validate(self) -> None:
        for u, nbrs in self.adjacency.items():
            if u not in self.nodes:
                raise ValidationError(f"adjacency lists unknown node {u!r}")
            for v in nbrs:
                if v == u:
                    raise ValidationError(f"self-loop on node {u!r}")
                if v not in self.nodes:
                    raise ValidationError(f"dangling edge {u!r} -> {v!r}")
                if self.undirected and u not in self.adjacency.get(v, []):
                    raise ValidationError(f"asymmetric edge {u!r} -> {v!r}")
            if nbrs != sorted(set(nbrs)):
                raise ValidationError(f"neighbor list of {u!r} is not sorted/unique")


def build_graph(nodes: list[NodeRecord],
                edges: list[tuple[str, str]] | list[tuple[str, str, str | None]],
                undirected: bool = True) -> TextRichGraph:
    """Assemble and validate a graph; directed edge input is symmetrized."""
    node_map = {}
    for rec in nodes:
        if rec.id in node_map:
            raise ValidationError(f"duplicate node id {rec.id!r}")
        node_map[rec.id] = rec
    adj: dict[str, set[str]] = {nid: set() for nid in node_map}
    labels: dict[tuple[str, str], str] = {}
    for edge in edges:
        u, v = edge[0], edge[1]
        lab = edge[2] if len(edge) > 2 else None
        if u not in node_map or v not in node_map:
            raise ValidationError(f"edge ({u!r}, {v!r}) references a missing node")
        if u == v:
            raise ValidationError(f"self-loop on node {u!r}")
        adj[u].add(v)
        adj[v].add(u)
        if lab is not None:
            labels[(min(u, v), max(u, v))] = lab
    g = TextRichGraph(
        nodes=node_map,
        adjacency={nid: sorted(nbrs) for nid, nbrs in adj.items()},
        undirected=undirected,
        edge_labels=labels,
    )
    g.validate()
    return g


def load_graph(path: str | Path) -> TextRichGraph:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"graph file {path} does not exist")
    nodes: list[NodeRecord] = []
    edges: list[tuple[str, str, str | None]] = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            if "node" in obj:
                rec = obj["node"]
                if "id" not in rec or "text" not in rec:
                    raise ParseError(f"{path}:{lineno}: node record needs id and text")
                nodes.append(NodeRecord(id=str(rec["id"]), text=str(rec["text"]),
                                        label=rec.get("label")))
            elif "edge" in obj:
                rec = obj["edge"]
                if "src" not in rec or "dst" not in rec:
                    raise ParseError(f"{path}:{lineno}: edge record needs src and dst")
                edges.append((str(rec["src"]), str(rec["dst"]), rec.get("label")))
            else:
                raise ParseError(f"{path}:{lineno}: expected a node or edge record")
    return build_graph(nodes, edges)


def save_graph(graph: TextRichGraph, path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for nid in sorted(graph.nodes):
            rec = graph.nodes[nid]
            obj = {"id": rec.id, "text": rec.text}
            if rec.label is not None:
                obj["label"] = rec.label
            fh.write(json.dumps({"node": obj}, sort_keys=True) + "\n")
        for u, v in graph.edges():
            obj = {"src": u, "dst": v}
            if (u, v) in graph.edge_labels:
                obj["label"] = graph.edge_labels[(u, v)]
            fh.write(json.dumps({"edge": obj}, sort_keys=True) + "\n")


# --- ego subgraphs ----------------------------------------------------------


@dataclass
class EgoSubgraph:
    """Hop-limited neighborhood of a target node.

    `order` lists member ids in insertion order (target first). `lists` maps
    each node id (members and, when present, the prompt node) to the neighbor
    sequence consumed during propagation; after a cross-node shuffle these
    lists are a directed view and need not be symmetric.
    """
    target: str
    order: list[str]
    records: dict[str, NodeRecord]
    lists: dict[str, list[str]]
    prompt: NodeRecord | None = None

    @property
    def members(self) -> list[str]:
        return list(self.order)

    def all_ids(self) -> list[str]:
        return self.order + ([self.prompt.id] if self.prompt else [])

    def record(self, node_id: str) -> NodeRecord:
        if self.prompt is not None and node_id == self.prompt.id:
            return self.prompt
        return self.records[node_id]

    def degree_multiset(self) -> list[int]:
        return sorted(len(self.lists[n]) for n in self.order)


def neighborhood(graph: TextRichGraph, target: str, hops: int, max_size: int,
                 seed: int, query: str | None = None) -> EgoSubgraph:
    """Breadth-first expansion with seeded uniform frontier subsampling.

    When a hop's frontier would push the member count past `max_size`, the
    frontier is subsampled uniformly with `numpy.random.default_rng(seed)`.
    With `query` given, a prompt node carrying it is appended and connected
    to every member.
    """
    if target not in graph.nodes:
        raise KeyError(f"unknown target node {target!r}")
    if hops < 1 or max_size < 1:
        raise ValidationError("hops and max_size must be >= 1")
    rng = np.random.default_rng(seed)
    members: list[str] = [target]
    seen = {target}
    frontier = [target]
    for _ in range(hops):
        candidates = sorted({nbr for node in frontier
                             for nbr in graph.adjacency[node]} - seen)
        room = max_size - len(members)
        if room <= 0 or not candidates:
            break
        if len(candidates) > room:
            pick = rng.choice(len(candidates), size=room, replace=False)
            chosen = [candidates[i] for i in sorted(pick.tolist())]
        else:
            chosen = candidates
        members.extend(chosen)
        seen.update(chosen)
        frontier = chosen
    member_set = set(members)
    lists = {m: [v for v in graph.adjacency[m] if v in member_set] for m in members}
    records = {m: graph.nodes[m] for m in members}
    prompt = None
    if query is not None:
        prompt = NodeRecord(id=PROMPT_NODE_ID, text=query)
        for m in members:
            lists[m] = lists[m] + [PROMPT_NODE_ID]
        lists[PROMPT_NODE_ID] = list(members)
    return EgoSubgraph(target=target, order=members, records=records,
                       lists=lists, prompt=prompt)


def ego_subgraph(graph: TextRichGraph, target: str, hops: int, max_size: int,
                 seed: int, query: str = "") -> EgoSubgraph:
    """Neighborhood plus a prompt node connected to all members."""
    return neighborhood(graph, target, hops, max_size, seed, query=query)


# --- transforms -------------------------------------------------------------


def reify_edges(graph: TextRichGraph) -> TextRichGraph:
    """Replace each labeled edge (u, v, text) by a node carrying the text.

    The direct edge disappears; the new node connects to both endpoints, so
    E edges become E new nodes and 2E edges.
    """
    for (u, v) in graph.edges():
        if (u, v) not in graph.edge_labels:
            raise ValidationError(f"edge ({u!r}, {v!r}) has no label to reify")
    nodes = [replace(rec, tokens=list(rec.tokens)) for rec in graph.nodes.values()]
    edges: list[tuple[str, str]] = []
    for idx, (u, v) in enumerate(graph.edges()):
        mid = f"edge#{idx}"
        while mid in graph.nodes:
            mid = "_" + mid
        nodes.append(NodeRecord(id=mid, text=graph.edge_labels[(u, v)]))
        edges.append((u, mid))
        edges.append((mid, v))
    return build_graph(nodes, edges)


def shuffle_neighbor_order(sub: EgoSubgraph, seed: int) -> EgoSubgraph:
    """Permute every per-node neighbor list; vertex and edge sets unchanged."""
    rng = np.random.default_rng(seed)
    lists = {}
    for nid in sub.order + ([sub.prompt.id] if sub.prompt else []):
        lst = sub.lists[nid]
        perm = rng.permutation(len(lst))
        lists[nid] = [lst[i] for i in perm]
    return EgoSubgraph(target=sub.target, order=list(sub.order),
                       records=sub.records, lists=lists, prompt=sub.prompt)


def cross_node_shuffle(sub: EgoSubgraph, seed: int) -> EgoSubgraph:
    """Reassign neighbor lists between members by a seeded permutation.

    Member i receives member perm(i)'s list; the prompt node keeps its own.
    Topology is broken while the degree multiset is preserved; the result is
    a directed propagation view.
    """
    if len(sub.order) < 2:
        log.warning("cross_node_shuffle on %d member(s): no-op", len(sub.order))
        return sub
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(sub.order))
    lists = {m: list(sub.lists[sub.order[perm[i]]]) for i, m in enumerate(sub.order)}
    if sub.prompt is not None:
        lists[sub.prompt.id] = list(sub.lists[sub.prompt.id])
    return EgoSubgraph(target=sub.target, order=list(sub.order),
                       records=sub.records, lists=lists, prompt=sub.prompt)
