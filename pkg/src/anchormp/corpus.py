"""Synthetic text-rich graphs with planted class signal in text and structure.

Each node gets a class drawn uniformly; its text is filler words (with a
mild per-class stylistic skew, so compression stays non-trivial) into which
the class keyword is planted with probability `self_signal`. Edges follow a
two-probability block model calibrated so the empirical same-class edge
fraction lands near `homophily`. Labels equal the class keywords, so a
generative classifier answers with the keyword itself.

Nodes lacking their keyword can only be recovered through neighbors, which
is what makes propagation measurably useful on this corpus.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .errors import AuditError, GenerationError, ValidationError
from .graphdata import NodeRecord, TextRichGraph, build_graph

LABEL_WORDS = ["amber", "basalt", "cedar", "delta", "ember", "fjord",
               "garnet", "heron", "indigo", "jasper", "kelp", "lumen"]

FILLER_WORDS = ["the", "misty", "river", "stone", "cloud", "quiet", "garden",
                "light", "old", "wooden", "bridge", "meadow", "soft", "rain",
                "window", "green", "hill", "morning", "dust", "leaf", "pale",
                "wall", "field", "moss"]


@dataclass(frozen=True)
class CorpusSpec:
    n_nodes: int = 300
    n_classes: int = 4
    homophily: float = 0.85
    self_signal: float = 0.6
    text_len: tuple[int, int] = (16, 48)    # byte-token length range
    mean_degree: float = 4.0
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.homophily <= 1.0 and 0.0 <= self.self_signal <= 1.0):
            raise ValidationError("probabilities must lie in [0, 1]")
        if self.n_classes < 2:
            raise ValidationError("need at least 2 classes")
        if self.n_classes > len(LABEL_WORDS):
            raise ValidationError(f"at most {len(LABEL_WORDS)} classes supported")
        if self.text_len[0] < 4 or self.text_len[0] > self.text_len[1]:
            raise ValidationError(f"bad text_len range {self.text_len}")
        if self.n_nodes < self.n_classes:
            raise ValidationError("need at least one node per class")

    def labels(self) -> list[str]:
        return LABEL_WORDS[:self.n_classes]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["text_len"] = list(self.text_len)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusSpec":
        d = dict(d)
        if "text_len" in d:
            d["text_len"] = tuple(d["text_len"])
        return cls(**d)


def _node_text(rng: np.random.Generator, spec: CorpusSpec, cls: int) -> str:
    """Filler words up to a drawn byte budget; keyword planted with self_signal."""
    lo, hi = spec.text_len
    target = int(rng.integers(lo, hi + 1))
    keyword = spec.labels()[cls]
    # per-class skew: each class prefers a rotating subset of the filler pool
    weights = np.ones(len(FILLER_WORDS))
    weights[cls::spec.n_classes] = 2.0
    weights /= weights.sum()
    words: list[str] = []
    if rng.random() < spec.self_signal:
        words.append(keyword)
    length = sum(len(w) for w in words) + max(0, len(words) - 1)
    while length < target:
        w = FILLER_WORDS[int(rng.choice(len(FILLER_WORDS), p=weights))]
        extra = len(w) + (1 if words else 0)
        if length + extra > hi:
            if length >= lo:
                break
            continue  # word too long to fit under hi; draw a shorter one
        words.append(w)
        length += extra
    perm = rng.permutation(len(words))
    return " ".join(words[i] for i in perm)


def _sample_edges(rng: np.random.Generator, spec: CorpusSpec,
                  classes: np.ndarray) -> list[tuple[int, int]]:
    n = spec.n_nodes
    same = classes[:, None] == classes[None, :]
    iu, ju = np.triu_indices(n, k=1)
    same_u = same[iu, ju]
    s_pairs = int(same_u.sum())
    d_pairs = same_u.size - s_pairs
    expected = spec.mean_degree * n / 2.0
    if s_pairs == 0 or d_pairs == 0:
        raise GenerationError("class assignment left no same- or cross-class pairs")
    p_in = spec.homophily * expected / s_pairs
    p_out = (1.0 - spec.homophily) * expected / d_pairs
    if p_in > 1.0 or p_out > 1.0:
        raise GenerationError(
            f"infeasible degree/homophily: p_in={p_in:.3f}, p_out={p_out:.3f}")
    draw = rng.random(same_u.size)
    keep = draw < np.where(same_u, p_in, p_out)
    return [(int(iu[k]), int(ju[k])) for k in np.flatnonzero(keep)]


def measured_homophily(graph: TextRichGraph) -> float:
    edges = graph.edges()
    if not edges:
        return 0.0
    same = sum(1 for u, v in edges
               if graph.nodes[u].label == graph.nodes[v].label)
    return same / len(edges)


def generate(spec: CorpusSpec) -> tuple[TextRichGraph, dict[str, str]]:
    """Build the graph and a 7:1:2 train/val/test split, deterministically."""
    rng = np.random.default_rng(spec.seed)
    width = len(str(spec.n_nodes - 1))
    ids = [f"n{idx:0{width}d}" for idx in range(spec.n_nodes)]
    classes = rng.integers(0, spec.n_classes, size=spec.n_nodes)
    labels = spec.labels()
    nodes = [NodeRecord(id=ids[i], text=_node_text(rng, spec, int(classes[i])),
                        label=labels[int(classes[i])])
             for i in range(spec.n_nodes)]

    graph = None
    for _ in range(5):
        edge_idx = _sample_edges(rng, spec, classes)
        candidate = build_graph(nodes, [(ids[u], ids[v]) for u, v in edge_idx])
        if not edge_idx:
            continue
        if abs(measured_homophily(candidate) - spec.homophily) <= 0.05:
            graph = candidate
            break
    if graph is None:
        raise GenerationError(
            "could not hit the homophily target within 0.05 after 5 attempts")

    perm = rng.permutation(spec.n_nodes)
    n_train = round(0.7 * spec.n_nodes)
    n_val = round(0.1 * spec.n_nodes)
    split = {}
    for rank, idx in enumerate(perm.tolist()):
        if rank < n_train:
            split[ids[idx]] = "train"
        elif rank < n_train + n_val:
            split[ids[idx]] = "val"
        else:
            split[ids[idx]] = "test"
    return graph, split


def save_split(split: dict[str, str], path: str | Path) -> None:
    Path(path).write_text(json.dumps(split, sort_keys=True, indent=0) + "\n",
                          encoding="utf-8")


def load_split(path: str | Path) -> dict[str, str]:
    split = json.loads(Path(path).read_text(encoding="utf-8"))
    bad = {v for v in split.values()} - {"train", "val", "test"}
    if bad:
        raise ValidationError(f"split file contains unknown partitions {sorted(bad)}")
    return split


def split_nodes(split: dict[str, str], part: str) -> list[str]:
    return sorted(nid for nid, p in split.items() if p == part)


def has_self_signal(node: NodeRecord) -> bool:
    return node.label is not None and node.label in node.text.split()


def majority_neighbor_class(graph: TextRichGraph, node_id: str) -> str | None:
    nbrs = graph.adjacency[node_id]
    if not nbrs:
        return None
    counts = Counter(graph.nodes[v].label for v in nbrs)
    top = max(counts.values())
    return sorted(lab for lab, c in counts.items() if c == top)[0]


def signal_audit(graph: TextRichGraph) -> dict:
    """Per-node signal presence and neighbor-majority agreement, plus totals."""
    per_node = {}
    n_signal = 0
    n_deg = 0
    n_nbr_correct = 0
    for nid in sorted(graph.nodes):
        rec = graph.nodes[nid]
        if rec.label is None:
            raise AuditError(f"node {nid!r} has no label")
        signal = has_self_signal(rec)
        nbr_cls = majority_neighbor_class(graph, nid)
        per_node[nid] = {"has_self_signal": signal, "majority_neighbor_class": nbr_cls}
        n_signal += signal
        if nbr_cls is not None:
            n_deg += 1
            n_nbr_correct += (nbr_cls == rec.label)
    return {
        "per_node": per_node,
        "n_nodes": len(per_node),
        "self_signal_fraction": n_signal / max(1, len(per_node)),
        "neighbor_majority_accuracy": n_nbr_correct / max(1, n_deg),
        "n_degree_positive": n_deg,
    }
