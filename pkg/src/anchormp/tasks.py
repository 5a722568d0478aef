"""Classification-as-generation plumbing: prompts, samples, label matching."""

from __future__ import annotations

import zlib

import numpy as np

from . import engine as E
from .decoder import DecoderConfig
from .engine import EngineConfig
from .graphdata import EOS_ID, EgoSubgraph, TextRichGraph, ego_subgraph, tokenize

MAX_ANSWER_TOKENS = 16


def classify_query(labels: list[str]) -> str:
    """Multiple-choice question listing the label options."""
    return f"category? options: {', '.join(labels)}. answer:"


def answer_text(label: str) -> str:
    return " " + label


def answer_tokens(label: str) -> list[int]:
    return tokenize(answer_text(label)) + [EOS_ID]


def normalize_label(text: str) -> str:
    return text.strip().casefold()


def node_seed(base_seed: int, node_id: str) -> list[int]:
    """Stable per-node RNG seed sequence (independent of process hashing)."""
    return [base_seed, zlib.crc32(node_id.encode("utf-8"))]


def build_classify_sample(graph: TextRichGraph, node_id: str, labels: list[str],
                          ecfg: EngineConfig, seed: int
                          ) -> tuple[EgoSubgraph, list[int], list[int]]:
    """(subgraph with prompt node, query tokens, answer tokens) for one node."""
    query = classify_query(labels)
    sub = ego_subgraph(graph, node_id, hops=ecfg.hops, max_size=ecfg.max_size,
                       seed=node_seed(seed, node_id), query=query)
    label = graph.nodes[node_id].label
    if label is None:
        raise ValueError(f"node {node_id!r} has no label")
    return sub, tokenize(query), answer_tokens(label)


def predict_label(params, dcfg: DecoderConfig, ecfg: EngineConfig, sub: EgoSubgraph,
                  query_tokens: list[int], order_seed: int = 0,
                  workers: int = 1) -> str:
    """Full pipeline for one subgraph: propagate, materialize target, generate."""
    memory = E.propagate(params, dcfg, sub, ecfg, order_seed=order_seed,
                         workers=workers)
    kv = E.materialize_kv(params, dcfg, memory, [sub.target])
    out = E.answer_generate(params, dcfg, kv, query_tokens, MAX_ANSWER_TOKENS)
    return normalize_label(out)
