"""Message-passing core: compression, anchored rounds, KV materialization, answers.

Per node i with token length L, the summary state is n = ceil(ratio * L)
vectors of width d_model. Round 0 compresses the node's own text; each
later round runs one decoder forward per node over

    [ neighbor summaries | own raw tokens | own summaries | fresh placeholders ]

and reads the new summary state off the placeholder positions (the raw
token segment is dropped in compact mode). States live in a memory table
keyed by round; round r+1 is written only after every node of round r+1
has been computed, so results are independent of per-node processing order.

KV caches are materialized only from final (or explicitly requested) round
states: one forward per node over its injected summary vectors, nodes laid
out at disjoint position offsets, caches concatenated in member order.
"""

from __future__ import annotations

import logging
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, asdict
from fractions import Fraction

import numpy as np

from . import decoder as D
from . import tensor as T
from .container import read_container, write_container
from .decoder import DecoderConfig, InputItem, KVCache
from .errors import CapacityError, ContractError, ValidationError
from .graphdata import EgoSubgraph
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EngineConfig:
    """Propagation settings (compression ratio, round count, ablations)."""
    ratio: float = 0.1
    rounds: int = 2
    compact: bool = False
    neighbor_order: str = "as-stored"   # or "seeded-shuffle"
    hops: int = 2
    max_size: int = 20

    def __post_init__(self):
        if not (0.0 < self.ratio <= 1.0):
            raise ValidationError(f"ratio must lie in (0, 1], got {self.ratio}")
        if self.rounds < 0:
            raise ValidationError("rounds must be >= 0")
        if self.neighbor_order not in ("as-stored", "seeded-shuffle"):
            raise ValidationError(f"unknown neighbor_order {self.neighbor_order!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EngineConfig":
        return cls(**d)


def summary_count(ratio: float, token_len: int) -> int:
    """n = ceil(ratio * L) computed in exact decimal arithmetic.

    float ceil would give ceil(0.1 * 40) == 5 because 0.1*40 rounds up;
    Fraction(str(ratio)) keeps the intended decimal value exact.
    """
    if token_len < 1:
        raise ContractError("token length must be >= 1 for compression")
    frac = Fraction(str(ratio)) * token_len
    return max(1, -((-frac.numerator) // frac.denominator))


@dataclass
class SummaryState:
    node_id: str
    round: int
    vectors: Tensor          # [n x d_model]

    @property
    def count(self) -> int:
        return self.vectors.shape[0]


class MemoryTable:
    """round -> node id -> SummaryState; the medium of propagation."""

    def __init__(self):
        self._rounds: dict[int, dict[str, SummaryState]] = {}

    def put(self, state: SummaryState) -> None:
        self._rounds.setdefault(state.round, {})[state.node_id] = state

    def get(self, round_idx: int, node_id: str) -> SummaryState:
        try:
            return self._rounds[round_idx][node_id]
        except KeyError:
            raise ContractError(
                f"memory table has no state for node {node_id!r} at round {round_idx}")

    def round_states(self, round_idx: int) -> dict[str, SummaryState]:
        if round_idx not in self._rounds:
            raise ContractError(f"round {round_idx} not materialized")
        return self._rounds[round_idx]

    def rounds(self) -> list[int]:
        return sorted(self._rounds)

    @property
    def last_round(self) -> int:
        if not self._rounds:
            raise ContractError("memory table is empty")
        return max(self._rounds)

    def dump(self, path) -> None:
        tensors = {}
        for r, states in self._rounds.items():
            for nid, st in states.items():
                tensors[f"round{r}/{nid}"] = st.vectors.array
        write_container(path, "memory-dump", {"rounds": self.rounds()}, tensors)

    @classmethod
    def load(cls, path) -> "MemoryTable":
        _, tensors = read_container(path, expect_kind="memory-dump")
        table = cls()
        for name, arr in tensors.items():
            rpart, nid = name.split("/", 1)
            table.put(SummaryState(node_id=nid, round=int(rpart[len("round"):]),
                                   vectors=Tensor(arr)))
        return table


# --- stage 1: compression ---------------------------------------------------


def init_summaries(params, dcfg: DecoderConfig, node, ratio: float) -> SummaryState:
    """Round-0 state: hidden rows at n placeholder positions appended to the text."""
    if node.token_len < 1:
        raise ContractError(f"node {node.id!r} has empty text")
    n = summary_count(ratio, node.token_len)
    total = node.token_len + n
    if total > dcfg.max_positions:
        raise CapacityError(
            f"node {node.id!r}: compression needs {total} positions "
            f"(max {dcfg.max_positions})")
    items = D.token_items(node.tokens) + D.token_items(
        [dcfg.summary_token_id] * n, start=node.token_len)
    hidden, _ = D.forward(params, dcfg, items, need_logits=False)
    vectors = T.slice_rows(hidden, list(range(node.token_len, total)))
    return SummaryState(node_id=node.id, round=0, vectors=vectors)


# --- stage 2: propagation ---------------------------------------------------


def _neighbor_sequence(sub: EgoSubgraph, node_id: str, cfg: EngineConfig,
                       round_idx: int, order_seed: int) -> list[str]:
    nbrs = sub.lists[node_id]
    if cfg.neighbor_order == "seeded-shuffle" and len(nbrs) > 1:
        key = zlib.crc32(node_id.encode("utf-8"))  # process-independent
        rng = np.random.default_rng([order_seed, round_idx, key])
        nbrs = [nbrs[i] for i in rng.permutation(len(nbrs))]
    return list(nbrs)


def assemble_input(sub: EgoSubgraph, node_id: str, memory: MemoryTable,
                   round_idx: int, cfg: EngineConfig, dcfg: DecoderConfig,
                   order_seed: int = 0):
    """Eq-style round input for one node.

    Returns (items, injected matrix, placeholder positions). Layout:
    neighbor summary vectors in list order, the node's raw tokens (skipped
    in compact mode), the node's own summary vectors, then fresh summary
    placeholders whose hidden states become the next state.
    """
    node = sub.record(node_id)
    self_state = memory.get(round_idx, node_id)
    nbr_states = [memory.get(round_idx, j)
                  for j in _neighbor_sequence(sub, node_id, cfg, round_idx, order_seed)]
    inj_parts = [st.vectors for st in nbr_states] + [self_state.vectors]

    items: list[InputItem] = []
    pos = 0
    for st in nbr_states:
        for r in range(st.count):
            items.append(InputItem(position=pos, vector=st.vectors.array[r]))
            pos += 1
    if not cfg.compact:
        items.extend(D.token_items(node.tokens, start=pos))
        pos += node.token_len
    for r in range(self_state.count):
        items.append(InputItem(position=pos, vector=self_state.vectors.array[r]))
        pos += 1
    placeholders = list(range(pos, pos + self_state.count))
    items.extend(D.token_items([dcfg.summary_token_id] * self_state.count, start=pos))
    if len(items) > dcfg.max_positions:
        raise CapacityError(
            f"node {node_id!r}: round {round_idx + 1} input of {len(items)} items "
            f"exceeds max_positions {dcfg.max_positions}")
    injected = T.concat_rows(inj_parts)
    return items, injected, placeholders


def node_round_state(params, dcfg: DecoderConfig, sub: EgoSubgraph, node_id: str,
                     memory: MemoryTable, round_idx: int, cfg: EngineConfig,
                     order_seed: int = 0) -> SummaryState:
    """One node's next-round state: a single forward over its assembled input."""
    items, injected, slots = assemble_input(
        sub, node_id, memory, round_idx, cfg, dcfg, order_seed)
    hidden, _ = D.forward(params, dcfg, items, injected=injected,
                          need_logits=False)
    return SummaryState(node_id=node_id, round=round_idx + 1,
                        vectors=T.slice_rows(hidden, slots))


def mp_round(params, dcfg: DecoderConfig, sub: EgoSubgraph, memory: MemoryTable,
             round_idx: int, cfg: EngineConfig, order_seed: int = 0,
             workers: int = 1) -> None:
    """One synchronous round: all nodes read round r, then round r+1 is written."""
    ids = sub.all_ids()

    def compute(node_id: str) -> SummaryState:
        return node_round_state(params, dcfg, sub, node_id, memory, round_idx,
                                cfg, order_seed)

    if workers > 1 and T.active_tape() is None:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            states = list(pool.map(compute, ids))
    else:
        states = [compute(nid) for nid in ids]
    for st in states:   # barrier: all forwards done before any write
        memory.put(st)


def propagate(params, dcfg: DecoderConfig, sub: EgoSubgraph, cfg: EngineConfig,
              order_seed: int = 0, workers: int = 1,
              rounds: int | None = None) -> MemoryTable:
    """Round-0 compression for every node, then propagation rounds.

    `rounds` overrides cfg.rounds (used to stop early when the caller will
    finish the last round itself).
    """
    memory = MemoryTable()
    for nid in sub.all_ids():
        memory.put(init_summaries(params, dcfg, sub.record(nid), cfg.ratio))
    n_rounds = cfg.rounds if rounds is None else rounds
    for r in range(n_rounds):
        mp_round(params, dcfg, sub, memory, r, cfg, order_seed, workers)
    return memory


# --- stage 3: materialization and answers -----------------------------------


def materialize_kv(params, dcfg: DecoderConfig, memory: MemoryTable,
                   node_ids: list[str], round_idx: int | None = None) -> KVCache:
    """KV rows over the listed nodes' summary states at the given round.

    One node: the node-level cache. Several nodes: their caches concatenated
    in the given order, each node's forward laid out at a disjoint position
    offset so concatenations from separate forwards stay distinguishable.
    """
    if round_idx is None:
        round_idx = memory.last_round
    caches = []
    offset = 0
    for nid in node_ids:
        state = memory.get(round_idx, nid)
        n = state.count
        if offset + n > dcfg.max_positions:
            raise CapacityError(f"cache of {offset + n} rows exceeds max_positions")
        items = [InputItem(position=offset + r, vector=state.vectors.array[r])
                 for r in range(n)]
        caches.append(D.extract_kv(params, dcfg, items, list(range(n)),
                                   injected=state.vectors))
        offset += n
    return D.concat_caches(caches, dcfg.n_layers, dcfg.d_model)


def answer_loss(params, dcfg: DecoderConfig, kv: KVCache,
                query: list[int], answer: list[int]) -> Tensor:
    """Teacher-forced mean cross-entropy of the answer given cache plus query."""
    if not answer:
        raise ContractError("answer must be non-empty")
    if not query:
        raise ContractError("query must be non-empty")
    seq = list(query) + list(answer[:-1])
    start = kv.next_position
    if start + len(seq) > dcfg.max_positions:
        raise CapacityError(
            f"query+answer of {len(seq)} items at offset {start} "
            f"exceeds max_positions {dcfg.max_positions}")
    items = D.token_items(seq, start=start)
    hidden, _ = D.forward_with_context(params, dcfg, kv, items, need_logits=False)
    rows = list(range(len(query) - 1, len(seq)))
    logits = T.matmul(T.slice_rows(hidden, rows), params["out_proj"])
    return T.cross_entropy(logits, answer)


def answer_generate(params, dcfg: DecoderConfig, kv: KVCache,
                    query: list[int], max_new: int) -> str:
    """Greedy generation over the materialized context, detokenized."""
    from .graphdata import detokenize
    return detokenize(D.generate(params, dcfg, kv, query, max_new))


def round_peek(params, dcfg: DecoderConfig, memory: MemoryTable,
               node_ids: list[str], round_idx: int, query: list[int],
               max_new: int) -> str:
    """Generate from an intermediate round's states (inspection only)."""
    if round_idx not in memory.rounds():
        raise ContractError(f"round {round_idx} not computed (have {memory.rounds()})")
    kv = materialize_kv(params, dcfg, memory, node_ids, round_idx=round_idx)
    return answer_generate(params, dcfg, kv, query, max_new)
