"""Two-task reconstruction pre-training, generative fine-tuning, optimizer.

Pre-training draws a node uniformly from the train split and one of two
tasks with probability 1/2 each: reconstruct the node's text from the KV of
its own round-0 summaries (self), or from its neighbors' round-0 summaries
(nbr; degree-0 nodes fall back to self). Fine-tuning runs the full pipeline
(compress, propagate, materialize, answer loss) and backpropagates through
all of it; early stopping watches validation accuracy.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import decoder as D
from . import engine as E
from . import tensor as T
from . import tasks
from .decoder import DecoderConfig
from .engine import EngineConfig, MemoryTable
from .errors import ContractError, NonFiniteError
from .graphdata import EOS_ID, TextRichGraph
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "pretrain"              # pretrain | finetune
    steps: int = 1500                    # optimizer steps (pretrain) / cap (finetune)
    batch_nodes: int = 8
    learning_rate: float = 3e-4
    seed: int = 0
    freeze_mask: frozenset[str] = field(default_factory=frozenset)
    early_stop_patience: int = 3
    warmup_frac: float = 0.05
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    max_epochs: int = 12                 # finetune epoch cap
    grad_scope: str = "last"             # "full" | "last": backprop depth through rounds

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ContractError("learning_rate must be positive")
        if self.steps < 1:
            raise ContractError("steps must be >= 1")
        if self.stage not in ("pretrain", "finetune"):
            raise ContractError(f"unknown stage {self.stage!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["freeze_mask"] = sorted(self.freeze_mask)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["freeze_mask"] = frozenset(d.get("freeze_mask", ()))
        return cls(**d)


class AdamW:
    """Adam with decoupled weight decay and linear warmup.

    Weight decay touches only matrices (embeddings, projections); vectors
    (gains, biases) are exempt. Frozen parameters are never updated, even
    when gradients reach them.
    """

    def __init__(self, params: dict[str, Tensor], cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.t = 0
        self.warmup_steps = max(1, int(cfg.warmup_frac * cfg.steps))
        self.m = {k: np.zeros_like(p.array) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.array) for k, p in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        lr = self.cfg.learning_rate * min(1.0, self.t / self.warmup_steps)
        b1, b2 = self.cfg.beta1, self.cfg.beta2
        for name, g in grads.items():
            if name in self.cfg.freeze_mask:
                continue
            p = self.params[name]
            m = self.m[name] = b1 * self.m[name] + (1 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            if p.array.ndim == 2 and self.cfg.weight_decay:
                p.array -= lr * self.cfg.weight_decay * p.array
            p.array -= lr * mhat / (np.sqrt(vhat) + 1e-8)

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {"opt.t": np.asarray([float(self.t)])}
        for k in self.params:
            out[f"opt.m.{k}"] = self.m[k]
            out[f"opt.v.{k}"] = self.v[k]
        return out

    def load_state_tensors(self, extras: dict[str, np.ndarray]) -> None:
        self.t = int(extras["opt.t"][0])
        for k in self.params:
            self.m[k] = extras[f"opt.m.{k}"].copy()
            self.v[k] = extras[f"opt.v.{k}"].copy()


def sample_pretrain_task(rng: np.random.Generator) -> str:
    """Uniform draw between the two reconstruction tasks."""
    return "self_recon" if rng.random() < 0.5 else "nbr_recon"


def _recon_loss_from_states(params, dcfg: DecoderConfig, states, target_tokens):
    memory = MemoryTable()
    for st in states:
        memory.put(st)
    kv = E.materialize_kv(params, dcfg, memory, [st.node_id for st in states],
                          round_idx=0)
    # EOS doubles as the start sentinel: reconstruction has no natural query
    return E.answer_loss(params, dcfg, kv, [EOS_ID], target_tokens)


def self_recon_loss(params, dcfg: DecoderConfig, node, ratio: float) -> Tensor:
    """Reconstruct a node's text from the KV of its own round-0 summaries."""
    state = E.init_summaries(params, dcfg, node, ratio)
    return _recon_loss_from_states(params, dcfg, [state], node.tokens)


def nbr_recon_loss(params, dcfg: DecoderConfig, graph: TextRichGraph, node_id: str,
                   ratio: float, scope: set[str] | None = None) -> Tensor:
    """Reconstruct a node's text from its neighbors' round-0 summaries.

    Neighbors outside `scope` (when given) are ignored; a node left with no
    neighbors falls back to self-reconstruction.
    """
    node = graph.nodes[node_id]
    nbrs = [v for v in graph.adjacency[node_id] if scope is None or v in scope]
    if not nbrs:
        return self_recon_loss(params, dcfg, node, ratio)
    states = [E.init_summaries(params, dcfg, graph.nodes[v], ratio) for v in nbrs]
    return _recon_loss_from_states(params, dcfg, states, node.tokens)


def _grad_names(params: dict[str, Tensor],
                grads: dict[Tensor, Tensor]) -> dict[str, np.ndarray]:
    by_id = {id(p): name for name, p in params.items()}
    return {by_id[id(t)]: g.array for t, g in grads.items() if id(t) in by_id}


class TrainLog:
    """JSON-lines log: one record per sample with wall-clock timing."""

    def __init__(self, path=None):
        self.path = path
        self._fh = open(path, "w", encoding="utf-8") if path else None

    def write(self, **record) -> None:
        if self._fh:
            self._fh.write(json.dumps(record, sort_keys=True) + "\n")
            self._fh.flush()

    def close(self) -> None:
        if self._fh:
            self._fh.close()


def pretrain(params, dcfg: DecoderConfig, ecfg: EngineConfig, tcfg: TrainConfig,
             graph: TextRichGraph, split: dict[str, str],
             log_path=None) -> list[float]:
    """Run the two-task recipe for tcfg.steps optimizer steps; returns step losses."""
    from .corpus import split_nodes
    rng = np.random.default_rng(tcfg.seed)
    train_ids = split_nodes(split, "train")
    if not train_ids:
        raise ContractError("empty train split")
    scope = set(train_ids)
    opt = AdamW(params, tcfg)
    tlog = TrainLog(log_path)
    losses = []
    try:
        for step in range(1, tcfg.steps + 1):
            acc: dict[str, np.ndarray] = {}
            batch_losses = []
            for _ in range(tcfg.batch_nodes):
                t0 = time.perf_counter()
                node_id = train_ids[int(rng.integers(len(train_ids)))]
                task = sample_pretrain_task(rng)
                with T.Tape():
                    if task == "self_recon":
                        loss = self_recon_loss(params, dcfg, graph.nodes[node_id],
                                               ecfg.ratio)
                    else:
                        loss = nbr_recon_loss(params, dcfg, graph, node_id,
                                              ecfg.ratio, scope=scope)
                    grads = T.backward(loss)
                for name, g in _grad_names(params, grads).items():
                    acc[name] = acc.get(name, 0.0) + g
                batch_losses.append(loss.item())
                tlog.write(step=step, stage="pretrain", task=task,
                           loss=loss.item(), wall_time=time.perf_counter() - t0)
            opt.step({k: v / tcfg.batch_nodes for k, v in acc.items()})
            losses.append(float(np.mean(batch_losses)))
            if step % 50 == 0 or step == 1:
                log.info("pretrain step %d/%d loss %.4f", step, tcfg.steps, losses[-1])
    finally:
        tlog.close()
    return losses


def finetune_step(params, dcfg: DecoderConfig, ecfg: EngineConfig, sample,
                  order_seed: int = 0,
                  grad_scope: str = "last") -> tuple[float, dict[str, np.ndarray]]:
    """Loss and parameter gradients for one (subgraph, query, answer) sample.

    grad_scope "full" backpropagates through every propagation round;
    "last" runs earlier rounds without the tape and differentiates only the
    target's final-round write plus materialization and the answer loss
    (the states feeding that write enter as constants). The forward values
    are identical either way; only the gradient support differs.
    """
    sub, query, answer = sample
    if grad_scope not in ("full", "last"):
        raise ContractError(f"unknown grad_scope {grad_scope!r}")
    try:
        with T.Tape():
            if ecfg.rounds == 0:
                # only the target's round-0 state feeds a node-level answer
                memory = E.MemoryTable()
                memory.put(E.init_summaries(params, dcfg, sub.record(sub.target),
                                            ecfg.ratio))
            elif grad_scope == "full":
                memory = E.propagate(params, dcfg, sub, ecfg, order_seed=order_seed)
            else:
                with T.no_tape():
                    memory = E.propagate(params, dcfg, sub, ecfg,
                                         order_seed=order_seed,
                                         rounds=ecfg.rounds - 1)
                # target's final-round write happens on the tape; the other
                # nodes' final states are never consumed by a node-level answer
                memory.put(E.node_round_state(params, dcfg, sub, sub.target,
                                              memory, ecfg.rounds - 1, ecfg,
                                              order_seed))
            kv = E.materialize_kv(params, dcfg, memory, [sub.target])
            loss = E.answer_loss(params, dcfg, kv, query, answer)
            grads = T.backward(loss)
    except NonFiniteError as exc:
        raise NonFiniteError(
            f"non-finite loss on target {sub.target!r} "
            f"({len(sub.order)} members, {ecfg.rounds} rounds): {exc}") from exc
    return loss.item(), _grad_names(params, grads)


def _val_accuracy(params, dcfg, ecfg, graph, labels, val_ids, seed) -> float:
    if not val_ids:
        return 0.0
    hit = 0
    for nid in val_ids:
        sub, q, _ = tasks.build_classify_sample(graph, nid, labels, ecfg, seed)
        pred = tasks.predict_label(params, dcfg, ecfg, sub, q, order_seed=seed)
        hit += (pred == tasks.normalize_label(graph.nodes[nid].label))
    return hit / len(val_ids)


def finetune(params, dcfg: DecoderConfig, ecfg: EngineConfig, tcfg: TrainConfig,
             graph: TextRichGraph, split: dict[str, str],
             log_path=None) -> dict:
    """Generative fine-tuning with early stopping on validation accuracy.

    Returns {"steps", "epochs", "best_val_accuracy", "losses"}. Parameters
    are left at the best-validation snapshot.
    """
    from .corpus import split_nodes
    rng = np.random.default_rng(tcfg.seed)
    train_ids = split_nodes(split, "train")
    val_ids = split_nodes(split, "val")
    if not train_ids:
        raise ContractError("empty train split")
    labels = sorted({graph.nodes[n].label for n in graph.nodes
                     if graph.nodes[n].label is not None})
    opt = AdamW(params, tcfg)
    tlog = TrainLog(log_path)
    losses: list[float] = []
    best_acc = -1.0
    best_snapshot = None
    stale = 0
    steps_done = 0
    epochs_done = 0
    try:
        for epoch in range(1, tcfg.max_epochs + 1):
            order = rng.permutation(len(train_ids))
            acc_grads: dict[str, np.ndarray] = {}
            in_batch = 0
            for idx in order.tolist():
                if steps_done >= tcfg.steps:
                    break
                nid = train_ids[idx]
                t0 = time.perf_counter()
                sample = tasks.build_classify_sample(graph, nid, labels, ecfg,
                                                     tcfg.seed)
                loss, grads = finetune_step(params, dcfg, ecfg, sample,
                                            order_seed=tcfg.seed + epoch,
                                            grad_scope=tcfg.grad_scope)
                for name, g in grads.items():
                    acc_grads[name] = acc_grads.get(name, 0.0) + g
                in_batch += 1
                losses.append(loss)
                tlog.write(step=steps_done + 1, stage="finetune", task="classify",
                           loss=loss, wall_time=time.perf_counter() - t0)
                if in_batch == tcfg.batch_nodes:
                    opt.step({k: v / in_batch for k, v in acc_grads.items()})
                    acc_grads = {}
                    in_batch = 0
                    steps_done += 1
            if in_batch and steps_done < tcfg.steps:
                opt.step({k: v / in_batch for k, v in acc_grads.items()})
                steps_done += 1
            epochs_done = epoch
            val_acc = _val_accuracy(params, dcfg, ecfg, graph, labels, val_ids,
                                    tcfg.seed)
            log.info("finetune epoch %d val accuracy %.3f", epoch, val_acc)
            if val_acc > best_acc:
                best_acc = val_acc
                best_snapshot = {k: p.array.copy() for k, p in params.items()}
                stale = 0
            else:
                stale += 1
                if stale >= tcfg.early_stop_patience:
                    break
            if steps_done >= tcfg.steps:
                break
    finally:
        tlog.close()
    if best_snapshot is not None:
        for k, p in params.items():
            p.array[...] = best_snapshot[k]
    return {"steps": steps_done, "epochs": epochs_done,
            "best_val_accuracy": best_acc, "losses": losses}


# --- checkpoints with optimizer state ---------------------------------------


def save_train_checkpoint(path, dcfg: DecoderConfig, params, meta: dict,
                          opt: AdamW | None = None) -> None:
    extras = opt.state_tensors() if opt else None
    D.save_checkpoint(path, dcfg, params, meta=meta, extra_tensors=extras)


def load_train_checkpoint(path, expect_cfg: DecoderConfig | None = None):
    return D.load_checkpoint(path, expect_cfg=expect_cfg)
