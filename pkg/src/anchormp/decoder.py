"""Tiny decoder-only transformer shared by compression, propagation and generation.

Pre-LayerNorm blocks, causal self-attention, tanh-GELU feed-forward,
learned absolute position embeddings. Inputs are mixed sequences of token
ids and injected vectors: injected vectors bypass the token embedding table
and enter the first layer directly (identity injection), which lets stored
summary states re-enter the decoder as inputs.

KV caching is decoupled: `extract_kv` collects per-layer key/value rows at
chosen positions during a single forward, and `forward_with_context` lets
later queries attend over those cached rows plus their own causal prefix.
Cached rows keep the absolute positions they were extracted at; new items
are placed at positions past the cache.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .container import read_container, write_container
from .errors import CapacityError, ContractError, DimensionError
from .tensor import Tensor

NEG_INF = -1e30  # additive mask value; finite so downstream checks stay clean


@dataclass(frozen=True)
class DecoderConfig:
    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 128
    d_ff: int = 512
    vocab_size: int = 259
    max_positions: int = 1024
    summary_token_id: int = 2
    eos_token_id: int = 1

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ContractError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if not (0 <= self.summary_token_id < self.vocab_size):
            raise ContractError("summary_token_id outside vocabulary")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DecoderConfig":
        return cls(**d)


@dataclass(frozen=True)
class InputItem:
    """One position of a decoder input: a token id or an injected vector."""
    position: int
    token_id: int | None = None
    vector: np.ndarray | None = None

    def __post_init__(self):
        if (self.token_id is None) == (self.vector is None):
            raise ContractError("InputItem needs exactly one of token_id / vector")


def token_items(ids, start: int = 0) -> list[InputItem]:
    return [InputItem(position=start + i, token_id=int(t)) for i, t in enumerate(ids)]


@dataclass
class KVCache:
    """Per-layer key/value rows over cached positions."""
    keys: list[Tensor] = field(default_factory=list)    # one [p x d_model] per layer
    values: list[Tensor] = field(default_factory=list)
    positions: list[int] = field(default_factory=list)

    @classmethod
    def empty(cls, n_layers: int, d_model: int) -> "KVCache":
        z = [Tensor(np.zeros((0, d_model))) for _ in range(n_layers)]
        zv = [Tensor(np.zeros((0, d_model))) for _ in range(n_layers)]
        return cls(keys=z, values=zv, positions=[])

    @property
    def size(self) -> int:
        return len(self.positions)

    @property
    def next_position(self) -> int:
        return max(self.positions) + 1 if self.positions else 0

    def validate(self, cfg: DecoderConfig) -> None:
        if len(self.keys) != cfg.n_layers or len(self.values) != cfg.n_layers:
            raise ContractError(
                f"cache has {len(self.keys)} layers, decoder has {cfg.n_layers}")
        counts = {t.shape[0] for t in self.keys} | {t.shape[0] for t in self.values}
        if counts != {self.size}:
            raise ContractError(f"cache row counts differ across layers: {sorted(counts)}")

    def extended(self, other: "KVCache") -> "KVCache":
        if len(other.keys) != len(self.keys):
            raise ContractError("cannot concatenate caches with different layer counts")
        keys = [T.concat_rows([a, b]) if a.shape[0] else b for a, b in zip(self.keys, other.keys)]
        vals = [T.concat_rows([a, b]) if a.shape[0] else b for a, b in zip(self.values, other.values)]
        return KVCache(keys=keys, values=vals, positions=self.positions + other.positions)


def concat_caches(caches: list[KVCache], n_layers: int, d_model: int) -> KVCache:
    out = KVCache.empty(n_layers, d_model)
    for c in caches:
        out = out.extended(c)
    return out


# --- parameters -------------------------------------------------------------


def init_params(cfg: DecoderConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Fresh parameter set; names are stable and used by checkpoints."""
    std = 0.02
    out_std = std / np.sqrt(2.0 * cfg.n_layers)  # residual-branch damping
    p: dict[str, Tensor] = {}

    def mat(name, rows, cols, s=std):
        p[name] = Tensor(rng.normal(0.0, s, size=(rows, cols)), requires_grad=True)

    def vec(name, n, value=0.0):
        p[name] = Tensor(np.full(n, value, dtype=np.float64), requires_grad=True)

    mat("tok_embed", cfg.vocab_size, cfg.d_model)
    mat("pos_embed", cfg.max_positions, cfg.d_model)
    for i in range(cfg.n_layers):
        pre = f"layers.{i}"
        vec(f"{pre}.ln1.gain", cfg.d_model, 1.0)
        vec(f"{pre}.ln1.bias", cfg.d_model)
        mat(f"{pre}.attn.wq", cfg.d_model, cfg.d_model)
        mat(f"{pre}.attn.wk", cfg.d_model, cfg.d_model)
        mat(f"{pre}.attn.wv", cfg.d_model, cfg.d_model)
        mat(f"{pre}.attn.wo", cfg.d_model, cfg.d_model, out_std)
        vec(f"{pre}.ln2.gain", cfg.d_model, 1.0)
        vec(f"{pre}.ln2.bias", cfg.d_model)
        mat(f"{pre}.ff.w1", cfg.d_model, cfg.d_ff)
        vec(f"{pre}.ff.b1", cfg.d_ff)
        mat(f"{pre}.ff.w2", cfg.d_ff, cfg.d_model, out_std)
        vec(f"{pre}.ff.b2", cfg.d_model)
    vec("ln_f.gain", cfg.d_model, 1.0)
    vec("ln_f.bias", cfg.d_model)
    mat("out_proj", cfg.d_model, cfg.vocab_size)
    return p


def param_count(cfg: DecoderConfig) -> int:
    """Closed form for the total parameter count.

    V*d + P*d + n_layers*(4*d^2 + 2*d*d_ff + d_ff + 5*d) + 2*d + d*V
    """
    d, dff = cfg.d_model, cfg.d_ff
    per_layer = 4 * d * d + 2 * d * dff + dff + 5 * d
    return (cfg.vocab_size * d + cfg.max_positions * d
            + cfg.n_layers * per_layer + 2 * d + d * cfg.vocab_size)


# --- forward ----------------------------------------------------------------


def _prepare_inputs(cfg: DecoderConfig, items: list[InputItem],
                    injected: Tensor | None) -> tuple[Tensor, np.ndarray]:
    if not items:
        raise ContractError("empty input sequence")
    positions = np.asarray([it.position for it in items], dtype=np.intp)
    if positions.min() < 0 or positions.max() >= cfg.max_positions:
        raise CapacityError(
            f"position {int(positions.max())} exceeds max_positions {cfg.max_positions}")
    tok_ids = [it.token_id if it.token_id is not None else 0 for it in items]
    inj_slots = [i for i, it in enumerate(items) if it.vector is not None]
    if injected is not None:
        if injected.shape != (len(inj_slots), cfg.d_model):
            raise DimensionError(
                f"injected matrix {injected.shape} vs {len(inj_slots)} injected items")
        inj = injected
    elif inj_slots:
        inj = Tensor(np.stack([items[i].vector for i in inj_slots]))
    else:
        inj = None
    return (tok_ids, inj_slots, inj), positions


def _run(params: dict[str, Tensor], cfg: DecoderConfig, items: list[InputItem],
         injected: Tensor | None, kv: KVCache | None,
         collect: list[int] | None,
         need_logits: bool = True) -> tuple[Tensor, Tensor | None, KVCache | None]:
    """Single decoder pass; optionally attends over `kv` and collects new KV rows."""
    (tok_ids, inj_slots, inj), positions = _prepare_inputs(cfg, items, injected)
    t_local = len(items)
    n_cached = kv.size if kv is not None else 0

    x = T.embedding(params["tok_embed"], tok_ids)
    if inj is not None:
        x = T.row_mix(x, inj, inj_slots)
    x = T.add(x, T.embedding(params["pos_embed"], positions.tolist()))

    # additive causal mask: local row t sees all cached columns plus local <= t
    mask = np.zeros((t_local, n_cached + t_local))
    mask[:, n_cached:] = np.triu(np.full((t_local, t_local), NEG_INF), k=1)
    mask_t = Tensor(mask)

    new_keys: list[Tensor] = []
    new_vals: list[Tensor] = []
    inv_sqrt = 1.0 / np.sqrt(cfg.d_head)
    for i in range(cfg.n_layers):
        pre = f"layers.{i}"
        h = T.layer_norm(x, params[f"{pre}.ln1.gain"], params[f"{pre}.ln1.bias"])
        q = T.matmul(h, params[f"{pre}.attn.wq"])
        k = T.matmul(h, params[f"{pre}.attn.wk"])
        v = T.matmul(h, params[f"{pre}.attn.wv"])
        if collect is not None:
            new_keys.append(k)
            new_vals.append(v)
        if n_cached:
            k_all = T.concat_rows([kv.keys[i], k])
            v_all = T.concat_rows([kv.values[i], v])
        else:
            k_all, v_all = k, v
        heads = []
        for hd in range(cfg.n_heads):
            lo, hi = hd * cfg.d_head, (hd + 1) * cfg.d_head
            qh = T.slice_cols(q, lo, hi)
            kh = T.slice_cols(k_all, lo, hi)
            vh = T.slice_cols(v_all, lo, hi)
            scores = T.scale(T.matmul(qh, T.transpose(kh)), inv_sqrt)
            weights = T.softmax_rows(T.add(scores, mask_t))
            heads.append(T.matmul(weights, vh))
        attn = T.matmul(T.concat_cols(heads), params[f"{pre}.attn.wo"])
        x = T.add(x, attn)
        h2 = T.layer_norm(x, params[f"{pre}.ln2.gain"], params[f"{pre}.ln2.bias"])
        f = T.add_bias(T.matmul(h2, params[f"{pre}.ff.w1"]), params[f"{pre}.ff.b1"])
        f = T.add_bias(T.matmul(T.gelu(f), params[f"{pre}.ff.w2"]), params[f"{pre}.ff.b2"])
        x = T.add(x, f)

    hidden = T.layer_norm(x, params["ln_f.gain"], params["ln_f.bias"])
    logits = T.matmul(hidden, params["out_proj"]) if need_logits else None

    out_kv = None
    if collect is not None:
        for idx in collect:
            if not (0 <= idx < t_local):
                raise IndexError(f"KV position {idx} out of range [0, {t_local})")
        out_kv = KVCache(
            keys=[T.slice_rows(k, collect) for k in new_keys],
            values=[T.slice_rows(v, collect) for v in new_vals],
            positions=[items[i].position for i in collect],
        )
    return hidden, logits, out_kv


def forward(params: dict[str, Tensor], cfg: DecoderConfig, items: list[InputItem],
            injected: Tensor | None = None,
            need_logits: bool = True) -> tuple[Tensor, Tensor | None]:
    """Causal forward over a mixed token/vector sequence: (hidden, logits)."""
    hidden, logits, _ = _run(params, cfg, items, injected, kv=None, collect=None,
                             need_logits=need_logits)
    return hidden, logits


def forward_with_context(params: dict[str, Tensor], cfg: DecoderConfig, kv: KVCache,
                         items: list[InputItem], injected: Tensor | None = None,
                         collect: list[int] | None = None,
                         need_logits: bool = True):
    """Forward where every query also attends over the cached positions.

    With `collect`, additionally returns a KVCache of the new rows at those
    local indices (used for incremental decoding).
    """
    kv.validate(cfg)
    hidden, logits, new_kv = _run(params, cfg, items, injected, kv=kv,
                                  collect=collect, need_logits=need_logits)
    if collect is None:
        return hidden, logits
    return hidden, logits, new_kv


def extract_kv(params: dict[str, Tensor], cfg: DecoderConfig, items: list[InputItem],
               positions: list[int], injected: Tensor | None = None) -> KVCache:
    """Per-layer K/V rows at the requested item indices, from a single forward."""
    _, _, kv = _run(params, cfg, items, injected, kv=None, collect=list(positions),
                    need_logits=False)
    return kv


def generate(params: dict[str, Tensor], cfg: DecoderConfig, kv: KVCache,
             prompt: list[int], max_new: int) -> list[int]:
    """Greedy decoding over cached context; stops at EOS or max_new tokens."""
    if not prompt:
        raise ContractError("generate requires a non-empty prompt")
    if max_new <= 0:
        return []
    kv.validate(cfg)
    cache = kv
    start = cache.next_position
    items = token_items(prompt, start=start)
    out: list[int] = []
    next_pos = start + len(items)
    for _ in range(max_new):
        hidden, _, new_kv = forward_with_context(
            params, cfg, cache, items, collect=list(range(len(items))),
            need_logits=False)
        last = T.matmul(T.slice_rows(hidden, [len(items) - 1]), params["out_proj"])
        tok = int(np.argmax(last.array[0]))
        if tok == cfg.eos_token_id:
            break
        out.append(tok)
        cache = cache.extended(new_kv)
        items = [InputItem(position=next_pos, token_id=tok)]
        next_pos += 1
    return out


# --- checkpoints ------------------------------------------------------------

CHECKPOINT_KIND = "decoder-checkpoint"


def save_checkpoint(path, cfg: DecoderConfig, params: dict[str, Tensor],
                    meta: dict | None = None,
                    extra_tensors: dict[str, np.ndarray] | None = None) -> None:
    tensors = {f"param.{k}": v.array for k, v in params.items()}
    if extra_tensors:
        tensors.update(extra_tensors)
    write_container(path, CHECKPOINT_KIND,
                    {"config": cfg.to_dict(), **(meta or {})}, tensors)


def load_checkpoint(path, expect_cfg: DecoderConfig | None = None):
    """Returns (cfg, params, meta, extra_tensors); verifies shapes and kind."""
    meta, tensors = read_container(path, expect_kind=CHECKPOINT_KIND)
    cfg = DecoderConfig.from_dict(meta["config"])
    if expect_cfg is not None and expect_cfg != cfg:
        raise ContractError(
            f"checkpoint config mismatch: file has {cfg.to_dict()}, "
            f"caller expects {expect_cfg.to_dict()}")
    rng = np.random.default_rng(0)
    reference = init_params(cfg, rng)
    params: dict[str, Tensor] = {}
    extras: dict[str, np.ndarray] = {}
    for name, arr in tensors.items():
        if name.startswith("param."):
            pname = name[len("param."):]
            if pname not in reference:
                raise ContractError(f"unknown parameter {pname!r} in checkpoint")
            if tuple(arr.shape) != reference[pname].shape:
                raise ContractError(
                    f"parameter {pname!r} has shape {tuple(arr.shape)}, "
                    f"expected {reference[pname].shape}")
            params[pname] = Tensor(arr, requires_grad=True)
        else:
            extras[name] = arr
    missing = set(reference) - set(params)
    if missing:
        raise ContractError(f"checkpoint missing parameters: {sorted(missing)[:4]}...")
    other = {k: v for k, v in meta.items() if k != "config"}
    return cfg, params, other, extras
