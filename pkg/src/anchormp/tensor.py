"""Dense float64 tensors with tape-based reverse-mode differentiation.

Design notes:

* Storage is a C-contiguous (row-major) float64 ndarray; only the rank-0,
  rank-1 and rank-2 cases needed by the decoder are supported.
* There is no general broadcasting. The only shape-mixing primitive is
  `add_bias`, which adds a length-n vector to every row of an m-by-n
  matrix. This keeps every gradient rule below short enough to audit.
* Operations record onto the ambient `Tape` (if one is active and some
  input requires grad). A tape covers one forward pass / loss computation
  and is single-use: `backward` replays it once, in reverse, then clears it.
* Every forward result is checked for NaN/Inf and raises `NonFiniteError`
  instead of propagating poison values.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NonFiniteError

_ACTIVE_TAPE: "Tape | None" = None


class Tensor:
    """Immutable-by-convention float64 array with an optional grad slot."""

    __slots__ = ("array", "requires_grad", "grad", "_tape")

    def __init__(self, values, requires_grad: bool = False):
        arr = np.ascontiguousarray(values, dtype=np.float64)
        if arr.ndim > 2:
            raise DimensionError(f"rank {arr.ndim} tensors are not supported")
        self.array = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: "Tape | None" = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.array.shape

    @property
    def data(self) -> np.ndarray:
        """Flat row-major view of the underlying storage."""
        return self.array.reshape(-1)

    def item(self) -> float:
        if self.array.size != 1:
            raise DimensionError(f"item() on tensor of shape {self.shape}")
        return float(self.array.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.array.copy(), requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class _Op:
    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Records operations of one forward pass; single-use.

    Usage:
        with Tape() as tape:
            loss = ...            # taped ops
        grads = backward(loss)    # or tape.backward(loss)
    """

    def __init__(self):
        self._ops: list[_Op] = []
        self._produced: set[int] = set()
        self._used = False

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise ContractError("a tape is already active in this context")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc) -> None:
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None

    def _record(self, inputs, output, backward_fn) -> None:
        if self._used:
            raise ContractError("tape already consumed by backward()")
        self._ops.append(_Op(inputs, output, backward_fn))
        self._produced.add(id(output))

    def backward(self, loss: Tensor) -> dict[Tensor, Tensor]:
        """Reverse sweep from a scalar loss.

        Returns a map from each requires-grad leaf tensor (parameter handle)
        to its gradient; also populates `.grad` on those leaves. The tape is
        cleared and cannot be replayed.
        """
        if self._used:
            raise ContractError("tape already consumed by backward()")
        if loss.array.size != 1:
            raise ContractError(f"backward on non-scalar loss of shape {loss.shape}")
        if id(loss) not in self._produced:
            raise ContractError("loss was not produced by operations on this tape")
        self._used = True
        partial: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.array)}
        leaf_grads: dict[Tensor, Tensor] = {}
        for op in reversed(self._ops):
            g_out = partial.pop(id(op.output), None)
            if g_out is None:
                continue
            for inp, g_in in zip(op.inputs, op.backward_fn(g_out)):
                if g_in is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in partial:
                    partial[key] = partial[key] + g_in
                else:
                    partial[key] = g_in
                if key not in self._produced:
                    # requires-grad leaf: publish the accumulated gradient
                    inp.grad = partial[key]
                    leaf_grads[inp] = Tensor(partial[key])
        self._ops.clear()
        self._produced.clear()
        return leaf_grads


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE


class no_tape:
    """Temporarily suspend recording (inference inside a training step)."""

    def __enter__(self):
        global _ACTIVE_TAPE
        self._saved = _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = self._saved


def backward(loss: Tensor) -> dict[Tensor, Tensor]:
    """Run the reverse sweep on the tape that recorded `loss`."""
    if loss._tape is None:
        raise ContractError("loss was not produced by taped operations")
    return loss._tape.backward(loss)


def _finite_or_raise(arr: np.ndarray, op_name: str) -> None:
    # single reduction pass: any NaN/Inf element makes the sum non-finite
    if not math.isfinite(float(arr.sum())):
        raise NonFiniteError(f"{op_name} produced non-finite values")


def _emit(op_name: str, out_array: np.ndarray, inputs: Sequence[Tensor],
          backward_fn: Callable[[np.ndarray], tuple]) -> Tensor:
    _finite_or_raise(out_array, op_name)
    tape = _ACTIVE_TAPE
    needs_grad = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_array, requires_grad=needs_grad)
    if needs_grad:
        tape._record(tuple(inputs), out, backward_fn)
        out._tape = tape
    return out


# --- primitives -------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.array.ndim != 2 or b.array.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} x {b.shape}")
    out = a.array @ b.array

    def bwd(g):
        return g @ b.array.T, a.array.T @ g

    return _emit("matmul", out, (a, b), bwd)


def transpose(a: Tensor) -> Tensor:
    if a.array.ndim != 2:
        raise DimensionError(f"transpose on shape {a.shape}")
    return _emit("transpose", a.array.T.copy(), (a,), lambda g: (g.T,))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add shapes {a.shape} vs {b.shape}")
    return _emit("add", a.array + b.array, (a, b), lambda g: (g, g))


def add_bias(a: Tensor, bias: Tensor) -> Tensor:
    """Add a length-n vector to every row of an m-by-n matrix."""
    if a.array.ndim != 2 or bias.array.ndim != 1 or a.shape[1] != bias.shape[0]:
        raise DimensionError(f"add_bias shapes {a.shape} vs {bias.shape}")
    return _emit("add_bias", a.array + bias.array[None, :], (a, bias),
                 lambda g: (g, g.sum(axis=0)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul shapes {a.shape} vs {b.shape}")
    return _emit("mul", a.array * b.array, (a, b),
                 lambda g: (g * b.array, g * a.array))


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return _emit("scale", a.array * factor, (a,), lambda g: (g * factor,))


def sum_all(a: Tensor) -> Tensor:
    out = np.asarray(a.array.sum())

    def bwd(g):
        return (np.full_like(a.array, float(g)),)

    return _emit("sum_all", out, (a,), bwd)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise DimensionError("concat_rows of zero tensors")
    if any(p.array.ndim != 2 for p in parts):
        raise DimensionError("concat_rows expects rank-2 tensors")
    widths = {p.shape[1] for p in parts}
    if len(widths) != 1:
        raise DimensionError(f"concat_rows with mixed widths {sorted(widths)}")
    out = np.concatenate([p.array for p in parts], axis=0)
    sizes = [p.shape[0] for p in parts]

    def bwd(g):
        outs = []
        start = 0
        for n in sizes:
            outs.append(g[start:start + n])
            start += n
        return tuple(outs)

    return _emit("concat_rows", out, tuple(parts), bwd)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise DimensionError("concat_cols of zero tensors")
    heights = {p.shape[0] for p in parts}
    if len(heights) != 1 or any(p.array.ndim != 2 for p in parts):
        raise DimensionError("concat_cols expects rank-2 tensors of equal height")
    out = np.concatenate([p.array for p in parts], axis=1)
    sizes = [p.shape[1] for p in parts]

    def bwd(g):
        outs = []
        start = 0
        for n in sizes:
            outs.append(g[:, start:start + n])
            start += n
        return tuple(outs)

    return _emit("concat_cols", out, tuple(parts), bwd)


def slice_rows(a: Tensor, rows: Sequence[int]) -> Tensor:
    if a.array.ndim != 2:
        raise DimensionError(f"slice_rows on shape {a.shape}")
    idx = np.asarray(list(rows), dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise IndexError(f"row index out of range for shape {a.shape}")
    out = a.array[idx]

    def bwd(g):
        gi = np.zeros_like(a.array)
        np.add.at(gi, idx, g)
        return (gi,)

    return _emit("slice_rows", out, (a,), bwd)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if a.array.ndim != 2 or not (0 <= start < stop <= a.shape[1]):
        raise DimensionError(f"slice_cols [{start}:{stop}] on shape {a.shape}")
    out = a.array[:, start:stop].copy()

    def bwd(g):
        gi = np.zeros_like(a.array)
        gi[:, start:stop] = g
        return (gi,)

    return _emit("slice_cols", out, (a,), bwd)


def row_mix(base: Tensor, repl: Tensor, positions: Sequence[int]) -> Tensor:
    """Copy of `base` with row `positions[i]` replaced by `repl` row i."""
    idx = np.asarray(list(positions), dtype=np.intp)
    if base.array.ndim != 2 or repl.array.ndim != 2 or base.shape[1] != repl.shape[1]:
        raise DimensionError(f"row_mix shapes {base.shape} vs {repl.shape}")
    if idx.size != repl.shape[0]:
        raise DimensionError("row_mix position count must match replacement rows")
    if len(set(idx.tolist())) != idx.size:
        raise DimensionError("row_mix positions must be distinct")
    if idx.size and (idx.min() < 0 or idx.max() >= base.shape[0]):
        raise IndexError(f"row_mix position out of range for shape {base.shape}")
    out = base.array.copy()
    out[idx] = repl.array

    def bwd(g):
        g_base = g.copy()
        g_base[idx] = 0.0
        return g_base, g[idx]

    return _emit("row_mix", out, (base, repl), bwd)


def embedding(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Gather rows of an embedding table; gradients scatter-add back."""
    if table.array.ndim != 2:
        raise DimensionError(f"embedding table of shape {table.shape}")
    idx = np.asarray(list(ids), dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"embedding id out of range for table {table.shape}")
    out = table.array[idx]

    def bwd(g):
        gi = np.zeros_like(table.array)
        np.add.at(gi, idx, g)
        return (gi,)

    return _emit("embedding", out, (table,), bwd)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax with per-row max subtraction for stability."""
    if x.array.ndim != 2:
        raise DimensionError(f"softmax_rows on shape {x.shape}")
    shifted = x.array - x.array.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        return (y * (g - dot),)

    return _emit("softmax_rows", y, (x,), bwd)


def gelu(x: Tensor) -> Tensor:
    # tanh-form GELU; the derivative below differentiates this exact form.
    c = math.sqrt(2.0 / math.pi)
    xa = x.array
    x2 = xa * xa
    t = np.tanh(c * (xa + 0.044715 * (x2 * xa)))
    y = 0.5 * xa * (1.0 + t)

    def bwd(g):
        d_inner = c * (1.0 + 0.134145 * x2)
        dy = 0.5 * (1.0 + t) + 0.5 * xa * (1.0 - t * t) * d_inner
        return (g * dy,)

    return _emit("gelu", y, (x,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization with learned gain and bias."""
    if x.array.ndim != 2 or gain.shape != (x.shape[1],) or bias.shape != (x.shape[1],):
        raise DimensionError(f"layer_norm shapes {x.shape}, {gain.shape}, {bias.shape}")
    mu = x.array.mean(axis=1, keepdims=True)
    var = x.array.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.array - mu) * inv
    y = xhat * gain.array[None, :] + bias.array[None, :]

    def bwd(g):
        n = x.shape[1]
        gg = g * gain.array[None, :]
        dx = inv * (gg - gg.mean(axis=1, keepdims=True)
                    - xhat * (gg * xhat).mean(axis=1, keepdims=True))
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _emit("layer_norm", y, (x, gain, bias), bwd)


def cross_entropy(logits: Tensor, targets: Sequence[int]) -> Tensor:
    """Mean over positions of -log softmax(logits)[t, target_t]."""
    if logits.array.ndim != 2:
        raise DimensionError(f"cross_entropy logits of shape {logits.shape}")
    tgt = np.asarray(list(targets), dtype=np.intp)
    n, v = logits.shape
    if tgt.shape != (n,):
        raise DimensionError(f"cross_entropy needs {n} targets, got {tgt.shape}")
    if tgt.size and (tgt.min() < 0 or tgt.max() >= v):
        raise IndexError(f"target id out of range for vocab {v}")
    shifted = logits.array - logits.array.max(axis=1, keepdims=True)
    logZ = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logZ
    out = np.asarray(-logp[np.arange(n), tgt].mean())

    def bwd(g):
        probs = np.exp(logp)
        probs[np.arange(n), tgt] -= 1.0
        return (float(g) * probs / n,)

    return _emit("cross_entropy", out, (logits,), bwd)
