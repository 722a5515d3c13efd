"""Dense float64 tensors with reverse-mode autodiff on an explicit tape.

Define-by-run: ops execute eagerly on numpy arrays and, while a Tape is
active, append a node holding a backward closure. backward() replays nodes
in strict reverse creation order, so the tape itself is the topological
order and no sort is needed. Everything is float64; at desk scale that
keeps finite-difference gradient checks tight.

Randomness flows through Rng, a thin wrapper over numpy's Philox
(a counter-based 64-bit generator), so identical seeds give identical
draw sequences across runs and platforms.
"""

from __future__ import annotations

import struct

import numpy as np

_slice = slice  # keep builtin reachable; `slice` below is the autodiff op


class ShapeError(ValueError):
    """Raised when operand shapes violate an op's contract."""


class TapeError(RuntimeError):
    """Raised on tape misuse (double backward, detached loss, ...)."""


# ---------------------------------------------------------------------------
# RNG

def mix_seed(*parts: int) -> int:
    """Fold integers into one 64-bit seed (splitmix64 finalizer per part).

    Used to derive independent per-document / per-step streams from a run
    seed without consuming state from a shared generator.
    """
    h = 0x9E3779B97F4A7C15
    for p in parts:
        h = (h + (int(p) & 0xFFFFFFFFFFFFFFFF)) & 0xFFFFFFFFFFFFFFFF
        h = ((h ^ (h >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
        h = ((h ^ (h >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
        h = h ^ (h >> 31)
    return h


class Rng:
    """Deterministic random stream backed by Philox (counter-based, 64-bit)."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.Philox(self.seed))

    def derive(self, *parts: int) -> "Rng":
        """Independent child stream keyed by (this seed, parts)."""
        return Rng(mix_seed(self.seed, *parts))

    def normal(self, shape, std=1.0):
        return self._gen.normal(0.0, std, size=shape).astype(np.float64)

    def uniform(self, shape):
        return self._gen.random(size=shape).astype(np.float64)

    def integers(self, low, high, size=None):
        return self._gen.integers(low, high, size=size)

    def random(self) -> float:
        return float(self._gen.random())

    def shuffled(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def state_dict(self) -> dict:
        st = self._gen.bit_generator.state
        return {
            "seed": self.seed,
            "counter": [int(v) for v in st["state"]["counter"]],
            "key": [int(v) for v in st["state"]["key"]],
            "buffer": [int(v) for v in st["buffer"]],
            "buffer_pos": int(st["buffer_pos"]),
            "has_uint32": int(st["has_uint32"]),
            "uinteger": int(st["uinteger"]),
        }

    def load_state_dict(self, d: dict) -> None:
        self.seed = int(d["seed"])
        self._gen.bit_generator.state = {
            "bit_generator": "Philox",
            "state": {
                "counter": np.array(d["counter"], dtype=np.uint64),
                "key": np.array(d["key"], dtype=np.uint64),
            },
            "buffer": np.array(d["buffer"], dtype=np.uint64),
            "buffer_pos": int(d["buffer_pos"]),
            "has_uint32": int(d["has_uint32"]),
            "uinteger": int(d["uinteger"]),
        }


# ---------------------------------------------------------------------------
# Tape and tensors

class Node:
    __slots__ = ("kind", "input_ids", "out", "backward_fn")

    def __init__(self, kind, input_ids, out, backward_fn):
        self.kind = kind
        self.input_ids = input_ids
        self.out = out
        self.backward_fn = backward_fn


_ACTIVE_TAPE: "Tape | None" = None


class Tape:
    """Append-only record of ops; also accumulates a deterministic flop count.

    Use as a context manager around one forward/backward. A second
    backward() on the same tape is an error until reset().
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.flop_count = 0
        self._backward_done = False

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise TapeError("a tape is already active; tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def reset(self) -> None:
        self.nodes.clear()
        self.flop_count = 0
        self._backward_done = False


def active_tape() -> "Tape | None":
    return _ACTIVE_TAPE


class Tensor:
    """Value (+ gradient after backward) living on the ambient tape."""

    __slots__ = ("data", "grad", "requires_grad", "node_id")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node_id = None

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = None

    def detached(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _record(kind, inputs, out, backward_fn, flops):
    """Count flops and, if anything upstream needs grad, append a node."""
    tape = _ACTIVE_TAPE
    if tape is None:
        return out
    tape.flop_count += int(flops)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        input_ids = tuple(-1 if t.node_id is None else t.node_id for t in inputs)
        tape.nodes.append(Node(kind, input_ids, out, backward_fn))
        out.node_id = len(tape.nodes) - 1
    return out


def backward(loss: Tensor) -> None:
    """Populate .grad of everything the scalar loss depends on."""
    tape = _ACTIVE_TAPE
    if tape is None:
        raise TapeError("backward() requires an active tape")
    if tape._backward_done:
        raise TapeError("backward() already ran on this tape; reset() first")
    if loss.data.shape != ():
        raise ShapeError(f"loss must be scalar, got shape {loss.data.shape}")
    if loss.node_id is None:
        raise TapeError("loss is detached from the tape (no recorded op)")
    tape._backward_done = True
    loss.grad = np.ones((), dtype=np.float64)
    for i in range(loss.node_id, -1, -1):
        node = tape.nodes[i]
        if node.out.grad is None:
            continue
        node.backward_fn(node.out.grad)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting expanded."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# Elementwise and structural ops

def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.data.shape))

    return _record("add", (a, b), out, bwd, out.data.size)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data)

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g, b.data.shape))

    return _record("sub", (a, b), out, bwd, out.data.size)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _record("mul", (a, b), out, bwd, out.data.size)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = Tensor(a.data * s)

    def bwd(g):
        if a.requires_grad:
            _accum(a, g * s)

    return _record("scale", (a,), out, bwd, out.data.size)


def transpose(a: Tensor, axes=None) -> Tensor:
    ax = tuple(axes) if axes is not None else tuple(reversed(range(a.data.ndim)))
    out = Tensor(np.transpose(a.data, ax))
    inv = np.argsort(ax)

    def bwd(g):
        if a.requires_grad:
            _accum(a, np.transpose(g, inv))

    return _record("transpose", (a,), out, bwd, 0)


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape))

    def bwd(g):
        if a.requires_grad:
            _accum(a, g.reshape(a.data.shape))

    return _record("reshape", (a,), out, bwd, 0)


def concat(tensors, axis=0) -> Tensor:
    tensors = list(tensors)
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                _accum(t, piece)

    return _record("concat", tuple(tensors), out, bwd, 0)


def slice(a: Tensor, key) -> Tensor:  # noqa: A001 - op name from the API surface
    out = Tensor(a.data[key].copy())

    def bwd(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[key] += g
            _accum(a, full)

    return _record("slice", (a,), out, bwd, 0)


def sum(a: Tensor, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def bwd(g):
        if not a.requires_grad:
            return
        if axis is None:
            _accum(a, np.broadcast_to(g, a.data.shape).copy())
        else:
            ge = g if keepdims else np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(ge, a.data.shape).copy())

    return _record("sum", (a,), out, bwd, a.data.size)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims))
    denom = a.data.size if axis is None else a.data.shape[axis]

    def bwd(g):
        if not a.requires_grad:
            return
        if axis is None:
            _accum(a, np.broadcast_to(g / denom, a.data.shape).copy())
        else:
            ge = g if keepdims else np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(ge / denom, a.data.shape).copy())

    return _record("mean", (a,), out, bwd, a.data.size)


# ---------------------------------------------------------------------------
# Linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.data.shape} vs {b.data.shape}")
    out = Tensor(np.matmul(a.data, b.data))
    m, k = a.data.shape[-2], a.data.shape[-1]
    n = b.data.shape[-1]
    batch = int(np.prod(out.data.shape[:-2])) if out.data.ndim > 2 else 1

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.data.shape))

    return _record("matmul", (a, b), out, bwd, 2 * m * k * n * batch)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows table[ids]; backward scatter-adds into the table."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ShapeError(
            f"lookup id out of range [0, {table.data.shape[0]}): "
            f"min {ids.min()}, max {ids.max()}"
        )
    out = Tensor(table.data[ids])

    def bwd(g):
        if table.requires_grad:
            full = np.zeros_like(table.data)
            np.add.at(full, ids, g)
            _accum(table, full)

    return _record("embedding_lookup", (table,), out, bwd, 0)


# ---------------------------------------------------------------------------
# Nonlinearities and normalization

def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0.0))

    def bwd(g):
        if a.requires_grad:
            _accum(a, g * (a.data > 0))

    return _record("relu", (a,), out, bwd, out.data.size)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-form GELU: 0.5*x*(1 + tanh(c*(x + 0.044715*x^3)))."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = Tensor(0.5 * x * (1.0 + t))

    def bwd(g):
        if a.requires_grad:
            dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
            d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * dinner
            _accum(a, g * d)

    return _record("gelu", (a,), out, bwd, 8 * out.data.size)


def sigmoid(a: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor(s)

    def bwd(g):
        if a.requires_grad:
            _accum(a, g * s * (1.0 - s))

    return _record("sigmoid", (a,), out, bwd, 4 * out.data.size)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale/shift with learnable gain/bias."""
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = Tensor(xhat * gain.data + bias.data)
    n = x.data.shape[-1]

    def bwd(g):
        if gain.requires_grad:
            _accum(gain, (g * xhat).reshape(-1, n).sum(axis=0))
        if bias.requires_grad:
            _accum(bias, g.reshape(-1, n).sum(axis=0))
        if x.requires_grad:
            gy = g * gain.data
            m1 = gy.mean(axis=-1, keepdims=True)
            m2 = (gy * xhat).mean(axis=-1, keepdims=True)
            _accum(x, inv * (gy - m1 - xhat * m2))

    return _record("layer_norm", (x, gain, bias), out, bwd, 8 * x.data.size)


def softmax_rows(x: Tensor, mask=None) -> Tensor:
    """Row softmax over the last axis; masked entries come out exactly 0.

    mask is a boolean numpy array broadcastable to x (True = keep). A row
    with no unmasked entry is an error, never NaN. Stabilized by
    subtracting the rowwise max over unmasked entries.
    """
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.data.shape)
        if not np.all(mask.any(axis=-1)):
            raise ValueError("softmax_rows: some row is fully masked")
        shifted = np.where(mask, x.data, -np.inf)
        shifted = shifted - shifted.max(axis=-1, keepdims=True)
        e = np.where(mask, np.exp(shifted), 0.0)
    else:
        shifted = x.data - x.data.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(p)

    def bwd(g):
        if x.requires_grad:
            dot = (g * p).sum(axis=-1, keepdims=True)
            _accum(x, p * (g - dot))

    return _record("softmax_rows", (x,), out, bwd, 5 * x.data.size)


# ---------------------------------------------------------------------------
# Convolutions (single sample, [C, H, W])

def _conv_out(h, k, s, p):
    return (h + 2 * p - k) // s + 1


def _im2col(xp, kh, kw, sh, sw, ho, wo):
    c = xp.shape[0]
    cols = np.empty((c, kh, kw, ho, wo), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, i : i + sh * ho : sh, j : j + sw * wo : sw]
    return cols.reshape(c * kh * kw, ho * wo)


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d convolution, x [Cin,H,W], w [Cout,Cin,kh,kw], b [Cout]."""
    cin, h, wd = x.data.shape
    cout, cin_w, kh, kw = w.data.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d channel mismatch: input {x.data.shape} vs weight {w.data.shape}")
    s, p = int(stride), int(padding)
    ho, wo = _conv_out(h, kh, s, p), _conv_out(wd, kw, s, p)
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d output would be empty for input {x.data.shape}, kernel {(kh, kw)}")
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p))) if p else x.data
    cols = _im2col(xp, kh, kw, s, s, ho, wo)
    wmat = w.data.reshape(cout, cin * kh * kw)
    out = Tensor((wmat @ cols).reshape(cout, ho, wo) + b.data[:, None, None])

    def bwd(g):
        gflat = g.reshape(cout, ho * wo)
        if b.requires_grad:
            _accum(b, gflat.sum(axis=1))
        if w.requires_grad:
            _accum(w, (gflat @ cols.T).reshape(w.data.shape))
        if x.requires_grad:
            dcols = (wmat.T @ gflat).reshape(cin, kh, kw, ho, wo)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i : i + s * ho : s, j : j + s * wo : s] += dcols[:, i, j]
            _accum(x, dxp[:, p : p + h, p : p + wd] if p else dxp)

    return _record("conv2d", (x, w, b), out, bwd, 2 * cout * cin * kh * kw * ho * wo)


def transposed_conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed 2-d convolution, x [Cin,H,W], w [Cin,Cout,kh,kw], b [Cout].

    Output extents: (H-1)*stride - 2*padding + kh.
    """
    cin, h, wd = x.data.shape
    cin_w, cout, kh, kw = w.data.shape
    if cin != cin_w:
        raise ShapeError(f"transposed_conv2d channel mismatch: {x.data.shape} vs {w.data.shape}")
    s, p = int(stride), int(padding)
    ho = (h - 1) * s - 2 * p + kh
    wo = (wd - 1) * s - 2 * p + kw
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"transposed_conv2d output would be empty for input {x.data.shape}")
    # t[cout, i, j, h, w] = sum_cin w[cin, cout, i, j] * x[cin, h, w]
    t = np.tensordot(w.data, x.data, axes=([0], [0]))
    ypad = np.zeros((cout, (h - 1) * s + kh, (wd - 1) * s + kw), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            ypad[:, i : i + s * h : s, j : j + s * wd : s] += t[:, i, j]
    out = Tensor(ypad[:, p : p + ho, p : p + wo] + b.data[:, None, None])

    def bwd(g):
        gpad = np.zeros_like(ypad)
        gpad[:, p : p + ho, p : p + wo] = g
        if b.requires_grad:
            _accum(b, g.sum(axis=(1, 2)))
        # dt[cout, i, j, h, w] = gpad[cout, h*s+i, w*s+j]
        dt = np.empty((cout, kh, kw, h, wd), dtype=np.float64)
        for i in range(kh):
            for j in range(kw):
                dt[:, i, j] = gpad[:, i : i + s * h : s, j : j + s * wd : s]
        if w.requires_grad:
            _accum(w, np.tensordot(x.data, dt, axes=([1, 2], [3, 4])))
        if x.requires_grad:
            _accum(x, np.tensordot(w.data, dt, axes=([1, 2, 3], [0, 1, 2])))

    return _record("transposed_conv2d", (x, w, b), out, bwd, 2 * cout * cin * kh * kw * h * wd)


# ---------------------------------------------------------------------------
# Losses

def cross_entropy_from_logits(logits: Tensor, targets) -> Tensor:
    """Per-row softmax cross-entropy; logits [R,C], targets int[R] -> [R]."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2 or targets.shape != (logits.data.shape[0],):
        raise ShapeError(
            f"cross_entropy_from_logits expects [R,C] logits and [R] targets, "
            f"got {logits.data.shape} and {targets.shape}"
        )
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    rows = np.arange(z.shape[0])
    out = Tensor(lse - z[rows, targets])

    def bwd(g):
        if logits.requires_grad:
            soft = np.exp(z - m)
            soft /= soft.sum(axis=1, keepdims=True)
            soft[rows, targets] -= 1.0
            _accum(logits, soft * g[:, None])

    return _record("cross_entropy_from_logits", (logits,), out, bwd, 5 * z.size)


def smooth_l1(a: Tensor) -> Tensor:
    """Elementwise smooth-L1 with transition at 1: 0.5*x^2 if |x|<1 else |x|-0.5."""
    x = a.data
    small = np.abs(x) < 1.0
    out = Tensor(np.where(small, 0.5 * x * x, np.abs(x) - 0.5))

    def bwd(g):
        if a.requires_grad:
            _accum(a, g * np.where(small, x, np.sign(x)))

    return _record("smooth_l1", (a,), out, bwd, 2 * out.data.size)


def binary_cross_entropy_from_logit(logit: Tensor, target) -> Tensor:
    """Elementwise BCE against targets in {0,1}, numerically stable."""
    y = np.asarray(target, dtype=np.float64)
    z = logit.data
    out = Tensor(np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z))))

    def bwd(g):
        if logit.requires_grad:
            s = 1.0 / (1.0 + np.exp(-z))
            _accum(logit, g * (s - y))

    return _record("binary_cross_entropy_from_logit", (logit,), out, bwd, 4 * out.data.size)


def dropout(a: Tensor, rate: float, rng: Rng) -> Tensor:
    """Inverted dropout (train mode). rate 0 returns the input untouched
    and consumes no randomness, so default-off configs stay deterministic."""
    if rate == 0.0:
        return a
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    keep = (rng.uniform(a.data.shape) >= rate) / (1.0 - rate)
    out = Tensor(a.data * keep)

    def bwd(g):
        if a.requires_grad:
            _accum(a, g * keep)

    return _record("dropout", (a,), out, bwd, out.data.size)


# ---------------------------------------------------------------------------
# Binary dump format (checkpoints, attention exports, fixtures):
# uint64-LE rank, then each extent as uint64-LE, then data as float64-LE.

def dump_array(f, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype=np.float64)  # ascontiguousarray would promote 0-d to 1-d
    f.write(struct.pack("<Q", arr.ndim))
    for e in arr.shape:
        f.write(struct.pack("<Q", e))
    f.write(arr.astype("<f8").tobytes())


def load_array(f) -> np.ndarray:
    (rank,) = struct.unpack("<Q", f.read(8))
    shape = tuple(struct.unpack("<Q", f.read(8))[0] for _ in range(rank))
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(f.read(8 * count), dtype="<f8").astype(np.float64)
    return data.reshape(shape)


def dumped_nbytes(arr: np.ndarray) -> int:
    return 8 * (1 + arr.ndim) + 8 * arr.size
