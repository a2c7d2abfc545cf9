"""Dense tensors and a recording tape for reverse-mode differentiation.

Every operation is a pure function: operands are read, a fresh output is
allocated. When a ``Tape`` is passed and some operand requires gradients,
the primitive is recorded together with a backward rule. Reductions run
in fixed ascending-index order (``np.einsum`` without BLAS dispatch), so
outputs are bit-identical across runs and across worker counts;
determinism is deliberately favored over peak throughput.

Default precision is single; gradient checking runs the same code in
double.
"""

import math
import struct

import numpy as np

from .errors import ContractError, CorruptionError, DimensionError, FormatError, VitPadIOError

_ALLOWED_DTYPES = (np.float32, np.float64)

_GELU_K = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


class Tensor:
    """Dense row-major numeric array.

    ``trainable`` marks a leaf whose gradient ``backprop`` must report
    (under its ``name``). ``requires_grad`` is bookkeeping set by the ops:
    True when the tensor is a trainable leaf, was registered via
    ``Tape.watch``, or was produced from such a tensor on a tape.
    """

    __slots__ = ("data", "name", "trainable", "requires_grad")

    def __init__(self, data, name=None, trainable=False, dtype=None):
        if dtype is None and isinstance(data, np.ndarray) and data.dtype.type in _ALLOWED_DTYPES:
            arr = np.ascontiguousarray(data)
        else:
            arr = np.ascontiguousarray(data, dtype=np.dtype(dtype) if dtype is not None else np.float32)
        if arr.dtype.type not in _ALLOWED_DTYPES:
            raise ContractError(f"unsupported dtype {arr.dtype}; use float32 or float64")
        self.data = arr
        self.name = name
        self.trainable = bool(trainable)
        self.requires_grad = bool(trainable)

    @property
    def shape(self):
        return tuple(self.data.shape)

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return int(self.data.size)

    @property
    def precision(self):
        return "single" if self.data.dtype == np.float32 else "double"

    def copy(self):
        t = Tensor(self.data.copy(), name=self.name, trainable=self.trainable)
        t.requires_grad = self.requires_grad
        return t

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, {self.precision}{tag})"


class TapeEntry:
    """One recorded primitive: operands, output, and its forward/backward rules."""

    __slots__ = ("op", "inputs", "output", "_forward", "_backward")

    def __init__(self, op, inputs, output, forward, backward):
        self.op = op
        self.inputs = tuple(inputs)
        self.output = output
        self._forward = forward
        self._backward = backward

    def recompute(self):
        return self._forward()

    def backward(self, grad_out):
        return self._backward(grad_out)


class Tape:
    """Ordered record of executed primitives, confined to one logical thread.

    Operands always appear before their consumers, so a single reverse
    sweep implements the chain rule.
    """

    def __init__(self):
        self.entries = []
        self.watched = {}

    def record(self, entry):
        self.entries.append(entry)

    def watch(self, name, tensor):
        """Ask backprop to also report the gradient of an intermediate tensor."""
        tensor.requires_grad = True
        self.watched[name] = tensor

    def final_output(self):
        if not self.entries:
            raise ContractError("tape is empty")
        return self.entries[-1].output

    def replays_exactly(self):
        """True when re-running every recorded primitive reproduces its output bit-exactly."""
        for entry in self.entries:
            again = entry.recompute()
            if again.shape != entry.output.data.shape:
                return False
            if not np.array_equal(again, entry.output.data):
                return False
        return True


def _check_same_dtype(*tensors):
    dtypes = {t.data.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ContractError(f"mixed precisions {sorted(str(d) for d in dtypes)} in one operation")


def _record(tape, op, inputs, out, forward, backward):
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(TapeEntry(op, inputs, out, forward, backward))
    return out


def matmul(a: Tensor, b: Tensor, tape: Tape = None) -> Tensor:
    """c[i,j] = sum_t a[i,t]*b[t,j], accumulated in ascending t."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    _check_same_dtype(a, b)

    def forward():
        return np.einsum("ij,jk->ik", a.data, b.data)

    out = Tensor(forward())

    def backward(g):
        return (
            (a, np.einsum("ik,jk->ij", g, b.data)),
            (b, np.einsum("ij,ik->jk", a.data, g)),
        )

    return _record(tape, "matmul", (a, b), out, forward, backward)


def add(a: Tensor, b: Tensor, tape: Tape = None) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes differ {a.shape} vs {b.shape}")
    _check_same_dtype(a, b)

    def forward():
        return a.data + b.data

    out = Tensor(forward())

    def backward(g):
        return ((a, g), (b, g))

    return _record(tape, "add", (a, b), out, forward, backward)


def add_rowvec(a: Tensor, v: Tensor, tape: Tape = None) -> Tensor:
    """Broadcast-add a length-n vector to every row of an [m,n] matrix."""
    if a.ndim != 2 or v.ndim != 1 or a.shape[1] != v.shape[0]:
        raise DimensionError(f"add_rowvec: shapes {a.shape} and {v.shape} do not align")
    _check_same_dtype(a, v)

    def forward():
        return a.data + v.data

    out = Tensor(forward())

    def backward(g):
        return ((a, g), (v, np.einsum("ij->j", g)))

    return _record(tape, "add_rowvec", (a, v), out, forward, backward)


def scale(a: Tensor, c: float, tape: Tape = None) -> Tensor:
    c = float(c)

    def forward():
        return a.data * c

    out = Tensor(forward())

    def backward(g):
        return ((a, g * c),)

    return _record(tape, "scale", (a,), out, forward, backward)


def transpose(a: Tensor, tape: Tape = None) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"transpose: expected a matrix, got shape {a.shape}")

    def forward():
        return a.data.T.copy()

    out = Tensor(forward())

    def backward(g):
        return ((a, g.T.copy()),)

    return _record(tape, "transpose", (a,), out, forward, backward)


def reshape(a: Tensor, shape, tape: Tape = None) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.size:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}")

    def forward():
        return a.data.reshape(shape).copy()

    out = Tensor(forward())

    def backward(g):
        return ((a, g.reshape(a.shape)),)

    return _record(tape, "reshape", (a,), out, forward, backward)


def slice_rows(a: Tensor, start: int, stop: int, tape: Tape = None) -> Tensor:
    if a.ndim != 2 or not (0 <= start < stop <= a.shape[0]):
        raise DimensionError(f"slice_rows: rows [{start}:{stop}] invalid for shape {a.shape}")

    def forward():
        return a.data[start:stop, :].copy()

    out = Tensor(forward())

    def backward(g):
        full = np.zeros_like(a.data)
        full[start:stop, :] = g
        return ((a, full),)

    return _record(tape, "slice_rows", (a,), out, forward, backward)


def slice_cols(a: Tensor, start: int, stop: int, tape: Tape = None) -> Tensor:
    if a.ndim != 2 or not (0 <= start < stop <= a.shape[1]):
        raise DimensionError(f"slice_cols: cols [{start}:{stop}] invalid for shape {a.shape}")

    def forward():
        return a.data[:, start:stop].copy()

    out = Tensor(forward())

    def backward(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        return ((a, full),)

    return _record(tape, "slice_cols", (a,), out, forward, backward)


def _concat(parts, axis, op, tape):
    parts = tuple(parts)
    if not parts:
        raise DimensionError(f"{op}: no operands")
    if any(p.ndim != 2 for p in parts):
        raise DimensionError(f"{op}: all operands must be matrices")
    other = 1 - axis
    if len({p.shape[other] for p in parts}) != 1:
        raise DimensionError(f"{op}: shapes {[p.shape for p in parts]} do not align")
    _check_same_dtype(*parts)

    def forward():
        return np.concatenate([p.data for p in parts], axis=axis)

    out = Tensor(forward())
    sizes = [p.shape[axis] for p in parts]

    def backward(g):
        grads = []
        offset = 0
        for p, n in zip(parts, sizes):
            piece = g[offset:offset + n, :] if axis == 0 else g[:, offset:offset + n]
            grads.append((p, piece.copy()))
            offset += n
        return tuple(grads)

    return _record(tape, op, parts, out, forward, backward)


def concat_rows(parts, tape: Tape = None) -> Tensor:
    return _concat(parts, 0, "concat_rows", tape)


def concat_cols(parts, tape: Tape = None) -> Tensor:
    return _concat(parts, 1, "concat_cols", tape)


def softmax_rows(x: Tensor, tape: Tape = None) -> Tensor:
    """Row-wise softmax, stabilized by max subtraction; rows sum to 1."""
    if x.ndim != 2:
        raise DimensionError(f"softmax_rows: expected a matrix, got shape {x.shape}")

    def forward():
        m = x.data.max(axis=1, keepdims=True)
        e = np.exp(x.data - m)
        return e / np.einsum("ij->i", e)[:, None]

    out = Tensor(forward())

    def backward(g):
        y = out.data
        dot = np.einsum("ij,ij->i", g, y)[:, None]
        return ((x, y * (g - dot)),)

    return _record(tape, "softmax_rows", (x,), out, forward, backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float, tape: Tape = None) -> Tensor:
    """Normalize the last axis to zero mean / unit biased variance, then scale and shift."""
    if eps <= 0:
        raise ContractError("layer_norm: eps must be positive")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layer_norm: gamma {gamma.shape} / beta {beta.shape} do not match last axis {d}"
        )
    _check_same_dtype(x, gamma, beta)

    def stats():
        flat = x.data.reshape(-1, d)
        mu = np.einsum("ij->i", flat)[:, None] / d
        centered = flat - mu
        var = np.einsum("ij,ij->i", centered, centered)[:, None] / d
        inv = 1.0 / np.sqrt(var + eps)
        return centered * inv, inv

    def forward():
        xhat, _ = stats()
        return (xhat * gamma.data + beta.data).reshape(x.shape)

    out = Tensor(forward())

    def backward(g):
        xhat, inv = stats()
        g2 = g.reshape(-1, d)
        dgamma = np.einsum("ij,ij->j", g2, xhat)
        dbeta = np.einsum("ij->j", g2)
        dxhat = g2 * gamma.data
        m1 = np.einsum("ij->i", dxhat)[:, None] / d
        m2 = np.einsum("ij,ij->i", dxhat, xhat)[:, None] / d
        dx = (inv * (dxhat - m1 - xhat * m2)).reshape(x.shape)
        return ((x, dx), (gamma, dgamma), (beta, dbeta))

    return _record(tape, "layer_norm", (x, gamma, beta), out, forward, backward)


def gelu(x: Tensor, tape: Tape = None) -> Tensor:
    """Elementwise 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3))) (tanh form)."""

    def forward():
        xd = x.data
        inner = _GELU_K * (xd + _GELU_A * xd * xd * xd)
        return 0.5 * xd * (1.0 + np.tanh(inner))

    out = Tensor(forward())

    def backward(g):
        xd = x.data
        inner = _GELU_K * (xd + _GELU_A * xd * xd * xd)
        t = np.tanh(inner)
        slope = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * _GELU_K * (1.0 + 3.0 * _GELU_A * xd * xd)
        return ((x, g * slope),)

    return _record(tape, "gelu", (x,), out, forward, backward)


def sigmoid(x: float) -> float:
    """Logistic function, overflow-free for |x| up to 1e4 and beyond."""
    x = float(x)
    if x >= 0.0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def backprop(tape: Tape, seed: Tensor) -> dict:
    """Reverse sweep over a tape; returns name -> gradient Tensor.

    Reported names are the trainable leaves encountered on the tape plus
    anything registered through ``Tape.watch``. Trainable leaves the seed
    does not reach get exact zero gradients; frozen parameters are never
    reported.
    """
    if not tape.entries:
        raise ContractError("backprop: tape is empty")
    final = tape.final_output()
    if seed.shape != final.shape:
        raise DimensionError(f"backprop: seed shape {seed.shape} does not match output {final.shape}")

    grads = {id(final): seed.data.astype(final.data.dtype, copy=True)}
    for entry in reversed(tape.entries):
        g = grads.get(id(entry.output))
        if g is None:
            continue
        for operand, contribution in entry.backward(g):
            if contribution is None or not operand.requires_grad:
                continue
            held = grads.get(id(operand))
            grads[id(operand)] = contribution if held is None else held + contribution

    result = {}
    for entry in tape.entries:
        for operand in entry.inputs:
            if operand.trainable and operand.name and operand.name not in result:
                g = grads.get(id(operand))
                result[operand.name] = Tensor(g if g is not None else np.zeros_like(operand.data))
    for name, tensor in tape.watched.items():
        g = grads.get(id(tensor))
        result[name] = Tensor(g if g is not None else np.zeros_like(tensor.data))
    return result


# -- "VTEN" raw tensor files: debug dumps and test fixtures ------------------

VTEN_MAGIC = b"VTEN"
VTEN_VERSION = 1


def write_vten(tensor: Tensor, path) -> None:
    """magic 'VTEN', version u32 LE, rank u8, dims u32 LE each, payload f32 LE row-major."""
    dims = tensor.shape
    try:
        with open(path, "wb") as fh:
            fh.write(VTEN_MAGIC)
            fh.write(struct.pack("<I", VTEN_VERSION))
            fh.write(struct.pack("<B", len(dims)))
            for d in dims:
                fh.write(struct.pack("<I", d))
            fh.write(tensor.data.astype("<f4").tobytes(order="C"))
    except OSError as exc:
        raise VitPadIOError(f"cannot write tensor file {path}: {exc}") from exc


def read_vten(path) -> Tensor:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise VitPadIOError(f"cannot read tensor file {path}: {exc}") from exc
    if blob[:4] != VTEN_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}")
    if len(blob) < 9:
        raise CorruptionError(f"{path}: truncated header")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VTEN_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    rank = blob[8]
    offset = 9
    if len(blob) < offset + 4 * rank:
        raise CorruptionError(f"{path}: truncated dimension list")
    dims = struct.unpack_from(f"<{rank}I", blob, offset)
    offset += 4 * rank
    count = int(np.prod(dims)) if dims else 1
    if len(blob) != offset + 4 * count:
        raise CorruptionError(f"{path}: payload length disagrees with declared dims {dims}")
    data = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(dims)
    return Tensor(data.astype(np.float32))
