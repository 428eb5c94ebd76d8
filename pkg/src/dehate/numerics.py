"""Dense float32 tensors, the DHT1 binary format, bilinear resizing, and a
small reverse-mode autodiff graph.

Everything here is deterministic and single-threaded: reductions use
np.einsum without optimization, which accumulates in index order, so repeated
runs produce bit-identical results.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError

_MAGIC = b"DHT1"
_DTYPE_F32 = 1


class Tensor:
    """Immutable n-dimensional float32 array, row-major.

    dims () is a scalar.  All values must be finite; construction rejects
    NaN/Inf, so any value that came through a public operation is finite.
    """

    __slots__ = ("array",)

    def __init__(self, values, dims=None):
        arr = np.array(values, dtype=np.float32)
        if dims is not None:
            arr = arr.reshape(tuple(dims))
        if arr.size == 0:
            raise ValueError("tensor dims must be positive")
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor values must be finite")
        arr.flags.writeable = False
        object.__setattr__(self, "array", arr)

    @property
    def dims(self) -> tuple[int, ...]:
        return self.array.shape

    @property
    def rank(self) -> int:
        return self.array.ndim

    def item(self) -> float:
        return float(self.array.reshape(-1)[0])

    def __eq__(self, other) -> bool:
        if not isinstance(other, Tensor):
            return NotImplemented
        return self.dims == other.dims and self.array.tobytes() == other.array.tobytes()

    def __hash__(self) -> int:
        return hash((self.dims, self.array.tobytes()))

    def __repr__(self) -> str:
        return f"Tensor(dims={self.dims})"


def tensor_write(t: Tensor, path) -> None:
    """Write a tensor to `path` in the DHT1 format.

    Layout: magic "DHT1", one dtype byte (1 = f32), one rank byte, two zero
    pad bytes, rank little-endian uint32 dims, then the row-major payload as
    little-endian f32.
    """
    header = _MAGIC + struct.pack("<BBxx", _DTYPE_F32, t.rank)
    dims = struct.pack(f"<{t.rank}I", *t.dims)
    payload = np.ascontiguousarray(t.array, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(header + dims + payload)


def tensor_read(path) -> Tensor:
    """Read a DHT1 file back into a Tensor; inverse of tensor_write."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8 or blob[:4] != _MAGIC:
        raise FormatError(f"{path}: not a DHT1 tensor file")
    dtype_code, rank = struct.unpack_from("<BBxx", blob, 4)
    if dtype_code != _DTYPE_F32:
        raise FormatError(f"{path}: unsupported dtype code {dtype_code}")
    dims_end = 8 + 4 * rank
    if len(blob) < dims_end:
        raise FormatError(f"{path}: truncated dimension table")
    dims = struct.unpack_from(f"<{rank}I", blob, 8)
    if any(d == 0 for d in dims):
        raise FormatError(f"{path}: zero-sized dimension")
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    if len(blob) != dims_end + 4 * count:
        raise FormatError(
            f"{path}: payload is {len(blob) - dims_end} bytes, expected {4 * count}"
        )
    values = np.frombuffer(blob, dtype="<f4", count=count, offset=dims_end)
    try:
        return Tensor(values, dims=dims)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def _axis_weights(n_in: int, n_out: int) -> np.ndarray:
    """Corner-aligned interpolation weights, shape (n_out, n_in), float64."""
    w = np.zeros((n_out, n_in), dtype=np.float64)
    scale = (n_in - 1) / (n_out - 1) if n_out > 1 else 0.0
    for i in range(n_out):
        coord = i * scale
        lo = min(int(coord), n_in - 1)
        frac = coord - lo
        w[i, lo] += 1.0 - frac
        if frac > 0.0:
            w[i, lo + 1] += frac
    return w


def resize_plane(plane: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of a 2-D float64 array with corner-aligned sampling."""
    wr = _axis_weights(plane.shape[0], out_h)
    wc = _axis_weights(plane.shape[1], out_w)
    return wr @ plane.astype(np.float64) @ wc.T


def bilinear_resize(src: Tensor, out_h: int, out_w: int) -> Tensor:
    """Resize a rank-2 tensor; output values stay within the source range."""
    if src.rank != 2:
        raise ValueError(f"bilinear_resize needs a rank-2 tensor, got rank {src.rank}")
    if out_h < 1 or out_w < 1:
        raise ValueError("target size must be at least 1x1")
    out = resize_plane(src.array, out_h, out_w)
    np.clip(out, float(src.array.min()), float(src.array.max()), out=out)
    return Tensor(out.astype(np.float32))


# --- autodiff graph -------------------------------------------------------

OP_KINDS = frozenset(
    {"add", "multiply", "matmul", "sigmoid", "relu", "mean",
     "broadcast-scale-shift", "concat"}
)
LEAF_KINDS = frozenset({"input", "param"})


@dataclass(frozen=True)
class Node:
    kind: str
    args: tuple[int, ...] = ()
    param_id: str | None = None
    axis: int = 0  # concat only


@dataclass
class Graph:
    """Acyclic computation over the eight supported op kinds.

    Nodes only reference earlier nodes (enforced at construction), so node
    order is a topological order.  Leaf values come either from the `inputs`
    map passed to forward/backward (kind "input") or from the graph's
    parameter store (kind "param").
    """

    nodes: list[Node] = field(default_factory=list)
    params: dict[str, Tensor] = field(default_factory=dict)
    outputs: tuple[int, ...] = ()

    def _push(self, node: Node) -> int:
        for a in node.args:
            if not 0 <= a < len(self.nodes):
                raise ValueError(f"node argument {a} does not refer to an earlier node")
        self.nodes.append(node)
        return len(self.nodes) - 1

    def input(self) -> int:
        return self._push(Node("input"))

    def param(self, name: str, value: Tensor) -> int:
        if name in self.params:
            raise ValueError(f"duplicate parameter id {name!r}")
        self.params[name] = value
        return self._push(Node("param", param_id=name))

    def add(self, a: int, b: int) -> int:
        return self._push(Node("add", (a, b)))

    def multiply(self, a: int, b: int) -> int:
        return self._push(Node("multiply", (a, b)))

    def matmul(self, a: int, b: int) -> int:
        return self._push(Node("matmul", (a, b)))

    def sigmoid(self, a: int) -> int:
        return self._push(Node("sigmoid", (a,)))

    def relu(self, a: int) -> int:
        return self._push(Node("relu", (a,)))

    def mean(self, a: int) -> int:
        return self._push(Node("mean", (a,)))

    def scale_shift(self, x: int, scale: int, shift: int) -> int:
        return self._push(Node("broadcast-scale-shift", (x, scale, shift)))

    def concat(self, args: list[int] | tuple[int, ...], axis: int) -> int:
        if len(args) < 2:
            raise ValueError("concat needs at least two inputs")
        return self._push(Node("concat", tuple(args), axis=axis))


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _seq_sum(x: np.ndarray) -> np.float32:
    # einsum without optimize accumulates in index order (bit-deterministic)
    return np.einsum("i->", x.reshape(-1))


_MATMUL_SIGS = {
    (2, 2): "ik,kj->ij",
    (1, 2): "k,kj->j",
    (2, 1): "ik,k->i",
    (1, 1): "k,k->",
}


def _eval_node(i: int, node: Node, vals: list, g: Graph, inputs) -> np.ndarray:
    def err(msg: str):
        return ValueError(f"node {i} ({node.kind}): {msg}")

    if node.kind == "input":
        if inputs is None or i not in inputs:
            raise err("no value bound for this input")
        return inputs[i].array
    if node.kind == "param":
        return g.params[node.param_id].array

    a = [vals[j] for j in node.args]
    if node.kind in ("add", "multiply"):
        if a[0].shape != a[1].shape:
            raise err(f"shape mismatch {a[0].shape} vs {a[1].shape}")
        return a[0] + a[1] if node.kind == "add" else a[0] * a[1]
    if node.kind == "matmul":
        sig = _MATMUL_SIGS.get((a[0].ndim, a[1].ndim))
        if sig is None:
            raise err(f"unsupported ranks {a[0].ndim} x {a[1].ndim}")
        if a[0].shape[-1] != a[1].shape[0]:
            raise err(f"inner dims differ: {a[0].shape} vs {a[1].shape}")
        return np.einsum(sig, a[0], a[1])
    if node.kind == "sigmoid":
        return _stable_sigmoid(a[0])
    if node.kind == "relu":
        return np.maximum(a[0], np.float32(0))
    if node.kind == "mean":
        return np.asarray(_seq_sum(a[0]) / np.float32(a[0].size))
    if node.kind == "broadcast-scale-shift":
        x, scale, shift = a
        if x.ndim < 1 or scale.ndim != 1 or shift.ndim != 1:
            raise err("activation must be rank>=1 with rank-1 scale and shift")
        if scale.shape[0] != x.shape[-1] or shift.shape[0] != x.shape[-1]:
            raise err(f"channel width {x.shape[-1]} vs scale {scale.shape[0]}, shift {shift.shape[0]}")
        return x * scale + shift
    if node.kind == "concat":
        axis = node.axis
        ref = list(a[0].shape)
        for arr in a[1:]:
            if arr.ndim != a[0].ndim:
                raise err("rank mismatch between concat inputs")
            other = list(arr.shape)
            if not 0 <= axis < arr.ndim:
                raise err(f"axis {axis} out of range for rank {arr.ndim}")
            other[axis] = ref[axis]
            if other != ref:
                raise err("non-concat dims differ between inputs")
        return np.concatenate(a, axis=axis)
    raise err("unknown op kind")


def _eval(g: Graph, inputs: dict[int, Tensor] | None) -> list[np.ndarray]:
    vals: list[np.ndarray] = []
    for i, node in enumerate(g.nodes):
        vals.append(_eval_node(i, node, vals, g, inputs))
    return vals


def forward(g: Graph, inputs: dict[int, Tensor] | None = None) -> dict[int, Tensor]:
    """Evaluate every node; returns node id -> Tensor for the whole graph."""
    vals = _eval(g, inputs)
    out: dict[int, Tensor] = {}
    for i, v in enumerate(vals):
        try:
            out[i] = Tensor(v)
        except ValueError as exc:
            raise ValueError(f"node {i} ({g.nodes[i].kind}): {exc}") from exc
    return out


def _accumulate(grads: list, j: int, delta: np.ndarray) -> None:
    if grads[j] is None:
        grads[j] = delta.astype(np.float32, copy=True)
    else:
        grads[j] += delta


def _backprop(g: Graph, vals: list[np.ndarray], seed_node: int,
              seed: np.ndarray) -> dict[int, np.ndarray]:
    """Reverse-mode sweep from `seed_node` with cotangent `seed`; returns
    gradients for every leaf (input and param) node id."""
    grads: list = [None] * len(g.nodes)
    grads[seed_node] = np.asarray(seed, dtype=np.float32).reshape(vals[seed_node].shape)

    for i in range(len(g.nodes) - 1, -1, -1):
        gout = grads[i]
        node = g.nodes[i]
        if gout is None or node.kind in LEAF_KINDS:
            continue
        a = [vals[j] for j in node.args]
        if node.kind == "add":
            _accumulate(grads, node.args[0], gout)
            _accumulate(grads, node.args[1], gout)
        elif node.kind == "multiply":
            _accumulate(grads, node.args[0], gout * a[1])
            _accumulate(grads, node.args[1], gout * a[0])
        elif node.kind == "matmul":
            ranks = (a[0].ndim, a[1].ndim)
            if ranks == (2, 2):
                ga = np.einsum("ij,kj->ik", gout, a[1])
                gb = np.einsum("ik,ij->kj", a[0], gout)
            elif ranks == (1, 2):
                ga = np.einsum("j,kj->k", gout, a[1])
                gb = np.einsum("k,j->kj", a[0], gout)
            elif ranks == (2, 1):
                ga = np.einsum("i,k->ik", gout, a[1])
                gb = np.einsum("i,ik->k", gout, a[0])
            else:
                ga = gout * a[1]
                gb = gout * a[0]
            _accumulate(grads, node.args[0], ga)
            _accumulate(grads, node.args[1], gb)
        elif node.kind == "sigmoid":
            s = vals[i]
            _accumulate(grads, node.args[0], gout * s * (1.0 - s))
        elif node.kind == "relu":
            _accumulate(grads, node.args[0], gout * (a[0] > 0))
        elif node.kind == "mean":
            _accumulate(grads, node.args[0],
                        np.broadcast_to(gout / np.float32(a[0].size), a[0].shape))
        elif node.kind == "broadcast-scale-shift":
            x, scale, _ = a
            x2 = x.reshape(-1, x.shape[-1])
            g2 = gout.reshape(-1, x.shape[-1])
            _accumulate(grads, node.args[0], gout * scale)
            _accumulate(grads, node.args[1], np.einsum("nc,nc->c", g2, x2))
            _accumulate(grads, node.args[2], np.einsum("nc->c", g2))
        elif node.kind == "concat":
            offset = 0
            for j, arr in zip(node.args, a):
                width = arr.shape[node.axis]
                sel = [slice(None)] * arr.ndim
                sel[node.axis] = slice(offset, offset + width)
                _accumulate(grads, j, gout[tuple(sel)])
                offset += width

    leaf_grads: dict[int, np.ndarray] = {}
    for i, node in enumerate(g.nodes):
        if node.kind in LEAF_KINDS:
            leaf_grads[i] = grads[i] if grads[i] is not None \
                else np.zeros_like(vals[i], dtype=np.float32)
    return leaf_grads


def backward(g: Graph, inputs: dict[int, Tensor] | None,
             loss_node: int) -> dict[int, Tensor]:
    """Gradient of the scalar at `loss_node` w.r.t. every input and param."""
    vals = _eval(g, inputs)
    if not 0 <= loss_node < len(g.nodes):
        raise ValueError(f"loss node {loss_node} is not in the graph")
    if vals[loss_node].size != 1:
        raise ValueError(
            f"loss node {loss_node} has {vals[loss_node].size} elements, expected a scalar"
        )
    seed = np.ones_like(vals[loss_node], dtype=np.float32)
    leaf = _backprop(g, vals, loss_node, seed)
    return {i: Tensor(v) for i, v in leaf.items()}


def backward_from(g: Graph, inputs: dict[int, Tensor] | None, node: int,
                  cotangent: Tensor) -> dict[int, Tensor]:
    """Reverse-mode sweep seeded with an explicit cotangent at `node`.

    Lets callers differentiate objectives whose final reduction is computed
    outside the graph: seed with d(objective)/d(node value) and the sweep
    yields d(objective)/d(leaf) for every input and param.
    """
    vals = _eval(g, inputs)
    if not 0 <= node < len(g.nodes):
        raise ValueError(f"seed node {node} is not in the graph")
    if cotangent.dims != vals[node].shape:
        raise ValueError(
            f"cotangent dims {cotangent.dims} do not match node dims {vals[node].shape}"
        )
    leaf = _backprop(g, vals, node, cotangent.array)
    return {i: Tensor(v) for i, v in leaf.items()}
