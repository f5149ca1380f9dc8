"""Dense n-dimensional tensors with reverse-mode automatic differentiation.

Every primitive application is recorded on the active :class:`Graph` (a tape).
Backward walks the tape in reverse execution order and accumulates
vector-Jacobian products into the ``grad`` buffer of every leaf tensor that
has ``requires_grad`` set.  A captured graph can be replayed on fresh inputs
and reproduces its outputs bit-for-bit at fixed precision.
"""

from __future__ import annotations

import struct
from typing import Callable, Iterable, Optional

import numpy as np


class AutodiffError(Exception):
    """Base class for tensor/graph errors."""


class ShapeError(AutodiffError):
    """Operand shapes violate a primitive's shape rule."""


class GraphError(AutodiffError):
    """Graph misuse: backward before forward, unknown tensor, bad replay."""


class NonFiniteError(AutodiffError):
    """An intermediate value overflowed to inf or nan."""


class SerializationError(AutodiffError):
    """Malformed or unsupported binary tensor/checkpoint data."""


_FLOAT_DTYPES = (np.float32, np.float64)
_default_dtype = np.float32


def set_default_dtype(dtype) -> None:
    """Set the dtype used for newly created tensors ('float32' or 'float64')."""
    global _default_dtype
    dt = np.dtype(dtype).type
    if dt not in _FLOAT_DTYPES:
        raise ValueError(f"unsupported default dtype {dtype!r}")
    _default_dtype = dt


def default_dtype():
    return _default_dtype


class Tensor:
    """A dense array plus an optional gradient buffer.

    ``data`` is a row-major numpy array (float32 or float64).  Tensors are
    treated as immutable values once created; parameter updates replace the
    ``data`` buffer rather than writing into it.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(np.dtype(dtype).type, copy=False)
        elif arr.dtype.type not in _FLOAT_DTYPES:
            arr = arr.astype(_default_dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detached(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return (f"Tensor(shape={self.data.shape}, dtype={self.data.dtype},"
                f" requires_grad={self.requires_grad})")

    # Arithmetic sugar delegates to the primitive registry in ops.py.
    def _binop(self, name, other, reverse=False):
        from . import ops
        fn = getattr(ops, name)
        if not isinstance(other, Tensor):
            other = Tensor(np.asarray(other, dtype=self.data.dtype))
        return fn(other, self) if reverse else fn(self, other)

    def __add__(self, other):
        return self._binop("add", other)

    def __radd__(self, other):
        return self._binop("add", other, reverse=True)

    def __sub__(self, other):
        return self._binop("sub", other)

    def __rsub__(self, other):
        return self._binop("sub", other, reverse=True)

    def __mul__(self, other):
        return self._binop("mul", other)

    def __rmul__(self, other):
        return self._binop("mul", other, reverse=True)

    def __truediv__(self, other):
        return self._binop("div", other)

    def __rtruediv__(self, other):
        return self._binop("div", other, reverse=True)

    def __matmul__(self, other):
        return self._binop("matmul", other)

    def __neg__(self):
        from . import ops
        return ops.neg(self)


# --------------------------------------------------------------------------
# Primitive registry
# --------------------------------------------------------------------------

class Primitive:
    """Forward/backward pair for one op.

    ``forward(*arrays, **kwargs) -> (out_array, ctx)`` where ``ctx`` holds
    whatever backward needs.  ``backward(ctx, out_grad, needs, **kwargs)``
    returns one gradient array (or None) per input, in order.
    """

    __slots__ = ("name", "forward", "backward")

    def __init__(self, name: str, forward: Callable, backward: Optional[Callable]):
        self.name = name
        self.forward = forward
        self.backward = backward


_REGISTRY: dict[str, Primitive] = {}


def register_primitive(name: str, forward: Callable, backward: Optional[Callable]) -> None:
    if name in _REGISTRY:
        raise ValueError(f"primitive {name!r} already registered")
    _REGISTRY[name] = Primitive(name, forward, backward)


class Node:
    """One recorded primitive application."""

    __slots__ = ("index", "op", "input_ids", "out_id", "kwargs", "ctx", "needs_grad")

    def __init__(self, index, op, input_ids, out_id, kwargs, ctx, needs_grad):
        self.index = index
        self.op = op
        self.input_ids = input_ids
        self.out_id = out_id
        self.kwargs = kwargs
        self.ctx = ctx
        self.needs_grad = needs_grad


_graph_stack: list["Graph"] = []


def active_graph() -> Optional["Graph"]:
    return _graph_stack[-1] if _graph_stack else None


class Graph:
    """Execution tape: ordered primitive applications over value slots.

    Value ids index ``_values``; leaves (tensors created outside any op) get
    slots on first use, computed tensors get slots when their node is
    recorded.  Node order is execution order, hence a valid topological
    order.
    """

    def __init__(self, check_finite: bool = True):
        self.check_finite = check_finite
        self.nodes: list[Node] = []
        self._values: list[Tensor] = []
        self._ids: dict[int, int] = {}        # id(tensor) -> value id
        self._needs: list[bool] = []
        self._leaf_ids: list[int] = []
        self.input_names: dict[str, int] = {}  # named inputs for replay
        self.output_names: dict[str, int] = {}
        self._ran_forward = False

    # -- context manager -------------------------------------------------
    def __enter__(self) -> "Graph":
        _graph_stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _graph_stack.pop()
        assert popped is self

    # -- recording --------------------------------------------------------
    def _slot(self, t: Tensor, leaf: bool) -> int:
        vid = self._ids.get(id(t))
        if vid is None:
            vid = len(self._values)
            self._values.append(t)
            self._needs.append(t.requires_grad)
            self._ids[id(t)] = vid
            if leaf:
                self._leaf_ids.append(vid)
        return vid

    def record(self, op: str, inputs: tuple, out: Tensor, kwargs: dict, ctx) -> None:
        input_ids = tuple(self._slot(t, leaf=True) for t in inputs)
        needs = any(self._needs[i] for i in input_ids)
        out_id = self._slot(out, leaf=False)
        self._needs[out_id] = needs
        self.nodes.append(Node(len(self.nodes), op, input_ids, out_id, kwargs,
                               ctx if needs else None, needs))
        self._ran_forward = True

    def value_id(self, t: Tensor) -> int:
        vid = self._ids.get(id(t))
        if vid is None:
            raise GraphError("tensor was not produced or consumed in this graph")
        return vid

    # -- backward ---------------------------------------------------------
    def backward(self, output: Tensor, output_grad: Optional[Tensor] = None) -> None:
        """Accumulate vector-Jacobian products into every requires_grad leaf."""
        if not self._ran_forward:
            raise GraphError("backward called before any forward evaluation")
        out_id = self.value_id(output)
        if output_grad is None:
            seed = np.ones_like(output.data)
        else:
            seed = output_grad.data if isinstance(output_grad, Tensor) else np.asarray(output_grad)
            if seed.shape != output.data.shape:
                raise ShapeError(
                    f"output grad shape {seed.shape} does not match output {output.data.shape}")
            seed = seed.astype(output.data.dtype, copy=False)
        grads: dict[int, np.ndarray] = {out_id: seed}
        for node in reversed(self.nodes):
            g_out = grads.pop(node.out_id, None)
            if g_out is None or not node.needs_grad:
                continue
            prim = _REGISTRY[node.op]
            needs = tuple(self._needs[i] for i in node.input_ids)
            try:
                in_grads = prim.backward(node.ctx, g_out, needs, **node.kwargs)
            except AutodiffError as e:
                raise type(e)(f"node {node.index} ({node.op}): {e}") from None
            for vid, ig in zip(node.input_ids, in_grads):
                if ig is None or not self._needs[vid]:
                    continue
                cur = grads.get(vid)
                grads[vid] = ig if cur is None else cur + ig
        for vid in self._leaf_ids:
            t = self._values[vid]
            if t.requires_grad and vid in grads:
                g = grads[vid]
                t.grad = g if t.grad is None else t.grad + g

    # -- capture / replay ---------------------------------------------------
    @classmethod
    def capture(cls, fn: Callable, inputs: dict[str, Tensor],
                check_finite: bool = True) -> "Graph":
        """Run ``fn(**inputs)`` under a fresh graph and name its inputs/outputs."""
        g = cls(check_finite=check_finite)
        with g:
            out = fn(**inputs)
        for name, t in inputs.items():
            g.input_names[name] = g._slot(t, leaf=True)
        if isinstance(out, Tensor):
            out = {"out": out}
        for name, t in out.items():
            g.output_names[name] = g.value_id(t)
        return g

    def replay(self, inputs: dict[str, Tensor]) -> dict[str, Tensor]:
        """Re-execute the recorded program on new named inputs."""
        if set(inputs) != set(self.input_names):
            raise GraphError(
                f"replay inputs {sorted(inputs)} do not match captured {sorted(self.input_names)}")
        env: dict[int, np.ndarray] = {}
        for name, vid in self.input_names.items():
            t = inputs[name]
            if t.data.shape != self._values[vid].data.shape:
                raise ShapeError(
                    f"input {name!r}: shape {t.data.shape} does not match "
                    f"captured {self._values[vid].data.shape}")
            env[vid] = t.data
        for node in self.nodes:
            arrays = tuple(env.get(i, self._values[i].data) for i in node.input_ids)
            prim = _REGISTRY[node.op]
            try:
                out_data, _ = prim.forward(*arrays, **node.kwargs)
            except AutodiffError as e:
                raise type(e)(f"node {node.index} ({node.op}): {e}") from None
            if self.check_finite and not np.isfinite(out_data).all():
                bad = _first_nonfinite(out_data)
                raise NonFiniteError(f"node {node.index} ({node.op}): non-finite value {bad}")
            env[node.out_id] = out_data
        return {name: Tensor(env[vid]) for name, vid in self.output_names.items()}


def _first_nonfinite(arr: np.ndarray) -> float:
    flat = np.asarray(arr).ravel()
    idx = np.flatnonzero(~np.isfinite(flat))
    return float(flat[idx[0]]) if idx.size else float("nan")


def apply_op(name: str, inputs: Iterable[Tensor], **kwargs) -> Tensor:
    """Run a primitive, recording it on the active graph if one exists."""
    prim = _REGISTRY[name]
    inputs = tuple(inputs)
    arrays = tuple(t.data for t in inputs)
    out_data, ctx = prim.forward(*arrays, **kwargs)
    g = active_graph()
    if g is not None and g.check_finite and not np.isfinite(out_data).all():
        bad = _first_nonfinite(out_data)
        raise NonFiniteError(f"op {name}: produced non-finite value {bad}")
    requires = g is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=requires, dtype=out_data.dtype)
    if g is not None:
        g.record(name, inputs, out, kwargs, ctx)
    return out


def eval_graph(inputs: dict[str, Tensor], program: Graph) -> dict[str, Tensor]:
    """Replay a captured program on named inputs (see :meth:`Graph.replay`)."""
    return program.replay(inputs)


def backward(program: Graph, output: Tensor, output_grad: Optional[Tensor] = None) -> None:
    """Propagate ``output_grad`` through the program (see :meth:`Graph.backward`)."""
    program.backward(output, output_grad)


# --------------------------------------------------------------------------
# Binary tensor serialization ("KTSR"): little-endian header + flat buffer.
# Header: magic, u8 dtype code, u8 rank, u32 per-axis extents.
# --------------------------------------------------------------------------

_MAGIC = b"KTSR"
_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODE_FOR = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def write_tensor(fh, array: np.ndarray) -> None:
    # np.ascontiguousarray would promote 0-d arrays to 1-d; keep the rank.
    arr = np.asarray(array, order="C")
    code = _CODE_FOR.get(arr.dtype)
    if code is None:
        raise SerializationError(f"unsupported dtype {arr.dtype} for serialization")
    if arr.ndim > 255:
        raise SerializationError("rank too large")
    fh.write(_MAGIC)
    fh.write(struct.pack("<BB", code, arr.ndim))
    for extent in arr.shape:
        fh.write(struct.pack("<I", extent))
    fh.write(arr.astype(_DTYPE_CODES[code], copy=False).tobytes())


def read_tensor(fh) -> np.ndarray:
    magic = fh.read(4)
    if magic != _MAGIC:
        raise SerializationError(f"bad tensor magic {magic!r}")
    header = fh.read(2)
    if len(header) != 2:
        raise SerializationError("truncated tensor header")
    code, rank = struct.unpack("<BB", header)
    if code not in _DTYPE_CODES:
        raise SerializationError(f"unknown dtype code {code}")
    extents = fh.read(4 * rank)
    if len(extents) != 4 * rank:
        raise SerializationError("truncated tensor header")
    shape = struct.unpack(f"<{rank}I", extents) if rank else ()
    dtype = _DTYPE_CODES[code]
    count = int(np.prod(shape)) if shape else 1
    buf = fh.read(count * dtype.itemsize)
    if len(buf) != count * dtype.itemsize:
        raise SerializationError("truncated tensor record")
    arr = np.frombuffer(buf, dtype=dtype).reshape(shape)
    return arr.astype(dtype.newbyteorder("="), copy=True)


def save_tensor(path, array: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, array)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)
