"""
backend/tensorgrid.py
Reverse-mode differentiable arrays for the segmentation network.

Only the operations the network and the Dice losses need live here:
conv2d (3x3, zero padding 1), relu, sigmoid, maxpool2, upsample2,
concat_channels, plus a few elementwise and reduction helpers.

Usage:
    tape = Tape()
    x = tape.leaf(np.random.rand(1, 8, 8), name="x")
    loss = total(relu(x))
    grads = backward(loss, tape)    # {"x": ndarray of shape (1, 8, 8)}

Grids that are not on a tape are plain values; operations on them record
nothing, which is how inference runs.
"""

import hashlib
import logging
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from backend.errors import DimensionError, NonFiniteError, TapeError

logger = logging.getLogger(__name__)

PRECISIONS = {"float64": np.float64, "float32": np.float32}

GradFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
ArrayLike = Union["TensorGrid", np.ndarray, float, int, Sequence[float]]


def resolve_dtype(precision: str) -> np.dtype:
    try:
        return np.dtype(PRECISIONS[precision])
    except KeyError:
        raise ValueError(f"Unknown precision '{precision}' (expected one of {sorted(PRECISIONS)})")


class TensorGrid:
    """N-dimensional real array, optionally recorded on a Tape."""

    __slots__ = ("values", "grad", "tape", "node_id", "name")

    def __init__(self, values, tape: Optional["Tape"] = None, node_id: Optional[int] = None,
                 name: Optional[str] = None):
        arr = np.asarray(values)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.values: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.tape = tape
        self.node_id = node_id
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    @property
    def dtype(self) -> np.dtype:
        return self.values.dtype

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    def __repr__(self):
        where = f"node {self.node_id}" if self.tracked else "detached"
        return f"<TensorGrid shape={self.shape} dtype={self.dtype} {where}>"


class _Record(NamedTuple):
    node_id: int
    parent_ids: Tuple[Optional[int], ...]
    grad_fn: Optional[GradFn]
    op: str


class Tape:
    """Ordered record of executed operations.

    Records are appended as operations run, so every parent precedes its
    children and a reverse walk is a valid topological order.
    """

    def __init__(self):
        self._records: List[_Record] = []
        self._leaves: Dict[int, TensorGrid] = {}
        self._patterns: List[np.ndarray] = []
        self._consumed = False

    def __len__(self):
        return len(self._records)

    @property
    def consumed(self) -> bool:
        return self._consumed

    def _append(self, values: np.ndarray, parent_ids, grad_fn, op: str, name=None) -> TensorGrid:
        node_id = len(self._records)
        self._records.append(_Record(node_id, tuple(parent_ids), grad_fn, op))
        return TensorGrid(values, tape=self, node_id=node_id, name=name)

    def leaf(self, values, name: Optional[str] = None) -> TensorGrid:
        """Register a tracked leaf; backward() reports its gradient."""
        arr = np.asarray(values)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        _check_finite("leaf", arr)
        grid = self._append(arr, (), None, "leaf", name=name)
        self._leaves[grid.node_id] = grid
        return grid

    def constant(self, values) -> TensorGrid:
        """Put a value on the tape without making it differentiable."""
        arr = np.asarray(values)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        _check_finite("constant", arr)
        return self._append(arr, (), None, "constant")

    @property
    def leaves(self) -> Dict[str, TensorGrid]:
        return {_leaf_key(g): g for g in self._leaves.values()}

    def note_pattern(self, pattern: np.ndarray):
        self._patterns.append(pattern)

    def kink_signature(self) -> str:
        """Digest of every relu sign mask and maxpool argmax seen so far.

        Two forward passes with equal signatures lie on the same linear
        piece of every relu/maxpool, so finite differences between them
        are not polluted by kinks.
        """
        digest = hashlib.sha1()
        for pattern in self._patterns:
            digest.update(np.ascontiguousarray(pattern).tobytes())
        return digest.hexdigest()


def _leaf_key(grid: TensorGrid) -> str:
    return grid.name if grid.name is not None else f"leaf{grid.node_id}"


def _check_finite(op: str, values: np.ndarray):
    if not np.all(np.isfinite(values)):
        raise NonFiniteError(f"{op} produced non-finite values")


def as_grid(value: ArrayLike) -> TensorGrid:
    return value if isinstance(value, TensorGrid) else TensorGrid(value)


def _result(op: str, values: np.ndarray, inputs: Sequence[TensorGrid], grad_fn: GradFn) -> TensorGrid:
    _check_finite(op, values)
    tapes = {id(t.tape): t.tape for t in inputs if t.tape is not None}
    if not tapes:
        return TensorGrid(values)
    if len(tapes) > 1:
        raise TapeError(f"{op}: inputs are recorded on different tapes")
    tape = next(iter(tapes.values()))
    if tape.consumed:
        raise TapeError(f"{op}: tape was already used for backward")
    parent_ids = [t.node_id if t.tape is not None else None for t in inputs]
    return tape._append(values, parent_ids, grad_fn, op)


def _same_shape(op: str, a: TensorGrid, b: TensorGrid):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ============================================================================
# NETWORK OPERATIONS
# ============================================================================

def conv2d(x: ArrayLike, kernel: ArrayLike, bias: ArrayLike) -> TensorGrid:
    """3x3 convolution with zero padding 1: [C_in,H,W] -> [C_out,H,W]."""
    x, kernel, bias = as_grid(x), as_grid(kernel), as_grid(bias)
    xv, kv, bv = x.values, kernel.values, bias.values
    if xv.ndim != 3:
        raise DimensionError(f"conv2d: input must be C x H x W, got shape {xv.shape}")
    if kv.ndim != 4 or kv.shape[2:] != (3, 3):
        raise DimensionError(f"conv2d: kernel must be C_out x C_in x 3 x 3, got shape {kv.shape}")
    if kv.shape[1] != xv.shape[0]:
        raise DimensionError(f"conv2d: input has {xv.shape[0]} channels, kernel expects {kv.shape[1]}")
    if bv.shape != (kv.shape[0],):
        raise DimensionError(f"conv2d: bias shape {bv.shape} does not match {kv.shape[0]} output channels")

    padded = np.pad(xv, ((0, 0), (1, 1), (1, 1)))
    windows = sliding_window_view(padded, (3, 3), axis=(1, 2))  # C_in, H, W, 3, 3
    out = np.tensordot(kv, windows, axes=([1, 2, 3], [0, 3, 4])) + bv[:, None, None]
    need_x = x.tracked

    def grad_fn(g):
        gk = np.tensordot(g, windows, axes=([1, 2], [1, 2]))
        gb = g.sum(axis=(1, 2))
        gx = None
        if need_x:
            gwin = sliding_window_view(np.pad(g, ((0, 0), (1, 1), (1, 1))), (3, 3), axis=(1, 2))
            gx = np.tensordot(kv[:, :, ::-1, ::-1], gwin, axes=([0, 2, 3], [0, 3, 4]))
        return gx, gk, gb

    return _result("conv2d", out, (x, kernel, bias), grad_fn)


def relu(x: ArrayLike) -> TensorGrid:
    x = as_grid(x)
    # subgradient at exactly 0 is 0
    mask = x.values > 0
    out = np.where(mask, x.values, 0).astype(x.dtype, copy=False)
    if x.tracked:
        x.tape.note_pattern(mask)
    return _result("relu", out, (x,), lambda g: (g * mask,))


def sigmoid(x: ArrayLike) -> TensorGrid:
    x = as_grid(x)
    lo = np.finfo(x.dtype).tiny
    hi = np.nextafter(x.dtype.type(1), x.dtype.type(0))
    s = np.clip(expit(x.values), lo, hi).astype(x.dtype, copy=False)
    return _result("sigmoid", s, (x,), lambda g: (g * s * (1 - s),))


def maxpool2(x: ArrayLike) -> TensorGrid:
    """2x2 max pooling; ties route the gradient to the first row-major cell."""
    x = as_grid(x)
    if x.values.ndim != 3:
        raise DimensionError(f"maxpool2: input must be C x H x W, got shape {x.shape}")
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"maxpool2: spatial extent {h}x{w} is not even")
    blocks = x.values.reshape(c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    if x.tracked:
        x.tape.note_pattern(idx.astype(np.uint8))

    def grad_fn(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        return (gb.reshape(c, h // 2, w // 2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h, w),)

    return _result("maxpool2", out, (x,), grad_fn)


def upsample2(x: ArrayLike) -> TensorGrid:
    """Nearest-neighbour x2 upsampling: [C,H,W] -> [C,2H,2W]."""
    x = as_grid(x)
    if x.values.ndim != 3:
        raise DimensionError(f"upsample2: input must be C x H x W, got shape {x.shape}")
    c, h, w = x.shape
    out = x.values.repeat(2, axis=1).repeat(2, axis=2)
    return _result("upsample2", out, (x,), lambda g: (g.reshape(c, h, 2, w, 2).sum(axis=(2, 4)),))


def concat_channels(*grids: ArrayLike) -> TensorGrid:
    """Stack grids along the channel axis in argument order."""
    grids = tuple(as_grid(g) for g in grids)
    if not grids:
        raise DimensionError("concat_channels: nothing to concatenate")
    spatial = grids[0].shape[1:]
    for g in grids:
        if g.values.ndim != 3 or g.shape[1:] != spatial:
            raise DimensionError(f"concat_channels: spatial mismatch {g.shape[1:]} vs {spatial}")
    out = np.concatenate([g.values for g in grids], axis=0)
    bounds = np.cumsum([0] + [g.shape[0] for g in grids])

    def grad_fn(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(grids)))

    return _result("concat_channels", out, grids, grad_fn)


# ============================================================================
# ELEMENTWISE / REDUCTION HELPERS (used by the losses)
# ============================================================================

def add(a: ArrayLike, b: ArrayLike) -> TensorGrid:
    a, b = as_grid(a), as_grid(b)
    _same_shape("add", a, b)
    return _result("add", a.values + b.values, (a, b), lambda g: (g, g))


def mul(a: ArrayLike, b: ArrayLike) -> TensorGrid:
    a, b = as_grid(a), as_grid(b)
    _same_shape("mul", a, b)
    av, bv = a.values, b.values
    return _result("mul", av * bv, (a, b), lambda g: (g * bv, g * av))


def divide(a: ArrayLike, b: ArrayLike) -> TensorGrid:
    a, b = as_grid(a), as_grid(b)
    _same_shape("divide", a, b)
    av, bv = a.values, b.values
    with np.errstate(divide="ignore", invalid="ignore"):
        out = av / bv
    return _result("divide", out, (a, b), lambda g: (g / bv, -g * av / (bv * bv)))


def scale(x: ArrayLike, factor: float) -> TensorGrid:
    x = as_grid(x)
    return _result("scale", x.values * factor, (x,), lambda g: (g * factor,))


def shift(x: ArrayLike, offset: float) -> TensorGrid:
    x = as_grid(x)
    return _result("shift", x.values + offset, (x,), lambda g: (g,))


def total(x: ArrayLike) -> TensorGrid:
    """Sum of all elements as a 0-d grid."""
    x = as_grid(x)
    shape = x.shape
    out = np.asarray(x.values.sum(), dtype=x.dtype)
    return _result("total", out, (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


# ============================================================================
# BACKWARD PASS
# ============================================================================

def backward(loss: TensorGrid, tape: Tape) -> Dict[str, np.ndarray]:
    """Propagate d(loss)/d(node) back to every leaf of ``tape``.

    Each leaf's ``grad`` is set (zeros for leaves the loss does not depend
    on) and the same arrays are returned keyed by leaf name. A tape can be
    differentiated once.
    """
    if tape.consumed:
        raise TapeError("backward already ran on this tape")
    if loss.tape is None:
        raise TapeError("loss is detached from any tape")
    if loss.tape is not tape:
        raise TapeError("loss belongs to a different tape")
    if loss.values.size != 1:
        raise TapeError(f"loss must be scalar, got shape {loss.shape}")

    grads: Dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.values)}
    for record in reversed(tape._records[: loss.node_id + 1]):
        g = grads.get(record.node_id)
        if g is None or record.grad_fn is None:
            continue
        del grads[record.node_id]
        for parent_id, parent_grad in zip(record.parent_ids, record.grad_fn(g)):
            if parent_id is None or parent_grad is None:
                continue
            if parent_id in grads:
                grads[parent_id] = grads[parent_id] + parent_grad
            else:
                grads[parent_id] = parent_grad

    tape._consumed = True
    out = {}
    for node_id, leaf in tape._leaves.items():
        g = grads.get(node_id)
        leaf.grad = np.zeros_like(leaf.values) if g is None else g.reshape(leaf.shape).astype(leaf.dtype, copy=False)
        out[_leaf_key(leaf)] = leaf.grad
    return out
