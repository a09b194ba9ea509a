"""Dense float64 tensors with a reverse-mode gradient tape.

Every differentiable computation in this package runs through the
primitives in this module.  A :class:`Tensor` wraps a contiguous float64
numpy array; a :class:`Tape` records the operations applied to tensors
that participate in a training step, in append order, and replays them
in strict reverse order to accumulate gradients.

Tensors without a tape are immutable values and safe to share across
threads.  A tape is single-threaded: one tape per training step, never
shared.  Evaluation runs tape-free (pass plain tensors and no recording
happens).

Serialization uses the VINE dump format: magic bytes ``VINE``, format
version u16, rank u16, dims as u64 little-endian, then the data buffer
as f64 little-endian.  Round-trips are bit-exact.
"""

from __future__ import annotations

import struct
from typing import BinaryIO, Callable, Sequence

import numpy as np

EPS_COS = 1e-8  # lower clamp on cosine-similarity denominators

_DUMP_MAGIC = b"VINE"
_DUMP_VERSION = 1


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


class Tensor:
    """A dense float64 array, optionally attached to a gradient tape.

    ``tape`` and ``gid`` (the handle into the tape's node list) are both
    ``None`` for plain values; such tensors never receive gradient
    contributions.
    """

    __slots__ = ("data", "tape", "gid")

    def __init__(self, data, tape: "Tape | None" = None, gid: int | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            # ascontiguousarray would also promote 0-d scalars to shape (1,)
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.tape = tape
        self.gid = gid

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = "" if self.tape is None else f" gid={self.gid}"
        return f"Tensor(shape={self.shape}{tag})"


def tensor(data) -> Tensor:
    """Wrap ``data`` as a tape-free constant tensor."""
    return Tensor(data)


class _Node:
    __slots__ = ("parents", "bwd")

    def __init__(self, parents: tuple[int, ...], bwd):
        self.parents = parents
        self.bwd = bwd


class Gradients:
    """Gradient lookup produced by :meth:`Tape.backward`."""

    def __init__(self, slots: list):
        self._slots = slots

    def wrt(self, t: Tensor) -> np.ndarray:
        """Gradient for ``t``; zeros if nothing flowed back to it."""
        if t.gid is None or t.gid >= len(self._slots) or self._slots[t.gid] is None:
            return np.zeros_like(t.data)
        return self._slots[t.gid]


class Tape:
    """Append-only record of operations for one reverse-mode sweep.

    An operation is recorded after all of its operands, so append order
    is a topological order and the backward pass visits nodes exactly
    once, in strict reverse append order.  Backward rules receive the
    output gradient read-only and must not mutate it.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def leaf(self, data) -> Tensor:
        """Register ``data`` as a differentiable input on this tape."""
        gid = len(self.nodes)
        self.nodes.append(_Node((), None))
        return Tensor(data, self, gid)

    def _record(self, data: np.ndarray, srcs: Sequence[Tensor],
                bwd: Callable[[np.ndarray], tuple]) -> Tensor:
        parents = tuple(-1 if s.tape is None else s.gid for s in srcs)
        gid = len(self.nodes)
        self.nodes.append(_Node(parents, bwd))
        return Tensor(data, self, gid)

    def backward(self, out: Tensor) -> Gradients:
        """Accumulate d(out)/d(leaf) for every tensor on the tape.

        ``out`` must be a scalar (size 1) recorded on this tape.  Two
        backward sweeps over the same tape give bit-identical results:
        accumulation order is fixed by node order.
        """
        if out.tape is not self:
            raise ValueError("output tensor is not on this tape")
        if out.data.size != 1:
            raise ShapeError(f"backward output must be scalar, got shape {out.shape}")
        slots: list = [None] * len(self.nodes)
        owned = [False] * len(self.nodes)
        slots[out.gid] = np.ones_like(out.data)
        owned[out.gid] = True
        for gid in range(out.gid, -1, -1):
            g = slots[gid]
            if g is None:
                continue
            node = self.nodes[gid]
            if node.bwd is None:
                continue
            for pid, gp in zip(node.parents, node.bwd(g)):
                if pid < 0 or gp is None:
                    continue
                if slots[pid] is None:
                    slots[pid] = gp
                elif owned[pid]:
                    slots[pid] += gp
                else:
                    slots[pid] = slots[pid] + gp
                    owned[pid] = True
        return Gradients(slots)


def _tape_of(*ts: Tensor) -> Tape | None:
    tape = None
    for t in ts:
        if t.tape is not None:
            if tape is None:
                tape = t.tape
            elif tape is not t.tape:
                raise ValueError("operands live on different tapes")
    return tape


def from_op(data: np.ndarray, srcs: Sequence[Tensor],
            bwd: Callable[[np.ndarray], tuple]) -> Tensor:
    """Record a custom primitive.

    ``bwd(g)`` must return one gradient array (or ``None``) per entry of
    ``srcs``, in order.  Modules outside this one (bilinear warping,
    upsampling) use this hook to define their own differentiable
    primitives on the shared substrate.
    """
    tape = _tape_of(*srcs)
    if tape is None:
        return Tensor(data)
    return tape._record(data, srcs, bwd)


def _require_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "add")
    return from_op(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "sub")
    return from_op(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return from_op(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "div")
    ad, bd = a.data, b.data
    return from_op(ad / bd, (a, b), lambda g: (g / bd, -g * ad / (bd * bd)))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return from_op(a.data * c, (a,), lambda g: (g * c,))


def add_const(a: Tensor, c: float) -> Tensor:
    return from_op(a.data + float(c), (a,), lambda g: (g,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0
    return from_op(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    mask = a.data > 0.0
    out = np.where(mask, a.data, slope * a.data)
    return from_op(out, (a,), lambda g: (g * np.where(mask, 1.0, slope),))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    s = np.empty_like(x)
    pos = x >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    s[~pos] = ex / (1.0 + ex)
    return from_op(s, (a,), lambda g: (g * s * (1.0 - s),))


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    shape = tuple(int(d) for d in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None
    src_shape = a.shape
    return from_op(out, (a,), lambda g: (g.reshape(src_shape),))


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {a.shape}")
    return from_op(a.data.T, (a,), lambda g: (g.T,))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ShapeError("concat: no operands")
    datas = [p.data for p in parts]
    out = np.concatenate(datas, axis=axis)
    offsets = np.cumsum([d.shape[axis] for d in datas])[:-1]

    def bwd(g):
        return tuple(np.split(g, offsets, axis=axis))

    return from_op(out, tuple(parts), bwd)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not chain")
    ad, bd = a.data, b.data
    return from_op(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def add_rowvec(x: Tensor, v: Tensor) -> Tensor:
    """Add a length-C vector to every row of an N-by-C matrix."""
    if x.data.ndim != 2 or v.data.ndim != 1 or x.shape[1] != v.shape[0]:
        raise ShapeError(f"add_rowvec: shapes {x.shape} and {v.shape} do not agree")
    return from_op(x.data + v.data[None, :], (x, v), lambda g: (g, g.sum(axis=0)))


def conv1x1(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Per-location linear map over the channel axis of a C-by-H-by-W map."""
    if x.data.ndim != 3 or w.data.ndim != 2 or w.shape[1] != x.shape[0]:
        raise ShapeError(f"conv1x1: feature {x.shape} vs weight {w.shape}")
    c_in, h, wd = x.shape
    c_out = w.shape[0]
    xf = x.data.reshape(c_in, h * wd)
    out = w.data @ xf
    if b is not None:
        if b.shape != (c_out,):
            raise ShapeError(f"conv1x1: bias {b.shape} vs weight {w.shape}")
        out = out + b.data[:, None]
    wdspan = w.data

    def bwd(g):
        gf = g.reshape(c_out, h * wd)
        gx = (wdspan.T @ gf).reshape(c_in, h, wd)
        gw = gf @ xf.T
        gb = gf.sum(axis=1) if b is not None else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    srcs = (x, w, b) if b is not None else (x, w)
    return from_op(out.reshape(c_out, h, wd), srcs, bwd)


# ---------------------------------------------------------------------------
# reductions and broadcasts


def sum_all(a: Tensor) -> Tensor:
    shp = a.shape
    return from_op(np.array(a.data.sum()), (a,),
                   lambda g: (np.full(shp, float(g)),))


def mean_rows(x: Tensor) -> Tensor:
    """Mean over axis 0 of an N-by-C matrix, yielding a length-C vector."""
    if x.data.ndim != 2:
        raise ShapeError(f"mean_rows: expected a matrix, got {x.shape}")
    n = x.shape[0]
    return from_op(x.data.mean(axis=0), (x,),
                   lambda g: (np.tile(g / n, (n, 1)),))


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean of a C-by-H-by-W map, yielding a length-C vector."""
    if x.data.ndim != 3:
        raise ShapeError(f"global_avg_pool: expected C×H×W, got {x.shape}")
    _, h, w = x.shape
    area = h * w

    def bwd(g):
        return (np.broadcast_to(g[:, None, None] / area, x.shape),)

    return from_op(x.data.mean(axis=(1, 2)), (x,), bwd)


def broadcast_cvec(v: Tensor, h: int, w: int) -> Tensor:
    """Broadcast a length-C vector over an H-by-W spatial grid."""
    if v.data.ndim != 1:
        raise ShapeError(f"broadcast_cvec: expected a vector, got {v.shape}")
    out = np.broadcast_to(v.data[:, None, None], (v.shape[0], h, w)).copy()
    return from_op(out, (v,), lambda g: (g.sum(axis=(1, 2)),))


def mul_map(x: Tensor, m: Tensor) -> Tensor:
    """Scale every channel of a C-by-H-by-W map by an H-by-W map."""
    if x.data.ndim != 3 or m.shape != x.shape[1:]:
        raise ShapeError(f"mul_map: feature {x.shape} vs map {m.shape}")
    xd, md = x.data, m.data
    return from_op(xd * md[None], (x, m),
                   lambda g: (g * md[None], (g * xd).sum(axis=0)))


# ---------------------------------------------------------------------------
# nonlinear blocks


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, computed with max-subtraction."""
    xd = x.data
    m = xd.max(axis=-1, keepdims=True)
    e = np.exp(xd - m)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return from_op(y, (x,), bwd)


def cosine_map(features: Tensor, proto: Tensor) -> Tensor:
    """Per-location cosine similarity of a C-by-H-by-W map to a C-vector.

    The denominator is clamped below by ``EPS_COS`` so zero-norm operands
    yield 0 instead of dividing by zero; the clamp blocks gradient flow
    through the norms wherever it is active.
    """
    if features.data.ndim != 3 or proto.data.ndim != 1 \
            or features.shape[0] != proto.shape[0]:
        raise ShapeError(f"cosine_map: features {features.shape} vs proto {proto.shape}")
    f, p = features.data, proto.data
    num = np.einsum("chw,c->hw", f, p)
    fn = np.sqrt(np.einsum("chw,chw->hw", f, f))
    pn = float(np.sqrt(p @ p))
    den_raw = fn * pn
    den = np.maximum(den_raw, EPS_COS)
    out = num / den

    def bwd(g):
        gnum = g / den
        live = den_raw > EPS_COS
        gden = np.where(live, -g * num / (den * den), 0.0)
        fn_safe = np.where(fn > 0.0, fn, 1.0)
        pn_safe = pn if pn > 0.0 else 1.0
        gfn = gden * pn
        gpn = float((gden * fn).sum())
        gf = gnum[None] * p[:, None, None] + (gfn / fn_safe)[None] * f
        gp = np.einsum("hw,chw->c", gnum, f) + gpn * p / pn_safe
        return gf, gp

    return from_op(out, (features, proto), bwd)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared error between two same-shape tensors (scalar output)."""
    _require_same_shape(a, b, "mse")
    d = a.data - b.data
    n = d.size

    def bwd(g):
        ga = (2.0 * float(g) / n) * d
        return ga, -ga

    return from_op(np.array((d * d).mean()), (a, b), bwd)


def bce_with_logits(logits: Tensor, targets: Tensor) -> Tensor:
    """Mean binary cross-entropy on logits, in the stable log-sum-exp form."""
    _require_same_shape(logits, targets, "bce_with_logits")
    x, z = logits.data, targets.data
    per = np.maximum(x, 0.0) - x * z + np.log1p(np.exp(-np.abs(x)))
    n = x.size

    def bwd(g):
        s = np.empty_like(x)
        pos = x >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        s[~pos] = ex / (1.0 + ex)
        gl = (float(g) / n) * (s - z)
        gz = (float(g) / n) * (-x)
        return gl, gz

    return from_op(np.array(per.mean()), (logits, targets), bwd)


# ---------------------------------------------------------------------------
# gather / scatter primitives for graph message passing


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows ``idx`` from an N-by-C matrix (rows may repeat)."""
    if x.data.ndim != 2:
        raise ShapeError(f"gather_rows: expected a matrix, got {x.shape}")
    idx = np.asarray(idx, dtype=np.intp)
    n = x.shape[0]

    def bwd(g):
        gx = np.zeros((n, x.shape[1]))
        np.add.at(gx, idx, g)
        return (gx,)

    return from_op(x.data[idx], (x,), bwd)


def row_scale(x: Tensor, s: Tensor) -> Tensor:
    """Scale row i of an E-by-C matrix by the scalar s[i]."""
    if x.data.ndim != 2 or s.data.ndim != 1 or x.shape[0] != s.shape[0]:
        raise ShapeError(f"row_scale: shapes {x.shape} and {s.shape} do not agree")
    xd, sd = x.data, s.data
    return from_op(xd * sd[:, None], (x, s),
                   lambda g: (g * sd[:, None], (g * xd).sum(axis=1)))


def segment_softmax(e: Tensor, seg: np.ndarray, num_segments: int) -> Tensor:
    """Softmax of the entries of ``e`` within each segment of ``seg``.

    Numerically stabilized with a per-segment max.  Every segment that
    appears in ``seg`` forms one normalized distribution.
    """
    if e.data.ndim != 1:
        raise ShapeError(f"segment_softmax: expected a vector, got {e.shape}")
    seg = np.asarray(seg, dtype=np.intp)
    m = np.full(num_segments, -np.inf)
    np.maximum.at(m, seg, e.data)
    ex = np.exp(e.data - m[seg])
    den = np.bincount(seg, weights=ex, minlength=num_segments)
    out = ex / den[seg]

    def bwd(g):
        dot = np.bincount(seg, weights=g * out, minlength=num_segments)
        return (out * (g - dot[seg]),)

    return from_op(out, (e,), bwd)


def segment_sum(x: Tensor, seg: np.ndarray, num_segments: int) -> Tensor:
    """Sum rows of an E-by-C matrix into their segments (N-by-C output)."""
    if x.data.ndim != 2:
        raise ShapeError(f"segment_sum: expected a matrix, got {x.shape}")
    seg = np.asarray(seg, dtype=np.intp)
    out = np.zeros((num_segments, x.shape[1]))
    np.add.at(out, seg, x.data)
    return from_op(out, (x,), lambda g: (g[seg],))


# ---------------------------------------------------------------------------
# im2col for 3x3 convolutions


def unfold3x3(x: Tensor, stride: int = 1) -> Tensor:
    """Extract zero-padded 3x3 patches of a C-by-H-by-W map.

    Output is (H'*W') by (C*9) with H' = ceil(H/stride); column order is
    channel-major then kernel row, kernel column.
    """
    if x.data.ndim != 3:
        raise ShapeError(f"unfold3x3: expected C×H×W, got {x.shape}")
    c, h, w = x.shape
    xp = np.zeros((c, h + 2, w + 2))
    xp[:, 1:h + 1, 1:w + 1] = x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # C x H' x W' x 3 x 3
    ho, wo = win.shape[1], win.shape[2]
    out = win.transpose(1, 2, 0, 3, 4).reshape(ho * wo, c * 9)

    def bwd(g):
        gw = g.reshape(ho, wo, c, 3, 3)
        gxp = np.zeros_like(xp)
        rows = np.arange(ho) * stride
        cols = np.arange(wo) * stride
        for ky in range(3):
            for kx in range(3):
                gxp[:, rows[:, None] + ky, cols[None, :] + kx] += \
                    gw[:, :, :, ky, kx].transpose(2, 0, 1)
        return (gxp[:, 1:h + 1, 1:w + 1],)

    return from_op(np.ascontiguousarray(out), (x,), bwd)


# ---------------------------------------------------------------------------
# serialization (VINE dump format)


def dump_tensor(t: Tensor, fh: BinaryIO) -> None:
    """Write a tensor in the VINE dump format (bit-exact round-trip)."""
    arr = np.asarray(t.data, dtype="<f8")
    fh.write(_DUMP_MAGIC)
    fh.write(struct.pack("<HH", _DUMP_VERSION, arr.ndim))
    for d in arr.shape:
        fh.write(struct.pack("<Q", d))
    fh.write(arr.tobytes())


def load_tensor(fh: BinaryIO) -> Tensor:
    """Read a tensor written by :func:`dump_tensor`."""
    magic = fh.read(4)
    if magic != _DUMP_MAGIC:
        raise ValueError(f"bad tensor magic {magic!r}")
    version, rank = struct.unpack("<HH", fh.read(4))
    if version != _DUMP_VERSION:
        raise ValueError(f"unsupported tensor format version {version}")
    dims = tuple(struct.unpack("<Q", fh.read(8))[0] for _ in range(rank))
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    buf = fh.read(8 * count)
    if len(buf) != 8 * count:
        raise ValueError("truncated tensor payload")
    data = np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(dims)
    return Tensor(data)
