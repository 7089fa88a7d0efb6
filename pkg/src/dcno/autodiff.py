"""Tape-based reverse-mode differentiation for the DCNO primitive set.

Values are numpy arrays; every recorded node computes its forward value
eagerly and keeps what its backward rule needs. Complex nodes carry
gradients in the ``dL/dRe + i dL/dIm`` convention, so a complex-linear map
``w = z r`` pulls back as ``g_z = conj(r) g_w``.

The spectral primitives work on real-input half spectra: ``fft2`` is the
real-to-complex transform over the two lattice axes of a ``(B, H, W, C)``
array and ``ifft2`` is its real-output inverse. Tape inputs are always real
fields, so the half spectrum carries all the information.
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import erf

_SQRT2 = float(np.sqrt(2.0))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))


# ---------------------------------------------------------------------------
# Parameter storage
# ---------------------------------------------------------------------------

class ParameterStore:
    """Named parameter arrays kept in registration order.

    The flat view concatenates the raveled arrays in that order; it is what
    the optimizer and the checkpoint format see.
    """

    def __init__(self):
        self._params: "OrderedDict[str, np.ndarray]" = OrderedDict()

    def register(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self._params:
            raise KeyError(f"parameter {name!r} registered twice")
        self._params[name] = np.array(value, dtype=float)
        return self._params[name]

    def __getitem__(self, name: str) -> np.ndarray:
        return self._params[name]

    def __setitem__(self, name: str, value: np.ndarray):
        if name not in self._params:
            raise KeyError(name)
        if np.shape(value) != self._params[name].shape:
            raise ValueError(f"shape mismatch for {name}: {np.shape(value)} vs {self._params[name].shape}")
        self._params[name] = np.asarray(value, dtype=self._params[name].dtype)

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def names(self) -> List[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    @property
    def size(self) -> int:
        return int(sum(v.size for v in self._params.values()))

    def count(self, prefix: str = "") -> int:
        return int(sum(v.size for k, v in self._params.items() if k.startswith(prefix)))

    def flat(self) -> np.ndarray:
        if not self._params:
            return np.zeros(0)
        return np.concatenate([v.ravel() for v in self._params.values()])

    def unflatten(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec)
        if vec.size != self.size:
            raise ValueError(f"flat vector has {vec.size} entries, store holds {self.size}")
        offset = 0
        for name, value in self._params.items():
            n = value.size
            self._params[name] = vec[offset:offset + n].reshape(value.shape).astype(value.dtype)
            offset += n

    def astype(self, dtype) -> "ParameterStore":
        out = ParameterStore()
        for name, value in self._params.items():
            out._params[name] = value.astype(dtype)
        return out

    def copy(self) -> "ParameterStore":
        out = ParameterStore()
        for name, value in self._params.items():
            out._params[name] = value.copy()
        return out


# ---------------------------------------------------------------------------
# Primitive kernels: forward(values, attrs) and backward(g, values, out, attrs)
# ---------------------------------------------------------------------------

def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _add_fwd(vals, attrs):
    return vals[0] + vals[1]


def _add_bwd(g, vals, out, attrs, saved=None):
    return _unbroadcast(g, vals[0].shape), _unbroadcast(g, vals[1].shape)


def _scale_fwd(vals, attrs):
    return vals[0] * attrs["factor"]


def _scale_bwd(g, vals, out, attrs, saved=None):
    factor = attrs["factor"]
    return (_unbroadcast(g * np.conj(factor), vals[0].shape),)


def _channel_linear_fwd(vals, attrs):
    x, w = vals
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"channel_linear: {x.shape[-1]} channels into a {w.shape} matrix")
    return x @ w


def _channel_linear_bwd(g, vals, out, attrs, saved=None):
    x, w = vals
    gx = g @ w.T
    gw = x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
    return gx, gw


def _padded_flat(x: np.ndarray, p: int, mode: str, tail: int) -> np.ndarray:
    """Pad the lattice axes and flatten to ``(B*Hp*Wp + tail, C)`` with a zero tail."""
    b, h, w, c = x.shape
    hp, wp = h + 2 * p, w + 2 * p
    flat = np.zeros((b * hp * wp + tail, c), dtype=x.dtype)
    view = flat[:b * hp * wp].reshape(b, hp, wp, c)
    if p == 0:
        view[...] = x
    elif mode == "circular":
        view[...] = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)), mode="wrap")
    else:
        view[:, p:p + h, p:p + w] = x
    return flat


def _tap_offsets(k: int, d: int, wp: int):
    return [(a, bb, a * d * wp + bb * d) for a in range(k) for bb in range(k)]


# A dilated tap (a, b) is a constant shift of the flattened padded lattice, so
# each tap is one contiguous GEMM. Outputs are computed on the padded lattice
# and the valid (H, W) window is cut out afterwards.

def _conv_fwd(vals, attrs):
    x, kern = vals[0], vals[1]
    k, _, cin, cout = kern.shape
    if x.ndim != 4 or x.shape[-1] != cin:
        raise ValueError(f"conv2d_dilated: input {x.shape} incompatible with kernel {kern.shape}")
    if k % 2 != 1:
        raise ValueError("conv2d_dilated needs an odd kernel size")
    d = attrs["dilation"]
    b, h, w, _ = x.shape
    p = d * (k - 1) // 2
    hp, wp = h + 2 * p, w + 2 * p
    n = b * hp * wp
    xp = _padded_flat(x, p, attrs["padding"], 2 * p * wp + 2 * p)
    acc = np.zeros((n, cout), dtype=x.dtype)
    tmp = np.empty_like(acc)
    for a, bb, off in _tap_offsets(k, d, wp):
        np.matmul(xp[off:off + n], kern[a, bb], out=tmp)
        acc += tmp
    out = acc.reshape(b, hp, wp, cout)[:, :h, :w]
    if len(vals) == 3:
        out = out + vals[2]
    return np.ascontiguousarray(out)


def _conv_bwd(g, vals, out, attrs, saved=None):
    x, kern = vals[0], vals[1]
    k, _, cin, cout = kern.shape
    d, mode = attrs["dilation"], attrs["padding"]
    b, h, w, _ = x.shape
    p = d * (k - 1) // 2
    hp, wp = h + 2 * p, w + 2 * p
    n = b * hp * wp
    tail = 2 * p * wp + 2 * p
    xp = _padded_flat(x, p, mode, tail)
    gv = np.zeros((b, hp, wp, cout), dtype=g.dtype)
    gv[:, :h, :w] = g
    gv = gv.reshape(n, cout)
    gk = np.empty_like(kern)
    # transposed dilated convolution accumulates onto the padded input
    gxp = np.zeros((n + tail, cin), dtype=g.dtype)
    tmp = np.empty((n, cin), dtype=g.dtype)
    for a, bb, off in _tap_offsets(k, d, wp):
        gk[a, bb] = xp[off:off + n].T @ gv
        np.matmul(gv, kern[a, bb].T, out=tmp)
        gxp[off:off + n] += tmp
    gxp = gxp[:n].reshape(b, hp, wp, cin)
    if p == 0:
        gx = gxp
    elif mode == "circular":
        gx = _fold_circular(gxp, p, h, w)
    else:
        gx = np.ascontiguousarray(gxp[:, p:p + h, p:p + w])
    grads = [gx, gk]
    if len(vals) == 3:
        grads.append(_unbroadcast(g, vals[2].shape))
    return tuple(grads)


def _fold_circular(gxp: np.ndarray, p: int, h: int, w: int) -> np.ndarray:
    """Add a circularly padded gradient back onto the unpadded lattice."""
    rows = gxp[:, p:p + h].copy()
    for i in list(range(p)) + list(range(p + h, h + 2 * p)):
        rows[:, (i - p) % h] += gxp[:, i]
    out = rows[:, :, p:p + w].copy()
    for j in list(range(p)) + list(range(p + w, w + 2 * p)):
        out[:, :, (j - p) % w] += rows[:, :, j]
    return out


def _gelu_fwd(vals, attrs):
    x = vals[0]
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    return x * cdf, cdf


def _gelu_bwd(g, vals, out, attrs, saved=None):
    x = vals[0]
    cdf = saved if saved is not None else 0.5 * (1.0 + erf(x / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return (g * (cdf + x * pdf),)


def _half_weights(w: int, dtype) -> np.ndarray:
    """Column multiplicities of a real-input half spectrum of width ``w``."""
    c = np.full(w // 2 + 1, 2.0, dtype=dtype)
    c[0] = 1.0
    if w % 2 == 0:
        c[-1] = 1.0
    return c[:, None]


def _fft2_fwd(vals, attrs):
    x = vals[0]
    if np.iscomplexobj(x):
        raise TypeError("fft2 on the tape expects a real field")
    return np.fft.rfft2(x, axes=(1, 2))


def _fft2_bwd(g, vals, out, attrs, saved=None):
    h, w = vals[0].shape[1:3]
    # adjoint of the half-spectrum forward map: Re(sum_k g_k e^{+ikx})
    gx = np.fft.irfft2(g / _half_weights(w, g.real.dtype), s=(h, w), axes=(1, 2)) * (h * w)
    return (gx.astype(vals[0].dtype, copy=False),)


def _ifft2_fwd(vals, attrs):
    return np.fft.irfft2(vals[0], s=attrs["shape"], axes=(1, 2))


def _ifft2_bwd(g, vals, out, attrs, saved=None):
    h, w = attrs["shape"]
    gz = np.fft.rfft2(g, axes=(1, 2)) * (_half_weights(w, g.dtype) / (h * w))
    return (gz.astype(vals[0].dtype, copy=False),)


def _corner_slices(h: int, m1: int, m2: int):
    return ((slice(0, m1), slice(0, m2)), (slice(h - m1, h), slice(0, m2)))


def _check_modes(z: np.ndarray, m1: int, m2: int):
    h, wh = z.shape[1:3]
    if 2 * m1 > h or m2 > wh:
        raise ValueError(f"kept modes ({m1}, {m2}) exceed the half spectrum {h}x{wh}")


def _mode_mix_fwd(vals, attrs):
    z, r = vals
    m1, m2 = attrs["modes"]
    _check_modes(z, m1, m2)
    rc = r[..., 0] + 1j * r[..., 1]
    if rc.shape[:3] != (2, m1, m2) or rc.shape[3] != z.shape[-1]:
        raise ValueError(f"mode_mix weights {r.shape} do not fit input {z.shape} with modes {(m1, m2)}")
    out = np.zeros(z.shape[:3] + (rc.shape[4],), dtype=z.dtype)
    for corner, (s1, s2) in enumerate(_corner_slices(z.shape[1], m1, m2)):
        block = z[:, s1, s2, :].transpose(1, 2, 0, 3)  # (m1, m2, B, cin)
        out[:, s1, s2, :] = (block @ rc[corner]).transpose(2, 0, 1, 3)
    return out


def _mode_mix_bwd(g, vals, out, attrs, saved=None):
    z, r = vals
    m1, m2 = attrs["modes"]
    rc = r[..., 0] + 1j * r[..., 1]
    gz = np.zeros_like(z)
    gr = np.zeros(rc.shape, dtype=z.dtype)
    for corner, (s1, s2) in enumerate(_corner_slices(z.shape[1], m1, m2)):
        gb = g[:, s1, s2, :].transpose(1, 2, 0, 3)  # (m1, m2, B, cout)
        zb = z[:, s1, s2, :].transpose(1, 2, 0, 3)
        gz[:, s1, s2, :] = (gb @ np.conj(rc[corner]).transpose(0, 1, 3, 2)).transpose(2, 0, 1, 3)
        gr[corner] = np.conj(zb).transpose(0, 1, 3, 2) @ gb
    return gz, np.stack([gr.real, gr.imag], axis=-1).astype(r.dtype, copy=False)


def _truncate_mask(z: np.ndarray, m1: int, m2: int) -> np.ndarray:
    mask = np.zeros(z.shape[1:3] + (1,), dtype=bool)
    for s1, s2 in _corner_slices(z.shape[1], m1, m2):
        mask[s1, s2] = True
    return mask


def _truncate_fwd(vals, attrs):
    m1, m2 = attrs["modes"]
    _check_modes(vals[0], m1, m2)
    return np.where(_truncate_mask(vals[0], m1, m2), vals[0], 0)


def _truncate_bwd(g, vals, out, attrs, saved=None):
    m1, m2 = attrs["modes"]
    return (np.where(_truncate_mask(vals[0], m1, m2), g, 0),)


def _sum_fwd(vals, attrs):
    return np.sum(vals[0], axis=attrs.get("axis"), keepdims=attrs.get("keepdims", False))


def _expand_reduced(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        axes = tuple(a % len(shape) for a in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def _sum_bwd(g, vals, out, attrs, saved=None):
    return (np.array(_expand_reduced(g, vals[0].shape, attrs.get("axis"), attrs.get("keepdims", False))),)


def _mean_fwd(vals, attrs):
    return np.mean(vals[0], axis=attrs.get("axis"), keepdims=attrs.get("keepdims", False))


def _mean_bwd(g, vals, out, attrs, saved=None):
    x = vals[0]
    n = x.size // max(np.size(out), 1)
    full = _expand_reduced(g, x.shape, attrs.get("axis"), attrs.get("keepdims", False))
    return (np.array(full) / n,)


def _square_fwd(vals, attrs):
    return vals[0] * vals[0]


def _square_bwd(g, vals, out, attrs, saved=None):
    return (2.0 * g * vals[0],)


def _sqrt_fwd(vals, attrs):
    return np.sqrt(vals[0])


def _sqrt_bwd(g, vals, out, attrs, saved=None):
    return (g / (2.0 * out),)


def _concat_fwd(vals, attrs):
    return np.concatenate(vals, axis=-1)


def _concat_bwd(g, vals, out, attrs, saved=None):
    splits = np.cumsum([v.shape[-1] for v in vals])[:-1]
    return tuple(np.split(g, splits, axis=-1))


def _slice_fwd(vals, attrs):
    return vals[0][..., attrs["start"]:attrs["stop"]]


def _slice_bwd(g, vals, out, attrs, saved=None):
    gx = np.zeros_like(vals[0])
    gx[..., attrs["start"]:attrs["stop"]] = g
    return (gx,)


@dataclass(frozen=True)
class Primitive:
    name: str
    forward: Callable
    backward: Callable
    arity: Optional[int]  # None = variadic
    saves: bool = False  # forward returns (value, saved) for its backward rule


PRIMITIVES: Dict[str, Primitive] = {
    p.name: p for p in [
        Primitive("add", _add_fwd, _add_bwd, 2),
        Primitive("scale", _scale_fwd, _scale_bwd, 1),
        Primitive("channel_linear", _channel_linear_fwd, _channel_linear_bwd, 2),
        Primitive("conv2d_dilated", _conv_fwd, _conv_bwd, None),
        Primitive("gelu", _gelu_fwd, _gelu_bwd, 1, saves=True),
        Primitive("fft2", _fft2_fwd, _fft2_bwd, 1),
        Primitive("ifft2", _ifft2_fwd, _ifft2_bwd, 1),
        Primitive("mode_mix", _mode_mix_fwd, _mode_mix_bwd, 2),
        Primitive("spectral_truncate", _truncate_fwd, _truncate_bwd, 1),
        Primitive("sum", _sum_fwd, _sum_bwd, 1),
        Primitive("mean", _mean_fwd, _mean_bwd, 1),
        Primitive("square", _square_fwd, _square_bwd, 1),
        Primitive("sqrt", _sqrt_fwd, _sqrt_bwd, 1),
        Primitive("concat_channels", _concat_fwd, _concat_bwd, None),
        Primitive("slice_channels", _slice_fwd, _slice_bwd, 1),
    ]
}


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

@dataclass
class Node:
    op: str  # primitive name, "leaf" or "const"
    inputs: Tuple[int, ...]
    value: np.ndarray
    attrs: dict = field(default_factory=dict)
    requires_grad: bool = False
    saved: Optional[np.ndarray] = None


class Tape:
    """Ordered record of a forward computation.

    Nodes are appended as they are computed, so the list is topologically
    ordered by construction.
    """

    def __init__(self):
        self.nodes: List[Node] = []

    def _push(self, node: Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def leaf(self, value: np.ndarray) -> int:
        return self._push(Node("leaf", (), np.asarray(value), requires_grad=True))

    def constant(self, value) -> int:
        return self._push(Node("const", (), np.asarray(value)))

    def leaves(self, store: ParameterStore) -> Dict[str, int]:
        return {name: self.leaf(value) for name, value in store.items()}

    def value(self, node_id: int) -> np.ndarray:
        return self.nodes[node_id].value

    def record(self, op: str, inputs: Sequence[int], **attrs) -> int:
        prim = PRIMITIVES.get(op)
        if prim is None:
            raise ValueError(f"unknown primitive {op!r}")
        inputs = tuple(int(i) for i in inputs)
        if prim.arity is not None and len(inputs) != prim.arity:
            raise ValueError(f"{op} takes {prim.arity} inputs, got {len(inputs)}")
        vals = [self.nodes[i].value for i in inputs]
        if op == "add" and np.broadcast_shapes(vals[0].shape, vals[1].shape) != vals[0].shape:
            raise ValueError(f"add: shapes {vals[0].shape} and {vals[1].shape} do not match")
        out = prim.forward(vals, attrs)
        saved = None
        if prim.saves:
            out, saved = out
        needs = any(self.nodes[i].requires_grad for i in inputs)
        return self._push(Node(op, inputs, out, attrs, needs, saved if needs else None))

    # thin helpers so model code reads naturally
    def add(self, a, b):
        return self.record("add", [a, b])

    def scale(self, x, factor):
        return self.record("scale", [x], factor=factor)

    def channel_linear(self, x, w):
        return self.record("channel_linear", [x, w])

    def conv2d(self, x, kernel, bias=None, dilation=1, padding="zero"):
        ins = [x, kernel] + ([bias] if bias is not None else [])
        return self.record("conv2d_dilated", ins, dilation=int(dilation), padding=padding)

    def gelu(self, x):
        return self.record("gelu", [x])

    def fft2(self, x):
        return self.record("fft2", [x])

    def ifft2(self, z, shape):
        return self.record("ifft2", [z], shape=tuple(shape))

    def mode_mix(self, z, r, modes):
        return self.record("mode_mix", [z, r], modes=tuple(modes))

    def sum(self, x, axis=None):
        return self.record("sum", [x], axis=axis)

    def mean(self, x, axis=None):
        return self.record("mean", [x], axis=axis)

    def square(self, x):
        return self.record("square", [x])

    def sqrt(self, x):
        return self.record("sqrt", [x])

    def concat(self, xs):
        return self.record("concat_channels", list(xs))

    def slice(self, x, start, stop):
        return self.record("slice_channels", [x], start=start, stop=stop)


def backward(tape: Tape, loss: int) -> Dict[int, np.ndarray]:
    """Reverse sweep from a scalar loss node.

    Returns gradients for every leaf reachable from ``loss``, keyed by node
    id. Accumulation follows reverse tape order, so repeated sweeps are
    bit-identical.
    """
    loss_val = tape.nodes[loss].value
    if np.size(loss_val) != 1:
        raise ValueError(f"loss node must be scalar, got shape {np.shape(loss_val)}")
    grads: Dict[int, np.ndarray] = {loss: np.ones_like(loss_val)}
    for nid in range(loss, -1, -1):
        node = tape.nodes[nid]
        g = grads.get(nid)
        if g is None or node.op in ("leaf", "const"):
            continue
        prim = PRIMITIVES[node.op]
        vals = [tape.nodes[i].value for i in node.inputs]
        in_grads = prim.backward(g, vals, node.value, node.attrs, node.saved)
        for i, gi in zip(node.inputs, in_grads):
            if not tape.nodes[i].requires_grad:
                continue
            if i in grads:
                grads[i] = grads[i] + gi
            else:
                grads[i] = gi
        if nid != loss:
            del grads[nid]
    return {i: g for i, g in grads.items() if tape.nodes[i].op == "leaf"}


def gradients(tape: Tape, loss: int, ids: Dict[str, int]) -> Dict[str, np.ndarray]:
    """Backward sweep keyed by parameter name; unreachable leaves get zeros."""
    raw = backward(tape, loss)
    return {name: raw.get(i, np.zeros_like(tape.value(i))) for name, i in ids.items()}


def flat_gradient(store: ParameterStore, grads: Dict[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([np.asarray(grads[name]).ravel() for name in store.names()])


Program = Callable[[Tape, Dict[str, int]], int]


def evaluate(program: Program, store: ParameterStore) -> float:
    tape = Tape()
    return float(tape.value(program(tape, tape.leaves(store))))


def grad_check(program: Program, store: ParameterStore, h: float = 1e-5,
               n_coords: int = 40, seed: int = 0) -> float:
    """Largest relative gap between tape and central-difference gradients.

    ``program(tape, ids)`` builds a scalar loss from the leaves in ``ids``.
    A random subsample of ``n_coords`` flat coordinates is probed; the gap
    is ``|a - c| / (|a| + |c| + 1e-12)``.
    """
    if h <= 0:
        raise ValueError("finite-difference step must be positive")
    tape = Tape()
    ids = tape.leaves(store)
    analytic = flat_gradient(store, gradients(tape, program(tape, ids), ids))
    base = store.flat()
    rng = np.random.default_rng(seed)
    n = base.size
    coords = rng.choice(n, size=min(n_coords, n), replace=False)
    probe = store.copy()
    worst = 0.0
    for c in coords:
        vec = base.copy()
        vec[c] += h
        probe.unflatten(vec)
        up = evaluate(program, probe)
        vec[c] -= 2 * h
        probe.unflatten(vec)
        down = evaluate(program, probe)
        central = (up - down) / (2 * h)
        err = abs(analytic[c] - central) / (abs(analytic[c]) + abs(central) + 1e-12)
        worst = max(worst, err)
    return worst
