"""Dense N-D grids with reverse-mode gradient accumulation.

Every array in the pipeline is a numpy ``ndarray`` in row-major order. Graph
nodes wrap those arrays and record, for each parent, the vector-Jacobian
rule that maps the node's upstream gradient back onto that parent. Ops only
record parents when at least one of them needs a gradient, so evaluating a
frozen model builds no graph at all.

Convolutions use the cross-correlation convention (no kernel flip).
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Literal, Sequence

import numpy as np

from .errors import GraphError, ShapeError

DEFAULT_DTYPE = np.float64
AXIS_NAMES = ("channel", "depth", "height", "width")

VJP = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Node:
    """A value in a differentiation graph."""

    def __init__(
        self,
        value: np.ndarray,
        parents: tuple[Node, ...] = (),
        vjp: VJP | None = None,
        requires_grad: bool = False,
        name: str = "",
    ) -> None:
        self.value = np.asarray(value)
        self.name = name
        self._parents = parents
        self._vjp = vjp
        self._requires_grad = requires_grad
        self._consumed = False
        self.needs_grad = requires_grad or bool(parents)
        self.grad: np.ndarray | None = (
            np.zeros_like(self.value) if requires_grad else None
        )

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    @property
    def requires_grad(self) -> bool:
        return self._requires_grad

    @requires_grad.setter
    def requires_grad(self, flag: bool) -> None:
        if not self.is_leaf:
            raise GraphError("only leaf nodes can be frozen or unfrozen")
        self._requires_grad = flag
        self.needs_grad = flag
        if flag and self.grad is None:
            self.grad = np.zeros_like(self.value)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0

    def item(self) -> float:
        return float(self.value.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Node{label}(shape={self.shape}, needs_grad={self.needs_grad})"


def param(value: np.ndarray, name: str = "") -> Node:
    """Trainable leaf."""
    return Node(np.array(value, copy=True), requires_grad=True, name=name)


def constant(value: np.ndarray | float, dtype=None) -> Node:
    return Node(np.asarray(value, dtype=DEFAULT_DTYPE if dtype is None else dtype))


def _record(value: np.ndarray, parents: tuple[Node, ...], vjp: VJP, name: str) -> Node:
    if not any(p.needs_grad for p in parents):
        return Node(value, name=name)
    return Node(value, parents=parents, vjp=vjp, name=name)


def _triple(v: int | Sequence[int], what: str) -> tuple[int, int, int]:
    if isinstance(v, (int, np.integer)):
        return (int(v),) * 3
    t = tuple(int(i) for i in v)
    if len(t) != 3:
        raise ShapeError(f"{what} must have 3 entries, got {len(t)}")
    return t  # type: ignore[return-value]


def _same_shape(op: str, a: Node, b: Node) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ── elementary arithmetic ──────────────────────────────────────────────


def add(a: Node, b: Node) -> Node:
    _same_shape("add", a, b)
    return _record(a.value + b.value, (a, b), lambda g: (g, g), "add")


def sub(a: Node, b: Node) -> Node:
    _same_shape("sub", a, b)
    return _record(a.value - b.value, (a, b), lambda g: (g, -g), "sub")


def mul(a: Node, b: Node) -> Node:
    _same_shape("mul", a, b)
    av, bv = a.value, b.value
    return _record(av * bv, (a, b), lambda g: (g * bv, g * av), "mul")


def scale(a: Node, factor: float) -> Node:
    return _record(a.value * factor, (a,), lambda g: (g * factor,), "scale")


def total(a: Node) -> Node:
    """Sum of all elements, as a 0-d node."""
    shape = a.shape
    return _record(
        np.asarray(a.value.sum()), (a,), lambda g: (np.full(shape, g, dtype=a.value.dtype),), "sum"
    )


def mean(a: Node) -> Node:
    n = a.value.size
    shape = a.shape
    return _record(
        np.asarray(a.value.mean()),
        (a,),
        lambda g: (np.full(shape, g / n, dtype=a.value.dtype),),
        "mean",
    )


def concat(nodes: Sequence[Node], axis: int = 0) -> Node:
    """Concatenate along ``axis`` (the channel axis by default)."""
    sizes = [n.shape[axis] for n in nodes]
    bounds = np.cumsum([0] + sizes)
    value = np.concatenate([n.value for n in nodes], axis=axis)

    def vjp(g: np.ndarray):
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            index = [slice(None)] * g.ndim
            index[axis] = slice(int(lo), int(hi))
            parts.append(g[tuple(index)])
        return parts

    return _record(value, tuple(nodes), vjp, "concat")


# ── activations ────────────────────────────────────────────────────────


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def elementwise(
    x: Node, fn: Literal["sigmoid", "relu", "exp", "abs", "square"]
) -> Node:
    xv = x.value
    if fn == "sigmoid":
        out = _stable_sigmoid(xv)
        return _record(out, (x,), lambda g: (g * out * (1.0 - out),), fn)
    if fn == "relu":
        mask = xv > 0
        return _record(np.where(mask, xv, 0.0).astype(xv.dtype), (x,), lambda g: (g * mask,), fn)
    if fn == "exp":
        out = np.exp(xv)
        return _record(out, (x,), lambda g: (g * out,), fn)
    if fn == "abs":
        return _record(np.abs(xv), (x,), lambda g: (g * np.sign(xv),), fn)
    if fn == "square":
        return _record(xv * xv, (x,), lambda g: (2.0 * xv * g,), fn)
    raise ValueError(f"unknown elementwise function: {fn}")


def sigmoid(x: Node) -> Node:
    return elementwise(x, "sigmoid")


def relu(x: Node) -> Node:
    return elementwise(x, "relu")


# ── pooling ────────────────────────────────────────────────────────────


def _check_4d(op: str, x: Node) -> None:
    if x.value.ndim != 4:
        raise ShapeError(f"{op}: expected [C, D, H, W], got shape {x.shape}")
    for axis, extent in zip(AXIS_NAMES, x.shape):
        if extent < 1:
            raise ShapeError(f"{op}: {axis} axis is empty")


def global_pool(x: Node, mode: Literal["avg", "max"]) -> Node:
    """Per-channel reduction over all voxels -> [C]."""
    _check_4d("global_pool", x)
    c = x.shape[0]
    flat = x.value.reshape(c, -1)
    shape = x.shape
    if mode == "avg":
        n = flat.shape[1]

        def vjp(g):
            return (np.broadcast_to((g / n)[:, None], (c, n)).reshape(shape).copy(),)

        return _record(flat.mean(axis=1), (x,), vjp, "global_avg")
    if mode == "max":
        # argmax returns the first occurrence in row-major scan order
        idx = flat.argmax(axis=1)

        def vjp(g):
            gx = np.zeros_like(flat)
            gx[np.arange(c), idx] = g
            return (gx.reshape(shape),)

        return _record(flat[np.arange(c), idx], (x,), vjp, "global_max")
    raise ValueError(f"unknown pooling mode: {mode}")


def channel_pool(x: Node, mode: Literal["avg", "max"]) -> Node:
    """Voxelwise reduction across channels -> [1, D, H, W]."""
    _check_4d("channel_pool", x)
    c = x.shape[0]
    shape = x.shape
    if mode == "avg":
        return _record(
            x.value.mean(axis=0, keepdims=True),
            (x,),
            lambda g: (np.broadcast_to(g / c, shape).copy(),),
            "channel_avg",
        )
    if mode == "max":
        idx = x.value.argmax(axis=0)[None]

        def vjp(g):
            gx = np.zeros(shape, dtype=g.dtype)
            np.put_along_axis(gx, idx, g, axis=0)
            return (gx,)

        return _record(
            np.take_along_axis(x.value, idx, axis=0), (x,), vjp, "channel_max"
        )
    raise ValueError(f"unknown pooling mode: {mode}")


# ── attention broadcasts ───────────────────────────────────────────────


def scale_channels(x: Node, weights: Node) -> Node:
    """Multiply every channel of ``x`` by its entry of ``weights`` [C]."""
    _check_4d("scale_channels", x)
    if weights.shape != (x.shape[0],):
        raise ShapeError(
            f"scale_channels: channel axis has {x.shape[0]} entries, "
            f"weights have shape {weights.shape}"
        )
    xv, wv = x.value, weights.value

    def vjp(g):
        return g * wv[:, None, None, None], (g * xv).sum(axis=(1, 2, 3))

    return _record(xv * wv[:, None, None, None], (x, weights), vjp, "scale_channels")


def scale_spatial(x: Node, spatial: Node) -> Node:
    """Multiply every channel of ``x`` by the map ``spatial`` [1, D, H, W]."""
    _check_4d("scale_spatial", x)
    if spatial.shape != (1,) + x.shape[1:]:
        for axis, a, b in zip(AXIS_NAMES, x.shape, spatial.shape):
            if axis != "channel" and a != b:
                raise ShapeError(f"scale_spatial: {axis} axis {b} does not match {a}")
        raise ShapeError(f"scale_spatial: map must have one channel, got {spatial.shape}")
    xv, mv = x.value, spatial.value

    def vjp(g):
        return g * mv, (g * xv).sum(axis=0, keepdims=True)

    return _record(xv * mv, (x, spatial), vjp, "scale_spatial")


# ── linear maps ────────────────────────────────────────────────────────


def affine(x: Node, weights: Node, bias: Node) -> Node:
    """y = W x + b for x [n], W [m, n], b [m]."""
    if x.value.ndim != 1 or weights.value.ndim != 2:
        raise ShapeError(f"affine: expected x [n] and W [m, n], got {x.shape}, {weights.shape}")
    m, n = weights.shape
    if x.shape[0] != n:
        raise ShapeError(f"affine: input has {x.shape[0]} features, weights expect {n}")
    if bias.shape != (m,):
        raise ShapeError(f"affine: bias shape {bias.shape} does not match {m} outputs")
    xv, wv = x.value, weights.value

    def vjp(g):
        return wv.T @ g, np.outer(g, xv), g

    return _record(wv @ xv + bias.value, (x, weights, bias), vjp, "affine")


def conv_output_extent(extent: int, kernel: int, pad: int, stride: int) -> int:
    return (extent + 2 * pad - kernel) // stride + 1


def conv3d(
    x: Node,
    kernel: Node,
    bias: Node | None = None,
    padding: int | Sequence[int] = 0,
    stride: int | Sequence[int] = 1,
) -> Node:
    """3D cross-correlation of x [Cin, D, H, W] with kernel [Cout, Cin, kd, kh, kw]."""
    _check_4d("conv3d", x)
    if kernel.value.ndim != 5:
        raise ShapeError(f"conv3d: kernel must be [Cout, Cin, kd, kh, kw], got {kernel.shape}")
    pads = _triple(padding, "padding")
    strides = _triple(stride, "stride")
    if min(strides) < 1:
        raise ShapeError("conv3d: stride must be >= 1")
    cout, cin = kernel.shape[:2]
    if cin != x.shape[0]:
        raise ShapeError(
            f"conv3d: channel axis has {x.shape[0]} input channels, kernel expects {cin}"
        )
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv3d: bias shape {bias.shape} does not match {cout} output channels")
    ksize = kernel.shape[2:]
    for axis, extent, k, p in zip(AXIS_NAMES[1:], x.shape[1:], ksize, pads):
        if k > extent + 2 * p:
            raise ShapeError(
                f"conv3d: {axis} axis: kernel extent {k} exceeds padded input extent {extent + 2 * p}"
            )
    out_shape = tuple(
        conv_output_extent(e, k, p, s)
        for e, k, p, s in zip(x.shape[1:], ksize, pads, strides)
    )

    xv, kv = x.value, kernel.value
    xp = np.pad(xv, ((0, 0),) + tuple((p, p) for p in pads))
    windows = np.lib.stride_tricks.sliding_window_view(xp, ksize, axis=(1, 2, 3))
    windows = windows[:, :: strides[0], :: strides[1], :: strides[2]]
    windows = windows[:, : out_shape[0], : out_shape[1], : out_shape[2]]
    out = np.tensordot(kv, windows, axes=([1, 2, 3, 4], [0, 4, 5, 6]))
    if bias is not None:
        out = out + bias.value[:, None, None, None]

    def vjp(g):
        gk = np.tensordot(g, windows, axes=([1, 2, 3], [1, 2, 3]))
        gxp = np.zeros_like(xp)
        for a in range(ksize[0]):
            for b in range(ksize[1]):
                for c in range(ksize[2]):
                    region = (
                        slice(None),
                        slice(a, a + strides[0] * (out_shape[0] - 1) + 1, strides[0]),
                        slice(b, b + strides[1] * (out_shape[1] - 1) + 1, strides[1]),
                        slice(c, c + strides[2] * (out_shape[2] - 1) + 1, strides[2]),
                    )
                    gxp[region] += np.tensordot(kv[:, :, a, b, c], g, axes=([0], [0]))
        gx = gxp[
            :,
            pads[0] : pads[0] + xv.shape[1],
            pads[1] : pads[1] + xv.shape[2],
            pads[2] : pads[2] + xv.shape[3],
        ]
        gb = g.sum(axis=(1, 2, 3))
        return gx, gk, gb

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _record(out, parents, vjp, "conv3d")


def upsample2(x: Node, target: Sequence[int]) -> Node:
    """Nearest-neighbour x2 upsampling, cropped to spatial shape ``target``."""
    _check_4d("upsample2", x)
    target = tuple(int(t) for t in target)
    for axis, extent, t in zip(AXIS_NAMES[1:], x.shape[1:], target):
        if not 1 <= t <= 2 * extent:
            raise ShapeError(f"upsample2: {axis} axis target {t} outside [1, {2 * extent}]")
    c, d, h, w = x.shape
    full = x.value.repeat(2, axis=1).repeat(2, axis=2).repeat(2, axis=3)
    out = full[:, : target[0], : target[1], : target[2]]

    def vjp(g):
        gf = np.zeros_like(full)
        gf[:, : target[0], : target[1], : target[2]] = g
        return (gf.reshape(c, d, 2, h, 2, w, 2).sum(axis=(2, 4, 6)),)

    return _record(out, (x,), vjp, "upsample2")


# ── losses ─────────────────────────────────────────────────────────────


def bce_with_logits(logit: Node, target: float) -> Node:
    """Binary cross-entropy on a raw logit, averaged over its elements."""
    z = logit.value
    loss = np.maximum(z, 0.0) - target * z + np.log1p(np.exp(-np.abs(z)))
    n = z.size

    def vjp(g):
        return (g * (_stable_sigmoid(z) - target) / n,)

    return _record(np.asarray(loss.mean()), (logit,), vjp, "bce")


def mse(a: Node, b: Node) -> Node:
    return mean(elementwise(sub(a, b), "square"))


def l1(a: Node, b: Node) -> Node:
    return mean(elementwise(sub(a, b), "abs"))


# ── reverse pass ───────────────────────────────────────────────────────


def _topological(root: Node) -> list[Node]:
    order: list[Node] = []
    visited: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.needs_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(root: Node) -> None:
    """Accumulate d(root)/d(leaf) into ``grad`` of every reachable trainable leaf."""
    if root.value.size != 1:
        raise GraphError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.needs_grad:
        return
    order = _topological(root)
    pending: dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.requires_grad:
                node.grad += g
            continue
        if node._consumed:
            raise GraphError(f"{node.name or 'node'} already took part in a backward pass")
        node._consumed = True
        node.grad = g
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.needs_grad:
                continue
            if id(parent) in pending:
                pending[id(parent)] = pending[id(parent)] + pg
            else:
                pending[id(parent)] = np.asarray(pg, dtype=parent.value.dtype).reshape(parent.shape)


# ── finite-difference verification ─────────────────────────────────────


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    checked: int
    location: str | None = None
    message: str = ""


def grad_check(
    build: Callable[[], Node],
    params: Sequence[Node],
    h: float = 1e-5,
    tolerance: float = 1e-4,
    floor: float = 1e-8,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare reverse-mode gradients with central differences.

    ``build`` must rebuild the scalar graph from the current parameter values.
    With ``max_coords`` set, that many coordinates per parameter are checked,
    drawn from ``rng``.
    """
    if not 1e-6 <= h <= 1e-4:
        raise ValueError(f"step h={h} outside [1e-6, 1e-4]")
    for p in params:
        if p.value.dtype != np.float64:
            raise ValueError(f"grad_check needs float64 parameters, {p.name or 'param'} is {p.value.dtype}")
        p.zero_grad()

    root = build()
    if not np.all(np.isfinite(root.value)):
        return GradCheckReport(math.inf, False, 0, "root", "non-finite value at root")
    backward(root)

    worst = 0.0
    worst_at: str | None = None
    checked = 0
    rng = rng or np.random.default_rng(0)
    for pi, p in enumerate(params):
        label = p.name or f"param[{pi}]"
        analytic = p.grad.copy()
        if not np.all(np.isfinite(analytic)):
            bad = np.unravel_index(np.flatnonzero(~np.isfinite(analytic))[0], analytic.shape)
            return GradCheckReport(math.inf, False, checked, f"{label}{list(bad)}", "non-finite gradient")
        flat = p.value.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        for i in coords:
            original = flat[i]
            flat[i] = original + h
            f_plus = float(build().value)
            flat[i] = original - h
            f_minus = float(build().value)
            flat[i] = original
            where = f"{label}{list(np.unravel_index(i, p.shape))}"
            if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                return GradCheckReport(math.inf, False, checked, where, "non-finite value under perturbation")
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = float(analytic.reshape(-1)[i])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            checked += 1
            if rel > worst:
                worst, worst_at = rel, where
    return GradCheckReport(worst, worst <= tolerance, checked, worst_at)


# ── optimisation ───────────────────────────────────────────────────────


@dataclass
class OptimState:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    first_moment: list[np.ndarray] = field(default_factory=list)
    second_moment: list[np.ndarray] = field(default_factory=list)


def adamw_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    state: OptimState,
) -> tuple[list[np.ndarray], OptimState]:
    """One decoupled-weight-decay Adam update; returns new arrays and state."""
    if len(params) != len(grads):
        raise ShapeError(f"adamw_step: {len(params)} params but {len(grads)} grads")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeError(f"adamw_step: param {p.shape} and grad {g.shape} differ")
    m_prev = state.first_moment or [np.zeros_like(p) for p in params]
    v_prev = state.second_moment or [np.zeros_like(p) for p in params]
    b1, b2 = state.betas
    step = state.step + 1
    c1 = 1.0 - b1**step
    c2 = 1.0 - b2**step

    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, m_prev, v_prev):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        decayed = p * (1.0 - state.lr * state.weight_decay)
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_params.append((decayed - state.lr * update).astype(p.dtype, copy=False))
        new_m.append(m)
        new_v.append(v)
    return new_params, replace(state, step=step, first_moment=new_m, second_moment=new_v)


class AdamW:
    """Applies ``adamw_step`` in place to a fixed list of parameter nodes."""

    def __init__(self, params: Iterable[Node], lr: float, weight_decay: float = 0.01,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> None:
        self.params = [p for p in params if p.requires_grad]
        self.state = OptimState(lr=lr, betas=betas, eps=eps, weight_decay=weight_decay)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        new_values, self.state = adamw_step(
            [p.value for p in self.params], [p.grad for p in self.params], self.state
        )
        for p, value in zip(self.params, new_values):
            p.value[...] = value


# ── parameter containers ───────────────────────────────────────────────


def he_kernel(rng: np.random.Generator, cout: int, cin: int, k: int, dtype=DEFAULT_DTYPE) -> np.ndarray:
    fan_in = cin * k**3
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(cout, cin, k, k, k)).astype(dtype)


@dataclass
class ConvLayer:
    kernel: Node
    bias: Node
    padding: int = 0
    stride: int = 1

    @classmethod
    def create(cls, rng: np.random.Generator, cin: int, cout: int, k: int,
               stride: int = 1, zero: bool = False, name: str = "conv",
               dtype=DEFAULT_DTYPE) -> ConvLayer:
        kernel = (np.zeros((cout, cin, k, k, k), dtype=dtype) if zero
                  else he_kernel(rng, cout, cin, k, dtype))
        return cls(
            kernel=param(kernel, f"{name}.kernel"),
            bias=param(np.zeros(cout, dtype=dtype), f"{name}.bias"),
            padding=k // 2,
            stride=stride,
        )

    def __call__(self, x: Node, extra_bias: Node | None = None) -> Node:
        bias = self.bias if extra_bias is None else add(self.bias, extra_bias)
        return conv3d(x, self.kernel, bias, padding=self.padding, stride=self.stride)

    def named_parameters(self, prefix: str) -> list[tuple[str, Node]]:
        return [(f"{prefix}.kernel", self.kernel), (f"{prefix}.bias", self.bias)]


@dataclass
class Linear:
    weights: Node
    bias: Node

    @classmethod
    def create(cls, rng: np.random.Generator, n_in: int, n_out: int, zero: bool = False,
               name: str = "linear", dtype=DEFAULT_DTYPE) -> Linear:
        w = (np.zeros((n_out, n_in), dtype=dtype) if zero
             else rng.normal(0.0, math.sqrt(1.0 / n_in), size=(n_out, n_in)).astype(dtype))
        return cls(param(w, f"{name}.weights"), param(np.zeros(n_out, dtype=dtype), f"{name}.bias"))

    def __call__(self, x: Node) -> Node:
        return affine(x, self.weights, self.bias)

    def named_parameters(self, prefix: str) -> list[tuple[str, Node]]:
        return [(f"{prefix}.weights", self.weights), (f"{prefix}.bias", self.bias)]


def set_trainable(params: Iterable[Node], flag: bool) -> None:
    for p in params:
        p.requires_grad = flag


def checksum(params: Iterable[Node]) -> str:
    """sha256 over parameter bytes, in order."""
    digest = hashlib.sha256()
    for p in params:
        digest.update(np.ascontiguousarray(p.value).tobytes())
    return digest.hexdigest()
