"""Static computation graphs with reverse-mode differentiation.

A :class:`Graph` is built once from symbolic :class:`Node` handles and then
evaluated any number of times with :meth:`Graph.forward`. Intermediate values
are retained so :meth:`Graph.backward` can return exact adjoints for every
input and parameter leaf.

Broadcasting is limited to multiplication by a single-element node
(scalar-scale); every other binary op requires identical shapes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .tensor import Tensor, as_array

LOG_GUARD = 1e-12


class GraphError(RuntimeError):
    pass


class NonDifferentiableError(ArithmeticError):
    pass


Shape = tuple[int, ...]


@dataclass(frozen=True)
class Node:
    graph: "Graph"
    index: int
    op: str
    inputs: tuple[int, ...]
    attrs: tuple
    shape: Shape
    name: str

    def __repr__(self):
        return f"Node({self.name}: {self.op} {self.shape})"


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _windows(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    c = xp.shape[0]
    s0, s1, s2 = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp, shape=(c, k, k, ho, wo), strides=(s0, s1, s2, s1 * stride, s2 * stride), writeable=False
    )


# -- primitive rules --------------------------------------------------------
# forward(vals, attrs) -> (out, cache); backward(g, vals, out, cache, attrs) -> grads per input


def _same(name, shapes):
    if any(s != shapes[0] for s in shapes[1:]):
        raise GraphError(f"{name}: operand shapes differ {shapes}")
    return shapes[0]


def _shape_mul(name, shapes, attrs):
    a, b = shapes
    if a == b:
        return a
    if int(np.prod(b)) == 1:
        return a
    if int(np.prod(a)) == 1:
        return b
    raise GraphError(f"{name}: mul needs equal shapes or a single-element operand, got {a} and {b}")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def _conv_shape(name, shapes, attrs):
    stride, pad = attrs
    x, w = shapes[0], shapes[1]
    if len(x) != 3 or len(w) != 4:
        raise GraphError(f"{name}: conv2d expects C×H×W input and O×C×k×k kernel, got {x} and {w}")
    if w[1] != x[0]:
        raise GraphError(f"{name}: kernel expects {w[1]} channels, input has {x[0]}")
    if w[2] != w[3]:
        raise GraphError(f"{name}: square kernels only, got {w[2:]}")
    if len(shapes) == 3 and shapes[2] != (w[0],):
        raise GraphError(f"{name}: bias shape {shapes[2]} != ({w[0]},)")
    k = w[2]
    ho = (x[1] + 2 * pad - k) // stride + 1
    wo = (x[2] + 2 * pad - k) // stride + 1
    if ho <= 0 or wo <= 0:
        raise GraphError(f"{name}: input {x} too small for kernel {k}")
    return (w[0], ho, wo)


def _conv_fwd(vals, attrs):
    stride, pad = attrs
    x, w = vals[0], vals[1]
    k = w.shape[2]
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad))) if pad else x
    ho = (xp.shape[1] - k) // stride + 1
    wo = (xp.shape[2] - k) // stride + 1
    cols = _windows(np.ascontiguousarray(xp), k, stride, ho, wo)
    out = np.tensordot(w, cols, axes=([1, 2, 3], [0, 1, 2]))
    if len(vals) == 3:
        out += vals[2][:, None, None]
    return out, (cols, xp.shape)


def _conv_bwd(g, vals, out, cache, attrs):
    stride, pad = attrs
    x, w = vals[0], vals[1]
    cols, pshape = cache
    k = w.shape[2]
    ho, wo = g.shape[1], g.shape[2]
    dw = np.tensordot(g, cols, axes=([1, 2], [3, 4]))
    dcols = np.tensordot(w, g, axes=([0], [0]))  # C,k,k,Ho,Wo
    dxp = np.zeros(pshape)
    for i in range(k):
        for j in range(k):
            dxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, i, j]
    dx = dxp[:, pad : pad + x.shape[1], pad : pad + x.shape[2]] if pad else dxp
    grads = [dx, dw]
    if len(vals) == 3:
        grads.append(g.sum(axis=(1, 2)))
    return grads


def _dense_shape(name, shapes, attrs):
    x, w = shapes[0], shapes[1]
    if len(w) != 2 or len(x) not in (1, 2) or x[-1] != w[0]:
        raise GraphError(f"{name}: dense cannot multiply {x} by {w}")
    if len(shapes) == 3 and shapes[2] != (w[1],):
        raise GraphError(f"{name}: bias shape {shapes[2]} != ({w[1]},)")
    return x[:-1] + (w[1],)


def _dense_fwd(vals, attrs):
    out = vals[0] @ vals[1]
    if len(vals) == 3:
        out = out + vals[2]
    return out, None


def _dense_bwd(g, vals, out, cache, attrs):
    x, w = vals[0], vals[1]
    if x.ndim == 1:
        grads = [w @ g, np.outer(x, g)]
    else:
        grads = [g @ w.T, x.T @ g]
    if len(vals) == 3:
        grads.append(g if g.ndim == 1 else g.sum(axis=0))
    return grads


def _pool_shape(name, shapes, attrs):
    (k,) = attrs
    c, h, w = shapes[0]
    if h % k or w % k:
        raise GraphError(f"{name}: {h}×{w} not divisible by pool size {k}")
    return (c, h // k, w // k)


def _pool_fwd(vals, attrs):
    (k,) = attrs
    c, h, w = vals[0].shape
    return vals[0].reshape(c, h // k, k, w // k, k).mean(axis=(2, 4)), None


def _pool_bwd(g, vals, out, cache, attrs):
    (k,) = attrs
    return [np.repeat(np.repeat(g, k, axis=1), k, axis=2) / (k * k)]


def _softmax_fwd(vals, attrs):
    (t,) = attrs
    z = vals[0] / t
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True), None


def _softmax_bwd(g, vals, out, cache, attrs):
    (t,) = attrs
    return [out * (g - (g * out).sum(axis=-1, keepdims=True)) / t]


def _norm_fwd(vals, attrs):
    (floor,) = attrs
    n = float(np.sqrt(np.sum(vals[0] * vals[0])))
    return np.asarray(max(n, floor)), n


def _norm_bwd(g, vals, out, cache, attrs):
    (floor,) = attrs
    n = cache
    if n <= floor or n == 0.0:
        return [np.zeros_like(vals[0])]
    return [g * vals[0] / n]


def _pow_fwd(vals, attrs):
    (p,) = attrs
    return np.power(vals[0], p), None


def _pow_bwd(g, vals, out, cache, attrs):
    (p,) = attrs
    x = vals[0]
    if p == 1.0:
        return [g]
    with np.errstate(divide="ignore", invalid="ignore"):
        d = p * np.power(x, p - 1.0)
    return [g * np.where(np.isfinite(d), d, 0.0)]


def _concat_shape(name, shapes, attrs):
    rest = shapes[0][1:]
    if any(s[1:] != rest for s in shapes):
        raise GraphError(f"{name}: concat needs matching trailing extents, got {shapes}")
    return (sum(s[0] for s in shapes),) + rest


def _concat_bwd(g, vals, out, cache, attrs):
    splits = np.cumsum([v.shape[0] for v in vals])[:-1]
    return list(np.split(g, splits, axis=0))


@dataclass(frozen=True)
class Primitive:
    arity: int | None  # None = variadic
    shape: Callable
    forward: Callable
    backward: Callable


def _unary(fwd, bwd):
    return Primitive(1, lambda n, s, a: s[0], lambda v, a: (fwd(v[0]), None), bwd)


PRIMITIVES: dict[str, Primitive] = {
    "add": Primitive(2, lambda n, s, a: _same(n, s), lambda v, a: (v[0] + v[1], None), lambda g, v, o, c, a: [g, g]),
    "sub": Primitive(2, lambda n, s, a: _same(n, s), lambda v, a: (v[0] - v[1], None), lambda g, v, o, c, a: [g, -g]),
    "mul": Primitive(
        2,
        _shape_mul,
        lambda v, a: (v[0] * v[1], None),
        lambda g, v, o, c, a: [_unbroadcast(g * v[1], v[0].shape), _unbroadcast(g * v[0], v[1].shape)],
    ),
    "scale": Primitive(1, lambda n, s, a: s[0], lambda v, a: (v[0] * a[0], None), lambda g, v, o, c, a: [g * a[0]]),
    "pow": Primitive(1, lambda n, s, a: s[0], _pow_fwd, _pow_bwd),
    "abs": _unary(np.abs, lambda g, v, o, c, a: [g * np.sign(v[0])]),
    "exp": _unary(np.exp, lambda g, v, o, c, a: [g * o]),
    "log": _unary(
        lambda x: np.log(np.maximum(x, LOG_GUARD)),
        lambda g, v, o, c, a: [np.where(v[0] > LOG_GUARD, g / np.maximum(v[0], LOG_GUARD), 0.0)],
    ),
    "relu": _unary(lambda x: np.maximum(x, 0.0), lambda g, v, o, c, a: [g * (v[0] > 0)]),
    "sigmoid": _unary(_sigmoid, lambda g, v, o, c, a: [g * o * (1.0 - o)]),
    "swish": _unary(
        lambda x: x * _sigmoid(x),
        lambda g, v, o, c, a: [g * (lambda s: s + v[0] * s * (1.0 - s))(_sigmoid(v[0]))],
    ),
    "softmax": Primitive(1, lambda n, s, a: s[0], _softmax_fwd, _softmax_bwd),
    "dense": Primitive(None, _dense_shape, _dense_fwd, _dense_bwd),
    "conv2d": Primitive(None, _conv_shape, _conv_fwd, _conv_bwd),
    "avg_pool": Primitive(1, _pool_shape, _pool_fwd, _pool_bwd),
    "global_avg_pool": Primitive(
        1,
        lambda n, s, a: (s[0][0],),
        lambda v, a: (v[0].mean(axis=(1, 2)), None),
        lambda g, v, o, c, a: [np.broadcast_to(g[:, None, None], v[0].shape) / (v[0].shape[1] * v[0].shape[2])],
    ),
    "channel_mean": Primitive(
        1,
        lambda n, s, a: s[0][1:],
        lambda v, a: (v[0].mean(axis=0), None),
        lambda g, v, o, c, a: [np.broadcast_to(g, v[0].shape) / v[0].shape[0]],
    ),
    "sum": Primitive(
        1, lambda n, s, a: (), lambda v, a: (np.asarray(v[0].sum()), None), lambda g, v, o, c, a: [np.full(v[0].shape, float(g))]
    ),
    "mean": Primitive(
        1,
        lambda n, s, a: (),
        lambda v, a: (np.asarray(v[0].mean()), None),
        lambda g, v, o, c, a: [np.full(v[0].shape, float(g) / v[0].size)],
    ),
    "l2_norm": Primitive(1, lambda n, s, a: (), _norm_fwd, _norm_bwd),
    "reshape": Primitive(
        1, lambda n, s, a: a[0], lambda v, a: (v[0].reshape(a[0]), None), lambda g, v, o, c, a: [g.reshape(v[0].shape)]
    ),
    "concat": Primitive(None, _concat_shape, lambda v, a: (np.concatenate(v, axis=0), None), _concat_bwd),
}


def _check_conv_attrs(stride, padding):
    if stride not in (1, 2):
        raise GraphError(f"conv2d stride must be 1 or 2, got {stride}")
    if padding < 0:
        raise GraphError("padding must be non-negative")


class Graph:
    """Symbolic graph of primitive operations.

    Leaves are inputs (bound per call), parameters (bound per call, trainable)
    and constants (fixed at build time).
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.inputs: dict[str, Node] = {}
        self.parameters: dict[str, Node] = {}
        self.outputs: dict[str, Node] = {}
        self._constants: dict[int, np.ndarray] = {}
        self._values: list[np.ndarray] | None = None
        self._caches: list | None = None

    # -- leaves ---------------------------------------------------------
    def _leaf(self, kind: str, name: str, shape) -> Node:
        shape = tuple(int(s) for s in shape)
        if name in self.inputs or name in self.parameters:
            raise GraphError(f"duplicate leaf name {name!r}")
        node = Node(self, len(self.nodes), kind, (), (), shape, name)
        self.nodes.append(node)
        return node

    def input(self, name: str, shape) -> Node:
        node = self._leaf("input", name, shape)
        self.inputs[name] = node
        return node

    def parameter(self, name: str, shape) -> Node:
        node = self._leaf("parameter", name, shape)
        self.parameters[name] = node
        return node

    def constant(self, value, name: str | None = None) -> Node:
        arr = np.array(as_array(value), dtype=np.float64)
        arr.flags.writeable = False
        node = Node(self, len(self.nodes), "constant", (), (), arr.shape, name or f"const{len(self.nodes)}")
        self.nodes.append(node)
        self._constants[node.index] = arr
        return node

    def output(self, name: str, node: Node) -> Node:
        self._own(node)
        self.outputs[name] = node
        return node

    # -- op construction ------------------------------------------------
    def _own(self, *nodes: Node):
        for n in nodes:
            if n.graph is not self:
                raise GraphError(f"node {n.name} belongs to another graph")

    def _op(self, op: str, operands: Sequence[Node], attrs: tuple = (), name: str | None = None) -> Node:
        self._own(*operands)
        prim = PRIMITIVES[op]
        name = name or f"{op}{len(self.nodes)}"
        if prim.arity is not None and len(operands) != prim.arity:
            raise GraphError(f"{name}: {op} takes {prim.arity} operands, got {len(operands)}")
        shape = tuple(prim.shape(name, [o.shape for o in operands], attrs))
        node = Node(self, len(self.nodes), op, tuple(o.index for o in operands), attrs, shape, name)
        self.nodes.append(node)
        self._values = None
        return node

    def add(self, a, b, name=None):
        return self._op("add", [a, b], name=name)

    def sub(self, a, b, name=None):
        return self._op("sub", [a, b], name=name)

    def mul(self, a, b, name=None):
        return self._op("mul", [a, b], name=name)

    def scale(self, x, c: float, name=None):
        return self._op("scale", [x], (float(c),), name)

    def pow(self, x, p: float, name=None):
        return self._op("pow", [x], (float(p),), name)

    def abs(self, x, name=None):
        return self._op("abs", [x], name=name)

    def exp(self, x, name=None):
        return self._op("exp", [x], name=name)

    def log(self, x, name=None):
        """Natural log guarded as log(max(x, LOG_GUARD))."""
        return self._op("log", [x], name=name)

    def relu(self, x, name=None):
        return self._op("relu", [x], name=name)

    def sigmoid(self, x, name=None):
        return self._op("sigmoid", [x], name=name)

    def swish(self, x, name=None):
        return self._op("swish", [x], name=name)

    def softmax(self, x, temperature: float = 1.0, name=None):
        """softmax(x / temperature) along the last axis."""
        if not temperature > 0:
            raise GraphError("softmax temperature must be positive")
        return self._op("softmax", [x], (float(temperature),), name)

    def dense(self, x, w, b=None, name=None):
        return self._op("dense", [x, w] + ([b] if b is not None else []), name=name)

    def conv2d(self, x, w, b=None, stride: int = 1, padding: int | None = None, name=None):
        k = w.shape[2] if len(w.shape) == 4 else 1
        padding = k // 2 if padding is None else int(padding)
        _check_conv_attrs(stride, padding)
        return self._op("conv2d", [x, w] + ([b] if b is not None else []), (int(stride), padding), name)

    def avg_pool(self, x, size: int, name=None):
        return self._op("avg_pool", [x], (int(size),), name)

    def global_avg_pool(self, x, name=None):
        return self._op("global_avg_pool", [x], name=name)

    def channel_mean(self, x, name=None):
        return self._op("channel_mean", [x], name=name)

    def sum(self, x, name=None):
        return self._op("sum", [x], name=name)

    def mean(self, x, name=None):
        return self._op("mean", [x], name=name)

    def l2_norm(self, x, floor: float = 0.0, name=None):
        """Euclidean norm of all elements, reported as max(norm, floor)."""
        return self._op("l2_norm", [x], (float(floor),), name)

    def reshape(self, x, shape, name=None):
        shape = tuple(int(s) for s in shape)
        if int(np.prod(shape)) != int(np.prod(x.shape)):
            raise GraphError(f"{name or 'reshape'}: cannot reshape {x.shape} to {shape}")
        return self._op("reshape", [x], (shape,), name)

    def concat(self, xs: Sequence[Node], name=None):
        return self._op("concat", list(xs), name=name)

    # -- evaluation -----------------------------------------------------
    def forward(self, bindings: Mapping[str, Tensor | np.ndarray]) -> dict[str, Tensor]:
        """Evaluate every node; returns the registered outputs as Tensors."""
        values: list[np.ndarray | None] = [None] * len(self.nodes)
        caches: list = [None] * len(self.nodes)
        leaves = {**self.inputs, **self.parameters}
        missing = [n for n in leaves if n not in bindings]
        if missing:
            raise GraphError(f"unbound leaves: {missing}")
        for node in self.nodes:
            if node.op in ("input", "parameter"):
                arr = as_array(bindings[node.name])
                if arr.shape != node.shape:
                    raise GraphError(f"{node.name}: bound shape {arr.shape} != declared {node.shape}")
                if not np.all(np.isfinite(arr)):
                    raise GraphError(f"{node.name}: bound value is not finite")
                values[node.index] = arr
                continue
            if node.op == "constant":
                values[node.index] = self._constants[node.index]
                continue
            prim = PRIMITIVES[node.op]
            with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                out, cache = prim.forward([values[i] for i in node.inputs], node.attrs)
            out = np.asarray(out, dtype=np.float64)
            if not np.all(np.isfinite(out)):
                raise GraphError(f"{node.name}: non-finite value produced by {node.op}")
            values[node.index] = out
            caches[node.index] = cache
        self._values = values
        self._caches = caches
        return {name: Tensor._wrap(values[n.index]) for name, n in self.outputs.items()}

    def value(self, node: Node) -> np.ndarray:
        if self._values is None:
            raise GraphError("forward has not been run")
        return self._values[node.index]

    def backward(self, output: str | Node) -> dict[str, Tensor]:
        """Gradients of a scalar output w.r.t. every input and parameter."""
        if self._values is None:
            raise GraphError("backward called before forward")
        node = self.outputs[output] if isinstance(output, str) else output
        self._own(node)
        if int(np.prod(node.shape)) != 1:
            raise GraphError(f"{node.name}: backward needs a scalar output, shape is {node.shape}")
        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        grads[node.index] = np.ones(node.shape)
        for n in reversed(self.nodes[: node.index + 1]):
            g = grads[n.index]
            if g is None or not n.inputs:
                continue
            prim = PRIMITIVES[n.op]
            operand_vals = [self._values[i] for i in n.inputs]
            contribs = prim.backward(g, operand_vals, self._values[n.index], self._caches[n.index], n.attrs)
            for i, c in zip(n.inputs, contribs):
                c = np.asarray(c, dtype=np.float64)
                grads[i] = c.copy() if grads[i] is None else grads[i] + c
        out = {}
        for name, leaf in {**self.inputs, **self.parameters}.items():
            g = grads[leaf.index]
            out[name] = Tensor._wrap(np.zeros(leaf.shape) if g is None else g)
        return out


def fd_gradient(
    f: Callable[[Tensor], float],
    point: Tensor | np.ndarray,
    epsilon: float = 1e-4,
    detect_kinks: bool = True,
) -> Tensor:
    """Central-difference gradient of a scalar function.

    With ``detect_kinks`` each coordinate is also probed with one-sided
    differences at ``epsilon`` and ``epsilon / 2``; a gap between the two
    sides that does not shrink with the step marks a non-differentiable point
    and raises :class:`NonDifferentiableError`.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    x0 = np.array(as_array(point), dtype=np.float64)
    flat = x0.reshape(-1)
    grad = np.empty_like(flat)

    def ev(v):
        return float(f(Tensor._wrap(v.reshape(x0.shape).copy())))

    f0 = ev(flat) if detect_kinks else None
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + epsilon
        fp = ev(flat)
        flat[i] = orig - epsilon
        fm = ev(flat)
        grad[i] = (fp - fm) / (2.0 * epsilon)
        if detect_kinks:
            gap = (fp - f0) / epsilon - (f0 - fm) / epsilon
            if abs(gap) > 1e-6 * max(1.0, abs(grad[i])):
                h = epsilon / 2
                flat[i] = orig + h
                fph = ev(flat)
                flat[i] = orig - h
                fmh = ev(flat)
                gap_h = (fph - f0) / h - (f0 - fmh) / h
                if abs(gap_h) > 0.75 * abs(gap):
                    flat[i] = orig
                    raise NonDifferentiableError(f"coordinate {i}: one-sided slopes differ by {gap:.3g}")
        flat[i] = orig
    return Tensor(grad.reshape(x0.shape))
