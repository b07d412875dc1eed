"""Dense float64 tensors with a small reverse-mode differentiation engine.

A :class:`Graph` records nodes in creation order (which is also a valid
topological order). Leaves are named; bindings map leaf names to arrays.

    g = Graph()
    x = g.param("x")
    loss = g.cross_entropy(g.relu(x), g.const("y"))
    value, grads = backward(g, {"x": ..., "y": ...})
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

OP_KINDS = (
    "matmul", "add", "multiply", "scale", "relu", "softmax_rows",
    "l2_normalize_rows", "mean", "concat_rows", "conv2d_valid",
    "avgpool2x2", "cross_entropy", "transpose", "reshape",
)


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class KinkError(ValueError):
    pass


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...] = ()
    attrs: dict = field(default_factory=dict)
    name: str | None = None        # leaves only
    trainable: bool = False


class Graph:
    def __init__(self):
        self.nodes: list[Node] = []
        self.values: list[np.ndarray] | None = None
        self._leaf_ids: dict[str, int] = {}

    # leaves -----------------------------------------------------------
    def _leaf(self, name, trainable):
        if name in self._leaf_ids:
            node = self.nodes[self._leaf_ids[name]]
            if node.trainable != trainable:
                raise ValueError(f"leaf {name!r} redeclared with different trainability")
            return self._leaf_ids[name]
        self.nodes.append(Node("leaf", name=name, trainable=trainable))
        self._leaf_ids[name] = len(self.nodes) - 1
        return self._leaf_ids[name]

    def param(self, name: str) -> int:
        return self._leaf(name, True)

    def const(self, name: str) -> int:
        return self._leaf(name, False)

    @property
    def leaves(self) -> dict[str, int]:
        return dict(self._leaf_ids)

    @property
    def trainable(self) -> list[str]:
        return [n for n, i in self._leaf_ids.items() if self.nodes[i].trainable]

    @property
    def root(self) -> int:
        return len(self.nodes) - 1

    def _op(self, op, *inputs, **attrs):
        for i in inputs:
            if not 0 <= i < len(self.nodes):
                raise ValueError(f"{op}: input node {i} does not exist yet")
        self.nodes.append(Node(op, tuple(inputs), attrs))
        return len(self.nodes) - 1

    # ops --------------------------------------------------------------
    def matmul(self, a, b):
        return self._op("matmul", a, b)

    def add(self, a, b):
        """Elementwise sum; ``b`` may also be a 1-D row vector added to every row."""
        return self._op("add", a, b)

    def multiply(self, a, b):
        """Elementwise product; ``b`` may also be a 1-D row vector."""
        return self._op("multiply", a, b)

    def scale(self, a, s: float):
        return self._op("scale", a, s=float(s))

    def relu(self, a):
        return self._op("relu", a)

    def softmax_rows(self, a):
        return self._op("softmax_rows", a)

    def l2_normalize_rows(self, a):
        return self._op("l2_normalize_rows", a)

    def mean(self, a, axis: int | None = None):
        return self._op("mean", a, axis=axis)

    def concat_rows(self, *parts):
        return self._op("concat_rows", *parts)

    def conv2d_valid(self, x, w, b=None):
        return self._op("conv2d_valid", x, w) if b is None else self._op("conv2d_valid", x, w, b)

    def avgpool2x2(self, x):
        return self._op("avgpool2x2", x)

    def cross_entropy(self, logits, labels):
        """Mean cross-entropy; ``labels`` is a node holding integer class indices."""
        return self._op("cross_entropy", logits, labels)

    def transpose(self, a):
        return self._op("transpose", a)

    def reshape(self, a, shape: Sequence[int]):
        return self._op("reshape", a, shape=tuple(int(s) for s in shape))

    # composites -------------------------------------------------------
    def linear(self, x, w, b=None):
        y = self.matmul(x, w)
        return y if b is None else self.add(y, b)


# ----------------------------------------------------------------------
# forward rules


def _softmax(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _row_norms(x):
    return np.sqrt((x * x).sum(axis=-1, keepdims=True))


def _l2n(x):
    n = _row_norms(x)
    safe = np.where(n > 0, n, 1.0)
    return np.where(n > 0, x / safe, 0.0)


def _windows(x, kh, kw):
    # (N, C, Ho, Wo, kh, kw)
    return sliding_window_view(x, (kh, kw), axis=(2, 3))


def _conv(x, w):
    win = _windows(x, w.shape[2], w.shape[3])
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # N, Ho, Wo, Co
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _labels(v, k, where):
    lab = np.asarray(v).reshape(-1)
    if not np.all(lab == np.round(lab)):
        raise ShapeError(f"{where}: labels must be integers")
    lab = lab.astype(np.int64)
    if lab.size and (lab.min() < 0 or lab.max() >= k):
        raise ShapeError(f"{where}: label out of range [0, {k})")
    return lab


def _check_shapes(node, ins, where):
    op = node.op
    shapes = [i.shape for i in ins]
    bad = lambda msg: ShapeError(f"{where}: {msg}; got shapes {shapes}")
    if op == "matmul":
        a, b = shapes
        if len(a) != 2 or len(b) != 2 or a[1] != b[0]:
            raise bad("matmul needs (m,k) @ (k,n)")
    elif op in ("add", "multiply"):
        a, b = shapes
        if a != b and not (len(b) == 1 and len(a) >= 1 and a[-1] == b[0]):
            raise bad(f"{op} needs equal shapes or a row vector")
    elif op in ("softmax_rows", "l2_normalize_rows"):
        if len(shapes[0]) not in (1, 2):
            raise bad(f"{op} needs a 1-D or 2-D input")
    elif op == "mean":
        ax = node.attrs["axis"]
        if ax is not None and not -len(shapes[0]) <= ax < len(shapes[0]):
            raise bad(f"axis {ax} out of range")
    elif op == "concat_rows":
        if any(len(s) != 2 for s in shapes) or len({s[1] for s in shapes}) != 1:
            raise bad("concat_rows needs 2-D inputs with equal column counts")
    elif op == "conv2d_valid":
        x, w = shapes[0], shapes[1]
        if len(x) != 4 or len(w) != 4 or x[1] != w[1] or x[2] < w[2] or x[3] < w[3]:
            raise bad("conv2d_valid needs x (N,Ci,H,W), w (Co,Ci,kh,kw) with kernel inside image")
        if len(shapes) == 3 and shapes[2] != (w[0],):
            raise bad("conv bias must have shape (Co,)")
    elif op == "avgpool2x2":
        if len(shapes[0]) != 4 or shapes[0][2] < 2 or shapes[0][3] < 2:
            raise bad("avgpool2x2 needs (N,C,H,W) with H,W >= 2")
    elif op == "cross_entropy":
        lg, lab = shapes
        rows = 1 if len(lg) == 1 else lg[0]
        if len(lg) not in (1, 2) or int(np.prod(lab)) != rows:
            raise bad("cross_entropy needs logits (B,K) and B labels")
    elif op == "transpose":
        if len(shapes[0]) != 2:
            raise bad("transpose needs a 2-D input")
    elif op == "reshape":
        try:
            np.empty(shapes[0], dtype=np.int8).reshape(node.attrs["shape"])
        except ValueError:
            raise bad(f"cannot reshape to {node.attrs['shape']}") from None


def _forward_op(node, ins, where):
    op = node.op
    if op == "matmul":
        return ins[0] @ ins[1]
    if op == "add":
        return ins[0] + ins[1]
    if op == "multiply":
        return ins[0] * ins[1]
    if op == "scale":
        return ins[0] * node.attrs["s"]
    if op == "relu":
        return np.where(ins[0] > 0, ins[0], 0.0)
    if op == "softmax_rows":
        return _softmax(ins[0])
    if op == "l2_normalize_rows":
        return _l2n(ins[0])
    if op == "mean":
        return np.asarray(ins[0].mean(axis=node.attrs["axis"]))
    if op == "concat_rows":
        return np.concatenate(ins, axis=0)
    if op == "conv2d_valid":
        out = _conv(ins[0], ins[1])
        if len(ins) == 3:
            out = out + ins[2][None, :, None, None]
        return out
    if op == "avgpool2x2":
        x = ins[0]
        n, c, h, w = x.shape
        h2, w2 = h // 2, w // 2
        return x[:, :, : 2 * h2, : 2 * w2].reshape(n, c, h2, 2, w2, 2).mean(axis=(3, 5))
    if op == "cross_entropy":
        lg = np.atleast_2d(ins[0])
        lab = _labels(ins[1], lg.shape[1], where)
        z = lg - lg.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        return np.asarray(-logp[np.arange(len(lab)), lab].mean())
    if op == "transpose":
        return ins[0].T.copy()
    if op == "reshape":
        return ins[0].reshape(node.attrs["shape"])
    raise ValueError(f"{where}: unknown op {op!r}")


def _describe(i, node):
    return f"node {i} ({node.op})"


def forward(graph: Graph, bindings: Mapping[str, np.ndarray]) -> np.ndarray:
    """Evaluate the graph; every intermediate value is cached on ``graph.values``."""
    if not graph.nodes:
        raise ValueError("empty graph")
    values: list[np.ndarray] = []
    for i, node in enumerate(graph.nodes):
        where = _describe(i, node)
        if node.op == "leaf":
            if node.name not in bindings:
                raise KeyError(f"leaf {node.name!r} is not bound")
            v = np.asarray(bindings[node.name], dtype=np.float64)
            if not np.all(np.isfinite(v)):
                raise NonFiniteError(f"leaf {node.name!r} holds non-finite values")
        else:
            ins = [values[j] for j in node.inputs]
            _check_shapes(node, ins, where)
            with np.errstate(over="ignore", invalid="ignore"):
                v = _forward_op(node, ins, where)
            if not np.all(np.isfinite(v)):
                raise NonFiniteError(f"{where} produced non-finite values")
        values.append(v)
    graph.values = values
    return values[-1]


# ----------------------------------------------------------------------
# backward rules


def _unbroadcast(g, shape):
    return g if g.shape == shape else g.reshape(-1, shape[0]).sum(axis=0)


def _backward_op(node, ins, out, g):
    op = node.op
    if op == "matmul":
        return [g @ ins[1].T, ins[0].T @ g]
    if op == "add":
        return [g, _unbroadcast(g, ins[1].shape)]
    if op == "multiply":
        return [g * ins[1], _unbroadcast(g * ins[0], ins[1].shape)]
    if op == "scale":
        return [g * node.attrs["s"]]
    if op == "relu":
        return [np.where(ins[0] > 0, g, 0.0)]
    if op == "softmax_rows":
        return [out * (g - (g * out).sum(axis=-1, keepdims=True))]
    if op == "l2_normalize_rows":
        n = _row_norms(ins[0])
        safe = np.where(n > 0, n, 1.0)
        dx = (g - out * (g * out).sum(axis=-1, keepdims=True)) / safe
        return [np.where(n > 0, dx, 0.0)]
    if op == "mean":
        x = ins[0]
        ax = node.attrs["axis"]
        if ax is None:
            return [np.full(x.shape, float(g) / x.size)]
        return [np.broadcast_to(np.expand_dims(g, ax) / x.shape[ax], x.shape).copy()]
    if op == "concat_rows":
        cuts = np.cumsum([a.shape[0] for a in ins])[:-1]
        return list(np.split(g, cuts, axis=0))
    if op == "conv2d_valid":
        x, w = ins[0], ins[1]
        kh, kw = w.shape[2], w.shape[3]
        win = _windows(x, kh, kw)
        dw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))  # Co, Ci, kh, kw
        gp = np.pad(g, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
        dx = _conv(gp, w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        grads = [dx, dw]
        if len(ins) == 3:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads
    if op == "avgpool2x2":
        x = ins[0]
        dx = np.zeros_like(x)
        h2, w2 = g.shape[2], g.shape[3]
        dx[:, :, : 2 * h2, : 2 * w2] = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) / 4.0
        return [dx]
    if op == "cross_entropy":
        lg = np.atleast_2d(ins[0])
        lab = np.asarray(ins[1]).reshape(-1).astype(np.int64)
        p = _softmax(lg)
        p[np.arange(len(lab)), lab] -= 1.0
        return [(p * (float(g) / len(lab))).reshape(ins[0].shape), None]
    if op == "transpose":
        return [g.T]
    if op == "reshape":
        return [g.reshape(ins[0].shape)]
    raise ValueError(f"no backward rule for {op!r}")


def backward(graph: Graph, bindings: Mapping[str, np.ndarray]) -> tuple[float, dict[str, np.ndarray]]:
    """Return ``(loss, grads)`` with one gradient per trainable leaf."""
    out = forward(graph, bindings)
    if out.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {out.shape}")
    values = graph.values
    adj: list[np.ndarray | None] = [None] * len(graph.nodes)
    adj[-1] = np.ones_like(values[-1])
    for i in range(len(graph.nodes) - 1, -1, -1):
        node = graph.nodes[i]
        g = adj[i]
        if g is None or node.op == "leaf":
            continue
        ins = [values[j] for j in node.inputs]
        for j, gj in zip(node.inputs, _backward_op(node, ins, values[i], g)):
            if gj is None:
                continue
            adj[j] = gj if adj[j] is None else adj[j] + gj
    grads = {}
    for name, i in graph.leaves.items():
        if graph.nodes[i].trainable:
            grads[name] = adj[i] if adj[i] is not None else np.zeros_like(values[i])
    return float(out.reshape(())), grads


def grad_check(graph: Graph, bindings: Mapping[str, np.ndarray], eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    _, grads = backward(graph, bindings)
    for i, node in enumerate(graph.nodes):
        if node.op == "relu":
            closest = np.abs(graph.values[node.inputs[0]]).min(initial=np.inf)
            if closest < 10 * eps:
                raise KinkError(
                    f"{_describe(i, node)}: input within {closest:.2e} of the kink; resample the point"
                )
    point = {k: np.array(v, dtype=np.float64) for k, v in bindings.items()}
    worst = 0.0
    for name, analytic in grads.items():
        x = point[name]
        flat = x.reshape(-1)
        an = analytic.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            up = float(forward(graph, point))
            flat[k] = orig - eps
            down = float(forward(graph, point))
            flat[k] = orig
            numeric = (up - down) / (2 * eps)
            worst = max(worst, abs(an[k] - numeric) / max(1.0, abs(numeric)))
    forward(graph, bindings)
    return worst


# ----------------------------------------------------------------------
# optimizer


@dataclass
class SgdState:
    learning_rate: float
    momentum: float = 0.0
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")


def sgd_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
             state: SgdState) -> tuple[dict[str, np.ndarray], SgdState]:
    """One SGD-momentum update: ``v' = m*v + g``, ``p' = p - lr*v'``.

    Parameters without a gradient are carried over untouched.
    """
    new_params, new_vel = dict(params), dict(state.velocity)
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        p = np.asarray(params[name], dtype=np.float64)
        g = np.asarray(g, dtype=np.float64)
        v = state.velocity.get(name, np.zeros_like(p))
        if g.shape != p.shape or v.shape != p.shape:
            raise ShapeError(f"{name}: param {p.shape}, grad {g.shape}, velocity {v.shape}")
        v = state.momentum * v + g
        new_vel[name] = v
        new_params[name] = p - state.learning_rate * v
    return new_params, SgdState(state.learning_rate, state.momentum, new_vel)


# ----------------------------------------------------------------------
# parameter files


def _float_text(v) -> str:
    # a bare "-0" would come back from json as the integer 0
    t = format(float(v), ".17g")
    return t if any(ch in t for ch in ".en") else t + ".0"


def params_to_json(params: Mapping[str, np.ndarray], meta: dict | None = None) -> str:
    entries = []
    for name in params:
        arr = np.asarray(params[name], dtype=np.float64)
        vals = ", ".join(_float_text(v) for v in arr.reshape(-1))
        entries.append(
            f'    {{"name": {json.dumps(name)}, "shape": {json.dumps(list(arr.shape))}, '
            f'"values": [{vals}]}}'
        )
    head = json.dumps(meta or {}, sort_keys=True)
    return '{\n  "meta": ' + head + ',\n  "params": [\n' + ",\n".join(entries) + "\n  ]\n}\n"


def params_from_json(text: str) -> tuple[dict[str, np.ndarray], dict]:
    doc = json.loads(text)
    params = {}
    for e in doc["params"]:
        shape = tuple(e["shape"])
        arr = np.asarray(e["values"], dtype=np.float64)
        if arr.size != int(np.prod(shape)):
            raise ShapeError(f"{e['name']}: {arr.size} values for shape {shape}")
        params[e["name"]] = arr.reshape(shape)
    return params, doc.get("meta", {})


def save_params(path, params, meta=None):
    Path(path).write_text(params_to_json(params, meta))


def load_params(path):
    return params_from_json(Path(path).read_text())


def params_digest(params: Mapping[str, np.ndarray]) -> str:
    """sha256 over (name, shape, float64 bytes), independent of insertion order."""
    h = hashlib.sha256()
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype=np.float64)
        h.update(name.encode())
        h.update(repr(arr.shape).encode())
        h.update(arr.astype("<f8").tobytes())
    return h.hexdigest()
