"""Prototype classifier heads over frozen embeddings."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .numerics import Graph, SgdState, backward, sgd_step

HEAD_KINDS = ("linear", "cosine", "neg-l2")
DEFAULT_SCALE = 16.0


@dataclass(frozen=True)
class ClassifierWeights:
    weights: np.ndarray                 # (N, C), row c is class_ids[c]'s prototype
    class_ids: tuple[int, ...]
    kind: str = "cosine"
    bias: np.ndarray | None = None      # linear head only
    scale: float = DEFAULT_SCALE        # cosine head only
    session: int = 0

    def __post_init__(self):
        if self.kind not in HEAD_KINDS:
            raise ValueError(f"unknown head kind {self.kind!r}")
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] != len(self.class_ids):
            raise ValueError("weights need one row per class id")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "class_ids", tuple(int(c) for c in self.class_ids))
        if self.kind == "linear" and self.bias is None:
            object.__setattr__(self, "bias", np.zeros(len(self.class_ids)))
        if self.kind != "linear":
            object.__setattr__(self, "bias", None)

    @property
    def num_classes(self) -> int:
        return len(self.class_ids)


def init_from_data(embeddings, labels, kind="cosine", scale=DEFAULT_SCALE,
                   session=0) -> ClassifierWeights:
    """Data Init: each row is the mean embedding of its class."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    classes = sorted(set(labels.tolist()))
    if not classes:
        raise ValueError("no embeddings given")
    rows = np.stack([embeddings[labels == c].mean(axis=0) for c in classes])
    return ClassifierWeights(rows, tuple(classes), kind, scale=scale, session=session)


def init_random(class_ids, dim, kind="cosine", seed=0, scale=DEFAULT_SCALE,
                session=0) -> ClassifierWeights:
    rng = np.random.default_rng(seed)
    a = np.sqrt(6.0 / (dim + len(class_ids)))
    return ClassifierWeights(rng.uniform(-a, a, (len(class_ids), dim)), tuple(class_ids),
                             kind, scale=scale, session=session)


def _normalize(x):
    n = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    return np.where(n > 0, x / np.where(n > 0, n, 1.0), 0.0)


def logits(kind, weights, embeddings, bias=None, scale=DEFAULT_SCALE) -> np.ndarray:
    f = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    w = np.asarray(weights, dtype=np.float64)
    if f.shape[1] != w.shape[1]:
        raise ValueError(f"embedding dim {f.shape[1]} != prototype dim {w.shape[1]}")
    if kind == "linear":
        out = f @ w.T
        return out if bias is None else out + bias
    if kind == "cosine":
        return scale * (_normalize(f) @ _normalize(w).T)
    if kind == "neg-l2":
        return -((f[:, None, :] - w[None, :, :]) ** 2).sum(axis=-1)
    raise ValueError(f"unknown head kind {kind!r}")


def score(head: ClassifierWeights, embedding) -> np.ndarray:
    """Logits; a 1-D embedding yields a 1-D result."""
    out = logits(head.kind, head.weights, embedding, head.bias, head.scale)
    return out[0] if np.ndim(embedding) == 1 else out


def build_logits(g: Graph, kind: str, w: int, f: int, n_rows: int, n_cols: int,
                 dim: int, bias: int | None = None, scale: float = DEFAULT_SCALE) -> int:
    """Differentiable logits for ``n_rows`` embeddings ``f`` against ``n_cols`` prototypes ``w``."""
    if kind == "linear":
        out = g.matmul(f, g.transpose(w))
        return out if bias is None else g.add(out, bias)
    if kind == "cosine":
        return g.scale(g.matmul(g.l2_normalize_rows(f), g.transpose(g.l2_normalize_rows(w))), scale)
    if kind == "neg-l2":
        # -|f|^2 - |w|^2 + 2 f.w, broadcast with constant ones matrices
        ones_d = g.const(f"__ones_{dim}x1")
        ff = g.matmul(g.matmul(g.multiply(f, f), ones_d), g.const(f"__ones_1x{n_cols}"))
        ww = g.matmul(g.const(f"__ones_{n_rows}x1"),
                      g.transpose(g.matmul(g.multiply(w, w), ones_d)))
        cross = g.scale(g.matmul(f, g.transpose(w)), 2.0)
        return g.add(cross, g.scale(g.add(ff, ww), -1.0))
    raise ValueError(f"unknown head kind {kind!r}")


def ones_bindings(g: Graph) -> dict[str, np.ndarray]:
    """Values for the constant ones matrices declared by :func:`build_logits`."""
    out = {}
    for name in g.leaves:
        if name.startswith("__ones_"):
            r, c = name[len("__ones_"):].split("x")
            out[name] = np.ones((int(r), int(c)))
    return out


def fit_head(init: ClassifierWeights, embeddings, labels, epochs: int = 100, lr: float = 0.1,
             seed: int = 0, momentum: float = 0.9, batch_size: int | None = None) -> ClassifierWeights:
    """Cross-entropy SGD on the head parameters only (embeddings are fixed)."""
    if lr <= 0:
        raise ValueError("lr must be positive")
    if epochs == 0:
        return init
    embeddings = np.asarray(embeddings, dtype=np.float64)
    index = {c: i for i, c in enumerate(init.class_ids)}
    try:
        y = np.array([index[int(c)] for c in labels], dtype=np.float64)
    except KeyError as err:
        raise ValueError(f"label {err.args[0]} not among the head's classes") from None
    n, dim = embeddings.shape
    bs = n if batch_size is None else batch_size
    rng = np.random.default_rng(seed)

    def graph(rows):
        g = Graph()
        b = g.param("b") if init.kind == "linear" else None
        out = build_logits(g, init.kind, g.param("w"), g.const("f"), rows, init.num_classes,
                           dim, b, init.scale)
        g.cross_entropy(out, g.const("y"))
        return g

    graphs = {}
    params = {"w": init.weights.copy()}
    if init.kind == "linear":
        params["b"] = np.array(init.bias, dtype=np.float64)
    state = SgdState(lr, momentum)
    for _ in range(epochs):
        order = rng.permutation(n) if bs < n else np.arange(n)
        for start in range(0, n, bs):
            ix = order[start: start + bs]
            g = graphs.get(len(ix)) or graphs.setdefault(len(ix), graph(len(ix)))
            _, grads = backward(g, {**params, **ones_bindings(g), "f": embeddings[ix], "y": y[ix]})
            params, state = sgd_step(params, grads, state)
    return replace(init, weights=params["w"], bias=params.get("b"))


def support_loss(head: ClassifierWeights, embeddings, labels) -> float:
    index = {c: i for i, c in enumerate(head.class_ids)}
    lg = np.atleast_2d(score(head, embeddings))
    y = np.array([index[int(c)] for c in labels])
    z = lg - lg.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(len(y)), y].mean())
