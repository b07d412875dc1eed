"""Continually evolved classifier: graph attention over the pooled prototypes.

Every prototype row ``w_j`` of the bank is rewritten as

    w_j' = w_j + sum_k a_jk * U w_k,   a_j. = softmax_k(<phi(w_j), theta(w_k)>)

over a fully connected graph of all rows (self-edges included). The update
is synchronous: every row reads the original bank.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .heads import ClassifierWeights, build_logits, logits, ones_bindings
from .numerics import Graph, _softmax, backward, forward, params_from_json, params_to_json

Bank = Sequence[ClassifierWeights]


@dataclass
class AdapterParams:
    tensors: dict[str, np.ndarray]
    heads: int = 1
    layer_norm: bool = False
    dropout: float = 0.1
    feat: bool = False            # append the query embedding as an extra node

    @property
    def dim(self) -> int:
        return self.tensors["U.0"].shape[0]

    @property
    def proj_dim(self) -> int:
        return self.tensors["phi.0"].shape[1]

    def config(self) -> dict:
        return {"heads": self.heads, "layer_norm": self.layer_norm,
                "dropout": self.dropout, "feat": self.feat}

    def to_json(self) -> str:
        return params_to_json(self.tensors, {"adapter": self.config()})

    @classmethod
    def from_json(cls, text: str) -> "AdapterParams":
        tensors, meta = params_from_json(text)
        return cls(tensors, **meta["adapter"])


def init_adapter(dim: int, seed: int = 0, proj_dim: int | None = None, heads: int = 1,
                 layer_norm: bool = False, dropout: float = 0.1, feat: bool = False,
                 u_scale: float = 1e-3, proj_scale: float = 1.0) -> AdapterParams:
    d = dim if proj_dim is None else proj_dim
    rng = np.random.default_rng(seed)
    a = proj_scale * np.sqrt(6.0 / (dim + d))
    t = {}
    for h in range(heads):
        t[f"phi.{h}"] = rng.uniform(-a, a, (dim, d))
        t[f"theta.{h}"] = rng.uniform(-a, a, (dim, d))
        t[f"U.{h}"] = rng.uniform(-u_scale, u_scale, (dim, dim))
    if layer_norm:
        t["ln.gain"] = np.ones(dim)
        t["ln.bias"] = np.zeros(dim)
    return AdapterParams(t, heads, layer_norm, dropout, feat)


def flatten_bank(bank: Bank) -> tuple[np.ndarray, list[int]]:
    """Rows in session-major, class-minor order plus their class ids."""
    if not bank:
        raise ValueError("empty classifier bank")
    dims = {h.weights.shape[1] for h in bank}
    if len(dims) != 1:
        raise ValueError(f"bank rows disagree on embedding dimension: {sorted(dims)}")
    ids = [c for h in bank for c in h.class_ids]
    if len(set(ids)) != len(ids):
        raise ValueError("class ids repeat across the bank")
    return np.concatenate([h.weights for h in bank]), ids


def bank_bias(bank: Bank) -> np.ndarray | None:
    if bank[0].kind != "linear":
        return None
    return np.concatenate([h.bias for h in bank])


def unflatten(bank: Bank, rows: np.ndarray) -> list[ClassifierWeights]:
    out, start = [], 0
    for h in bank:
        out.append(replace(h, weights=rows[start: start + h.num_classes]))
        start += h.num_classes
    return out


# ----------------------------------------------------------------------
# the three stages, exposed separately for inspection


def relation_coefficients(params: AdapterParams, bank: Bank, head: int = 0) -> np.ndarray:
    w, _ = flatten_bank(bank)
    if w.shape[1] != params.dim:
        raise ValueError(f"bank dim {w.shape[1]} != adapter dim {params.dim}")
    return (w @ params.tensors[f"phi.{head}"]) @ (w @ params.tensors[f"theta.{head}"]).T


def attention_normalize(e: np.ndarray) -> np.ndarray:
    return _softmax(np.asarray(e, dtype=np.float64))


# ----------------------------------------------------------------------
# graph construction


def dropout_masks(params: AdapterParams, rows: int, cols: int, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    keep = 1.0 - params.dropout
    return {f"__drop.{h}": (rng.random((rows, cols)) < keep) / keep for h in range(params.heads)}


def build_adapt(g: Graph, params: AdapterParams, w: int, extra: int | None = None,
                training: bool = False) -> int:
    """Adapted rows of ``w``. ``extra`` (1 x C) joins the graph as a read-only node."""
    nodes = w if extra is None else g.concat_rows(w, extra)
    agg = None
    for h in range(params.heads):
        e = g.matmul(g.matmul(w, g.param(f"phi.{h}")),
                     g.transpose(g.matmul(nodes, g.param(f"theta.{h}"))))
        a = g.softmax_rows(e)
        if training and params.dropout > 0:
            a = g.multiply(a, g.const(f"__drop.{h}"))
        m = g.matmul(a, g.matmul(nodes, g.transpose(g.param(f"U.{h}"))))
        agg = m if agg is None else g.add(agg, m)
    if params.heads > 1:
        agg = g.scale(agg, 1.0 / params.heads)
    out = g.add(w, agg)
    if params.layer_norm:
        # (x - mean) / std == sqrt(C) * l2normalize(x - mean)
        centred = g.matmul(out, g.const("__centre"))
        out = g.scale(g.l2_normalize_rows(centred), np.sqrt(params.dim))
        out = g.add(g.multiply(out, g.param("ln.gain")), g.param("ln.bias"))
    return out


def _aux_bindings(g: Graph, params: AdapterParams) -> dict[str, np.ndarray]:
    out = ones_bindings(g)
    if "__centre" in g.leaves:
        c = params.dim
        out["__centre"] = np.eye(c) - 1.0 / c
    return out


def adapt_rows(params: AdapterParams, rows: np.ndarray, extra: np.ndarray | None = None,
               training: bool = False, dropout_seed: int = 0) -> np.ndarray:
    rows = np.asarray(rows, dtype=np.float64)
    if rows.shape[1] != params.dim:
        raise ValueError(f"bank dim {rows.shape[1]} != adapter dim {params.dim}")
    g = Graph()
    build_adapt(g, params, g.const("w"), None if extra is None else g.const("extra"), training)
    b = {**params.tensors, "w": rows, **_aux_bindings(g, params)}
    if extra is not None:
        b["extra"] = np.atleast_2d(extra)
    if training and params.dropout > 0:
        b.update(dropout_masks(params, len(rows), len(rows) + (extra is not None), dropout_seed))
    return forward(g, b)


def adapt(params: AdapterParams, bank: Bank, mode: str = "inference",
          dropout_seed: int = 0) -> list[ClassifierWeights]:
    """Adapted copy of the bank; same sessions, class ids and shapes."""
    if mode not in ("inference", "training"):
        raise ValueError(f"unknown mode {mode!r}")
    rows, _ = flatten_bank(bank)
    return unflatten(bank, adapt_rows(params, rows, training=mode == "training",
                                      dropout_seed=dropout_seed))


def adapted_logits(params: AdapterParams | None, bank: Bank, embeddings: np.ndarray) -> np.ndarray:
    """Logits over the concatenated (optionally adapted) bank, columns in bank order."""
    rows, _ = flatten_bank(bank)
    head = bank[0]
    bias = bank_bias(bank)
    if params is None:
        return logits(head.kind, rows, embeddings, bias, head.scale)
    if not params.feat:
        return logits(head.kind, adapt_rows(params, rows), embeddings, bias, head.scale)
    emb = np.atleast_2d(embeddings)
    return np.concatenate([
        logits(head.kind, adapt_rows(params, rows, extra=f[None]), f[None], bias, head.scale)
        for f in emb
    ]) if len(emb) else np.zeros((0, len(rows)))


# ----------------------------------------------------------------------
# training loss


@dataclass
class LossGraph:
    graph: Graph
    bindings: dict[str, np.ndarray] = field(default_factory=dict)

    def forward(self) -> float:
        return float(forward(self.graph, self.bindings))

    def backward(self):
        return backward(self.graph, self.bindings)


def adapt_loss_graph(params: AdapterParams, bank: Bank, queries: np.ndarray, labels,
                     kind: str | None = None, last_layer: dict[str, np.ndarray] | None = None,
                     training: bool = False, dropout_seed: int = 0,
                     train_last_layer: bool = True) -> LossGraph:
    """adapt -> score queries against the concatenated bank -> cross-entropy.

    With ``last_layer`` (``{"fc.w", "fc.b"}``), ``queries`` are the inputs of
    the encoder's last linear layer and that layer joins the graph.
    """
    rows, ids = flatten_bank(bank)
    kind = kind or bank[0].kind
    scale = bank[0].scale
    index = {c: i for i, c in enumerate(ids)}
    try:
        y = np.array([index[int(c)] for c in labels], dtype=np.float64)
    except KeyError as err:
        raise ValueError(f"query label {err.args[0]} is not in the bank") from None
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    n, m, dim = len(queries), len(rows), rows.shape[1]

    g = Graph()
    b: dict[str, np.ndarray] = {**params.tensors, "bank": rows, "y": y}
    f = g.const("q")
    b["q"] = queries
    if last_layer is not None:
        leaf = g.param if train_last_layer else g.const
        f = g.linear(f, leaf("fc.w"), leaf("fc.b"))
        b.update(last_layer)
    bias = None
    if kind == "linear":
        bias = g.const("bank.bias")
        b["bank.bias"] = bank_bias(bank)
    w = g.const("bank")
    if not params.feat:
        out = build_logits(g, kind, build_adapt(g, params, w, training=training), f, n, m, dim,
                           bias, scale)
        if training and params.dropout > 0:
            b.update(dropout_masks(params, m, m, dropout_seed))
    else:
        parts = []
        for i in range(n):
            sel = g.const(f"__sel.{i}")
            b[f"__sel.{i}"] = np.eye(1, n, i)
            fi = g.matmul(sel, f)
            parts.append(build_logits(g, kind, build_adapt(g, params, w, fi, training), fi,
                                      1, m, dim, bias, scale))
        out = g.concat_rows(*parts)
        if training and params.dropout > 0:
            b.update(dropout_masks(params, m, m + 1, dropout_seed))
    g.cross_entropy(out, g.const("y"))
    b.update(_aux_bindings(g, params))
    return LossGraph(g, b)
