"""Incremental deployment, evaluation, metrics and ablation sweeps."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from decimal import Decimal
from pathlib import Path
from typing import Sequence

import numpy as np

from .cec import AdapterParams, adapted_logits, flatten_bank
from .config import RunConfig
from .datasets import Dataset, SessionSplit, load_cifar100_binary, make_session_split, synth_blob_dataset
from .encoder import EncoderConfig, PretrainResult, build_embed, embed, pretrain
from .heads import ClassifierWeights, build_logits, fit_head, init_from_data, init_random, ones_bindings
from .numerics import Graph, SgdState, backward, load_params, params_digest, save_params, sgd_step
from .pil import PilResult, run_pil

log = logging.getLogger(__name__)

EVAL_CHUNK = 64


# ----------------------------------------------------------------------
# metrics


def compute_pd(accuracies: Sequence[float]) -> float:
    """First-session minus last-session accuracy, exact in decimal."""
    if len(accuracies) == 0:
        raise ValueError("no session accuracies")
    return float(Decimal(repr(float(accuracies[0]))) - Decimal(repr(float(accuracies[-1]))))


def average_accuracy(accuracies: Sequence[float]) -> float:
    if len(accuracies) == 0:
        raise ValueError("no session accuracies")
    return float(np.mean(accuracies))


@dataclass
class SessionMetrics:
    accuracies: list[float]
    confusions: list[np.ndarray]
    classes: list[list[int]]                 # confusion row/column order per session
    banks: list[list[ClassifierWeights]] = field(default_factory=list, repr=False)
    encoder_digests: list[str] = field(default_factory=list)

    @property
    def pd(self) -> float:
        return compute_pd(self.accuracies)

    @property
    def avg(self) -> float:
        return average_accuracy(self.accuracies)

    def sessions_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["session", "classes", "accuracy"])
        for i, (acc, cls) in enumerate(zip(self.accuracies, self.classes)):
            w.writerow([i, len(cls), f"{100 * acc:.2f}"])
        return buf.getvalue()


def confusion_csv(matrix: np.ndarray, classes: Sequence[int]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["true\\pred"] + list(classes))
    for c, row in zip(classes, matrix):
        w.writerow([c] + [int(v) for v in row])
    return buf.getvalue()


# ----------------------------------------------------------------------
# evaluation


def evaluate(encoder_params, enc_cfg: EncoderConfig, bank: Sequence[ClassifierWeights],
             images: np.ndarray, labels: np.ndarray, adapter: AdapterParams | None = None,
             workers: int = 1) -> tuple[float, np.ndarray, list[int]]:
    """Top-1 accuracy and confusion matrix over the bank's classes.

    Ties go to the lowest class id. Samples are processed in fixed-size
    chunks and counted with integers, so ``workers`` never changes results.
    """
    rows, ids = flatten_bank(bank)
    classes = sorted(ids)
    col = np.argsort(ids, kind="stable")           # bank order -> class-id order
    pos = {c: i for i, c in enumerate(classes)}
    labels = np.asarray(labels)
    unknown = set(labels.tolist()) - set(classes)
    if unknown:
        raise ValueError(f"test labels {sorted(unknown)} are not in the bank")
    if adapter is not None and not adapter.feat:
        from .cec import adapt
        bank, adapter = adapt(adapter, bank), None

    def chunk(start):
        emb = embed(encoder_params, images[start: start + EVAL_CHUNK], enc_cfg)
        pred = np.argmax(adapted_logits(adapter, bank, emb)[:, col], axis=1)
        truth = np.array([pos[int(c)] for c in labels[start: start + EVAL_CHUNK]])
        m = np.zeros((len(classes), len(classes)), dtype=np.int64)
        np.add.at(m, (truth, pred), 1)
        return m

    starts = range(0, len(images), EVAL_CHUNK)
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            parts = list(ex.map(chunk, starts))
    else:
        parts = [chunk(s) for s in starts]
    confusion = np.sum(parts, axis=0) if parts else np.zeros((len(classes),) * 2, np.int64)
    total = int(confusion.sum())
    return (int(np.trace(confusion)) / total if total else 0.0), confusion, classes


# ----------------------------------------------------------------------
# session heads


def _session_head(emb, labels, classes, session, cfg: RunConfig, seed) -> ClassifierWeights:
    # non-decoupled sessions fit the head jointly with the encoder instead
    r = cfg.run
    if r.data_init:
        head = init_from_data(emb, labels, r.head, r.scale, session)
        if r.head == "linear":
            head = replace(head, bias=np.zeros(head.num_classes))
    else:
        head = init_random(classes, emb.shape[1], r.head, seed, r.scale, session)
    if r.fit_epochs and (r.decoupled or session == 0):
        head = fit_head(head, emb, labels, r.fit_epochs, r.fit_lr, seed)
    return head


def _finetune_all(params, enc_cfg, old_bank, head: ClassifierWeights, images, labels,
                  cfg: RunConfig, seed):
    """Non-decoupled session: encoder and the new head trained on the new data,
    scored against every class seen so far."""
    r = cfg.run
    old_rows = (np.concatenate([h.weights for h in old_bank]) if old_bank
                else np.zeros((0, head.weights.shape[1])))
    ids = [c for h in old_bank for c in h.class_ids] + list(head.class_ids)
    y = np.array([ids.index(int(c)) for c in labels], dtype=np.float64)
    n, dim = len(images), head.weights.shape[1]

    g = Graph()
    f = build_embed(g, enc_cfg, g.const("x"), trainable=True)
    w = g.concat_rows(g.const("old"), g.param("new")) if old_bank else g.param("new")
    bias = None
    if r.head == "linear":
        bias = g.concat_rows(g.const("old.b"), g.param("new.b")) if old_bank else g.param("new.b")
    lg = build_logits(g, r.head, w, f, n, len(ids), dim, None, r.scale)
    if bias is not None:
        lg = g.add(lg, g.reshape(bias, (len(ids),)))
    g.cross_entropy(lg, g.const("y"))

    train = {**params, "new": head.weights}
    fixed = {"old": old_rows, "x": images, "y": y}
    if r.head == "linear":
        train["new.b"] = head.bias.reshape(-1, 1)
        fixed["old.b"] = (np.concatenate([h.bias for h in old_bank]).reshape(-1, 1)
                          if old_bank else np.zeros((0, 1)))
    state = SgdState(r.fit_lr, 0.9)
    for _ in range(r.fit_epochs):
        _, grads = backward(g, {**train, **fixed, **ones_bindings(g)})
        train, state = sgd_step(train, grads, state)
    new_params = {k: train[k] for k in params}
    new_head = replace(head, weights=train["new"],
                       bias=train["new.b"].reshape(-1) if r.head == "linear" else None)
    return new_params, new_head


# ----------------------------------------------------------------------
# deployment


def run_incremental(encoder_params, enc_cfg: EncoderConfig, adapter: AdapterParams | None,
                    split: SessionSplit, cfg: RunConfig, seed: int = 0,
                    base_head: dict | None = None, workers: int = 1) -> SessionMetrics:
    """Learn a head per session, adapt the whole bank, evaluate the cumulative pool.

    The raw (unadapted) bank is the persistent state; adaptation is redone
    over the full bank at every session. ``workers`` only parallelises
    evaluation and never changes the results.
    """
    r = cfg.run
    if r.adapter and adapter is None:
        raise ValueError("run.adapter is on but no adapter was given")
    use = adapter if r.adapter else None
    params = dict(encoder_params)
    bank: list[ClassifierWeights] = []
    metrics = SessionMetrics([], [], [])
    rng = np.random.default_rng(seed)
    for i, session in enumerate(split.sessions):
        images, labels = split.session_data(i)
        head_seed = int(rng.integers(2**31))
        if i == 0 and r.base_head == "pretrained":
            if base_head is None:
                raise ValueError("base_head='pretrained' needs the pretraining head")
            head = ClassifierWeights(base_head["head.w"].T, tuple(base_head["classes"]), "linear",
                                     bias=base_head["head.b"], session=0)
        else:
            emb = embed(params, images, enc_cfg)
            head = _session_head(emb, labels, session.classes, i, cfg, head_seed)
            if i > 0 and not r.decoupled and r.fit_epochs:
                params, head = _finetune_all(params, enc_cfg, bank, head, images, labels,
                                             cfg, head_seed)
        if set(head.class_ids) & {c for h in bank for c in h.class_ids}:
            raise ValueError(f"session {i} reuses class ids already in the bank")
        bank.append(head)
        test_x, test_y = split.test_pool(i)
        acc, conf, classes = evaluate(params, enc_cfg, bank, test_x, test_y, use, workers)
        metrics.accuracies.append(acc)
        metrics.confusions.append(conf)
        metrics.classes.append(classes)
        metrics.banks.append(list(bank))
        metrics.encoder_digests.append(params_digest(params))
        log.info("session %d: %d classes, accuracy %.4f", i, len(classes), acc)
    return metrics


# ----------------------------------------------------------------------
# whole pipeline


def derive_seed(seed: int, name: str) -> int:
    tag = int.from_bytes(hashlib.sha256(name.encode()).digest()[:4], "little")
    return int(np.random.SeedSequence([seed, tag]).generate_state(1)[0])


def build_dataset(cfg: RunConfig, seed: int) -> Dataset:
    d = cfg.data
    if d.kind == "synthetic":
        ds_seed = d.seed if d.seed is not None else derive_seed(seed, "data")
        return synth_blob_dataset(d.classes, d.per_class_train, d.per_class_test, d.side, ds_seed)
    if d.kind == "cifar100":
        if not d.path:
            raise ValueError("data.path is required for cifar100")
        return load_cifar100_binary(d.path)
    raise ValueError(f"unknown dataset kind {d.kind!r}")


def build_split(cfg: RunConfig, dataset: Dataset, seed: int) -> SessionSplit:
    s = cfg.split
    return make_session_split(dataset, s.base_count, s.n_sessions, s.way, s.shot,
                              derive_seed(seed, "split"))


def pretrain_encoder(cfg: RunConfig, split: SessionSplit, seed: int) -> PretrainResult:
    x, y = split.session_data(0)
    t = cfg.pretrain
    return pretrain(x, y, cfg.encoder, t.epochs, t.lr, derive_seed(seed, "pretrain"),
                    t.batch_size, t.momentum)


def train_adapter(cfg: RunConfig, encoder_params, split: SessionSplit, seed: int) -> PilResult:
    pil = replace(cfg.pil, seed=derive_seed(seed, "pil"))
    if not cfg.run.pil:
        # adapter without pseudo-incremental synthesis: plain class-group episodes
        pil = replace(pil, angle_pool=(0.0,))
    return run_pil(encoder_params, cfg.encoder, split.sessions[0].train, pil)


@dataclass
class RunResult:
    config: RunConfig
    seed: int
    split: SessionSplit
    metrics: SessionMetrics
    pretrained: PretrainResult | None
    encoder: dict
    adapter: AdapterParams | None
    pil: PilResult | None


def run_pipeline(cfg: RunConfig, seed: int, pretrained: PretrainResult | None = None,
                 split: SessionSplit | None = None,
                 adapter: AdapterParams | None = None, workers: int = 1) -> RunResult:
    """pretrain (unless given) -> PIL (if the adapter is on and none was given)
    -> incremental sessions."""
    if split is None:
        split = build_split(cfg, build_dataset(cfg, seed), seed)
    if pretrained is None:
        pretrained = pretrain_encoder(cfg, split, seed)
    encoder, pil = pretrained.params, None
    if not cfg.run.adapter:
        adapter = None
    elif adapter is None:
        pil = train_adapter(cfg, encoder, split, seed)
        encoder, adapter = pil.encoder, pil.adapter
    base_head = {**pretrained.head, "classes": pretrained.classes} if pretrained.head else None
    metrics = run_incremental(encoder, cfg.encoder, adapter, split, cfg,
                              derive_seed(seed, "sessions"), base_head, workers)
    return RunResult(cfg, seed, split, metrics, pretrained, encoder, adapter, pil)


def load_checkpoints(cfg: RunConfig) -> tuple[PretrainResult | None, AdapterParams | None]:
    """Encoder (+ base head) and adapter named under ``checkpoints`` in the config."""
    ck = cfg.checkpoints
    pretrained = adapter = None
    if ck.get("encoder"):
        params, meta = load_params(ck["encoder"])
        head, classes = {}, []
        if ck.get("base_head"):
            head, hmeta = load_params(ck["base_head"])
            classes = list(hmeta.get("classes", []))
        pretrained = PretrainResult(params, head, classes,
                                    float(meta.get("train_accuracy", float("nan"))), [])
    if ck.get("adapter"):
        adapter = AdapterParams.from_json(Path(ck["adapter"]).read_text())
    return pretrained, adapter


# ----------------------------------------------------------------------
# outputs


def code_digest() -> str:
    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()


def metrics_document(metrics: SessionMetrics, cfg: RunConfig, seed: int) -> dict:
    return {
        "accuracies": metrics.accuracies,
        "accuracies_pct": [round(100 * a, 2) for a in metrics.accuracies],
        "pd": metrics.pd,
        "avg": metrics.avg,
        "config": cfg.to_dict(),
        "seeds": {"run": seed, **{k: derive_seed(seed, k)
                                  for k in ("data", "split", "pretrain", "pil", "sessions")}},
        "digests": {"code": code_digest(), "config": cfg.digest(),
                    "encoder": metrics.encoder_digests[-1] if metrics.encoder_digests else None},
    }


def write_run(out_dir, result: RunResult) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    m = result.metrics
    (out / "metrics.json").write_text(
        json.dumps(metrics_document(m, result.config, result.seed), indent=2, sort_keys=True) + "\n")
    (out / "sessions.csv").write_text(m.sessions_csv())
    for i, (conf, cls) in enumerate(zip(m.confusions, m.classes)):
        (out / f"confusion_{i}.csv").write_text(confusion_csv(conf, cls))
    (out / "manifest.json").write_text(json.dumps(result.split.manifest(), indent=1) + "\n")
    save_params(out / "encoder.json", result.encoder, {"encoder": result.config.encoder.to_dict()})
    if result.pretrained is not None and result.pretrained.head:
        save_params(out / "base_head.json", result.pretrained.head,
                    {"classes": result.pretrained.classes})
    if result.adapter is not None:
        (out / "adapter.json").write_text(result.adapter.to_json())
    if result.pil is not None:
        write_loss_log(out / "loss_log.csv", result.pil.log)
    return out


def write_loss_log(path, history) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "loss", "lr"])
        for it, loss, lr in history:
            w.writerow([it, repr(float(loss)), repr(float(lr))])


# ----------------------------------------------------------------------
# ablations

GRID_WAYS = (1, 5, 10, 15, 20)
GRID_SHOTS = (1, 5, 10, 15, 20)
ROTATION_POOLS = {
    "180": (180.0,),
    "±90": (90.0, -90.0),
    "±45": (45.0, -45.0),
    "±20": (20.0, -20.0),
    "±10": (10.0, -10.0),
    "±5": (5.0, -5.0),
    "mixed": (180.0, 90.0, -90.0),
}
SWITCH_GRID = (
    {"run.head": "linear", "run.decoupled": False, "run.data_init": False, "run.adapter": False},
    {"run.head": "linear", "run.decoupled": True, "run.data_init": False, "run.adapter": False},
    {"run.head": "cosine", "run.decoupled": False, "run.data_init": False, "run.adapter": False},
    {"run.head": "cosine", "run.decoupled": True, "run.data_init": False, "run.adapter": False},
    {"run.head": "linear", "run.data_init": True, "run.adapter": False},
    {"run.head": "neg-l2", "run.data_init": True, "run.adapter": False},
    {"run.head": "cosine", "run.data_init": True, "run.adapter": False},
    {"run.head": "cosine", "run.data_init": True, "run.adapter": True, "run.pil": False},
    {"run.head": "cosine", "run.data_init": True, "run.adapter": True, "run.pil": True},
)


def default_grid(axis: str) -> list:
    if axis == "way-shot":
        return [(w, s) for w in GRID_WAYS for s in GRID_SHOTS]
    if axis == "rotation-degrees":
        return list(ROTATION_POOLS)
    if axis == "classifier-kind":
        return ["linear", "cosine", "neg-l2"]
    if axis == "switches":
        return list(SWITCH_GRID)
    raise ValueError(f"unknown ablation axis {axis!r}")


def cell_overrides(axis: str, value) -> dict:
    if axis == "way-shot":
        way, shot = value
        return {"pil.way": int(way), "pil.shot": int(shot)}
    if axis == "rotation-degrees":
        pool = ROTATION_POOLS[value] if isinstance(value, str) else tuple(value)
        return {"pil.angle_pool": list(pool)}
    if axis == "classifier-kind":
        return {"run.head": value, "pil.head": value}
    if axis == "switches":
        return dict(value)
    raise ValueError(f"unknown ablation axis {axis!r}")


def _label(axis, value) -> str:
    if axis == "switches":
        return ";".join(f"{k.split('.')[-1]}={v}" for k, v in value.items())
    if axis == "way-shot":
        return f"{value[0]}-way {value[1]}-shot"
    if axis == "rotation-degrees" and not isinstance(value, str):
        return "/".join(f"{a:g}" for a in value)
    return str(value)


def ablate(axis: str, grid: Sequence | None, base: RunConfig, seed: int,
           pretrained: PretrainResult | None = None) -> list[dict]:
    """Run the full pipeline per grid cell, sharing one pretrained encoder.

    Every cell reuses the same seed so cells differ only in the ablated setting.
    """
    grid = default_grid(axis) if grid is None else list(grid)
    split = build_split(base, build_dataset(base, seed), seed)
    if pretrained is None:
        pretrained = pretrain_encoder(base, split, seed)
    rows = []
    for value in grid:
        cfg = base.with_overrides(cell_overrides(axis, value))
        res = run_pipeline(cfg, seed, pretrained, split)
        rows.append({"config": _label(axis, value), "accuracies": res.metrics.accuracies,
                     "avg": res.metrics.avg, "pd": res.metrics.pd})
        log.info("ablate %s %s: avg %.4f", axis, rows[-1]["config"], rows[-1]["avg"])
    return rows


def ablation_csv(rows: list[dict]) -> str:
    n = max(len(r["accuracies"]) for r in rows)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["config"] + [f"acc_{i}" for i in range(n)] + ["avg", "pd"])
    for r in rows:
        w.writerow([r["config"]] + [f"{100 * a:.2f}" for a in r["accuracies"]]
                   + [f"{100 * r['avg']:.2f}", f"{100 * r['pd']:.2f}"])
    return buf.getvalue()


__all__ = [
    "SessionMetrics", "compute_pd", "average_accuracy", "evaluate", "run_incremental",
    "run_pipeline", "ablate", "ablation_csv", "write_run",
]
