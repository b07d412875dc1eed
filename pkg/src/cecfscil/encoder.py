"""Desk-scale backbones (MLP or tiny CNN), base-session pretraining and embedding."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .numerics import Graph, NonFiniteError, SgdState, backward, forward, sgd_step

log = logging.getLogger(__name__)

EMBED_CHUNK = 256


@dataclass(frozen=True)
class Augment:
    crop_pad: int = 0
    hflip: bool = False
    scale: bool = False

    @property
    def active(self) -> bool:
        return bool(self.crop_pad or self.hflip or self.scale)


@dataclass(frozen=True)
class EncoderConfig:
    kind: str = "tiny-cnn"            # "tiny-cnn" | "mlp"
    channels: int = 1
    height: int = 16
    width: int = 16
    hidden: tuple[int, ...] = (64,)   # mlp
    conv_channels: tuple[int, int] = (8, 16)
    embed_dim: int = 32
    augment: Augment = field(default_factory=Augment)

    def __post_init__(self):
        if self.kind not in ("tiny-cnn", "mlp"):
            raise ValueError(f"unknown encoder kind {self.kind!r}")
        if self.embed_dim < 2:
            raise ValueError("embed_dim must be >= 2")
        if isinstance(self.augment, dict):
            object.__setattr__(self, "augment", Augment(**self.augment))
        object.__setattr__(self, "hidden", tuple(self.hidden))
        object.__setattr__(self, "conv_channels", tuple(self.conv_channels))

    @property
    def last_layer(self) -> tuple[str, str]:
        return ("fc.w", "fc.b")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"], d["conv_channels"] = list(self.hidden), list(self.conv_channels)
        return d


def _glorot(rng, shape, fan_in, fan_out):
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


def _cnn_flat_size(cfg):
    h, w = cfg.height, cfg.width
    for _ in range(2):
        h, w = (h - 2) // 2, (w - 2) // 2
    if h < 1 or w < 1:
        raise ValueError(f"{cfg.height}x{cfg.width} images are too small for tiny-cnn")
    return cfg.conv_channels[1] * h * w


def init_params(cfg: EncoderConfig, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    p = {}
    if cfg.kind == "tiny-cnn":
        c1, c2 = cfg.conv_channels
        p["conv1.w"] = _glorot(rng, (c1, cfg.channels, 3, 3), cfg.channels * 9, c1 * 9)
        p["conv1.b"] = np.zeros(c1)
        p["conv2.w"] = _glorot(rng, (c2, c1, 3, 3), c1 * 9, c2 * 9)
        p["conv2.b"] = np.zeros(c2)
        flat = _cnn_flat_size(cfg)
    else:
        flat = cfg.channels * cfg.height * cfg.width
        for i, h in enumerate(cfg.hidden):
            p[f"hidden{i}.w"] = _glorot(rng, (flat, h), flat, h)
            p[f"hidden{i}.b"] = np.zeros(h)
            flat = h
    p["fc.w"] = _glorot(rng, (flat, cfg.embed_dim), flat, cfg.embed_dim)
    p["fc.b"] = np.zeros(cfg.embed_dim)
    return p


def build_features(g: Graph, cfg: EncoderConfig, x: int, trainable: bool = False) -> int:
    """Everything up to (not including) the last linear layer."""
    leaf = g.param if trainable else g.const
    if cfg.kind == "tiny-cnn":
        h = g.avgpool2x2(g.relu(g.conv2d_valid(x, leaf("conv1.w"), leaf("conv1.b"))))
        h = g.avgpool2x2(g.relu(g.conv2d_valid(h, leaf("conv2.w"), leaf("conv2.b"))))
        return g.reshape(h, (-1, _cnn_flat_size(cfg)))
    n_in = cfg.channels * cfg.height * cfg.width
    h = g.reshape(x, (-1, n_in))
    for i in range(len(cfg.hidden)):
        h = g.relu(g.linear(h, leaf(f"hidden{i}.w"), leaf(f"hidden{i}.b")))
    return h


def build_embed(g: Graph, cfg: EncoderConfig, x: int, trainable: bool = False,
                last_trainable: bool | None = None) -> int:
    last_trainable = trainable if last_trainable is None else last_trainable
    leaf = g.param if last_trainable else g.const
    return g.linear(build_features(g, cfg, x, trainable), leaf("fc.w"), leaf("fc.b"))


def _check_images(cfg, images):
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    if images.shape[1:] != (cfg.channels, cfg.height, cfg.width):
        raise ValueError(
            f"images shaped {images.shape[1:]}, encoder expects "
            f"{(cfg.channels, cfg.height, cfg.width)}"
        )
    return images


def _chunked(cfg, params, images, build):
    images = _check_images(cfg, images)
    g = Graph()
    build(g, cfg, g.const("x"))
    outs = [forward(g, {**params, "x": images[i: i + EMBED_CHUNK]})
            for i in range(0, len(images), EMBED_CHUNK)]
    return np.concatenate(outs) if outs else np.zeros((0, 0))


def embed(params, images, cfg: EncoderConfig) -> np.ndarray:
    """Embeddings (batch x embed_dim). Chunked at a fixed size, so any batch
    split yields bit-identical rows."""
    return _chunked(cfg, params, images, build_embed)


def features(params, images, cfg: EncoderConfig) -> np.ndarray:
    """Inputs of the last linear layer."""
    return _chunked(cfg, params, images, build_features)


# ----------------------------------------------------------------------
# augmentation


def _resample(img, factor):
    # bilinear zoom about the centre, edge-replicated
    c, h, w = img.shape
    cy, cx = (h - 1) / 2, (w - 1) / 2
    sy = np.clip((np.arange(h) - cy) / factor + cy, 0, h - 1)
    sx = np.clip((np.arange(w) - cx) / factor + cx, 0, w - 1)
    y0 = np.minimum(np.floor(sy).astype(int), h - 2)
    x0 = np.minimum(np.floor(sx).astype(int), w - 2)
    fy, fx = (sy - y0)[:, None], (sx - x0)[None, :]
    a = img[:, y0][:, :, x0]
    b = img[:, y0][:, :, x0 + 1]
    c_ = img[:, y0 + 1][:, :, x0]
    d = img[:, y0 + 1][:, :, x0 + 1]
    return (a * (1 - fy) * (1 - fx) + b * (1 - fy) * fx + c_ * fy * (1 - fx) + d * fy * fx)


def augment(images: np.ndarray, aug: Augment, rng: np.random.Generator) -> np.ndarray:
    """Seeded random crop (edge-padded), horizontal flip and scale in [0.9, 1.1]."""
    if not aug.active:
        return images
    out = np.empty_like(images)
    p = aug.crop_pad
    h, w = images.shape[2:]
    for i, img in enumerate(images):
        if aug.scale:
            img = np.clip(_resample(img, rng.uniform(0.9, 1.1)), 0, 1)
        if p:
            padded = np.pad(img, ((0, 0), (p, p), (p, p)), mode="edge")
            dy, dx = rng.integers(0, 2 * p + 1, size=2)
            img = padded[:, dy: dy + h, dx: dx + w]
        if aug.hflip and rng.random() < 0.5:
            img = img[:, :, ::-1]
        out[i] = img
    return out


# ----------------------------------------------------------------------
# pretraining


@dataclass
class PretrainResult:
    params: dict[str, np.ndarray]
    head: dict[str, np.ndarray]     # "head.w" (C x classes), "head.b"
    classes: list[int]
    train_accuracy: float
    losses: list[float]


def _lr_at(lr_schedule, epoch):
    if callable(lr_schedule):
        return float(lr_schedule(epoch))
    if np.ndim(lr_schedule):
        return float(lr_schedule[epoch])
    return float(lr_schedule)


def pretrain(images: np.ndarray, labels: np.ndarray, cfg: EncoderConfig, epochs: int,
             lr_schedule=0.05, seed: int = 0, batch_size: int = 64,
             momentum: float = 0.9) -> PretrainResult:
    """Supervised cross-entropy training of encoder plus a linear head.

    ``lr_schedule`` is a float, a per-epoch sequence, or ``epoch -> lr``.
    """
    images = _check_images(cfg, images)
    classes = sorted(set(np.asarray(labels).tolist()))
    if len(classes) < 2:
        raise ValueError("pretraining needs at least 2 classes")
    index = {c: i for i, c in enumerate(classes)}
    y = np.array([index[c] for c in labels], dtype=np.float64)
    rng = np.random.default_rng(seed)
    params = init_params(cfg, int(rng.integers(2**31)))
    head_rng = np.random.default_rng(int(rng.integers(2**31)))
    head = {"head.w": _glorot(head_rng, (cfg.embed_dim, len(classes)), cfg.embed_dim, len(classes)),
            "head.b": np.zeros(len(classes))}

    g = Graph()
    emb = build_embed(g, cfg, g.const("x"), trainable=True)
    g.cross_entropy(g.linear(emb, g.param("head.w"), g.param("head.b")), g.const("y"))

    state = None
    losses = []
    for epoch in range(epochs):
        lr = _lr_at(lr_schedule, epoch)
        state = SgdState(lr, momentum, state.velocity if state else {})
        order = rng.permutation(len(images))
        total = 0.0
        for start in range(0, len(order), batch_size):
            ix = order[start: start + batch_size]
            xb = augment(images[ix], cfg.augment, rng)
            try:
                loss, grads = backward(g, {**params, **head, "x": xb, "y": y[ix]})
            except NonFiniteError as err:
                raise FloatingPointError(f"pretraining diverged in epoch {epoch}: {err}") from err
            merged, state = sgd_step({**params, **head}, grads, state)
            params = {k: merged[k] for k in params}
            head = {k: merged[k] for k in head}
            total += loss * len(ix)
        losses.append(total / len(order))
        if not np.isfinite(losses[-1]):
            raise FloatingPointError(f"pretraining diverged in epoch {epoch}")
        log.debug("pretrain epoch %d loss %.4f lr %.4g", epoch, losses[-1], lr)

    logits = embed(params, images, cfg) @ head["head.w"] + head["head.b"]
    acc = float(np.mean(np.argmax(logits, axis=1) == y))
    return PretrainResult(params, head, classes, acc, losses)
