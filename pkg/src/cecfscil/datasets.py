"""Class-indexed image stores, FSCIL session splits and pseudo-incremental episodes.

Images are float64 arrays shaped ``(C, H, W)`` with values in [0, 1]; a
batch of them is ``(N, C, H, W)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

CIFAR_SIDE = 32
CIFAR_RECORD = 2 + 3 * CIFAR_SIDE * CIFAR_SIDE


def _frozen(a):
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Dataset:
    train: Mapping[int, np.ndarray]
    test: Mapping[int, np.ndarray]

    def __post_init__(self):
        ids = sorted(self.train)
        if ids != list(range(len(ids))) or sorted(self.test) != ids:
            raise ValueError("class ids must be contiguous 0..C-1 in both train and test")
        for c in ids:
            if len(self.test[c]) < 1:
                raise ValueError(f"class {c} has no test images")
            for arr in (self.train[c], self.test[c]):
                if arr.ndim != 4:
                    raise ValueError(f"class {c}: expected (N, C, H, W) image batches")
                if arr.size and (arr.min() < 0 or arr.max() > 1):
                    raise ValueError(f"class {c}: pixel values outside [0, 1]")

    @property
    def num_classes(self) -> int:
        return len(self.train)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.train[0].shape[1:])


# ----------------------------------------------------------------------
# rotation


def rotate_right_angle(img: np.ndarray, angle: int) -> np.ndarray:
    """Exact counter-clockwise rotation by a multiple of 90 degrees.

    Works on the last two axes, with ``out[r][c] = in[c][W-1-r]`` at 90.
    """
    k = int(angle) % 360
    if k % 90 or int(angle) != angle:
        raise ValueError(f"angle {angle} is not a multiple of 90")
    k //= 90
    img = np.asarray(img)
    if k % 2 and img.shape[-1] != img.shape[-2]:
        raise ValueError("90/270 degree rotation needs a square image")
    return np.ascontiguousarray(np.rot90(img, k, axes=(-2, -1)))


def rotate_arbitrary(img: np.ndarray, degrees: float) -> np.ndarray:
    """Counter-clockwise rotation about the centre with bilinear sampling.

    Samples falling outside the image take the nearest edge pixel.
    """
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[-2:]
    if h != w:
        raise ValueError("rotate_arbitrary needs a square image")
    t = np.deg2rad(degrees)
    cos, sin = np.cos(t), np.sin(t)
    # snap tiny trig residue so right angles are exact permutations
    cos = 0.0 if abs(cos) < 1e-12 else cos
    sin = 0.0 if abs(sin) < 1e-12 else sin
    centre = (h - 1) / 2.0
    rr, cc = np.meshgrid(np.arange(h) - centre, np.arange(w) - centre, indexing="ij")
    sy = np.clip(cos * rr + sin * cc + centre, 0, h - 1)
    sx = np.clip(-sin * rr + cos * cc + centre, 0, w - 1)
    y0 = np.minimum(np.floor(sy).astype(int), h - 2) if h > 1 else np.zeros_like(sy, int)
    x0 = np.minimum(np.floor(sx).astype(int), w - 2) if w > 1 else np.zeros_like(sx, int)
    fy, fx = sy - y0, sx - x0
    y1, x1 = np.minimum(y0 + 1, h - 1), np.minimum(x0 + 1, w - 1)
    out = (img[..., y0, x0] * (1 - fy) * (1 - fx) + img[..., y0, x1] * (1 - fy) * fx
           + img[..., y1, x0] * fy * (1 - fx) + img[..., y1, x1] * fy * fx)
    return np.clip(out, 0.0, 1.0)


def rotate(img: np.ndarray, degrees: float) -> np.ndarray:
    """Exact permutation for right angles, interpolation otherwise."""
    if float(degrees) % 90 == 0:
        return rotate_right_angle(img, int(degrees))
    return rotate_arbitrary(img, degrees)


# ----------------------------------------------------------------------
# session splits


@dataclass(frozen=True)
class Session:
    index: int
    classes: tuple[int, ...]
    train: Mapping[int, np.ndarray]
    shot_indices: Mapping[int, tuple[int, ...]] | None = None   # None: all data


@dataclass(frozen=True)
class SessionSplit:
    dataset: Dataset
    sessions: tuple[Session, ...]
    way: int
    shot: int
    seed: int

    @property
    def n_sessions(self) -> int:
        return len(self.sessions) - 1

    def seen_classes(self, i: int) -> list[int]:
        return [c for s in self.sessions[: i + 1] for c in s.classes]

    def test_pool(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        classes = sorted(self.seen_classes(i))
        images = np.concatenate([self.dataset.test[c] for c in classes])
        labels = np.concatenate([np.full(len(self.dataset.test[c]), c) for c in classes])
        return images, labels

    def session_data(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        s = self.sessions[i]
        images = np.concatenate([s.train[c] for c in s.classes])
        labels = np.concatenate([np.full(len(s.train[c]), c) for c in s.classes])
        return images, labels

    def manifest(self) -> dict:
        return {
            "seed": self.seed,
            "way": self.way,
            "shot": self.shot,
            "sessions": [
                {
                    "index": s.index,
                    "classes": list(s.classes),
                    "shot_indices": None if s.shot_indices is None
                    else {str(c): list(ix) for c, ix in s.shot_indices.items()},
                }
                for s in self.sessions
            ],
        }


def make_session_split(dataset: Dataset, base_count: int, n_sessions: int, way: int,
                       shot: int, seed: int) -> SessionSplit:
    """Classes are assigned to sessions in id order; shot images are a seeded draw."""
    if base_count < 1 or n_sessions < 0 or (n_sessions and (way < 1 or shot < 1)):
        raise ValueError("base_count >= 1, n_sessions >= 0, way >= 1 and shot >= 1 required")
    if base_count + n_sessions * way != dataset.num_classes:
        raise ValueError(
            f"{base_count} base + {n_sessions}x{way} new classes != {dataset.num_classes} classes"
        )
    rng = np.random.default_rng(seed)
    base = tuple(range(base_count))
    sessions = [Session(0, base, {c: dataset.train[c] for c in base})]
    for i in range(1, n_sessions + 1):
        classes = tuple(range(base_count + (i - 1) * way, base_count + i * way))
        train, idx = {}, {}
        for c in classes:
            pool = dataset.train[c]
            if len(pool) < shot:
                raise ValueError(f"class {c} has {len(pool)} training images, needs {shot}")
            ix = tuple(int(j) for j in np.sort(rng.choice(len(pool), size=shot, replace=False)))
            idx[c] = ix
            train[c] = _frozen(pool[list(ix)])
        sessions.append(Session(i, classes, train, idx))
    return SessionSplit(dataset, tuple(sessions), way, shot, seed)


def split_from_manifest(dataset: Dataset, manifest: dict) -> SessionSplit:
    sessions = []
    for s in manifest["sessions"]:
        classes = tuple(s["classes"])
        if s["shot_indices"] is None:
            sessions.append(Session(s["index"], classes, {c: dataset.train[c] for c in classes}))
        else:
            idx = {int(c): tuple(v) for c, v in s["shot_indices"].items()}
            train = {c: _frozen(dataset.train[c][list(idx[c])]) for c in classes}
            sessions.append(Session(s["index"], classes, train, idx))
    return SessionSplit(dataset, tuple(sessions), manifest["way"], manifest["shot"], manifest["seed"])


# ----------------------------------------------------------------------
# pseudo-incremental episodes


@dataclass(frozen=True)
class PseudoEpisode:
    base_classes: tuple[int, ...]
    inc_classes: tuple[int, ...]             # source classes before rotation
    angles: dict[int, float]                 # source class -> angle
    synthetic_labels: dict[int, int]         # source class -> fresh label
    support_base: np.ndarray
    support_base_labels: np.ndarray
    query_base: np.ndarray
    query_base_labels: np.ndarray
    support_inc: np.ndarray
    support_inc_labels: np.ndarray
    query_inc: np.ndarray
    query_inc_labels: np.ndarray

    @property
    def labels(self) -> list[int]:
        """Episode classes in head order: pseudo-base then synthetic."""
        return list(self.base_classes) + [self.synthetic_labels[c] for c in self.inc_classes]


def sample_pseudo_episode(base_data: Mapping[int, np.ndarray], way: int, shot: int, query: int,
                          seed: int, angle_pool: Sequence[float] = (90, 180, 270)) -> PseudoEpisode:
    if not angle_pool:
        raise ValueError("angle_pool is empty")
    if way < 1 or shot < 1 or query < 0:
        raise ValueError("way >= 1, shot >= 1, query >= 0 required")
    classes = sorted(base_data)
    if len(classes) < 2 * way:
        raise ValueError(f"need {2 * way} base classes for a {way}-way episode, have {len(classes)}")
    rng = np.random.default_rng(seed)
    picked = [classes[i] for i in rng.permutation(len(classes))[: 2 * way]]
    base_cls, inc_cls = tuple(picked[:way]), tuple(picked[way:])
    fresh = max(classes) + 1

    def draw(c):
        pool = base_data[c]
        if len(pool) < shot + query:
            raise ValueError(f"class {c} has {len(pool)} images, needs {shot + query}")
        ix = rng.permutation(len(pool))[: shot + query]
        return pool[ix[:shot]], pool[ix[shot:]]

    sb, qb, si, qi = [], [], [], []
    angles, synth = {}, {}
    for c in base_cls:
        s, q = draw(c)
        sb.append(s)
        qb.append(q)
    for j, c in enumerate(inc_cls):
        s, q = draw(c)
        angles[c] = float(angle_pool[rng.integers(len(angle_pool))])
        synth[c] = fresh + j
        si.append(rotate(s, angles[c]))
        qi.append(rotate(q, angles[c]))

    def labels(cls, n, mapping=None):
        return np.repeat([mapping[c] if mapping else c for c in cls], n)

    return PseudoEpisode(
        base_cls, inc_cls, angles, synth,
        np.concatenate(sb), labels(base_cls, shot),
        np.concatenate(qb), labels(base_cls, query),
        np.concatenate(si), labels(inc_cls, shot, synth),
        np.concatenate(qi), labels(inc_cls, query, synth),
    )


# ----------------------------------------------------------------------
# loaders and generators


def _read_cifar_records(raw: bytes, where) -> tuple[np.ndarray, np.ndarray]:
    if len(raw) % CIFAR_RECORD:
        raise ValueError(f"{where}: {len(raw)} bytes is not a multiple of {CIFAR_RECORD}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    fine = rec[:, 1].astype(np.int64)
    if fine.size and fine.max() >= 100:
        raise ValueError(f"{where}: fine label {int(fine.max())} >= 100")
    images = rec[:, 2:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE).astype(np.float64) / 255.0
    return images, fine


def load_cifar100_binary(path, test_path=None) -> Dataset:
    """Load CIFAR-100 binary files (``train.bin`` / ``test.bin``).

    ``path`` may be a directory holding both files, or a single training file
    with ``test_path`` optional. When no separate test file is available the
    training records double as the test pool. Only classes present in the
    data are kept; their fine labels must be contiguous from 0.
    """
    path = Path(path)
    if path.is_dir():
        train_file, test_file = path / "train.bin", path / "test.bin"
        if not test_file.exists():
            test_file = None
    else:
        train_file, test_file = path, Path(test_path) if test_path else None
    tr_x, tr_y = _read_cifar_records(train_file.read_bytes(), train_file)
    te_x, te_y = (_read_cifar_records(test_file.read_bytes(), test_file)
                  if test_file else (tr_x, tr_y))
    ids = sorted(set(tr_y.tolist()))
    return Dataset(
        {c: _frozen(tr_x[tr_y == c]) for c in ids},
        {c: _frozen(te_x[te_y == c]) for c in ids},
    )


def synth_blob_dataset(classes: int = 20, per_class_train: int = 50, per_class_test: int = 10,
                       side: int = 16, seed: int = 0, noise: float = 0.05) -> Dataset:
    """Grayscale images of class-specific anisotropic Gaussian blobs.

    Each class owns an off-centre main blob (centre, widths, orientation) and
    a smaller satellite blob, so the pattern changes under rotation. Images
    add a small positional jitter, amplitude variation and pixel noise.
    """
    if side < 8 or classes < 4:
        raise ValueError("side >= 8 and classes >= 4 required")
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    half = (side - 1) / 2.0

    protos = []
    for _ in range(classes):
        radius = rng.uniform(0.15, 0.35) * side
        phi = rng.uniform(0, 2 * np.pi)
        centre = np.array([half + radius * np.sin(phi), half + radius * np.cos(phi)])
        sat_phi = phi + rng.uniform(0.6, 1.4) * rng.choice([-1, 1])
        sat = np.array([half + 0.3 * side * np.sin(sat_phi), half + 0.3 * side * np.cos(sat_phi)])
        protos.append(dict(
            centre=centre,
            sigmas=rng.uniform(0.08, 0.22, size=2) * side,
            theta=rng.uniform(0, np.pi),
            sat=sat,
            sat_sigma=rng.uniform(0.05, 0.09) * side,
            sat_amp=rng.uniform(0.4, 0.8),
        ))

    def render(p, n):
        out = np.empty((n, 1, side, side))
        for k in range(n):
            c = p["centre"] + rng.normal(0, 0.04 * side, size=2)
            ct, st = np.cos(p["theta"]), np.sin(p["theta"])
            dy, dx = yy - c[0], xx - c[1]
            u, v = ct * dx + st * dy, -st * dx + ct * dy
            img = np.exp(-0.5 * ((u / p["sigmas"][0]) ** 2 + (v / p["sigmas"][1]) ** 2))
            s = p["sat"] + rng.normal(0, 0.04 * side, size=2)
            img = img + p["sat_amp"] * np.exp(-0.5 * ((yy - s[0]) ** 2 + (xx - s[1]) ** 2)
                                              / p["sat_sigma"] ** 2)
            img = img * rng.uniform(0.7, 0.95) + rng.normal(0, noise, size=img.shape)
            out[k, 0] = np.clip(img, 0.0, 1.0)
        return _frozen(out)

    train, test = {}, {}
    for c, p in enumerate(protos):
        train[c] = render(p, per_class_train)
        test[c] = render(p, per_class_test)
    return Dataset(train, test)
