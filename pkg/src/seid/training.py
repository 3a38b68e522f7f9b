"""Joint softmax + center loss, RMSProp, the step schedule, data and the loop."""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import ContractError, ShapeError
from .model import Model, load_checkpoint, save_checkpoint
from .tensor import Tape, Tensor, add, make_result, no_grad, scale


# --------------------------------------------------------------------------
# losses


@dataclass(frozen=True)
class LossConfig:
    lam: float = 0.01
    alpha: float = 0.9

    def __post_init__(self):
        if self.lam < 0:
            raise ContractError("center-loss weight must be >= 0")
        if not 0 < self.alpha <= 1:
            raise ContractError("center update rate must lie in (0, 1]")


@dataclass
class ClassCenters:
    centers: np.ndarray

    @classmethod
    def zeros(cls, num_classes: int, dim: int) -> "ClassCenters":
        return cls(np.zeros((num_classes, dim)))

    @property
    def num_classes(self) -> int:
        return self.centers.shape[0]


def _labels(labels, n: int, num_classes: int) -> np.ndarray:
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.shape[0] != n:
        raise ShapeError(f"{y.shape[0]} labels for a batch of {n}")
    if y.size and (y.min() < 0 or y.max() >= num_classes):
        raise ContractError(f"labels must lie in [0, {num_classes})")
    return y


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Batch mean of ``-log softmax(logits)[label]``."""
    if logits.ndim != 2:
        raise ShapeError("logits must be N x M")
    n, m = logits.shape
    y = _labels(labels, n, m)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    loss = np.array((logsum - z[np.arange(n), y]).mean())

    def back(g):
        p = np.exp(z - logsum[:, None])
        p[np.arange(n), y] -= 1.0
        return (p * (g / n),)

    return make_result("softmax_cross_entropy", loss, (logits,), back)


def center_loss(features: Tensor, labels, centers: ClassCenters) -> Tensor:
    """``(1/2N) sum ||x_i - c_{y_i}||^2`` with centers held constant."""
    if features.ndim != 2 or features.shape[1] != centers.centers.shape[1]:
        raise ShapeError(f"features {tuple(features.shape)} vs centers {centers.centers.shape}")
    n = features.shape[0]
    y = _labels(labels, n, centers.num_classes)
    diff = features.data - centers.centers[y]
    loss = np.array((diff * diff).sum() / (2 * n))
    return make_result("center_loss", loss, (features,), lambda g: (diff * (g / n),))


def update_centers(features, labels, centers: ClassCenters, alpha: float) -> ClassCenters:
    """One center step: ``c_j -= alpha * sum_{y_i=j}(c_j - x_i) / (1 + n_j)``."""
    x = features.data if isinstance(features, Tensor) else np.asarray(features, dtype=float)
    y = _labels(labels, x.shape[0], centers.num_classes)
    c = centers.centers
    num = np.zeros_like(c)
    np.add.at(num, y, c[y] - x)
    count = np.bincount(y, minlength=c.shape[0]).astype(float)
    delta = num / (1.0 + count)[:, None]
    return ClassCenters(c - alpha * delta)


def joint_loss(logits: Tensor, features: Tensor, labels, centers: ClassCenters, cfg: LossConfig = LossConfig()) -> Tensor:
    ce = softmax_cross_entropy(logits, labels)
    if cfg.lam == 0:
        return ce
    return add(ce, scale(center_loss(features, labels, centers), cfg.lam))


# --------------------------------------------------------------------------
# optimizer and schedule


@dataclass
class RmsPropState:
    cache: dict = field(default_factory=dict)
    decay: float = 0.999
    eps: float = 1e-8


def rmsprop_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: RmsPropState, lr: float) -> dict:
    """Return updated parameters; ``state.cache`` is advanced in place."""
    out = {}
    d = state.decay
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            out[name] = p
            continue
        if g.shape != p.data.shape:
            raise ContractError(f"gradient for {name} has shape {g.shape}, parameter {p.data.shape}")
        cache = state.cache.get(name)
        if cache is None:
            cache = np.zeros_like(p.data)
        cache = d * cache + (1 - d) * (g * g)
        state.cache[name] = cache
        new = p.data - lr * g / (np.sqrt(cache) + state.eps)
        out[name] = Tensor(new, requires_grad=True, name=name)
    return out


@dataclass(frozen=True)
class LrSchedule:
    base: float = 0.1
    drop_epochs: tuple = (10, 20)
    factor: float = 0.1
    stop_epoch: int = 25

    def __post_init__(self):
        object.__setattr__(self, "drop_epochs", tuple(int(e) for e in self.drop_epochs))
        if any(b <= a for a, b in zip(self.drop_epochs, self.drop_epochs[1:])):
            raise ContractError("drop epochs must be strictly increasing")

    @classmethod
    def scaled(cls, stop_epoch: int, base: float = 0.1) -> "LrSchedule":
        """Keep the 10/25 and 20/25 drop fractions for a shorter run."""
        drops = (round(stop_epoch * 10 / 25), round(stop_epoch * 20 / 25))
        return cls(base, drops, 0.1, stop_epoch)


def lr_at_epoch(schedule: LrSchedule, epoch: int) -> float:
    if not 0 <= epoch < schedule.stop_epoch:
        raise ContractError(f"epoch {epoch} outside [0, {schedule.stop_epoch})")
    drops = sum(1 for e in schedule.drop_epochs if e <= epoch)
    divisor = 1.0 / schedule.factor
    lr = schedule.base
    if abs(divisor - round(divisor)) < 1e-9:
        # divide by the integer so 0.1 -> 0.01 -> 0.001 come out exact
        for _ in range(drops):
            lr = lr / round(divisor)
        return lr
    return schedule.base * schedule.factor**drops


# --------------------------------------------------------------------------
# synthetic data


@dataclass
class SyntheticDataset:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    prototypes: Optional[np.ndarray] = None
    noise: float = 0.0
    degraded: bool = False

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def shape(self) -> tuple:
        return tuple(self.images.shape[1:])


def box_blur(images: np.ndarray) -> np.ndarray:
    """3x3 mean filter with edge replication, per channel."""
    padded = np.pad(images, ((0, 0), (0, 0), (1, 1), (1, 1)), mode="edge")
    h, w = images.shape[2:]
    out = np.zeros_like(images)
    for i in range(3):
        for j in range(3):
            out += padded[:, :, i : i + h, j : j + w]
    return out / 9.0


def down_up(images: np.ndarray) -> np.ndarray:
    """2x average downsample followed by nearest upsample to the same size."""
    n, c, h, w = images.shape
    he, we = h - h % 2, w - w % 2
    small = images[:, :, :he, :we].reshape(n, c, he // 2, 2, we // 2, 2).mean(axis=(3, 5))
    up = small.repeat(2, axis=2).repeat(2, axis=3)
    out = images.copy()
    out[:, :, :he, :we] = up
    return out


def degrade(images: np.ndarray) -> np.ndarray:
    return down_up(box_blur(images))


def make_prototypes(num_classes: int, size: int, channels: int, rng: np.random.Generator) -> np.ndarray:
    """Smooth random patterns: a coarse random grid, upsampled and blurred."""
    cells = max(2, size // 8)
    coarse = rng.uniform(-1.0, 1.0, size=(num_classes, channels, cells, cells))
    rep = math.ceil(size / cells)
    protos = coarse.repeat(rep, axis=2).repeat(rep, axis=3)[:, :, :size, :size]
    return box_blur(box_blur(protos))


def generate_synthetic_faces(
    num_classes: int,
    per_class: int,
    size: int,
    noise: float,
    degrade_images: bool = False,
    seed: int = 0,
    channels: int = 3,
    sample_seed: Optional[int] = None,
    min_separation: float = 1.0,
) -> SyntheticDataset:
    """Identity prototypes plus Gaussian pixel noise.

    Prototypes depend only on ``seed``; the noise uses ``sample_seed`` (which
    defaults to ``seed``), so held-out samples of the same identities can be
    drawn with a different ``sample_seed``.
    """
    rng = np.random.default_rng([seed, 0])
    protos = make_prototypes(num_classes, size, channels, rng)
    flat = protos.reshape(num_classes, -1)
    d2 = ((flat[:, None] - flat[None]) ** 2).sum(-1) + np.eye(num_classes) * 1e30
    if num_classes > 1 and math.sqrt(d2.min()) < min_separation:
        raise ContractError("prototypes are closer than the requested separation")
    nrng = np.random.default_rng([seed if sample_seed is None else sample_seed, 1])
    labels = np.repeat(np.arange(num_classes), per_class)
    images = protos[labels] + noise * nrng.standard_normal((labels.size, channels, size, size))
    if degrade_images:
        images = degrade(images)
    return SyntheticDataset(images, labels, num_classes, protos, noise, degrade_images)


def flip_horizontal(images: np.ndarray) -> np.ndarray:
    return images[:, :, :, ::-1].copy()


_MAGIC = b"SEIDDATA"
_HEADER = struct.Struct("<8sqqqqq")


def write_dataset(path, ds: SyntheticDataset) -> None:
    """Header (magic, count, C, H, W, classes), int64 labels, float64 images; all little-endian."""
    n, c, h, w = ds.images.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, n, c, h, w, ds.num_classes))
        fh.write(np.ascontiguousarray(ds.labels, dtype="<i8").tobytes())
        fh.write(np.ascontiguousarray(ds.images, dtype="<f8").tobytes())


def read_dataset(path) -> SyntheticDataset:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ContractError(f"{path}: truncated dataset header")
    magic, n, c, h, w, k = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise ContractError(f"{path}: not a dataset file")
    off = _HEADER.size
    expected = off + 8 * n + 8 * n * c * h * w
    if len(raw) != expected:
        raise ContractError(f"{path}: expected {expected} bytes, found {len(raw)}")
    labels = np.frombuffer(raw, dtype="<i8", count=n, offset=off).astype(np.int64)
    images = np.frombuffer(raw, dtype="<f8", count=n * c * h * w, offset=off + 8 * n).reshape(n, c, h, w).copy()
    return SyntheticDataset(images, labels, int(k))


# --------------------------------------------------------------------------
# training loop


@dataclass(frozen=True)
class TrainConfig:
    schedule: LrSchedule = LrSchedule()
    loss: LossConfig = LossConfig()
    batch_size: int = 32
    decay: float = 0.999
    eps: float = 1e-8
    flip: bool = False
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        return cls(
            schedule=LrSchedule(**d["schedule"]),
            loss=LossConfig(**d["loss"]),
            **{k: v for k, v in d.items() if k not in ("schedule", "loss")},
        )


@dataclass
class TrainState:
    model: Model
    centers: ClassCenters
    rms: RmsPropState
    epoch: int = 0


@dataclass
class EpochMetrics:
    epoch: int
    lr: float
    loss: float
    accuracy: float
    samples: int


def init_state(model: Model, cfg: TrainConfig) -> TrainState:
    return TrainState(
        model,
        ClassCenters.zeros(model.config.num_classes, model.feature_width),
        RmsPropState(decay=cfg.decay, eps=cfg.eps),
    )


def batch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch, 7]).permutation(n)


def epoch_samples(ds: SyntheticDataset, cfg: TrainConfig, epoch: int):
    """Images, labels and the seeded visiting order for one epoch."""
    images, labels = ds.images, ds.labels
    if cfg.flip:
        images = np.concatenate([images, flip_horizontal(images)])
        labels = np.concatenate([labels, labels])
    return images, labels, batch_order(len(labels), cfg.seed, epoch)


def train_epoch(state: TrainState, ds: SyntheticDataset, cfg: TrainConfig, lr: Optional[float] = None) -> EpochMetrics:
    """Run one pass over ``ds``, updating ``state`` in place."""
    model = state.model
    mcfg = model.config
    if ds.shape != (mcfg.input_channels, mcfg.input_size, mcfg.input_size):
        raise ShapeError(f"dataset images {ds.shape} do not fit the model input")
    if ds.num_classes > mcfg.num_classes:
        raise ShapeError(f"dataset has {ds.num_classes} classes, model {mcfg.num_classes}")
    if lr is None:
        lr = lr_at_epoch(cfg.schedule, state.epoch)
    images, labels, order = epoch_samples(ds, cfg, state.epoch)
    total_loss, correct, seen = 0.0, 0, 0
    for start in range(0, len(order), cfg.batch_size):
        idx = order[start : start + cfg.batch_size]
        x = Tensor(images[idx])
        y = labels[idx]
        with Tape() as tape:
            logits, feats = model.forward(x, training=True)
            loss = joint_loss(logits, feats, y, state.centers, cfg.loss)
        g = tape.backward(loss)
        grads = {name: g[p] for name, p in model.params.items()}
        model.params = rmsprop_step(model.params, grads, state.rms, lr)
        state.centers = update_centers(feats, y, state.centers, cfg.loss.alpha)
        total_loss += float(loss.data) * len(idx)
        correct += int((logits.data.argmax(axis=1) == y).sum())
        seen += len(idx)
    metrics = EpochMetrics(state.epoch, lr, total_loss / seen, correct / seen, seen)
    state.epoch += 1
    return metrics


def format_log_line(m: EpochMetrics) -> str:
    return f"{m.epoch}\t{m.lr!r}\t{m.loss:.10f}\t{m.accuracy:.6f}"


def save_state(path, state: TrainState, cfg: TrainConfig) -> None:
    extra = {f"rms/{n}": a for n, a in state.rms.cache.items()}
    extra["centers"] = state.centers.centers
    meta = {"epoch": state.epoch, "train": json.dumps(cfg.to_dict(), sort_keys=True)}
    save_checkpoint(path, state.model, extra, meta)


def load_state(path):
    """Return ``(TrainState, TrainConfig)`` from a training checkpoint."""
    model, extras, meta = load_checkpoint(path)
    cfg = TrainConfig.from_dict(json.loads(meta["train"]))
    rms = RmsPropState({n[4:]: a for n, a in extras.items() if n.startswith("rms/")}, cfg.decay, cfg.eps)
    centers = ClassCenters(extras["centers"])
    return TrainState(model, centers, rms, int(meta["epoch"])), cfg


def train(
    state: TrainState,
    ds: SyntheticDataset,
    cfg: TrainConfig,
    log_path=None,
    checkpoint_dir=None,
    stop_after: Optional[int] = None,
    progress=None,
) -> list:
    """Train until the schedule's stop epoch (or ``stop_after``); returns metrics.

    The log gets one tab-separated ``epoch lr loss train_acc`` line per epoch.
    When ``checkpoint_dir`` is given, state is saved after every epoch.
    """
    history = []
    end = cfg.schedule.stop_epoch if stop_after is None else min(stop_after, cfg.schedule.stop_epoch)
    while state.epoch < end:
        m = train_epoch(state, ds, cfg)
        history.append(m)
        if log_path is not None:
            with open(log_path, "a") as fh:
                fh.write(format_log_line(m) + "\n")
        if checkpoint_dir is not None:
            save_state(checkpoint_dir, state, cfg)
        if progress is not None:
            progress(m)
    return history


def embed(model: Model, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Eval-mode penultimate features for a stack of images."""
    out = []
    with no_grad():
        for start in range(0, images.shape[0], batch_size):
            _, f = model.forward(Tensor(images[start : start + batch_size]), training=False)
            out.append(f.data)
    return np.concatenate(out)


def predict(model: Model, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    out = []
    with no_grad():
        for start in range(0, images.shape[0], batch_size):
            logits, _ = model.forward(Tensor(images[start : start + batch_size]), training=False)
            out.append(logits.data.argmax(axis=1))
    return np.concatenate(out)


def intra_class_distance(features: np.ndarray, labels: Sequence[int]) -> float:
    """Mean Euclidean distance from each feature to its class mean."""
    labels = np.asarray(labels)
    total = 0.0
    for c in np.unique(labels):
        f = features[labels == c]
        total += np.linalg.norm(f - f.mean(axis=0), axis=1).sum()
    return total / len(labels)
