"""Training harness: preprocessing, AdamW, warmup + decay schedule, training loop."""

from __future__ import annotations

import contextlib
import csv
import logging
import math
from dataclasses import dataclass, field, fields, asdict, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from PIL import Image

from . import autograd as ag
from .checkpoint import Checkpoint, PreprocessStats
from .model import ViTaConfig, ViTaParams, forward, predict

log = logging.getLogger(__name__)

STD_FLOOR = 1e-6
LABELS = {"regular": 0, "meme": 1}


class UnsupportedImage(ValueError):
    pass


# -- schedule ------------------------------------------------------------------
@dataclass(frozen=True)
class ScheduleConfig:
    peak_lr: float = 1e-3
    warmup_fraction: float = 0.10
    decay: float = 1e-3 / 20
    growth: float = 1.001
    global_t: bool = False

    def __post_init__(self):
        if self.decay <= 0:
            raise ValueError("decay constant must be positive")
        if not 0.0 < self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must lie in (0, 1)")


def warmup_steps(total_iters: int, schedule: ScheduleConfig = ScheduleConfig()) -> int:
    return math.floor(schedule.warmup_fraction * total_iters)


def lr_at(t: int, total_iters: int, schedule: ScheduleConfig = ScheduleConfig()) -> float:
    """Learning rate for 0-based iteration ``t``.

    Linear warmup to the peak over the first ``floor(warmup_fraction * total)``
    iterations, then ``peak / (1 + d t' growth^t')`` where t' counts from the
    end of warmup (or from 0 when ``schedule.global_t`` is set).
    """
    t_w = warmup_steps(total_iters, schedule)
    if t < t_w:
        return schedule.peak_lr * (t + 1) / t_w
    tp = t if schedule.global_t else t - t_w
    return schedule.peak_lr / (1.0 + schedule.decay * tp * schedule.growth ** tp)


# -- optimizer ------------------------------------------------------------------
@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray | None],
               state: OptimizerState, lr: float, weight_decay: float) -> None:
    """In-place AdamW update: decoupled decay, then bias-corrected Adam."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, theta in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(theta)
        if name not in state.m:
            state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if weight_decay:
            theta -= theta * theta.dtype.type(lr * weight_decay)
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        theta -= (lr * update).astype(theta.dtype, copy=False)


# -- images and preprocessing ----------------------------------------------------
def load_rgb(path) -> np.ndarray:
    with Image.open(path) as img:
        if img.mode in ("1", "L", "LA", "I", "I;16", "F"):
            raise UnsupportedImage(f"{path}: grayscale image (mode {img.mode})")
        return np.asarray(img.convert("RGB"), dtype=np.uint8)


def resize(image: np.ndarray, height: int, width: int) -> np.ndarray:
    if image.shape[:2] == (height, width):
        return image
    return np.asarray(Image.fromarray(image).resize((width, height), Image.BILINEAR))


def to_unit(image: np.ndarray, height: int, width: int) -> np.ndarray:
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise UnsupportedImage(f"expected 8-bit RGB (H, W, 3), got {image.dtype} {image.shape}")
    return resize(image, height, width).astype(np.float32) / 255.0


def preprocess(image: np.ndarray, stats: PreprocessStats, height: int = 250, width: int = 250) -> np.ndarray:
    """Resize (bilinear), scale to [0, 1] and standardise per channel."""
    x = to_unit(image, height, width)
    return ((x - stats.mean) / stats.std).astype(np.float32)


def compute_channel_stats(images: Sequence[np.ndarray] | Callable, height: int = 250, width: int = 250,
                          count: int | None = None) -> PreprocessStats:
    """Population mean / std per channel over every pixel of the training images.

    ``images`` is either a sequence of uint8 RGB arrays or a callable
    ``i -> image`` together with ``count``.
    """
    if callable(images):
        getter, n = images, count or 0
    else:
        getter, n = images.__getitem__, len(images)
    if n == 0:
        raise ValueError("cannot compute channel statistics of an empty training split")
    total = np.zeros(3)
    total_sq = np.zeros(3)
    pixels = 0
    for i in range(n):
        x = to_unit(getter(i), height, width).astype(np.float64).reshape(-1, 3)
        total += x.sum(axis=0)
        total_sq += (x * x).sum(axis=0)
        pixels += len(x)
    mean = total / pixels
    var = np.maximum(total_sq / pixels - mean * mean, 0.0)
    return PreprocessStats(mean, np.maximum(np.sqrt(var), STD_FLOOR))


# -- datasets ----------------------------------------------------------------------
class ArrayDataset:
    """Preprocessed images held in memory."""

    def __init__(self, images: np.ndarray, labels: Sequence[int]):
        self.images = np.asarray(images, dtype=np.float32)
        self.labels = np.asarray(labels, dtype=np.float32)
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")

    def __len__(self) -> int:
        return len(self.labels)

    def batch(self, indices) -> tuple[np.ndarray, np.ndarray]:
        return self.images[indices], self.labels[indices]


class ManifestDataset:
    """Loads and preprocesses manifest records on demand.

    Unreadable images are dropped at construction time (logged) unless
    ``skip_unreadable`` is false, in which case the error propagates.
    """

    def __init__(self, records, stats: PreprocessStats, config: ViTaConfig,
                 loader: Callable = load_rgb, skip_unreadable: bool = True, cache: bool = False):
        self.stats = stats
        self.config = config
        self.loader = loader
        self.cache: dict[int, np.ndarray] | None = {} if cache else None
        self.records = []
        for r in records:
            try:
                with Image.open(r.path) as img:
                    img.verify()
            except Exception as exc:
                if not skip_unreadable:
                    raise
                log.warning("skipping unreadable image %s: %s", r.path, exc)
                continue
            self.records.append(r)
        self.labels = np.array([LABELS[r.label] for r in self.records], dtype=np.float32)

    def __len__(self) -> int:
        return len(self.records)

    def _load(self, i: int) -> np.ndarray:
        if self.cache is not None and i in self.cache:
            return self.cache[i]
        x = preprocess(self.loader(self.records[i].path), self.stats, self.config.height, self.config.width)
        if self.cache is not None:
            self.cache[i] = x
        return x

    def batch(self, indices) -> tuple[np.ndarray, np.ndarray]:
        images = np.stack([self._load(int(i)) for i in indices])
        return images, self.labels[np.asarray(indices)]


# -- training loop -------------------------------------------------------------------
@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    weight_decay: float = 1e-3
    seed: int = 0
    variant: str = "vita"
    schedule: ScheduleConfig = ScheduleConfig()
    max_iters: int | None = None
    single_threaded: bool = True
    skip_unreadable: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    val_accuracy: float
    lr_last: float


@dataclass
class TrainResult:
    best: Checkpoint
    final: ViTaParams
    metrics: list[EpochMetrics]
    losses: list[float]


METRIC_FIELDS = [f.name for f in fields(EpochMetrics)]


def append_metrics(path, row: EpochMetrics) -> None:
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with path.open("a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        if new:
            writer.writeheader()
        writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in asdict(row).items()})


def read_metrics(path) -> list[EpochMetrics]:
    with Path(path).open(newline="") as fh:
        return [EpochMetrics(int(r["epoch"]), float(r["train_loss"]), float(r["val_accuracy"]), float(r["lr_last"]))
                for r in csv.DictReader(fh)]


def accuracy(probs: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        return 0.0
    return float(np.mean((np.asarray(probs) > 0.5) == (np.asarray(labels) > 0.5)))


def dataset_predict(params: ViTaParams, dataset, batch_size: int = 64) -> np.ndarray:
    out = []
    for start in range(0, len(dataset), batch_size):
        images, _ = dataset.batch(np.arange(start, min(start + batch_size, len(dataset))))
        out.append(predict(params, images, batch_size))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.float32)


def iterations_per_epoch(n_train: int, batch_size: int) -> int:
    return math.ceil(n_train / batch_size)


@contextlib.contextmanager
def _thread_limit(single: bool):
    if not single:
        yield
        return
    from threadpoolctl import threadpool_limits
    with threadpool_limits(limits=1):
        yield


def train(config: TrainConfig, model_config: ViTaConfig, train_set, val_set,
          stats: PreprocessStats | None = None, metrics_path=None,
          on_epoch: Callable[[EpochMetrics, Checkpoint], None] | None = None) -> TrainResult:
    """Train from scratch; keep the checkpoint with the best validation accuracy.

    Ties in validation accuracy keep the earlier epoch.
    """
    if len(train_set) == 0:
        raise ValueError("empty training set")
    model_config = model_config.replace(variant=config.variant)
    per_epoch = iterations_per_epoch(len(train_set), config.batch_size)
    total = config.epochs * per_epoch
    if config.max_iters is not None:
        total = min(total, config.max_iters)

    with _thread_limit(config.single_threaded):
        seeds = np.random.SeedSequence(config.seed).spawn(2)
        init_seed = int(seeds[0].generate_state(1)[0])
        shuffle_rng = np.random.default_rng(seeds[1])
        params = ViTaParams.init(model_config, seed=init_seed, dtype=np.float32)
        state = OptimizerState()
        metrics: list[EpochMetrics] = []
        losses: list[float] = []
        best: Checkpoint | None = None
        t = 0
        epoch = 0
        while t < total:
            epoch += 1
            order = shuffle_rng.permutation(len(train_set))
            epoch_losses = []
            lr = 0.0
            for start in range(0, len(order), config.batch_size):
                if t >= total:
                    break
                images, labels = train_set.batch(order[start:start + config.batch_size])
                params.zero_grad()
                out = forward(params, images)
                loss = ag.bce_loss(out.prob, labels)
                loss.backward()
                lr = lr_at(t, total, config.schedule)
                adamw_step({n: p.data for n, p in params.items()},
                           {n: p.grad for n, p in params.items()},
                           state, lr, config.weight_decay)
                losses.append(float(loss.data))
                epoch_losses.append(float(loss.data))
                t += 1
            val_acc = accuracy(dataset_predict(params, val_set), val_set.labels) if len(val_set) else 0.0
            row = EpochMetrics(epoch, float(np.mean(epoch_losses)), val_acc, lr)
            metrics.append(row)
            if metrics_path is not None:
                append_metrics(metrics_path, row)
            log.info("epoch %d loss %.4f val_acc %.4f lr %.3g", epoch, row.train_loss, val_acc, lr)
            if best is None or val_acc > best.val_accuracy:
                best = Checkpoint(params.copy(), stats, epoch, val_acc)
            if on_epoch is not None:
                on_epoch(row, best)
    return TrainResult(best, params, metrics, losses)


# -- config files -----------------------------------------------------------------------
_SCHEDULE_KEYS = {f.name for f in fields(ScheduleConfig)}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"schedule"}
_MODEL_KEYS = {f.name for f in fields(ViTaConfig)} - {"variant"}


def _coerce(text: str):
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", ""):
        return None
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    if "/" in text:
        num, den = text.split("/", 1)
        return float(num) / float(den)
    return text


def parse_config_text(text: str, base: TrainConfig = TrainConfig(),
                      model: ViTaConfig | None = None) -> tuple[TrainConfig, ViTaConfig]:
    """Parse ``key = value`` lines covering TrainConfig, ScheduleConfig and ViTaConfig fields."""
    train_kw, sched_kw, model_kw = {}, {}, {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        value = _coerce(value)
        if key in _SCHEDULE_KEYS:
            sched_kw[key] = value
        elif key in _TRAIN_KEYS:
            train_kw[key] = value
        elif key in _MODEL_KEYS:
            model_kw[key] = value
        else:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
    config = replace(base, schedule=replace(base.schedule, **sched_kw), **train_kw)
    model = (model or ViTaConfig()).replace(variant=config.variant, **model_kw)
    return config, model


def format_config(config: TrainConfig, model: ViTaConfig) -> str:
    lines = []
    for k, v in asdict(config).items():
        if k == "schedule":
            lines += [f"{sk} = {sv}" for sk, sv in v.items()]
        else:
            lines.append(f"{k} = {v}")
    lines += [f"{k} = {v}" for k, v in asdict(model).items() if k != "variant"]
    return "\n".join(lines) + "\n"
