"""Losses, Adam, the training loop, epoch logs and checkpoint files."""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .metrics import CSV_COLUMNS, MetricReport, evaluate_set
from .tensor import DimensionError, Tensor, _result
from .unet import UNetConfig, UNetModel, build_model

PROB_EPS = 1e-7
DICE_SMOOTH = 1.0
LOG_COLUMNS = ("epoch", "split", "loss", "dice", "iou", "accuracy", "recall", "specificity", "precision", "f1")


# -- losses --------------------------------------------------------------------


def _check_target(pred: Tensor, target) -> np.ndarray:
    y = np.asarray(target, dtype=pred.dtype)
    if y.shape != pred.shape:
        raise DimensionError(f"prediction {pred.shape} and target {y.shape} differ in shape")
    return y


def bce_loss(pred: Tensor, target) -> Tensor:
    """Mean binary cross-entropy of probabilities, clamped to [1e-7, 1 - 1e-7].

    The gradient is evaluated at the clamped probability and passed straight
    through the clamp, so saturated wrong predictions still receive a signal.
    """
    y = _check_target(pred, target)
    p = np.clip(pred.data, PROB_EPS, 1.0 - PROB_EPS)
    n = p.size
    loss = -np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p))
    out = np.full((1,) * pred.data.ndim, loss, dtype=pred.dtype)
    return _result(out, (pred,), lambda g: (g.reshape(()) * (p - y) / (p * (1.0 - p)) / n,))


def soft_dice_loss(pred: Tensor, target) -> Tensor:
    """1 - (2 sum(p y) + 1) / (sum(p) + sum(y) + 1) over the whole batch."""
    y = _check_target(pred, target)
    p = pred.data
    num = 2.0 * np.sum(p * y) + DICE_SMOOTH
    den = np.sum(p) + np.sum(y) + DICE_SMOOTH
    out = np.full((1,) * p.ndim, 1.0 - num / den, dtype=pred.dtype)
    return _result(out, (pred,), lambda g: (g.reshape(()) * (num - 2.0 * y * den) / den ** 2,))


def compute_loss(pred: Tensor, target, kind: str = "bce") -> Tensor:
    if kind == "bce":
        return bce_loss(pred, target)
    if kind == "bce+dice":
        return bce_loss(pred, target) + soft_dice_loss(pred, target)
    raise ValueError(f"unknown loss {kind!r}; expected 'bce' or 'bce+dice'")


# -- optimiser -----------------------------------------------------------------


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: list[np.ndarray], grads: list[np.ndarray | None], state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v, strict=True):
        if g is None:
            continue
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)


class Adam:
    def __init__(self, params: list[Tensor], lr: float = 1e-3):
        self.params = params
        self.lr = lr
        self.state = AdamState()

    def step(self) -> None:
        adam_step([p.data for p in self.params], [p.grad for p in self.params], self.state, self.lr)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# -- training loop -------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 4
    learning_rate: float = 1e-3
    seed: int = 42
    loss: str = "bce"
    threshold: float = 0.5

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate >= 0:
            raise ValueError(f"learning_rate must be non-negative, got {self.learning_rate}")
        if self.loss not in ("bce", "bce+dice"):
            raise ValueError(f"loss must be 'bce' or 'bce+dice', got {self.loss!r}")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must lie in (0, 1), got {self.threshold}")


@dataclass
class TrainResult:
    model: UNetModel
    log: list[dict]
    orders: list[list[int]]

    @property
    def final(self) -> dict:
        return self.log[-1]


def _stack(pairs, dtype) -> tuple[np.ndarray, np.ndarray]:
    images = np.stack([p.image for p in pairs]).astype(dtype)[:, None]
    masks = np.stack([p.mask for p in pairs]).astype(dtype)[:, None]
    return images, masks


def _log_row(epoch: int, loss: float, report: MetricReport) -> dict:
    row = {"epoch": epoch, "split": "val", "loss": loss}
    row.update({k: getattr(report, k) for k in CSV_COLUMNS})
    return {k: row[k] for k in LOG_COLUMNS}


def train(model: UNetModel, train_pairs, val_pairs, cfg: TrainConfig, log_path=None, progress=None) -> TrainResult:
    """Train ``model`` in place with Adam; one log row per epoch.

    Each row holds the epoch's mean training loss and the metrics on
    ``val_pairs``. The shuffle order of every epoch comes from a generator
    seeded with ``cfg.seed``.
    """
    if not train_pairs:
        raise ValueError("training set is empty")
    if not val_pairs:
        raise ValueError("validation set is empty")
    for p in list(train_pairs) + list(val_pairs):
        model.check_input((1, 1) + p.image.shape)

    images, masks = _stack(train_pairs, model.dtype)
    params = model.parameters()
    opt = Adam(params, cfg.learning_rate)
    rng = np.random.default_rng([cfg.seed, 1])
    n = len(images)
    log, orders = [], []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        orders.append(order.tolist())
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            pred = model.forward(Tensor(images[idx]))
            loss = compute_loss(pred, masks[idx], cfg.loss)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.data.reshape(())) * len(idx)
        report = evaluate_set(model, val_pairs, cfg.threshold)
        row = _log_row(epoch, total / n, report)
        log.append(row)
        if progress is not None:
            progress(row)
    result = TrainResult(model, log, orders)
    if log_path is not None:
        write_log(result, log_path, cfg.seed)
    return result


def write_log(result: TrainResult, path, seed: int) -> None:
    """Epoch CSV preceded by '#' audit lines giving each epoch's shuffle order."""
    lines = [f"# shuffle seed {seed}"]
    lines += [f"# epoch {i} order {' '.join(map(str, o))}" for i, o in enumerate(result.orders, 1)]
    lines.append(",".join(LOG_COLUMNS))
    for row in result.log:
        lines.append(",".join(str(row[k]) if k in ("epoch", "split") else repr(float(row[k])) for k in LOG_COLUMNS))
    Path(path).write_text("\n".join(lines) + "\n")


def read_log(path) -> list[dict]:
    rows = []
    lines = [l for l in Path(path).read_text().splitlines() if l and not l.startswith("#")]
    header = lines[0].split(",")
    for line in lines[1:]:
        vals = dict(zip(header, line.split(",")))
        rows.append({k: (int(v) if k == "epoch" else v if k == "split" else float(v)) for k, v in vals.items()})
    return rows


# -- checkpoints ---------------------------------------------------------------

MAGIC = b"CBSMCKPT"
VERSION = 1
_PREFIX = struct.Struct("<8sI")


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


def checkpoint_bytes(model: UNetModel) -> bytes:
    """Serialise: magic, version, JSON config, parameter count, float32 LE blob, CRC-32."""
    cfg = json.dumps(model.config.to_dict(), sort_keys=True).encode()
    blob = b"".join(np.asarray(p.data, dtype="<f4").tobytes() for p in model.parameters())
    body = _PREFIX.pack(MAGIC, VERSION) + struct.pack("<I", len(cfg)) + cfg
    body += struct.pack("<Q", len(blob) // 4) + blob
    return body + struct.pack("<I", zlib.crc32(body))


def model_from_bytes(buf: bytes) -> UNetModel:
    if len(buf) < _PREFIX.size:
        raise ChecksumError(f"checkpoint truncated to {len(buf)} bytes")
    magic, version = _PREFIX.unpack_from(buf)
    if magic != MAGIC:
        raise BadMagicError(f"not a checkpoint file (magic {magic!r})")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported checkpoint version {version}; this build reads version {VERSION}")
    if len(buf) < _PREFIX.size + 4 or zlib.crc32(buf[:-4]) != struct.unpack("<I", buf[-4:])[0]:
        raise ChecksumError("checkpoint checksum mismatch (file truncated or corrupted)")
    pos = _PREFIX.size
    (cfg_len,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    cfg = UNetConfig(**json.loads(buf[pos:pos + cfg_len]))
    pos += cfg_len
    (count,) = struct.unpack_from("<Q", buf, pos)
    pos += 8
    blob = np.frombuffer(buf, dtype="<f4", count=(len(buf) - 4 - pos) // 4, offset=pos)
    if blob.size != count:
        raise ChecksumError(f"parameter count {count} does not match blob of {blob.size} floats")
    model = build_model(cfg, seed=0, dtype=np.float32)
    params = model.parameters()
    if sum(p.data.size for p in params) != count:
        raise ChecksumError(f"checkpoint holds {count} parameters, config needs {model.num_parameters()}")
    off = 0
    for p in params:
        k = p.data.size
        p.data[...] = blob[off:off + k].reshape(p.data.shape)
        off += k
    return model


def save_checkpoint(model: UNetModel, path) -> None:
    """Write ``model`` to ``path``. Parameters are stored as float32."""
    Path(path).write_bytes(checkpoint_bytes(model))


def load_checkpoint(path) -> UNetModel:
    return model_from_bytes(Path(path).read_bytes())
