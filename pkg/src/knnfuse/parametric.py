"""Softmax classifier trained with a neighbor-confidence-weighted loss.

The model is a linear head (optionally a small ReLU MLP) over frozen
feature vectors. Its cross-entropy loss is rescaled per sample by

    L = (1 + alpha * m(p)) * CE,

where p is the sample's leave-one-out k-NN posterior mass on its own label,
computed once before training (frozen features mean it never changes), and
m is either the clamped negative log-likelihood min(-log p, 100) or the
focal form (1 - p)^gamma. alpha = 0 recovers the plain trainer exactly.

Optimization is SGD with momentum, L2 weight decay on weights only, linear
warmup followed by cosine decay to zero, and the linear-scaling rule
effective_lr = base_lr / 256 * batch_size. The final-layer bias starts at
-log((1 - pi) / pi) for a class prior pi, which keeps early losses finite
and calm on imbalanced label sets.

Parameters are float64 in memory; checkpoints store float32 little-endian:

    u32 header_len | header JSON (utf-8) | parameter block (f32, LE)

with the block holding each layer's weight matrix (row-major) then bias,
in layer order. The JSON header records layer dims, dtype, and caller extra.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from .errors import (
    DimensionMismatch,
    DivergedLoss,
    IoFailure,
    MalformedHeader,
    NonFiniteActivation,
)
from .featurestore import FeatureBank

_CKPT_LEN = struct.Struct("<I")


@dataclass
class LinearModel:
    """Stack of (weights, bias) layers with ReLU between, final width C."""

    layers: list[tuple[np.ndarray, np.ndarray]]

    def __post_init__(self):
        if not self.layers:
            raise DimensionMismatch("model needs at least one layer")
        prev = None
        for i, (w, b) in enumerate(self.layers):
            if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
                raise DimensionMismatch(f"layer {i}: weight {w.shape} / bias {b.shape}")
            if prev is not None and w.shape[1] != prev:
                raise DimensionMismatch(f"layer {i}: in={w.shape[1]} != previous out={prev}")
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise NonFiniteActivation(f"layer {i} has non-finite parameters")
            prev = w.shape[0]

    @property
    def in_dim(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1][0].shape[0]

    @property
    def dims(self) -> list[int]:
        return [self.in_dim] + [w.shape[0] for w, _ in self.layers]

    def copy(self) -> "LinearModel":
        return LinearModel([(w.copy(), b.copy()) for w, b in self.layers])


@dataclass(frozen=True)
class LossConfig:
    """Reweighting strength and modulating-factor shape."""

    alpha: float = 0.0
    factor: str = "nll"  # "nll" or "focal"
    gamma: float = 2.0
    log_floor: float = -100.0

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.factor not in ("nll", "focal"):
            raise ValueError(f"factor must be 'nll' or 'focal', got {self.factor!r}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")


@dataclass(frozen=True)
class OptimizerConfig:
    base_lr: float = 0.1
    batch_size: int = 256
    momentum: float = 0.9
    weight_decay: float = 0.0
    warmup_epochs: int = 10
    total_epochs: int = 100
    seed: int = 0
    prior_pi: float = 0.01

    def __post_init__(self):
        if self.base_lr <= 0 or self.batch_size < 1:
            raise ValueError("base_lr must be positive and batch_size >= 1")
        if not 0 <= self.warmup_epochs <= self.total_epochs:
            raise ValueError("need 0 <= warmup_epochs <= total_epochs")
        if not 0.0 < self.prior_pi < 1.0:
            raise ValueError(f"prior_pi must be in (0, 1), got {self.prior_pi}")


def init_model(
    in_dim: int,
    class_count: int,
    hidden: list[int] | None = None,
    seed: int = 0,
    prior_pi: float = 0.01,
) -> LinearModel:
    """Seeded uniform fan-in init; final bias follows the class-prior rule.

    Weights are uniform on [-1/sqrt(fan_in), 1/sqrt(fan_in)], hidden biases
    zero, and every final-layer bias is -log((1 - prior_pi) / prior_pi).
    """
    dims = [in_dim] + list(hidden or []) + [class_count]
    rng = np.random.default_rng(np.random.SeedSequence(seed & (2**64 - 1)))
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / math.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        b = np.zeros(fan_out)
        layers.append((w, b))
    layers[-1][1][:] = -math.log((1.0 - prior_pi) / prior_pi)
    return LinearModel(layers)


def _forward_trace(model: LinearModel, x: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
    """Activations of every layer input plus the final logits, batch-first."""
    acts = [np.atleast_2d(np.asarray(x, dtype=np.float64))]
    if acts[0].shape[1] != model.in_dim:
        raise DimensionMismatch(f"input dim {acts[0].shape[1]} != model dim {model.in_dim}")
    h = acts[0]
    for i, (w, b) in enumerate(model.layers):
        z = h @ w.T + b
        if i < len(model.layers) - 1:
            h = np.maximum(z, 0.0)
            acts.append(h)
    if not np.isfinite(z).all():
        raise NonFiniteActivation("forward pass produced non-finite logits")
    return acts, z


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def forward(model: LinearModel, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Logits and softmax distribution for one vector or a batch.

    Softmax subtracts the row max before exponentiating, so any common
    logit shift leaves the distribution unchanged.
    """
    arr = np.asarray(x, dtype=np.float64)
    squeeze = arr.ndim == 1
    _, logits = _forward_trace(model, arr)
    probs = np.exp(_log_softmax(logits))
    probs /= probs.sum(axis=1, keepdims=True)
    if squeeze:
        return logits[0], probs[0]
    return logits, probs


def modulating_factor(p_gt, cfg: LossConfig):
    """Per-sample hardness weight m(p) derived from k-NN confidence.

    nll:   min(-log p, -log_floor); p = 0 maps to the cap (100 with the
           default floor), never to infinity.
    focal: (1 - p)^gamma.

    Both shapes are non-increasing in p, so lower k-NN confidence never
    yields a smaller weight.
    """
    p = np.asarray(p_gt, dtype=np.float64)
    if cfg.factor == "nll":
        with np.errstate(divide="ignore"):
            m = -np.maximum(np.log(p), cfg.log_floor)
    else:
        m = (1.0 - p) ** cfg.gamma
    return float(m) if np.ndim(p_gt) == 0 else m


def joint_loss(dist: np.ndarray, label: int, p_gt: float, cfg: LossConfig) -> float:
    """(1 + alpha * m(p_gt)) * CE for a single predicted distribution.

    p_gt is a constant with respect to the model parameters: the features
    are frozen, so the k-NN posterior never changes during training.
    """
    p = float(np.asarray(dist, dtype=np.float64)[label])
    ce = math.inf if p == 0.0 else -math.log(p)
    return (1.0 + cfg.alpha * modulating_factor(p_gt, cfg)) * ce


def lr_at(epoch: float, cfg: OptimizerConfig) -> float:
    """Learning rate at a fractional epoch position.

    effective base = base_lr / 256 * batch_size; linear warmup from zero
    over warmup_epochs, then cosine decay reaching zero at total_epochs.
    """
    base = cfg.base_lr / 256.0 * cfg.batch_size
    if epoch < 0 or epoch > cfg.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.total_epochs}]")
    if cfg.warmup_epochs > 0 and epoch < cfg.warmup_epochs:
        return base * epoch / cfg.warmup_epochs
    span = cfg.total_epochs - cfg.warmup_epochs
    if span <= 0:
        return base
    return base * 0.5 * (1.0 + math.cos(math.pi * (epoch - cfg.warmup_epochs) / span))


def loss_and_grads(
    model: LinearModel,
    x: np.ndarray,
    y: np.ndarray,
    weights: np.ndarray,
    loss_cfg: LossConfig,
) -> tuple[float, list[tuple[np.ndarray, np.ndarray]]]:
    """Batch-mean weighted cross entropy and its analytic gradients.

    ``weights`` holds the per-sample (1 + alpha * m(p_gt)) factors, which
    are constants; weight decay is the optimizer's business, not the loss's.
    """
    acts, logits = _forward_trace(model, x)
    y = np.asarray(y, dtype=np.int64)
    batch = logits.shape[0]
    logp = _log_softmax(logits)
    ce = -logp[np.arange(batch), y]
    loss = float(np.mean(weights * ce))

    probs = np.exp(logp)
    delta = probs
    delta[np.arange(batch), y] -= 1.0
    delta *= (weights / batch)[:, None]

    grads: list[tuple[np.ndarray, np.ndarray]] = []
    for i in range(len(model.layers) - 1, -1, -1):
        w, _ = model.layers[i]
        grads.append((delta.T @ acts[i], delta.sum(axis=0)))
        if i > 0:
            delta = (delta @ w) * (acts[i] > 0.0)
    grads.reverse()
    return loss, grads


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    lr: float
    val_top1: float | None = None


@dataclass
class TrainLog:
    epochs: list[EpochStats] = field(default_factory=list)

    def final_val_top1(self) -> float | None:
        return self.epochs[-1].val_top1 if self.epochs else None


def sample_weights(p_gt: np.ndarray | None, n: int, cfg: LossConfig) -> np.ndarray:
    if p_gt is None:
        return np.ones(n)
    p = np.asarray(p_gt, dtype=np.float64)
    if p.shape != (n,):
        raise DimensionMismatch(f"p_gt shape {p.shape} != ({n},)")
    return 1.0 + cfg.alpha * modulating_factor(p, cfg)


def train(
    model: LinearModel,
    train_bank: FeatureBank,
    p_gt: np.ndarray | None,
    loss_cfg: LossConfig,
    opt_cfg: OptimizerConfig,
    val_bank: FeatureBank | None = None,
) -> tuple[LinearModel, TrainLog]:
    """SGD with momentum over preprocessed features; returns the final model.

    p_gt comes from a leave-one-out pass aligned with train_bank rows; pass
    None (or alpha = 0) for the plain cross-entropy trainer, which follows
    the exact same arithmetic path. Shuffles are reseeded per epoch from
    (seed, epoch), so a run is bitwise reproducible. The partial final
    batch is kept, each batch uses its own mean loss, weight decay touches
    weights only, and no early stopping happens: the final-epoch model is
    returned. Raises DivergedLoss on a non-finite batch loss.
    """
    x = train_bank.features.astype(np.float64)
    y = train_bank.labels
    n = train_bank.n
    weights = sample_weights(p_gt, n, loss_cfg)
    velocity = [(np.zeros_like(w), np.zeros_like(b)) for w, b in model.layers]
    steps_per_epoch = math.ceil(n / opt_cfg.batch_size)
    log = TrainLog()

    with threadpool_limits(limits=1):
        for epoch in range(opt_cfg.total_epochs):
            rng = np.random.default_rng(
                np.random.SeedSequence(entropy=[opt_cfg.seed & (2**64 - 1), epoch])
            )
            perm = rng.permutation(n)
            epoch_losses = []
            for step in range(steps_per_epoch):
                batch = perm[step * opt_cfg.batch_size : (step + 1) * opt_cfg.batch_size]
                lr = lr_at(epoch + step / steps_per_epoch, opt_cfg)
                try:
                    loss, grads = loss_and_grads(
                        model, x[batch], y[batch], weights[batch], loss_cfg
                    )
                except NonFiniteActivation as exc:
                    raise DivergedLoss(f"epoch {epoch} step {step}: {exc}") from exc
                if not math.isfinite(loss):
                    raise DivergedLoss(f"loss became {loss} at epoch {epoch} step {step}")
                epoch_losses.append(loss)
                for (w, b), (vw, vb), (gw, gb) in zip(model.layers, velocity, grads):
                    if opt_cfg.weight_decay:
                        gw = gw + opt_cfg.weight_decay * w
                    vw *= opt_cfg.momentum
                    vw += gw
                    vb *= opt_cfg.momentum
                    vb += gb
                    w -= lr * vw
                    b -= lr * vb
            stats = EpochStats(
                epoch=epoch,
                train_loss=float(np.mean(epoch_losses)),
                lr=lr_at(float(epoch), opt_cfg),
            )
            if val_bank is not None:
                _, probs = forward(model, val_bank.features.astype(np.float64))
                stats.val_top1 = float(np.mean(probs.argmax(axis=1) == val_bank.labels))
            log.epochs.append(stats)
    return model, log


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(model: LinearModel, path, extra: dict | None = None) -> None:
    """Write the documented header + float32 parameter block layout."""
    header = {
        "format": "knnfuse-ckpt",
        "version": 1,
        "dims": model.dims,
        "dtype": "f32le",
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    params = b"".join(
        np.ascontiguousarray(arr, dtype="<f4").tobytes()
        for w, b in model.layers
        for arr in (w, b)
    )
    try:
        with open(path, "wb") as fh:
            fh.write(_CKPT_LEN.pack(len(blob)))
            fh.write(blob)
            fh.write(params)
    except OSError as exc:
        raise IoFailure(f"cannot write {path!r}: {exc}") from exc


def load_checkpoint(path) -> tuple[LinearModel, dict]:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise IoFailure(f"cannot read {path!r}: {exc}") from exc
    if len(raw) < _CKPT_LEN.size:
        raise MalformedHeader("checkpoint shorter than its length field")
    (hlen,) = _CKPT_LEN.unpack_from(raw)
    if len(raw) < _CKPT_LEN.size + hlen:
        raise MalformedHeader("checkpoint header truncated")
    try:
        header = json.loads(raw[_CKPT_LEN.size : _CKPT_LEN.size + hlen])
    except json.JSONDecodeError as exc:
        raise MalformedHeader(f"checkpoint header is not JSON: {exc}") from exc
    if header.get("format") != "knnfuse-ckpt" or header.get("version") != 1:
        raise MalformedHeader(f"unrecognized checkpoint header {header!r}")
    dims = header["dims"]
    offset = _CKPT_LEN.size + hlen
    expected = sum(4 * (o * i + o) for i, o in zip(dims[:-1], dims[1:]))
    if len(raw) - offset != expected:
        raise MalformedHeader(
            f"parameter block is {len(raw) - offset} bytes, dims imply {expected}"
        )
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        w = np.frombuffer(raw, dtype="<f4", count=fan_out * fan_in, offset=offset)
        offset += 4 * fan_out * fan_in
        b = np.frombuffer(raw, dtype="<f4", count=fan_out, offset=offset)
        offset += 4 * fan_out
        layers.append((w.reshape(fan_out, fan_in).astype(np.float64), b.astype(np.float64)))
    return LinearModel(layers), header.get("extra", {})
