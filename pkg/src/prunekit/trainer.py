"""A small ReLU MLP with hand-written backprop and a momentum-SGD loop that
records per-epoch logits for scoring."""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence, Union

import numpy as np

from .dataset import Dataset
from .dynamics_log import LOSS_KINDS, DynamicsLog

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"non-finite loss {loss} at epoch {epoch}")
        self.epoch = epoch
        self.loss = loss


# ---------------------------------------------------------------------------
# parameters


@dataclass
class ModelParams:
    weights: list[np.ndarray]  # W_l has shape (fan_out, fan_in)
    biases: list[np.ndarray]

    @property
    def layer_sizes(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def dtype(self) -> np.dtype:
        return self.weights[0].dtype

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(
            [w.astype(dtype, copy=True) for w in self.weights],
            [b.astype(dtype, copy=True) for b in self.biases],
        )

    def copy(self) -> "ModelParams":
        return self.astype(self.dtype)

    def arrays(self) -> list[np.ndarray]:
        """Parameter arrays in canonical order W1, b1, W2, b2, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def zeros_like(self) -> "ModelParams":
        return ModelParams([np.zeros_like(w) for w in self.weights], [np.zeros_like(b) for b in self.biases])


def init_mlp(layer_sizes: Sequence[int], seed: int, dtype=np.float32) -> ModelParams:
    """He-normal weights (variance 2/fan_in), zero biases."""
    sizes = [int(s) for s in layer_sizes]
    if len(sizes) < 2 or min(sizes) < 1:
        raise ValueError(f"need at least two positive layer sizes, got {sizes}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        weights.append((rng.standard_normal((fan_out, fan_in)) * np.sqrt(2.0 / fan_in)).astype(dtype))
        biases.append(np.zeros(fan_out, dtype=dtype))
    return ModelParams(weights, biases)


_PARAMS_MAGIC = b"YPRM"


def save_params(params: ModelParams, path: Union[str, Path]) -> None:
    sizes = params.layer_sizes
    parts = [_PARAMS_MAGIC, struct.pack(f"<I{len(sizes)}I", len(sizes), *sizes)]
    parts += [np.ascontiguousarray(a, dtype="<f4").tobytes() for a in params.arrays()]
    Path(path).write_bytes(b"".join(parts))


def load_params(path: Union[str, Path]) -> ModelParams:
    buf = Path(path).read_bytes()
    if buf[:4] != _PARAMS_MAGIC:
        raise ValueError(f"{path}: not a parameter file")
    (k,) = struct.unpack_from("<I", buf, 4)
    sizes = struct.unpack_from(f"<{k}I", buf, 8)
    off = 8 + 4 * k
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        w = np.frombuffer(buf, "<f4", fan_in * fan_out, off).reshape(fan_out, fan_in)
        off += w.nbytes
        b = np.frombuffer(buf, "<f4", fan_out, off)
        off += b.nbytes
        weights.append(w.astype(np.float32))
        biases.append(b.astype(np.float32))
    if off != len(buf):
        raise ValueError(f"{path}: size does not match layer sizes {list(sizes)}")
    return ModelParams(weights, biases)


# ---------------------------------------------------------------------------
# configuration


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005
    lr_milestones: Optional[tuple[int, ...]] = None  # None -> (E/2, 3E/4)
    lr_gamma: float = 0.1
    loss_kind: str = "cross_entropy"
    seed: int = 0
    record_dynamics: bool = True
    hidden_sizes: tuple[int, ...] = (32,)

    def __post_init__(self) -> None:
        if self.lr_milestones is not None:
            self.lr_milestones = tuple(int(m) for m in self.lr_milestones)
        self.hidden_sizes = tuple(int(h) for h in self.hidden_sizes)
        problems = self.problems()
        if problems:
            raise ValueError("invalid TrainConfig: " + "; ".join(problems))

    def problems(self) -> list[str]:
        out = []
        if self.epochs < 1:
            out.append("epochs must be >= 1")
        if self.batch_size < 1:
            out.append("batch_size must be >= 1")
        if not self.lr > 0:
            out.append("lr must be > 0")
        if not 0 <= self.momentum < 1:
            out.append("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            out.append("weight_decay must be >= 0")
        if self.loss_kind not in LOSS_KINDS:
            out.append(f"loss_kind must be one of {LOSS_KINDS}")
        ms = self.milestones()
        if any(b <= a for a, b in zip(ms, ms[1:])):
            out.append("lr_milestones must be strictly increasing")
        if ms and (ms[0] < 0 or ms[-1] >= self.epochs):
            out.append("lr_milestones must lie in [0, epochs)")
        if any(h < 1 for h in self.hidden_sizes):
            out.append("hidden_sizes must be positive")
        return out

    def milestones(self) -> tuple[int, ...]:
        if self.lr_milestones is not None:
            return self.lr_milestones
        cand = sorted({int(0.5 * self.epochs), int(0.75 * self.epochs)})
        return tuple(m for m in cand if 0 < m < self.epochs)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["lr_milestones"] = list(self.milestones())
        d["hidden_sizes"] = list(self.hidden_sizes)
        return d

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    @classmethod
    def from_mapping(cls, values: Mapping[str, Any]) -> "TrainConfig":
        """Build from a mapping whose values may be strings (config files, flags)."""
        known = {f.name: f for f in fields(cls)}
        kwargs: dict[str, Any] = {}
        for key, raw in values.items():
            if key not in known:
                raise KeyError(f"unknown training key {key!r}")
            kwargs[key] = _coerce(key, raw)
        return cls(**kwargs)


def _int_tuple(raw: Any) -> tuple[int, ...]:
    if isinstance(raw, str):
        return tuple(int(p) for p in raw.replace(" ", "").split(",") if p)
    return tuple(int(p) for p in raw)


def _coerce(key: str, raw: Any) -> Any:
    if key in ("epochs", "batch_size", "seed"):
        return int(raw)
    if key in ("lr", "momentum", "weight_decay", "lr_gamma"):
        return float(raw)
    if key == "record_dynamics":
        if isinstance(raw, str):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(f"record_dynamics: not a boolean: {raw!r}")
            return raw.lower() in ("true", "1", "yes")
        return bool(raw)
    if key == "lr_milestones":
        return _int_tuple(raw)
    if key == "hidden_sizes":
        return _int_tuple(raw)
    return str(raw)


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    """Learning rate in force during ``epoch`` (multi-step schedule)."""
    passed = sum(1 for m in cfg.milestones() if m <= epoch)
    return cfg.lr * cfg.lr_gamma**passed


# ---------------------------------------------------------------------------
# forward / backward


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=-1, keepdims=True)


def _check_batch(params: ModelParams, batch: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch, dtype=params.dtype)
    if batch.ndim != 2 or batch.shape[1] != params.layer_sizes[0]:
        raise ValueError(f"batch shape {batch.shape} does not fit input width {params.layer_sizes[0]}")
    return batch


def _forward_cached(params: ModelParams, x: np.ndarray) -> list[np.ndarray]:
    """Activations [x, a1, ..., logits]; hidden ones are post-ReLU."""
    acts = [x]
    last = len(params.weights) - 1
    for l, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = acts[-1] @ w.T + b
        acts.append(z if l == last else np.maximum(z, 0))
    return acts


def forward(params: ModelParams, batch: np.ndarray) -> np.ndarray:
    return _forward_cached(params, _check_batch(params, batch))[-1]


def _data_loss_and_dlogits(logits: np.ndarray, labels: np.ndarray, loss_kind: str):
    b, c = logits.shape
    onehot = np.zeros_like(logits)
    onehot[np.arange(b), labels] = 1
    p = softmax(logits)
    if loss_kind == "cross_entropy":
        z = logits - logits.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        loss = -logp[np.arange(b), labels].mean()
        dz = (p - onehot) / b
    elif loss_kind == "mse":
        e = p - onehot
        loss = 0.5 * np.mean(e * e)
        g = e / (b * c)  # dL/dp
        dz = p * (g - (g * p).sum(axis=1, keepdims=True))
    else:
        raise ValueError(f"unknown loss_kind {loss_kind!r}")
    return loss, dz


def loss_and_grad(
    params: ModelParams,
    batch: np.ndarray,
    labels: np.ndarray,
    loss_kind: str = "cross_entropy",
    weight_decay: float = 0.0,
) -> tuple[float, ModelParams]:
    """Mean loss over the batch plus ``0.5 * weight_decay * sum ||W||^2``
    (weights only), and its exact gradient."""
    x = _check_batch(params, batch)
    labels = np.asarray(labels, dtype=np.int64)
    c = params.layer_sizes[-1]
    if labels.shape != (x.shape[0],):
        raise ValueError(f"{labels.shape[0] if labels.ndim else 0} labels for {x.shape[0]} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c})")

    acts = _forward_cached(params, x)
    loss, dz = _data_loss_and_dlogits(acts[-1], labels, loss_kind)
    gw: list[np.ndarray] = [None] * len(params.weights)  # type: ignore[list-item]
    gb: list[np.ndarray] = [None] * len(params.weights)  # type: ignore[list-item]
    for l in range(len(params.weights) - 1, -1, -1):
        gw[l] = dz.T @ acts[l]
        gb[l] = dz.sum(axis=0)
        if l:
            dz = (dz @ params.weights[l]) * (acts[l] > 0)
    if weight_decay:
        for l, w in enumerate(params.weights):
            loss = loss + 0.5 * weight_decay * float(np.sum(w * w))
            gw[l] = gw[l] + weight_decay * w
    return float(loss), ModelParams(gw, gb)


def sgd_step(
    params: ModelParams,
    grads: ModelParams,
    velocity: ModelParams,
    lr: float,
    momentum: float,
) -> tuple[ModelParams, ModelParams]:
    """Heavy-ball update: ``v' = momentum*v + g``, ``p' = p - lr*v'``."""
    new_p, new_v = [], []
    for p, g, v in zip(params.arrays(), grads.arrays(), velocity.arrays()):
        v2 = momentum * v + g
        new_v.append(v2.astype(p.dtype, copy=False))
        new_p.append((p - lr * v2).astype(p.dtype, copy=False))
    return ModelParams(new_p[0::2], new_p[1::2]), ModelParams(new_v[0::2], new_v[1::2])


def predict(params: ModelParams, data: Dataset) -> np.ndarray:
    return forward(params, data.features).argmax(axis=1)


def accuracy(params: ModelParams, data: Dataset) -> float:
    return float(np.mean(predict(params, data) == data.labels))


def extract_features(params: ModelParams, data: Union[Dataset, np.ndarray]) -> np.ndarray:
    """Post-ReLU activations of the last hidden layer."""
    if len(params.weights) < 2:
        raise ValueError("network has no hidden layer to extract features from")
    x = data.features if isinstance(data, Dataset) else data
    return _forward_cached(params, _check_batch(params, x))[-2]


# ---------------------------------------------------------------------------
# training


def train_with_dynamics(
    train: Dataset, cfg: TrainConfig, verbose: bool = False
) -> tuple[ModelParams, Optional[DynamicsLog]]:
    """Seeded minibatch momentum SGD.

    After the last update of every epoch the full (unshuffled) training set
    is passed forward once; its logits, accuracy and mean data loss form
    that epoch's record. Returns ``(params, log)``; ``log`` is None when
    ``cfg.record_dynamics`` is off.
    """
    sizes = [train.dim, *cfg.hidden_sizes, train.num_classes]
    init_seq, shuffle_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    params = init_mlp(sizes, int(init_seq.generate_state(1)[0]), dtype=np.float32)
    shuffle_rng = np.random.default_rng(shuffle_seq)
    x = np.ascontiguousarray(train.features, dtype=np.float32)
    y = train.labels
    n = train.n
    velocity = params.zeros_like()

    accs, losses, logits = [], [], []
    # overflow surfaces as a non-finite loss below; no need for numpy warnings too
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(cfg.epochs):
            lr = lr_at_epoch(cfg, epoch)
            order = shuffle_rng.permutation(n)
            for start in range(0, n, cfg.batch_size):
                idx = order[start : start + cfg.batch_size]
                loss, grads = loss_and_grad(params, x[idx], y[idx], cfg.loss_kind, cfg.weight_decay)
                if not np.isfinite(loss):
                    raise TrainingDiverged(epoch, loss)
                params, velocity = sgd_step(params, grads, velocity, lr, cfg.momentum)

            out = forward(params, x)
            if not np.all(np.isfinite(out)):
                raise TrainingDiverged(epoch, float("nan"))
            data_loss, _ = _data_loss_and_dlogits(out.astype(np.float64), y, cfg.loss_kind)
            if not np.isfinite(data_loss):
                raise TrainingDiverged(epoch, data_loss)
            acc = float(np.mean(out.argmax(axis=1) == y))
            if verbose:
                print(f"epoch {epoch + 1}/{cfg.epochs} lr={lr:g} loss={data_loss:.4f} acc={acc:.4f}")
            if cfg.record_dynamics:
                accs.append(acc)
                losses.append(data_loss)
                logits.append(out.astype(np.float32))

    if not cfg.record_dynamics:
        return params, None
    log = DynamicsLog(
        labels=y,
        num_classes=train.num_classes,
        accuracies=np.array(accs, dtype=np.float32),
        losses=np.array(losses, dtype=np.float32),
        logits=np.stack(logits),
        loss_kind=cfg.loss_kind,
        seed=cfg.seed,
        config_hash=cfg.config_hash(),
    )
    return params, log


# ---------------------------------------------------------------------------
# verification


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_parameter: tuple[int, int, int]  # (array index in W1,b1,W2,b2.. order, row, col)
    step_size: float


def finite_diff_check(
    params: ModelParams,
    batch: np.ndarray,
    labels: np.ndarray,
    loss_kind: str = "cross_entropy",
    step: float = 1e-4,
    weight_decay: float = 0.0,
) -> GradCheckReport:
    """Compare analytic gradients to central differences in float64.

    Relative error per entry is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    if not step > 0:
        raise ValueError("step must be > 0")
    p64 = params.astype(np.float64)
    x = np.asarray(batch, dtype=np.float64)
    _, analytic = loss_and_grad(p64, x, labels, loss_kind, weight_decay)
    worst, where = 0.0, (0, 0, 0)
    for k, (arr, garr) in enumerate(zip(p64.arrays(), analytic.arrays())):
        flat = arr.reshape(-1)  # view: perturbs p64 in place
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            plus, _ = loss_and_grad(p64, x, labels, loss_kind, weight_decay)
            flat[i] = orig - step
            minus, _ = loss_and_grad(p64, x, labels, loss_kind, weight_decay)
            flat[i] = orig
            num = (plus - minus) / (2 * step)
            a = garr.reshape(-1)[i]
            rel = abs(a - num) / max(abs(a), abs(num), 1e-8)
            if rel > worst:
                row, col = np.unravel_index(i, arr.shape) if arr.ndim == 2 else (i, 0)
                worst, where = float(rel), (k, int(row), int(col))
    return GradCheckReport(worst, where, step)


@dataclass
class Lemma1Report:
    delta_direct: np.ndarray
    delta_closed: np.ndarray
    max_abs_diff: float


def gradient_difference_lemma1(data: Dataset, j: int, params: ModelParams) -> Lemma1Report:
    """Change in the mean MSE gradient when sample ``j`` is removed.

    ``delta_direct`` subtracts two full-set gradients; ``delta_closed`` uses
    per-sample gradients: ``-1/(|S|(|S|-1)) * sum_{i != j} g_i + g_j/|S|``.
    No weight decay.
    """
    s = data.n
    if s < 2:
        raise ValueError("need at least two samples")
    if not 0 <= j < s:
        raise IndexError(f"sample index {j} out of range for {s} samples")
    p64 = params.astype(np.float64)
    x = np.asarray(data.features, dtype=np.float64)
    y = data.labels
    rest = np.delete(np.arange(s), j)

    _, g_full = loss_and_grad(p64, x, y, "mse")
    _, g_rest = loss_and_grad(p64, x[rest], y[rest], "mse")
    direct = g_full.flatten() - g_rest.flatten()

    per_sample = [loss_and_grad(p64, x[i : i + 1], y[i : i + 1], "mse")[1].flatten() for i in range(s)]
    sum_rest = np.zeros_like(direct)
    for i in rest:
        sum_rest += per_sample[i]
    closed = -sum_rest / (s * (s - 1)) + per_sample[j] / s
    return Lemma1Report(direct, closed, float(np.max(np.abs(direct - closed))))
