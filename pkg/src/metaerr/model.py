"""Small fully connected networks trained with mini-batch SGD.

Hidden layers use ReLU followed by inverted dropout. The output layer is
linear; the head decides how outputs are read:

* ``softmax``: class logits, trained with cross-entropy
* ``sigmoid``: independent binary logits (meta correctness, mask pixels),
  trained with binary cross-entropy
* ``scalar``: raw real outputs, trained with mean squared error

Weights are stored as ``fan_in x fan_out`` matrices, so a layer computes
``x @ W + b``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from ._rng import derive_seed, make_rng
from .data import Dataset

HEADS = ("softmax", "sigmoid", "scalar")
LOSSES = ("cross-entropy", "meta-bce", "mse")
HEAD_FOR_LOSS = {"cross-entropy": "softmax", "meta-bce": "sigmoid", "mse": "scalar"}
PROB_EPS = 1e-12


class ModelError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"training diverged at epoch {epoch} (loss={loss})")
        self.epoch = epoch
        self.loss = loss


@dataclass(frozen=True)
class LayerSpec:
    widths: tuple[int, ...]
    head: str = "softmax"
    dropout_rate: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 2:
            raise ModelError("a layer spec needs at least input and output widths")
        if min(self.widths) < 1:
            raise ModelError("layer widths must be positive")
        if self.head not in HEADS:
            raise ModelError(f"unknown head {self.head!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ModelError("dropout_rate must lie in [0, 1)")

    @property
    def n_in(self) -> int:
        return self.widths[0]

    @property
    def n_out(self) -> int:
        return self.widths[-1]

    def to_dict(self) -> dict:
        return {"widths": list(self.widths), "head": self.head, "dropout_rate": self.dropout_rate}

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(tuple(d["widths"]), d.get("head", "softmax"), float(d.get("dropout_rate", 0.0)))


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 50
    batch_size: int = 32
    loss: str = "cross-entropy"
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ModelError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ModelError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ModelError("weight_decay must be nonnegative")
        if self.epochs < 0 or self.batch_size < 1:
            raise ModelError("epochs must be >= 0 and batch_size >= 1")
        if self.loss not in LOSSES:
            raise ModelError(f"unknown loss {self.loss!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass(frozen=True, eq=False)
class TrainedModel:
    spec: LayerSpec
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    training_trace: tuple[float, ...] = ()

    def __post_init__(self):
        ws = tuple(np.array(w, dtype=np.float64) for w in self.weights)
        bs = tuple(np.array(b, dtype=np.float64) for b in self.biases)
        pairs = list(zip(self.spec.widths[:-1], self.spec.widths[1:]))
        if len(ws) != len(pairs) or len(bs) != len(pairs):
            raise ModelError("parameter count does not match layer spec")
        for (fi, fo), w, b in zip(pairs, ws, bs):
            if w.shape != (fi, fo) or b.shape != (fo,):
                raise ModelError(f"parameter shape mismatch: {w.shape}, {b.shape} for {fi}->{fo}")
        for a in (*ws, *bs):
            if not np.all(np.isfinite(a)):
                raise ModelError("non-finite parameter")
            a.setflags(write=False)
        object.__setattr__(self, "weights", ws)
        object.__setattr__(self, "biases", bs)
        object.__setattr__(self, "training_trace", tuple(float(v) for v in self.training_trace))

    def params(self) -> list[np.ndarray]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def n_params(self) -> int:
        return sum(p.size for p in self.params())

    def equals(self, other: "TrainedModel") -> bool:
        return self.spec == other.spec and all(
            np.array_equal(a, b) for a, b in zip(self.params(), other.params())
        )


def _with_params(model: TrainedModel, params: Sequence[np.ndarray], trace=()) -> TrainedModel:
    return TrainedModel(model.spec, tuple(params[0::2]), tuple(params[1::2]), tuple(trace))


def init_params(spec: LayerSpec, seed: int) -> TrainedModel:
    """Glorot-uniform weights in ``[-s, s]``, ``s = sqrt(6 / (fan_in + fan_out))``; zero biases."""
    rng = make_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(spec.widths[:-1], spec.widths[1:]):
        s = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-s, s, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return TrainedModel(spec, tuple(weights), tuple(biases))


# -- elementwise helpers ---------------------------------------------------------


def softmax(logits) -> np.ndarray:
    """Row-wise softmax with max subtraction. Accepts one row or a matrix."""
    z = np.asarray(logits, dtype=np.float64)
    if np.any(np.isnan(z)):
        raise ModelError("NaN in logits")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def sigmoid(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def loss_meta_cls(p, meta_labels) -> float:
    """Mean binary cross-entropy of predicted correctness probabilities.

    ``p`` is clamped to ``[1e-12, 1 - 1e-12]`` first.
    """
    p = np.asarray(p, dtype=np.float64).ravel()
    y = np.asarray(meta_labels, dtype=np.float64).ravel()
    if p.shape != y.shape:
        raise ModelError(f"length mismatch: {p.size} predictions, {y.size} labels")
    p = np.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


def loss_meta_reg(pred, meta_labels) -> float:
    pred = np.asarray(pred, dtype=np.float64).ravel()
    y = np.asarray(meta_labels, dtype=np.float64).ravel()
    if pred.shape != y.shape:
        raise ModelError(f"length mismatch: {pred.size} predictions, {y.size} labels")
    return float(np.mean((y - pred) ** 2))


def cross_entropy(logits, labels) -> float:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-np.mean(logp[np.arange(len(labels)), labels]))


# -- forward / backward ----------------------------------------------------------


def _check_input(model: TrainedModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != model.spec.n_in:
        raise ModelError(f"expected features of width {model.spec.n_in}, got shape {x.shape}")
    return x


def _forward(params: Sequence[np.ndarray], rate: float, x: np.ndarray, train: bool, dropout_seed: int):
    """Forward pass over ``[W0, b0, W1, b1, ...]``; returns outputs, layer inputs and dropout masks."""
    rate = rate if train else 0.0
    rng = make_rng(dropout_seed) if rate > 0 else None
    acts, masks = [x], []
    h = x
    last = len(params) // 2 - 1
    for i in range(last + 1):
        z = h @ params[2 * i] + params[2 * i + 1]
        if i == last:
            return z, acts, masks
        h = np.maximum(z, 0.0)
        mask = None
        if rng is not None:
            mask = (rng.random(h.shape) >= rate) / (1.0 - rate)
            h = h * mask
        masks.append(mask)
        acts.append(h)


def forward(model: TrainedModel, features, mode: str = "eval", dropout_seed: int = 0) -> np.ndarray:
    """Raw network outputs (logits or scalars), shape ``(N, n_out)``.

    In ``train`` mode hidden units are dropped with the model's dropout rate
    and the survivors scaled by ``1 / (1 - rate)``; eval mode is a plain pass.
    """
    if mode not in ("train", "eval"):
        raise ModelError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = _check_input(model, features)
    return _forward(model.params(), model.spec.dropout_rate, x, mode == "train", dropout_seed)[0]


def _backward(params: Sequence[np.ndarray], acts, masks, dout: np.ndarray) -> list[np.ndarray]:
    grads: list[np.ndarray] = []
    g = dout
    for i in range(len(params) // 2 - 1, -1, -1):
        grads.append(g.sum(axis=0))
        grads.append(acts[i].T @ g)
        if i == 0:
            break
        g = g @ params[2 * i].T
        if masks[i - 1] is not None:
            g = g * masks[i - 1]
        g = g * (acts[i] > 0)
    grads.reverse()
    return grads


def _targets(loss: str, labels: np.ndarray, n_out: int) -> np.ndarray:
    if loss == "cross-entropy":
        y = np.asarray(labels, dtype=np.int64)
        if y.ndim != 1 or y.min() < 0 or y.max() >= n_out:
            raise ModelError(f"class labels must be ids in [0, {n_out})")
        return y
    y = np.asarray(labels, dtype=np.float64).reshape(len(labels), -1)
    if y.shape[1] != n_out:
        raise ModelError(f"targets have width {y.shape[1]}, model outputs {n_out}")
    return y


def _loss_and_grad(loss: str, out: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    n = out.shape[0]
    if loss == "cross-entropy":
        p = softmax(out)
        grad = p.copy()
        grad[np.arange(n), y] -= 1.0
        return cross_entropy(out, y), grad / n
    if loss == "meta-bce":
        p = sigmoid(out)
        return loss_meta_cls(p, y), (p - y) / out.size
    return loss_meta_reg(out, y), 2.0 * (out - y) / out.size


def loss_value(model: TrainedModel, features, labels, loss: str) -> float:
    """Eval-mode loss of ``model`` on a labelled batch."""
    out = forward(model, features)
    return _loss_and_grad(loss, out, _targets(loss, labels, model.spec.n_out))[0]


def loss_gradients(model: TrainedModel, features, labels, loss: str) -> list[np.ndarray]:
    """Backprop gradients of the eval-mode loss, ordered ``[W0, b0, W1, b1, ...]``."""
    x = _check_input(model, features)
    params = model.params()
    out, acts, masks = _forward(params, 0.0, x, False, 0)
    _, dout = _loss_and_grad(loss, out, _targets(loss, labels, model.spec.n_out))
    return _backward(params, acts, masks, dout)


# -- training ----------------------------------------------------------------------


class SGD:
    """Heavy-ball SGD with weight decay fed into the velocity.

    ``v <- momentum * v + (g + weight_decay * theta)`` then ``theta <- theta - lr * v``.
    """

    def __init__(self, params: list[np.ndarray], learning_rate: float, momentum: float = 0.0,
                 weight_decay: float = 0.0):
        self.params = params
        self.lr = learning_rate
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p) for p in params]

    def step(self, grads: list[np.ndarray]) -> None:
        for p, v, g in zip(self.params, self.velocity, grads):
            v *= self.momentum
            v += g + self.weight_decay * p
            p -= self.lr * v


def train(dataset: Dataset, idx, spec: LayerSpec, config: TrainConfig) -> TrainedModel:
    """Train a fresh network on ``dataset`` rows ``idx``.

    Parameters are initialised with ``init_params(spec, config.seed)``. Each
    epoch reshuffles the rows and draws dropout masks from a stream derived
    from the same seed, so a run is fully determined by its arguments.
    ``training_trace[e]`` is the sample-weighted mean mini-batch loss of epoch
    ``e``.
    """
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size == 0:
        raise ModelError("cannot train on an empty index set")
    if HEAD_FOR_LOSS[config.loss] != spec.head:
        raise ModelError(f"loss {config.loss!r} needs a {HEAD_FOR_LOSS[config.loss]!r} head, spec has {spec.head!r}")
    if dataset.n_features != spec.n_in:
        raise ModelError(f"dataset has {dataset.n_features} features, spec expects {spec.n_in}")
    x = dataset.features[idx]
    y = _targets(config.loss, dataset.labels[idx], spec.n_out)
    model = init_params(spec, config.seed)
    if config.epochs == 0:
        return model
    params = [p.copy() for p in model.params()]
    opt = SGD(params, config.learning_rate, config.momentum, config.weight_decay)
    rng = make_rng(derive_seed(config.seed, 1))
    n = len(idx)
    bs = min(config.batch_size, n)
    trace = []
    # overflow is expected on the way to divergence; it is reported below instead
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(config.epochs):
            order = rng.permutation(n) if bs < n else np.arange(n)
            total = 0.0
            for start in range(0, n, bs):
                b = order[start:start + bs]
                out, acts, masks = _forward(params, spec.dropout_rate, x[b], True, int(rng.integers(2**63 - 1)))
                if not np.all(np.isfinite(out)):
                    raise TrainingDivergedError(epoch, float("nan"))
                loss, dout = _loss_and_grad(config.loss, out, y[b])
                if not np.isfinite(loss):
                    raise TrainingDivergedError(epoch, loss)
                opt.step(_backward(params, acts, masks, dout))
                total += loss * len(b)
            epoch_loss = total / n
            if not np.isfinite(epoch_loss) or not all(np.all(np.isfinite(p)) for p in params):
                raise TrainingDivergedError(epoch, epoch_loss)
            trace.append(epoch_loss)
    return _with_params(model, params, trace)


# -- prediction ------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PredictionBatch:
    """Head-specific reading of a model's outputs.

    ``probs``: class probabilities (softmax) or per-output sigmoid
    probabilities; ``labels``: argmax class ids or thresholded binary outputs;
    ``values``: raw outputs of a scalar head.
    """

    head: str
    probs: np.ndarray | None = None
    labels: np.ndarray | None = None
    values: np.ndarray | None = None
    logits: np.ndarray | None = None


def _read_head(head: str, out: np.ndarray) -> np.ndarray:
    if head == "softmax":
        return softmax(out)
    if head == "sigmoid":
        return sigmoid(out)
    return out


def predict(model: TrainedModel, features) -> PredictionBatch:
    out = forward(model, features)
    head = model.spec.head
    if head == "softmax":
        p = softmax(out)
        return PredictionBatch(head, probs=p, labels=np.argmax(p, axis=1), logits=out)
    if head == "sigmoid":
        p = sigmoid(out)
        return PredictionBatch(head, probs=p, labels=(p >= 0.5).astype(np.uint8), logits=out)
    return PredictionBatch(head, values=out[:, 0] if out.shape[1] == 1 else out)


def mc_passes_seeds(seed: int, passes: int) -> list[int]:
    return [derive_seed(seed, 2, t) for t in range(passes)]


def mc_predict(model: TrainedModel, features, passes: int, seed: int) -> np.ndarray:
    """Stack of ``passes`` dropout-active head outputs, shape ``(T, N, n_out)``.

    Pass ``t`` uses dropout seed ``mc_passes_seeds(seed, passes)[t]``.
    """
    if passes < 1:
        raise ModelError("need at least one MC pass")
    x = _check_input(model, features)
    return np.stack([
        _read_head(model.spec.head, _forward(model.params(), model.spec.dropout_rate, x, True, s)[0])
        for s in mc_passes_seeds(seed, passes)
    ])


# -- gradient check -----------------------------------------------------------------------


def _random_batch(spec: LayerSpec, loss: str, rng: np.random.Generator, n: int = 6):
    x = rng.standard_normal((n, spec.n_in))
    if loss == "cross-entropy":
        y = rng.integers(0, spec.n_out, size=n)
    elif loss == "meta-bce":
        y = rng.integers(0, 2, size=(n, spec.n_out)).astype(np.float64)
    else:
        y = rng.standard_normal((n, spec.n_out))
    return x, y


def check_gradients(spec: LayerSpec, loss: str, seed: int, step: float = 1e-5) -> float:
    """Max of ``|g_bp - g_fd| / max(1, |g_fd|)`` over all parameters.

    ``g_fd`` is the central difference with the given step on a random batch.
    Dropout is disabled for the check. Biases are randomised so no ReLU sits
    exactly at its kink.
    """
    if HEAD_FOR_LOSS[loss] != spec.head:
        raise ModelError(f"loss {loss!r} needs a {HEAD_FOR_LOSS[loss]!r} head")
    spec = replace(spec, dropout_rate=0.0)
    rng = make_rng(seed)
    base = init_params(spec, derive_seed(seed, 3))
    params = [p.copy() for p in base.params()]
    for i in range(1, len(params), 2):
        params[i] = rng.uniform(-0.5, 0.5, size=params[i].shape)
    model = _with_params(base, params)
    x, y = _random_batch(spec, loss, rng)
    y_t = _targets(loss, y, spec.n_out)
    analytic = loss_gradients(model, x, y, loss)

    def objective(ps):
        return _loss_and_grad(loss, _forward(ps, 0.0, x, False, 0)[0], y_t)[0]

    worst = 0.0
    for k, p in enumerate(params):
        for j in np.ndindex(p.shape):
            shifted = list(params)
            shifted[k] = p.copy()
            shifted[k][j] = p[j] + step
            up = objective(shifted)
            shifted[k][j] = p[j] - step
            down = objective(shifted)
            fd = (up - down) / (2 * step)
            worst = max(worst, float(abs(analytic[k][j] - fd) / max(1.0, abs(fd))))
    return worst


# -- checkpoints ----------------------------------------------------------------------------
#
# Binary layout (little-endian): magic b"MEMD" | u32 version | u32 head code |
# f64 dropout_rate | u32 n_widths | n_widths x u64 widths | parameters as f64
# in [W0, b0, W1, b1, ...] order, each C-contiguous. A JSON sidecar
# "<path>.json" holds the TrainConfig and the training trace.

_CKPT_MAGIC = b"MEMD"
_CKPT_VERSION = 1


def save_checkpoint(model: TrainedModel, path, config: TrainConfig | None = None) -> None:
    path = Path(path)
    spec = model.spec
    with path.open("wb") as fh:
        fh.write(struct.pack("<4sIIdI", _CKPT_MAGIC, _CKPT_VERSION, HEADS.index(spec.head),
                             spec.dropout_rate, len(spec.widths)))
        fh.write(struct.pack(f"<{len(spec.widths)}Q", *spec.widths))
        for p in model.params():
            fh.write(np.ascontiguousarray(p, dtype="<f8").tobytes())
    sidecar = {
        "version": _CKPT_VERSION,
        "spec": spec.to_dict(),
        "train_config": config.to_dict() if config is not None else None,
        "seed": config.seed if config is not None else None,
        "training_trace": list(model.training_trace),
    }
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path) -> tuple[TrainedModel, TrainConfig | None]:
    path = Path(path)
    raw = path.read_bytes()
    head_fmt = struct.Struct("<4sIIdI")
    magic, version, head, rate, nw = head_fmt.unpack_from(raw)
    if magic != _CKPT_MAGIC:
        raise ModelError(f"bad checkpoint magic {magic!r}")
    if version != _CKPT_VERSION:
        raise ModelError(f"unsupported checkpoint version {version}")
    off = head_fmt.size
    widths = struct.unpack_from(f"<{nw}Q", raw, off)
    off += 8 * nw
    spec = LayerSpec(tuple(widths), HEADS[head], rate)
    params = []
    for fi, fo in zip(widths[:-1], widths[1:]):
        for shape in ((fi, fo), (fo,)):
            count = int(np.prod(shape))
            params.append(np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(shape))
            off += 8 * count
    trace, config = (), None
    sidecar = Path(str(path) + ".json")
    if sidecar.exists():
        meta = json.loads(sidecar.read_text())
        trace = tuple(meta.get("training_trace", ()))
        if meta.get("train_config"):
            config = TrainConfig.from_dict(meta["train_config"])
    return TrainedModel(spec, tuple(params[0::2]), tuple(params[1::2]), trace), config
