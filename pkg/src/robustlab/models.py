"""Classifiers (MLP, mini-ConvNet), the U-Net conjugate generator, training,
evaluation and checkpoint persistence."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .data import Dataset
from .tensor import (
    ComputationRecord, Tensor, bias_add, concat, conv2d, conv_transpose2d, l1_loss, leaky_relu,
    matmul, max_pool2d, relu, reshape, sigmoid, softmax_cross_entropy, tanh,
)
from .tensor.rng import draw_uniform, rng_stream

log = logging.getLogger(__name__)

KINDS = ("mlp", "convnet", "unet-generator")
ACTIVATIONS = {
    "relu": relu,
    "leaky_relu": lambda x: leaky_relu(x, 0.2),
    "tanh": tanh,
    "sigmoid": sigmoid,
}
RELU_FAMILY = ("relu", "leaky_relu")


class ModelError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        self.epoch = epoch
        super().__init__(f"non-finite loss {loss} at epoch {epoch}")


@dataclass
class ModelSpec:
    """Architecture description.

    ``widths`` means, per kind:

    * ``mlp``: full layer widths ``[d_in, hidden..., classes]``;
    * ``convnet``: conv channel plan ``[c_in, c1, c2, ...]``; each block is
      conv3x3 + activation + 2x2 max-pool, followed by a ``hidden``-wide
      dense layer and ``classes`` logits;
    * ``unet-generator``: encoder channel plan ``[c_in, c1, ..., c_depth]``.
      Each encoder block is two conv3x3 layers; the decoder has ``depth - 1``
      transposed convolutions with skip concatenation, then a 1x1 conv
      to ``c_in`` channels and a tanh head.
    """

    kind: str
    widths: list[int]
    input_shape: tuple[int, ...] = ()
    activation: str = "relu"
    classes: int = 10
    hidden: int = 64
    depth: int = 3

    def __post_init__(self):
        self.widths = [int(w) for w in self.widths]
        self.input_shape = tuple(int(s) for s in self.input_shape)
        if self.kind not in KINDS:
            raise ModelError(f"unknown model kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ModelError(f"unknown activation {self.activation!r}")
        if any(w <= 0 for w in self.widths):
            raise ModelError("widths must be positive")
        if self.kind == "mlp":
            if len(self.widths) < 2:
                raise ModelError("mlp needs at least input and output widths")
            if not self.input_shape:
                self.input_shape = (self.widths[0],)
            if int(np.prod(self.input_shape)) != self.widths[0]:
                raise ModelError(f"mlp input width {self.widths[0]} != input shape {self.input_shape}")
            self.classes = self.widths[-1]
        elif self.kind == "convnet":
            if len(self.widths) < 2 or len(self.input_shape) != 3:
                raise ModelError("convnet needs a channel plan and a (C, H, W) input shape")
            if self.widths[0] != self.input_shape[0]:
                raise ModelError(f"inconsistent channel plan: {self.widths[0]} input channels "
                                 f"for input shape {self.input_shape}")
            blocks = len(self.widths) - 1
            if min(self.input_shape[1:]) < 2 ** blocks:
                raise ModelError(f"{blocks} pooling blocks do not fit input {self.input_shape}")
        else:
            if self.depth < 1:
                raise ModelError("depth must be >= 1")
            if len(self.widths) != self.depth + 1:
                raise ModelError(f"inconsistent channel plan: depth {self.depth} needs "
                                 f"{self.depth + 1} widths, got {self.widths}")
            if len(self.input_shape) != 3 or self.widths[0] != self.input_shape[0]:
                raise ModelError(f"inconsistent channel plan {self.widths} for input {self.input_shape}")
            if min(self.input_shape[1:]) < 2 ** (self.depth - 1):
                raise ModelError(f"depth {self.depth} too deep for input {self.input_shape}")

    @property
    def is_classifier(self) -> bool:
        return self.kind != "unet-generator"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)


# initialization ------------------------------------------------------------

def _init_weight(stream, shape, fan_in, fan_out, he: bool) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in) if he else math.sqrt(6.0 / (fan_in + fan_out))
    return draw_uniform(stream, shape, -bound, bound)


LOGIT_INIT_SCALE = 0.1


def build(spec: ModelSpec, seed: int) -> dict[str, np.ndarray]:
    """Deterministic parameters: He-uniform ahead of relu-family activations,
    Xavier-uniform otherwise; zero biases.  The logit layer is shrunk by
    ``LOGIT_INIT_SCALE`` so an untrained classifier is close to uniform."""
    s = rng_stream(seed, 10)
    he = spec.activation in RELU_FAMILY
    p: dict[str, np.ndarray] = {}
    if spec.kind == "mlp":
        w = spec.widths
        for i in range(len(w) - 1):
            last = i == len(w) - 2
            p[f"fc{i}.w"] = _init_weight(s, (w[i], w[i + 1]), w[i], w[i + 1], he and not last)
            if last:
                p[f"fc{i}.w"] *= LOGIT_INIT_SCALE
            p[f"fc{i}.b"] = np.zeros(w[i + 1])
    elif spec.kind == "convnet":
        c = spec.widths
        for i in range(len(c) - 1):
            p[f"conv{i}.w"] = _init_weight(s, (c[i + 1], c[i], 3, 3), 9 * c[i], 9 * c[i + 1], he)
            p[f"conv{i}.b"] = np.zeros(c[i + 1])
        h, w = spec.input_shape[1:]
        for _ in range(len(c) - 1):
            h, w = h // 2, w // 2
        flat = c[-1] * h * w
        p["fc0.w"] = _init_weight(s, (flat, spec.hidden), flat, spec.hidden, he)
        p["fc0.b"] = np.zeros(spec.hidden)
        p["fc1.w"] = LOGIT_INIT_SCALE * _init_weight(s, (spec.hidden, spec.classes), spec.hidden,
                                                     spec.classes, False)
        p["fc1.b"] = np.zeros(spec.classes)
    else:
        c = spec.widths
        for b in range(spec.depth):
            cin = c[b]
            for j in range(2):
                p[f"enc{b}.{j}.w"] = _init_weight(s, (c[b + 1], cin, 3, 3), 9 * cin, 9 * c[b + 1], he)
                p[f"enc{b}.{j}.b"] = np.zeros(c[b + 1])
                cin = c[b + 1]
        for b in range(spec.depth - 2, -1, -1):
            cin, cout = c[b + 2], c[b + 1]
            p[f"up{b}.w"] = _init_weight(s, (cin, cout, 2, 2), 4 * cin, 4 * cout, he)
            p[f"up{b}.b"] = np.zeros(cout)
            p[f"dec{b}.w"] = _init_weight(s, (cout, 2 * cout, 3, 3), 18 * cout, 9 * cout, he)
            p[f"dec{b}.b"] = np.zeros(cout)
        p["head.w"] = _init_weight(s, (c[0], c[1], 1, 1), c[1], c[0], False)
        p["head.b"] = np.zeros(c[0])
    return p


def parameter_count(params: dict[str, np.ndarray]) -> int:
    return sum(v.size for v in params.values())


# forward -------------------------------------------------------------------

class Model:
    """A spec plus parameters.  ``forward`` builds on the active record."""

    def __init__(self, spec: ModelSpec, params: dict[str, np.ndarray]):
        self.spec = spec
        self.params = params

    @classmethod
    def create(cls, spec: ModelSpec, seed: int) -> "Model":
        return cls(spec, build(spec, seed))

    def copy(self) -> "Model":
        return Model(self.spec, {k: v.copy() for k, v in self.params.items()})

    def forward(self, x, params: dict | None = None) -> Tensor:
        p = params if params is not None else self.params
        x = x if isinstance(x, Tensor) else Tensor(x)
        expect = self.spec.input_shape
        if x.shape[1:] != expect:
            raise ModelError(f"input shape {x.shape[1:]} does not match model input {expect}")
        return getattr(self, "_" + self.spec.kind.replace("-", "_"))(x, p)

    __call__ = forward

    def _act(self, x):
        return ACTIVATIONS[self.spec.activation](x)

    def _mlp(self, x, p):
        h = reshape(x, (x.shape[0], -1)) if x.data.ndim != 2 else x
        n = len(self.spec.widths) - 1
        for i in range(n):
            h = bias_add(matmul(h, p[f"fc{i}.w"]), p[f"fc{i}.b"])
            if i < n - 1:
                h = self._act(h)
        return h

    def _convnet(self, x, p):
        h = x
        for i in range(len(self.spec.widths) - 1):
            h = bias_add(conv2d(h, p[f"conv{i}.w"], stride=1, pad=1), p[f"conv{i}.b"])
            h = max_pool2d(self._act(h), 2)
        h = reshape(h, (h.shape[0], -1))
        h = self._act(bias_add(matmul(h, p["fc0.w"]), p["fc0.b"]))
        return bias_add(matmul(h, p["fc1.w"]), p["fc1.b"])

    def _unet_generator(self, x, p):
        skips = []
        h = x
        for b in range(self.spec.depth):
            if b > 0:
                h = max_pool2d(h, 2)
            for j in range(2):
                h = self._act(bias_add(conv2d(h, p[f"enc{b}.{j}.w"], pad=1), p[f"enc{b}.{j}.b"]))
            skips.append(h)
        for b in range(self.spec.depth - 2, -1, -1):
            skip = skips[b]
            extra = (skip.shape[2] - 2 * h.shape[2], skip.shape[3] - 2 * h.shape[3])
            h = conv_transpose2d(h, p[f"up{b}.w"], stride=2, output_padding=extra)
            h = self._act(bias_add(h, p[f"up{b}.b"]))
            h = concat([h, skip], axis=1)
            h = self._act(bias_add(conv2d(h, p[f"dec{b}.w"], pad=1), p[f"dec{b}.b"]))
        return tanh(bias_add(conv2d(h, p["head.w"]), p["head.b"]))

    def predict(self, x: np.ndarray, batch_size: int = 500) -> np.ndarray:
        """Untaped forward in batches; returns raw outputs."""
        outs = [self.forward(Tensor(x[i:i + batch_size])).data for i in range(0, len(x), batch_size)]
        if not outs:
            return np.zeros((0,) + ((self.spec.classes,) if self.spec.is_classifier else self.spec.input_shape))
        return np.concatenate(outs)


def loss(model: Model, x, target, params: dict | None = None) -> Tensor:
    """Mean cross-entropy for classifiers; mean L1 against ``target`` for the generator."""
    out = model.forward(x, params)
    if model.spec.is_classifier:
        labels = np.asarray(target, dtype=np.int64).reshape(-1)
        if labels.size and (labels.min() < 0 or labels.max() >= model.spec.classes):
            raise ModelError(f"label out of range [0, {model.spec.classes})")
        return softmax_cross_entropy(out, labels)
    return l1_loss(out, target)


def predict_labels(model: Model, x: np.ndarray, batch_size: int = 500) -> np.ndarray:
    # np.argmax returns the first maximum: ties go to the lowest class index
    return model.predict(x, batch_size).argmax(axis=1)


def evaluate_accuracy(model: Model, dataset: Dataset, batch_size: int = 500) -> float:
    if len(dataset) == 0:
        return 0.0
    return float((predict_labels(model, dataset.inputs, batch_size) == dataset.labels).mean())


# training ------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 5
    batch_size: int = 32
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    loss: str = "cross-entropy"     # or "l1"

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.loss not in ("cross-entropy", "l1"):
            raise ValueError(f"unknown loss {self.loss!r}")


@dataclass
class PairSet:
    """Inputs with dense regression targets (generator training pairs)."""
    inputs: np.ndarray
    targets: np.ndarray

    def __len__(self):
        return len(self.inputs)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    accuracy: float | None = None


class Adam:
    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        c = self.cfg
        self.t += 1
        corr1 = 1.0 - c.beta1 ** self.t
        corr2 = 1.0 - c.beta2 ** self.t
        for k, g in grads.items():
            m = self.m.get(k, 0.0) * c.beta1 + (1 - c.beta1) * g
            v = self.v.get(k, 0.0) * c.beta2 + (1 - c.beta2) * g * g
            self.m[k], self.v[k] = m, v
            params[k] -= c.learning_rate * (m / corr1) / (np.sqrt(v / corr2) + c.adam_eps)


class SGD:
    def __init__(self, cfg: TrainConfig):
        self.lr = cfg.learning_rate

    def step(self, params, grads):
        for k, g in grads.items():
            params[k] -= self.lr * g


def train(model: Model, dataset, config: TrainConfig,
          on_epoch_end: Callable[[int, Model], None] | None = None,
          optimizer=None) -> tuple[dict[str, np.ndarray], list[EpochRecord]]:
    """Minibatch training in place.  Shuffling draws from stream ``epoch``
    of ``config.seed``, so runs are reproducible."""
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    regression = config.loss == "l1"
    targets = dataset.targets if regression else dataset.labels
    opt = optimizer or (Adam(config) if config.optimizer == "adam" else SGD(config))
    history: list[EpochRecord] = []
    n = len(dataset)
    for epoch in range(1, config.epochs + 1):
        order = rng_stream(config.seed, 1000 + epoch).permutation(n)
        total, correct = 0.0, 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            with ComputationRecord() as rec:
                leaves = {k: rec.leaf(v) for k, v in model.params.items()}
                out = model.forward(dataset.inputs[idx], leaves)
                if regression:
                    batch_loss = l1_loss(out, targets[idx])
                else:
                    batch_loss = softmax_cross_entropy(out, targets[idx])
                    correct += int((out.data.argmax(axis=1) == targets[idx]).sum())
                value = batch_loss.item()
                if not math.isfinite(value):
                    raise TrainingDiverged(epoch, value)
                g = rec.backward(batch_loss)
            opt.step(model.params, {k: g[t] for k, t in leaves.items()})
            total += value * len(idx)
        rec_ = EpochRecord(epoch, total / n, None if regression else correct / n)
        history.append(rec_)
        log.info("epoch %d loss %.4f%s", epoch, rec_.loss,
                 "" if regression else f" acc {rec_.accuracy:.4f}")
        if on_epoch_end is not None:
            on_epoch_end(epoch, model)
    return model.params, history


# checkpoints ---------------------------------------------------------------

CHECKPOINT_FORMAT = "robustlab-params"
CHECKPOINT_VERSION = 1


def params_hash(params: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        h.update(name.encode())
        h.update(repr(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def save_checkpoint(path, model: Model, meta: dict | None = None) -> str:
    """Write ``<path>.json`` (manifest) and ``<path>.bin`` (little-endian f8)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries, offset, chunks = [], 0, []
    for name in sorted(model.params):
        arr = np.ascontiguousarray(model.params[name], dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": arr.nbytes})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    payload = b"".join(chunks)
    digest = params_hash(model.params)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "spec": model.spec.to_dict(),
        "tensors": entries,
        "payload": path.with_suffix(".bin").name,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "params_hash": digest,
        "meta": meta or {},
    }
    path.with_suffix(".bin").write_bytes(payload)
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return digest


def load_checkpoint(path) -> tuple[Model, dict]:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT or manifest.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint format")
    payload = (path.parent / manifest["payload"]).read_bytes()
    if hashlib.sha256(payload).hexdigest() != manifest["payload_sha256"]:
        raise ValueError(f"{path}: payload checksum mismatch")
    params = {}
    for e in manifest["tensors"]:
        arr = np.frombuffer(payload, dtype="<f8", count=e["nbytes"] // 8, offset=e["offset"])
        params[e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
    model = Model(ModelSpec.from_dict(manifest["spec"]), params)
    return model, manifest.get("meta", {})
