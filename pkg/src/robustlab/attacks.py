"""Signed-gradient procedures: FGSM, PGD, iterative opposite FGSM,
conjugate datasets, and clean/robust accuracy of plain and composed models."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .data import Dataset
from .models import Model, ModelError
from .tensor import ComputationRecord, Tensor, add, scalar_mul, softmax_cross_entropy

DIRECTIONS = ("attack", "augment")
TARGETS = ("true-label", "fixed-class", "least-likely")


@dataclass
class AttackSpec:
    epsilon: float
    alpha: float = 0.0
    steps: int = 1
    direction: str = "attack"
    target: str = "true-label"
    target_class: int | None = None
    clip_perturbation: bool = True
    # None picks the direction default: on for attacks, off for augmentation
    clamp_to_valid_range: bool | None = None
    value_range: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        if self.epsilon < 0 or self.alpha < 0 or self.steps < 0:
            raise ValueError("epsilon, alpha and steps must be non-negative")
        if self.direction not in DIRECTIONS:
            raise ValueError(f"unknown direction {self.direction!r}")
        if self.target not in TARGETS:
            raise ValueError(f"unknown target mode {self.target!r}")
        if self.target == "fixed-class" and self.target_class is None:
            raise ValueError("fixed-class target needs target_class")
        self.value_range = tuple(self.value_range)

    @property
    def clamp(self) -> bool:
        if self.clamp_to_valid_range is None:
            return self.direction == "attack"
        return self.clamp_to_valid_range


MNIST_PGD = AttackSpec(epsilon=0.1, alpha=0.025, steps=4)
CIFAR_PGD = AttackSpec(epsilon=8 / 255, alpha=2 / 255, steps=4)


class ComposedModel:
    """``classifier(x + scale * generator(x))``: the generator-augmented
    classifier.  ``scale`` undoes the [-1, 1] target rescaling."""

    def __init__(self, generator: Model, classifier: Model, scale: float):
        if generator.spec.input_shape != classifier.spec.input_shape:
            raise ModelError(f"generator shape {generator.spec.input_shape} != classifier input "
                             f"{classifier.spec.input_shape}")
        self.generator = generator
        self.classifier = classifier
        self.scale = float(scale)
        self.spec = classifier.spec

    def forward(self, x, params=None) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        return self.classifier.forward(add(x, scalar_mul(self.generator.forward(x), self.scale)))

    __call__ = forward

    def conjugate(self, x: np.ndarray, batch_size: int = 500) -> np.ndarray:
        return self.scale * self.generator.predict(x, batch_size)

    def predict(self, x: np.ndarray, batch_size: int = 500) -> np.ndarray:
        outs = [self.forward(Tensor(x[i:i + batch_size])).data for i in range(0, len(x), batch_size)]
        return np.concatenate(outs) if outs else np.zeros((0, self.spec.classes))


# gradients -----------------------------------------------------------------

def input_gradient(model, x: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of the summed per-sample loss w.r.t. ``x`` (so each row is the
    gradient of that sample's own loss), plus the model outputs at ``x``.

    Cross-entropy is used unless the model defines ``sample_loss(x, labels)``
    returning the summed loss as a scalar tensor.
    """
    labels = np.asarray(labels, dtype=np.int64)
    with ComputationRecord() as rec:
        leaf = rec.leaf(x)
        custom = getattr(model, "sample_loss", None)
        if custom is not None:
            total = custom(leaf, labels)
            out = None
        else:
            logits = model.forward(leaf)
            total = scalar_mul(softmax_cross_entropy(logits, labels), float(len(labels)))
            out = logits.data
        g = rec.backward(total)[leaf]
    return g, out


def _labels_for_step(model, x, y, spec: AttackSpec) -> tuple[np.ndarray, float]:
    """Labels whose loss gradient drives the step, and the step's sign."""
    sign = 1.0 if spec.direction == "attack" else -1.0
    if spec.target == "true-label":
        return y, sign
    if spec.target == "fixed-class":
        return np.full(len(y), spec.target_class, dtype=np.int64), -sign
    logits = model.predict(x)
    return logits.argmin(axis=1), -sign


def signed_step(model, x: np.ndarray, y: np.ndarray, spec: AttackSpec) -> np.ndarray:
    """``+/- sign(grad)`` for one step (zero where the gradient is zero)."""
    labels, s = _labels_for_step(model, x, y, spec)
    g, _ = input_gradient(model, x, labels)
    return s * np.sign(g)


def _within_budget(x: np.ndarray, x0: np.ndarray, eps: float) -> np.ndarray:
    # rounding in x0 + delta can overshoot by an ulp; walk back toward x0
    for _ in range(8):
        over = (x - x0) > eps
        under = (x - x0) < -eps
        if not (over.any() or under.any()):
            break
        x = np.where(over, np.nextafter(x, -np.inf), x)
        x = np.where(under, np.nextafter(x, np.inf), x)
    return x


def fgsm(model, x0: np.ndarray, y: np.ndarray, spec: AttackSpec) -> np.ndarray:
    """One-step signed-gradient perturbation of size ``spec.epsilon``."""
    x0 = np.asarray(x0, dtype=np.float64)
    if spec.epsilon == 0:
        return x0.copy()
    x = x0 + spec.epsilon * signed_step(model, x0, np.asarray(y), spec)
    if spec.clamp:
        x = np.clip(x, *spec.value_range)
    return x


def pgd(model, x0: np.ndarray, y: np.ndarray, spec: AttackSpec, batch_size: int = 500) -> np.ndarray:
    """Iterated signed steps of size ``alpha``; the cumulative perturbation is
    clipped to ``[-eps, eps]`` and the result clamped to the valid range."""
    if spec.steps < 1:
        raise ValueError("pgd needs steps >= 1")
    x0 = np.asarray(x0, dtype=np.float64)
    if spec.clip_perturbation and spec.epsilon == 0:
        return x0.copy()
    y = np.asarray(y, dtype=np.int64)
    out = np.empty_like(x0)
    for i in range(0, len(x0), batch_size):
        xb0, yb = x0[i:i + batch_size], y[i:i + batch_size]
        x = xb0.copy()
        for _ in range(spec.steps):
            x = x + spec.alpha * signed_step(model, x, yb, spec)
            if spec.clip_perturbation:
                x = xb0 + np.clip(x - xb0, -spec.epsilon, spec.epsilon)
            if spec.clamp:
                x = np.clip(x, *spec.value_range)
            if spec.clip_perturbation:
                x = _within_budget(x, xb0, spec.epsilon)
        out[i:i + batch_size] = x
    return out


# opposite FGSM and conjugates ---------------------------------------------

@dataclass
class ConjugateRecord:
    x0: np.ndarray
    label: int
    delta_n: np.ndarray
    steps: int
    epsilon: float
    # max |D_n| per step for this sample
    step_linf: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def x_n(self) -> np.ndarray:
        return self.x0 + self.delta_n


@dataclass
class ConjugateBatch:
    """Stacked conjugates for a batch; ``delta`` is the running sum of the
    per-step increments, so ``delta == sum(D_n)`` holds exactly."""

    x0: np.ndarray
    labels: np.ndarray
    delta: np.ndarray
    steps: int
    epsilon: float
    step_linf: np.ndarray       # (N, B)
    clamped: bool = False
    model_hash: str = ""

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i) -> ConjugateRecord:
        return ConjugateRecord(self.x0[i], int(self.labels[i]), self.delta[i], self.steps,
                               self.epsilon, self.step_linf[:, i])

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def x_n(self) -> np.ndarray:
        return self.x0 + self.delta


def opposite_fgsm_iterate(model, x0: np.ndarray, labels: np.ndarray, epsilon: float, steps: int,
                          clamp: bool = False, value_range=(0.0, 1.0), keep_trajectory: bool = True,
                          on_step: Callable[[int, np.ndarray], None] | None = None,
                          increments: list | None = None):
    """Iterate ``X_{n+1} = X_n - eps * sign(grad l(X_n, Y*))`` for ``steps`` steps.

    Returns ``(trajectory, ConjugateBatch)``; the trajectory is the list
    ``[X_0, ..., X_N]`` when ``keep_trajectory`` is set, else ``None``.
    ``on_step(n, X_n)`` is called for every ``n`` including 0.  If a list is
    passed as ``increments`` each ``D_n`` is appended to it.
    """
    if steps < 0:
        raise ValueError("number of steps must be >= 0")
    x0 = np.asarray(x0, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    spec = AttackSpec(epsilon=epsilon, alpha=epsilon, steps=1, direction="augment",
                      clamp_to_valid_range=clamp, value_range=value_range)
    delta = np.zeros_like(x0)
    x = x0.copy()
    traj = [x0.copy()] if keep_trajectory else None
    linf = np.zeros((steps, len(x0)))
    if on_step is not None:
        on_step(0, x)
    for n in range(steps):
        d = epsilon * signed_step(model, x, labels, spec)
        if clamp:
            d = np.clip(x + d, *value_range) - x
        delta = delta + d
        x = x0 + delta
        linf[n] = np.abs(d).reshape(len(x0), -1).max(axis=1) if x0.size else 0.0
        if increments is not None:
            increments.append(d)
        if keep_trajectory:
            traj.append(x.copy())
        if on_step is not None:
            on_step(n + 1, x)
    return traj, ConjugateBatch(x0, labels, delta, steps, float(epsilon), linf, clamp)


def build_conjugate_dataset(model: Model, dataset: Dataset, epsilon: float, steps: int,
                            batch_size: int = 500, clamp: bool = False) -> ConjugateBatch:
    """One conjugate per sample, computed in fixed-order batches."""
    from .models import params_hash
    parts = []
    for i in range(0, len(dataset), batch_size):
        _, cb = opposite_fgsm_iterate(model, dataset.inputs[i:i + batch_size],
                                      dataset.labels[i:i + batch_size], epsilon, steps,
                                      clamp=clamp, value_range=dataset.value_range,
                                      keep_trajectory=False)
        parts.append(cb)
    if not parts:
        shape = (0,) + dataset.feature_shape
        return ConjugateBatch(np.zeros(shape), np.zeros(0, np.int64), np.zeros(shape), steps,
                              float(epsilon), np.zeros((steps, 0)), clamp)
    out = ConjugateBatch(
        np.concatenate([p.x0 for p in parts]), np.concatenate([p.labels for p in parts]),
        np.concatenate([p.delta for p in parts]), steps, float(epsilon),
        np.concatenate([p.step_linf for p in parts], axis=1), clamp)
    out.model_hash = params_hash(model.params) if isinstance(model, Model) else ""
    return out


CONJUGATE_FORMAT = "robustlab-conjugates"


def save_conjugates(path, batch: ConjugateBatch, meta: dict | None = None) -> None:
    """Manifest ``<path>.json`` plus little-endian payload ``<path>.bin``
    holding X0, Delta_N (f8) and labels (i8), in that order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    x0 = np.ascontiguousarray(batch.x0, dtype="<f8")
    delta = np.ascontiguousarray(batch.delta, dtype="<f8")
    labels = np.ascontiguousarray(batch.labels, dtype="<i8")
    payload = x0.tobytes() + delta.tobytes() + labels.tobytes()
    manifest = {
        "format": CONJUGATE_FORMAT,
        "version": 1,
        "epsilon": batch.epsilon,
        "steps": batch.steps,
        "count": len(batch),
        "sample_shape": list(batch.x0.shape[1:]),
        "clamped": batch.clamped,
        "model_checkpoint_hash": batch.model_hash,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "meta": meta or {},
    }
    path.with_suffix(".bin").write_bytes(payload)
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_conjugates(path) -> ConjugateBatch:
    path = Path(path)
    m = json.loads(path.with_suffix(".json").read_text())
    if m.get("format") != CONJUGATE_FORMAT:
        raise ValueError(f"{path}: not a conjugate dataset")
    raw = path.with_suffix(".bin").read_bytes()
    if hashlib.sha256(raw).hexdigest() != m["payload_sha256"]:
        raise ValueError(f"{path}: payload checksum mismatch")
    n, shape = m["count"], tuple(m["sample_shape"])
    per = int(np.prod(shape, dtype=np.int64)) * n
    x0 = np.frombuffer(raw, "<f8", per, 0).reshape((n,) + shape).astype(np.float64)
    delta = np.frombuffer(raw, "<f8", per, 8 * per).reshape((n,) + shape).astype(np.float64)
    labels = np.frombuffer(raw, "<i8", n, 16 * per).astype(np.int64)
    return ConjugateBatch(x0, labels, delta, m["steps"], m["epsilon"], np.zeros((m["steps"], n)),
                          m["clamped"], m["model_checkpoint_hash"])


# accuracies ----------------------------------------------------------------

def accuracy_on(model, x: np.ndarray, y: np.ndarray, batch_size: int = 500) -> float:
    if len(y) == 0:
        return 0.0
    return float((model.predict(x, batch_size).argmax(axis=1) == y).mean())


def robust_accuracy(model, dataset: Dataset, spec: AttackSpec, inputs: np.ndarray | None = None) -> float:
    """Accuracy on PGD-attacked inputs (``inputs`` overrides the starting points)."""
    if spec.direction != "attack":
        raise ValueError("robust accuracy needs an attack-direction spec")
    x = dataset.inputs if inputs is None else inputs
    if spec.epsilon == 0:
        return accuracy_on(model, x, dataset.labels)
    return accuracy_on(model, pgd(model, x, dataset.labels, spec), dataset.labels)


def robust_accuracy_composed(generator: Model, classifier: Model, dataset: Dataset,
                             spec: AttackSpec, scale: float) -> float:
    """RA of ``classifier(x + G(x))``, attack gradients flowing through both."""
    return robust_accuracy(ComposedModel(generator, classifier, scale), dataset, spec)


def composed_accuracy(generator: Model, classifier: Model, dataset: Dataset, scale: float) -> float:
    return accuracy_on(ComposedModel(generator, classifier, scale), dataset.inputs, dataset.labels)
