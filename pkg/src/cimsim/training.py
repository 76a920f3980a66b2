"""SGD on device states through the tape, plus test-time quantized evaluation.

Gradients are taken w.r.t. the signed weight of each differential pair; the
pair states are re-derived from the weight every forward pass, so the update
chains through the weight->state affine maps and the device laws.  Weights
are clipped to [-1, 1] after each step, which keeps every state inside its
physical bounds by construction.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import affine, backward, record
from .converters import WeightQuantizer, quantize_weight
from .exceptions import DomainError, TrainingError
from .network import ForwardResult, LayerTelemetry, MvmLayer, NetworkModel, forward


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    batch_size: int = 32
    epochs: int = 5
    seed: int = 42
    loss: str = "softmax_cross_entropy"
    clip_after_step: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise DomainError("learning rate must be positive")
        if self.batch_size < 1 or self.epochs < 1:
            raise DomainError("batch size and epochs must be >= 1")
        if self.loss != "softmax_cross_entropy":
            raise DomainError(f"unsupported loss {self.loss!r}")


@dataclass
class Dataset:
    """Images normalized to [0, 1] with integer class labels."""

    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.images = np.asarray(self.images)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.shape[0] != self.labels.shape[0]:
            raise DomainError(
                f"image/label counts differ: {self.images.shape[0]} vs {self.labels.shape[0]}"
            )

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def subset(self, idx) -> "Dataset":
        """Select by index array/slice, or the first ``idx`` samples if an int."""
        if isinstance(idx, (int, np.integer)):
            idx = slice(0, int(idx))
        return Dataset(self.images[idx], self.labels[idx])


def loss_value(scores: np.ndarray, label: int, v_max_volts: float) -> float:
    """Softmax cross-entropy over scores scaled to dimensionless logits."""
    z = np.asarray(scores, dtype=float) / v_max_volts
    if not np.all(np.isfinite(z)):
        raise TrainingError("non-finite scores in loss")
    m = z.max()
    return float(np.log(np.sum(np.exp(z - m))) + m - z[label])


def _batch_loss_node(result: ForwardResult, labels: np.ndarray, v_max: float):
    """Mean cross-entropy node over the batch (scores are voltages)."""
    z = affine(result.score_node, 1.0 / v_max, 0.0)
    lse = ad.logsumexp_rows(z)
    picked = ad.pick(z, np.arange(labels.size), labels)
    per_sample = record("sub", lse, picked)
    total = record("sum", per_sample, ctx=(None,))
    return affine(total, 1.0 / labels.size, 0.0)


def _canonical_batch_order(images: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Deterministic intra-batch order so gradient reduction is permutation-proof."""
    keys = [(im.tobytes(), int(lb)) for im, lb in zip(images, labels)]
    return np.array(sorted(range(len(keys)), key=keys.__getitem__), dtype=np.int64)


def batch_gradients(model: NetworkModel, images: np.ndarray, labels: np.ndarray):
    """(mean loss, {layer name: dL/dW}) for one batch."""
    order = _canonical_batch_order(images, labels)
    images, labels = images[order], labels[order]
    v_max = model.mvm_layers[-1].dta.v_max_volts
    result = forward(model, images, need_grad=True)
    loss_node = _batch_loss_node(result, labels, v_max)
    grads = backward(result.tape, loss_node)
    by_layer = {
        name: np.asarray(grads[node.node], dtype=float)
        for name, node in result.param_nodes.items()
    }
    return float(loss_node.value), by_layer


def sgd_step(model: NetworkModel, images: np.ndarray, labels: np.ndarray,
             cfg: TrainConfig) -> float:
    """One SGD update on all layer weights; returns the pre-step batch loss."""
    if len(labels) == 0:
        raise TrainingError("empty batch")
    loss, grads = batch_gradients(model, images, labels)
    for layer in model.mvm_layers:
        g = grads[layer.name]
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in layer {layer.name}")
        layer.weights = layer.weights - cfg.learning_rate * g
        if cfg.clip_after_step:
            np.clip(layer.weights, -1.0, 1.0, out=layer.weights)
    return loss


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    test_accuracy: float | None = None


@dataclass
class TrainResult:
    model: NetworkModel
    history: list[EpochRecord] = field(default_factory=list)


def train(
    model: NetworkModel,
    dataset: Dataset,
    cfg: TrainConfig,
    test_set: Dataset | None = None,
    quantizer: WeightQuantizer | None = None,
    log_path=None,
) -> TrainResult:
    """Seeded shuffled mini-batch SGD; optionally logs quantized test accuracy.

    Deterministic given (model, dataset, cfg): the shuffle stream depends only
    on cfg.seed and gradient reductions have fixed order.
    """
    if len(dataset) == 0:
        raise TrainingError("empty training dataset")
    rng = np.random.default_rng(cfg.seed)
    result = TrainResult(model=model)
    rows = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(dataset))
        losses = []
        for start in range(0, len(dataset), cfg.batch_size):
            idx = order[start: start + cfg.batch_size]
            losses.append(sgd_step(model, dataset.images[idx], dataset.labels[idx], cfg))
        acc = None
        if test_set is not None:
            acc = evaluate_quantized(model, test_set, quantizer)
        rec = EpochRecord(epoch, float(np.mean(losses)), acc)
        result.history.append(rec)
        rows.append([rec.epoch, f"{rec.train_loss:.6f}",
                     "" if acc is None else f"{acc:.4f}"])
    if log_path is not None:
        with open(log_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_loss", "test_accuracy"])
            writer.writerows(rows)
    return result


def apply_weight_quantizer(model: NetworkModel, quantizer: WeightQuantizer) -> NetworkModel:
    """Copy of the model with every pair weight snapped onto the quantizer levels."""
    q = model.copy()
    for layer in q.mvm_layers:
        layer.weights = quantize_weight(layer.weights, quantizer)
    return q


def evaluate(
    model: NetworkModel,
    dataset: Dataset,
    quantize_io: bool = False,
    batch_size: int = 256,
    telemetry_sink=None,
) -> float:
    """Plain accuracy; ``telemetry_sink(layer_telemetry_list)`` sees every batch."""
    correct = 0
    for start in range(0, len(dataset), batch_size):
        sl = slice(start, start + batch_size)
        res = forward(model, dataset.images[sl], quantize=quantize_io,
                      collect_telemetry=telemetry_sink is not None)
        if telemetry_sink is not None:
            telemetry_sink(res.telemetry)
        correct += int(np.sum(np.argmax(res.scores, axis=1) == dataset.labels[sl]))
    return correct / len(dataset)


def evaluate_quantized(
    model: NetworkModel,
    dataset: Dataset,
    quantizer: WeightQuantizer | None = None,
    batch_size: int = 256,
    telemetry_sink=None,
) -> float:
    """Test-time accuracy with IO round-tripped through the converter and,
    when a quantizer is given, weights snapped to its level set."""
    m = apply_weight_quantizer(model, quantizer) if quantizer is not None else model
    return evaluate(m, dataset, quantize_io=True, batch_size=batch_size,
                    telemetry_sink=telemetry_sink)


def loss_gradient_wrt_states(model: NetworkModel, images, labels, state_override=None):
    """(loss, {layer: (dL/dS+, dL/dS-)}) with raw device states as parameters.

    Used by the finite-difference gradient checks.
    """
    images = np.asarray(images, dtype=model.dtype)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if images.ndim == len(model.input_shape):
        images = images[None]
    v_max = model.mvm_layers[-1].dta.v_max_volts
    result = forward(model, images, need_grad=True, trainable="states",
                     state_override=state_override)
    loss_node = _batch_loss_node(result, labels, v_max)
    grads = backward(result.tape, loss_node)
    out = {
        name: (np.asarray(grads[sp.node], dtype=float), np.asarray(grads[sm.node], dtype=float))
        for name, (sp, sm) in result.param_nodes.items()
    }
    return float(loss_node.value), out


def loss_at_states(model: NetworkModel, state_override: dict, images, labels) -> float:
    """Batch loss with explicit state matrices; the finite-difference probe."""
    images = np.asarray(images, dtype=model.dtype)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if images.ndim == len(model.input_shape):
        images = images[None]
    v_max = model.mvm_layers[-1].dta.v_max_volts
    result = forward(model, images, trainable="states", state_override=state_override)
    losses = [loss_value(result.scores[i], int(labels[i]), v_max)
              for i in range(labels.size)]
    return float(np.mean(losses))
