"""The classifier under attack: a small convolutional net with clean and
poisoned training paths.

Poisoned training clones a seeded fraction of the benign set, stamps the
trigger onto the clones, relabels them to the attack target, and trains
on the union, so the minimized objective is the sum of the clean-sample
and poison-sample cross-entropy terms.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np

from . import checkpoint
from .data import NUM_CLASSES, Dataset
from .grad import Tape, Tensor, gradient, gradients

INPUT_SHAPE = (28, 28, 1)

DESK_ARCH = [
    {"layer": "conv", "name": "conv1", "filters": 8, "kernel": 3},
    {"layer": "relu"},
    {"layer": "maxpool2"},
    {"layer": "conv", "name": "conv2", "filters": 16, "kernel": 3},
    {"layer": "relu"},
    {"layer": "maxpool2"},
    {"layer": "flatten"},
    {"layer": "dense", "name": "dense", "units": NUM_CLASSES},
]


class ModelError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 4
    batch_size: int = 64
    learning_rate: float = 0.08
    seed: int = 0

    def __post_init__(self):
        if self.epochs <= 0 or self.batch_size <= 0 or self.learning_rate <= 0:
            raise ValueError("epochs, batch size and learning rate must be positive")


@dataclass
class PoisonSpec:
    target_label: int = 0
    rate: float = 0.10
    trigger: object = None  # TriggerSpec; stamped via the attack module

    def __post_init__(self):
        if not 0.0 <= self.rate <= 1.0:
            raise ValueError(f"poisoning rate {self.rate} outside [0, 1]")
        if not 0 <= self.target_label < NUM_CLASSES:
            raise ValueError(f"target label {self.target_label} outside [0, {NUM_CLASSES})")


@dataclass
class ModelParams:
    arch: list
    weights: dict[str, np.ndarray]
    class_count: int = NUM_CLASSES

    def digest_bytes(self) -> bytes:
        return b"".join(np.ascontiguousarray(self.weights[n], dtype="<f8").tobytes()
                        for n in sorted(self.weights))


def shape_flow(arch, input_shape=INPUT_SHAPE):
    """Walk the architecture descriptor, returning (weight shapes, final units)."""
    h, w, c = input_shape
    shapes: dict[str, tuple] = {}
    for layer in arch:
        kind = layer["layer"]
        if kind == "conv":
            k, f = layer["kernel"], layer["filters"]
            shapes[layer["name"] + "_w"] = (k, k, c, f)
            shapes[layer["name"] + "_b"] = (f,)
            h, w, c = h - k + 1, w - k + 1, f
        elif kind == "maxpool2":
            h, w = h // 2, w // 2
        elif kind == "flatten":
            h, w, c = 1, 1, h * w * c
        elif kind == "dense":
            shapes[layer["name"] + "_w"] = (c, layer["units"])
            shapes[layer["name"] + "_b"] = (layer["units"],)
            c = layer["units"]
        elif kind != "relu":
            raise ModelError(f"unknown layer kind {kind!r}")
    return shapes, c


def _init_weights(arch, rng) -> dict[str, np.ndarray]:
    shapes, units = shape_flow(arch)
    if units != NUM_CLASSES:
        raise ModelError(f"architecture ends in {units} units, expected {NUM_CLASSES}")
    weights = {}
    for name, shape in shapes.items():
        if name.endswith("_b"):
            weights[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[:-1]))
            weights[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), shape)
    return weights


def init_params(seed: int, arch=None) -> ModelParams:
    arch = arch if arch is not None else DESK_ARCH
    return ModelParams(arch=arch, weights=_init_weights(arch, np.random.default_rng(seed)))


def forward_logits(tape: Tape, params: ModelParams, x: Tensor) -> Tensor:
    """Run the descriptor-driven forward pass for a batch (N,H,W,C)."""
    h = x
    wt = {name: Tensor(arr) for name, arr in params.weights.items()}
    for layer in params.arch:
        kind = layer["layer"]
        if kind == "conv":
            h = tape.bias_add(tape.conv2d(h, wt[layer["name"] + "_w"]),
                              wt[layer["name"] + "_b"])
        elif kind == "relu":
            h = tape.relu(h)
        elif kind == "maxpool2":
            h = tape.maxpool2(h)
        elif kind == "flatten":
            h = tape.reshape(h, (h.shape[0], h.size // h.shape[0]))
        elif kind == "dense":
            h = tape.bias_add(tape.matmul(h, wt[layer["name"] + "_w"]),
                              wt[layer["name"] + "_b"])
    return h, wt


def predict_batch(params: ModelParams, images: np.ndarray,
                  chunk: int = 512) -> np.ndarray:
    out = []
    for start in range(0, len(images), chunk):
        logits, _ = forward_logits(Tape(), params, Tensor(images[start : start + chunk]))
        out.append(np.argmax(logits.array, axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def predict(params: ModelParams, image: np.ndarray):
    """Classify one image. Ties break toward the lowest class index."""
    image = np.asarray(image, dtype=np.float64)
    if image.shape != tuple(INPUT_SHAPE):
        raise ModelError(f"image shape {image.shape} does not match input {INPUT_SHAPE}")
    logits, _ = forward_logits(Tape(), params, Tensor(image[None]))
    row = logits.array[0]
    return int(np.argmax(row)), row


def loss(params: ModelParams, image: np.ndarray, label: int) -> float:
    """Cross-entropy of softmax(logits) at `label` for one image."""
    if not 0 <= int(label) < params.class_count:
        raise ModelError(f"label {label} outside [0, {params.class_count})")
    image = np.asarray(image, dtype=np.float64)
    if image.shape != tuple(INPUT_SHAPE):
        raise ModelError(f"image shape {image.shape} does not match input {INPUT_SHAPE}")
    tape = Tape()
    logits, _ = forward_logits(tape, params, Tensor(image[None]))
    return tape.softmax_cross_entropy(logits, [int(label)]).item()


def input_gradient(params: ModelParams, image: np.ndarray, label: int) -> np.ndarray:
    """Gradient of the single-sample cross-entropy with respect to the image."""
    tape = Tape()
    x = Tensor(np.asarray(image, dtype=np.float64)[None])
    tape.watch(x)
    logits, _ = forward_logits(tape, params, x)
    ce = tape.softmax_cross_entropy(logits, [int(label)])
    return gradient(tape, ce, x).array[0]


def _poisoned_training_arrays(data: Dataset, poison: PoisonSpec, rng):
    from .attacks import apply_trigger  # local import to avoid a cycle

    count = int(np.floor(poison.rate * len(data)))
    if count == 0:
        warnings.warn("poisoning requested but rate*|D| floors to zero; training clean")
        return data.images, data.labels, 0
    picks = rng.choice(len(data), size=count, replace=False)
    clones = np.stack([apply_trigger(data.images[i], poison.trigger) for i in picks])
    images = np.concatenate([data.images, clones])
    labels = np.concatenate([data.labels,
                             np.full(count, poison.target_label, dtype=np.int64)])
    return images, labels, count


def train(data: Dataset, cfg: TrainConfig, poison: PoisonSpec | None = None,
          initial: ModelParams | None = None):
    """Minibatch SGD on cross-entropy. Returns (ModelParams, per-epoch log).

    With a PoisonSpec, floor(rate * |D|) seeded clones are triggered,
    relabeled to the target class, and appended before training. The log
    rows carry (epoch, loss, clean_acc) where clean_acc is measured on
    the benign samples only. `initial` continues training from existing
    weights instead of a seeded init.
    """
    if len(data) == 0:
        raise ModelError("cannot train on an empty dataset")
    ss = np.random.SeedSequence(cfg.seed)
    init_ss, shuffle_ss, poison_ss = ss.spawn(3)
    if initial is not None:
        params = ModelParams(arch=initial.arch,
                             weights={n: w.copy() for n, w in initial.weights.items()},
                             class_count=initial.class_count)
    else:
        params = ModelParams(arch=DESK_ARCH,
                             weights=_init_weights(DESK_ARCH, np.random.default_rng(init_ss)))
    images, labels = data.images, data.labels
    if poison is not None:
        images, labels, _ = _poisoned_training_arrays(
            data, poison, np.random.default_rng(poison_ss))
    shuffle_rng = np.random.default_rng(shuffle_ss)
    log = []
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(len(images))
        batch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            tape = Tape()
            logits, wt = forward_logits(tape, params, Tensor(images[idx]))
            ce = tape.softmax_cross_entropy(logits, labels[idx])
            batch_losses.append(ce.item())
            names = list(wt)
            for name, g in zip(names, gradients(tape, ce, [wt[n] for n in names])):
                params.weights[name] = params.weights[name] - cfg.learning_rate * g.array
        clean_acc = float(np.mean(predict_batch(params, data.images) == data.labels))
        log.append({"epoch": epoch, "loss": float(np.mean(batch_losses)),
                    "clean_acc": clean_acc})
    return params, log


def dataset_loss(params: ModelParams, data: Dataset) -> float:
    """Independent mean cross-entropy over a dataset (no training machinery)."""
    return float(np.mean([loss(params, img, lab)
                          for img, lab in zip(data.images, data.labels)]))


def write_train_log(path, log):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["epoch", "loss", "clean_acc"])
        writer.writeheader()
        writer.writerows(log)


def save_model(path, params: ModelParams):
    checkpoint.save_checkpoint(path, "classifier", params.arch, params.weights,
                               extra={"class_count": params.class_count})


def load_model(path) -> ModelParams:
    kind, arch, weights, extra = checkpoint.load_checkpoint(path)
    if kind != "classifier":
        raise ModelError(f"{path} holds a {kind!r} checkpoint, not a classifier")
    return ModelParams(arch=arch, weights=weights,
                       class_count=int(extra.get("class_count", NUM_CLASSES)))
