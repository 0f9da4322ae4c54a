"""Dense feed-forward classifier built directly on numpy.

Covers both experiment architectures (16/32/16 relu and 10/20/4 tanh with
a softmax head), categorical cross entropy, plain SGD with staircase
learning-rate decay, Adam, epoch shuffling, early stopping with snapshot
restore, and a versioned plain-text model format. Training is a single
deterministic sequence of mini-batch updates for a given seed.
"""

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import ComputeError, ValidationError
from .features import ScalingStats, apply_scaler
from .ingest import INVALID_LABEL, LabelMask

ACTIVATIONS = ("relu", "tanh", "softmax")
PROB_FLOOR = 1e-15

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

MODEL_VERSION = 1
_MODEL_MAGIC = "thermoseg-model v"


class ModelFormatError(ValidationError):
    pass


class ModelVersionError(ModelFormatError):
    pass


@dataclass(frozen=True)
class MlpModel:
    layer_sizes: tuple
    activations: tuple
    weights: tuple                # W_l is (n_in, n_out)
    biases: tuple
    stats: Optional[ScalingStats] = None
    version: int = MODEL_VERSION

    def __post_init__(self):
        sizes = self.layer_sizes
        if len(sizes) < 2 or any(s < 1 for s in sizes):
            raise ValidationError("need at least input and output layers")
        if len(self.activations) != len(sizes) - 1:
            raise ValidationError("one activation per trainable layer")
        for i, act in enumerate(self.activations):
            if act not in ACTIVATIONS:
                raise ValidationError(f"unknown activation {act!r}")
            if act == "softmax" and i != len(self.activations) - 1:
                raise ValidationError("softmax is only valid at the output")
        if self.activations[-1] != "softmax":
            raise ValidationError("output layer must be softmax")
        if len(self.weights) != len(sizes) - 1 or len(self.biases) != len(sizes) - 1:
            raise ValidationError("weight/bias count must match layer count")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (sizes[i], sizes[i + 1]) or b.shape != (sizes[i + 1],):
                raise ValidationError(f"layer {i} parameter shape mismatch")

    @property
    def input_size(self):
        return self.layer_sizes[0]

    @property
    def output_size(self):
        return self.layer_sizes[-1]


def param_count(model):
    return sum(w.size + b.size for w, b in zip(model.weights, model.biases))


def init_model(layer_sizes, activations, seed=0, stats=None):
    """Fan-balanced uniform weight init, zero biases."""
    rng = np.random.default_rng(seed)
    weights = []
    biases = []
    for n_in, n_out in zip(layer_sizes, layer_sizes[1:]):
        limit = math.sqrt(6.0 / (n_in + n_out))
        weights.append(rng.uniform(-limit, limit, size=(n_in, n_out)))
        biases.append(np.zeros(n_out))
    return MlpModel(tuple(layer_sizes), tuple(activations), tuple(weights),
                    tuple(biases), stats)


def _softmax(z):
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _forward_layers(model, x):
    """All layer outputs, input first; x must be (B, F)."""
    acts = [x]
    for w, b, kind in zip(model.weights, model.biases, model.activations):
        z = acts[-1] @ w + b
        if kind == "relu":
            acts.append(np.maximum(z, 0.0))
        elif kind == "tanh":
            acts.append(np.tanh(z))
        else:
            acts.append(_softmax(z))
    return acts


def forward(model, x):
    """Class probabilities for one vector (1-D) or a batch (2-D)."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    batch = x[None, :] if single else x
    if batch.ndim != 2 or batch.shape[1] != model.input_size:
        raise ValidationError(
            f"input width {batch.shape[-1]} does not match model input "
            f"{model.input_size}")
    if not all(np.isfinite(w).all() for w in model.weights):
        raise ComputeError("model weights are non-finite")
    probs = _forward_layers(model, batch)[-1]
    return probs[0] if single else probs


def loss(probs, labels):
    """Mean categorical cross entropy, probabilities floored at 1e-15.

    Labels may be class indices or one-hot rows.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.ndim == 1:
        probs = probs[None, :]
        if labels.ndim <= 1:
            labels = labels[None, ...]
    if labels.ndim == 2:          # one-hot form
        labels = labels.argmax(axis=1)
    picked = probs[np.arange(probs.shape[0]), labels]
    return float(np.mean(-np.log(np.maximum(picked, PROB_FLOOR))))


def accuracy(probs, labels):
    probs = np.asarray(probs)
    if probs.ndim == 1:
        probs = probs[None, :]
    return float(np.mean(probs.argmax(axis=1) == np.asarray(labels)))


def backward(model, batch_x, batch_labels):
    """Gradients of the mean batch loss for every weight and bias.

    Returns (weight_grads, bias_grads) matching model.weights/biases.
    """
    x = np.asarray(batch_x, dtype=np.float64)
    labels = np.asarray(batch_labels)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValidationError("batch must be a non-empty 2-D array")
    acts = _forward_layers(model, x)
    probs = acts[-1]
    if not np.isfinite(probs).all():
        raise ComputeError("non-finite activations in backward pass")
    n = x.shape[0]
    delta = probs.copy()
    delta[np.arange(n), labels] -= 1.0
    delta /= n

    weight_grads = [None] * len(model.weights)
    bias_grads = [None] * len(model.biases)
    for layer in range(len(model.weights) - 1, -1, -1):
        weight_grads[layer] = acts[layer].T @ delta
        bias_grads[layer] = delta.sum(axis=0)
        if layer > 0:
            delta = delta @ model.weights[layer].T
            a = acts[layer]
            if model.activations[layer - 1] == "relu":
                delta = delta * (a > 0.0)
            else:
                delta = delta * (1.0 - a * a)
    return weight_grads, bias_grads


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adam"       # adam | sgd-decay
    learning_rate: float = 1e-5
    decay_step: int = 1000
    decay_rate: float = 0.9
    batch_size: int = 2048
    epochs: int = 0               # 0 = unbounded, rely on max_steps
    max_steps: int = 0            # 0 = unbounded, rely on epochs
    early_stopping: Optional[tuple] = None  # (checks_apart, consecutive)
    trace_every: int = 0          # 0 = epoch boundaries when no early stop
    seed: int = 0

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd-decay"):
            raise ValidationError(f"unknown optimizer {self.optimizer!r}")
        if self.learning_rate <= 0:
            raise ValidationError("learning rate must be > 0")
        if self.batch_size < 1:
            raise ValidationError("batch size must be >= 1")
        if self.optimizer == "sgd-decay":
            if self.decay_step < 1 or not 0 < self.decay_rate <= 1:
                raise ValidationError("bad decay schedule")
        if self.early_stopping is not None:
            apart, runs = self.early_stopping
            if apart < 1 or runs < 1:
                raise ValidationError("bad early-stopping parameters")


def lr_at(config, step):
    """Learning rate before update number `step` (0-based)."""
    if step < 0:
        raise ValidationError("step must be >= 0")
    if config.optimizer == "sgd-decay":
        return config.learning_rate * config.decay_rate ** (step // config.decay_step)
    return config.learning_rate


class EarlyStopping:
    """Halt after N consecutive validation-loss increases between checks.

    Keeps a snapshot from the last check whose loss did not increase, so
    the caller can rewind past the whole degradation run.
    """

    def __init__(self, checks_apart, consecutive_increases):
        self.checks_apart = checks_apart
        self.consecutive_increases = consecutive_increases
        self.previous_loss = None
        self.increases = 0
        self.snapshot = None
        self.snapshot_step = None

    def update(self, step, val_loss, snapshot):
        """Record one check; returns True when training should halt."""
        if self.previous_loss is None or val_loss <= self.previous_loss:
            self.increases = 0
            self.snapshot = snapshot
            self.snapshot_step = step
        else:
            self.increases += 1
        self.previous_loss = val_loss
        return self.increases >= self.consecutive_increases


@dataclass
class TrainTrace:
    steps: list = field(default_factory=list)
    epochs: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    train_acc: list = field(default_factory=list)
    val_acc: list = field(default_factory=list)
    stop_reason: str = ""
    restored_step: Optional[int] = None

    def record(self, step, epoch, t_loss, v_loss, t_acc, v_acc):
        if self.steps and step <= self.steps[-1]:
            return False
        self.steps.append(step)
        self.epochs.append(epoch)
        self.train_loss.append(t_loss)
        self.val_loss.append(v_loss)
        self.train_acc.append(t_acc)
        self.val_acc.append(v_acc)
        return True


_EVAL_CAP = 4096


def evaluate(model, vectors, labels):
    probs = forward(model, vectors)
    return loss(probs, labels), accuracy(probs, labels)


def train(model, train_ds, val_ds, config):
    """Mini-batch training; returns (trained model, trace).

    Expects pre-scaled datasets. Non-finite losses abort. With early
    stopping on, a halt restores the snapshot taken before the losing
    streak began.
    """
    if train_ds.feature_count != model.input_size:
        raise ValidationError("training features do not match model input")
    if train_ds.class_count > model.output_size:
        raise ValidationError(
            f"{train_ds.class_count} classes exceed {model.output_size} outputs")
    if config.epochs <= 0 and config.max_steps <= 0:
        raise ValidationError("need a positive epoch or step budget")

    weights = [w.copy() for w in model.weights]
    biases = [b.copy() for b in model.biases]
    current = replace(model, weights=tuple(weights), biases=tuple(biases))

    if config.optimizer == "adam":
        m_w = [np.zeros_like(w) for w in weights]
        v_w = [np.zeros_like(w) for w in weights]
        m_b = [np.zeros_like(b) for b in biases]
        v_b = [np.zeros_like(b) for b in biases]

    stopper = (EarlyStopping(*config.early_stopping)
               if config.early_stopping else None)
    n = train_ds.size
    steps_per_epoch = (n + config.batch_size - 1) // config.batch_size
    if stopper is not None:
        check_every = stopper.checks_apart
    elif config.trace_every > 0:
        check_every = config.trace_every
    else:
        check_every = steps_per_epoch

    eval_x = train_ds.vectors[:_EVAL_CAP]
    eval_y = train_ds.labels[:_EVAL_CAP]
    rng = np.random.default_rng(config.seed)
    trace = TrainTrace()

    def snapshot():
        return ([w.copy() for w in weights], [b.copy() for b in biases])

    def run_check(step, epoch):
        t_loss, t_acc = evaluate(current, eval_x, eval_y)
        v_loss, v_acc = evaluate(current, val_ds.vectors, val_ds.labels)
        if not (math.isfinite(t_loss) and math.isfinite(v_loss)):
            raise ComputeError(f"non-finite loss at step {step}")
        trace.record(step, epoch, t_loss, v_loss, t_acc, v_acc)
        if stopper is not None and stopper.update(step, v_loss, snapshot()):
            return True
        return False

    step = 0
    epoch = 0
    halted = False
    while not halted:
        if config.epochs > 0 and epoch >= config.epochs:
            trace.stop_reason = "epoch-budget"
            break
        if config.max_steps > 0 and step >= config.max_steps:
            trace.stop_reason = "step-budget"
            break
        order = rng.permutation(n)
        for lo in range(0, n, config.batch_size):
            idx = order[lo:lo + config.batch_size]
            grads_w, grads_b = backward(current, train_ds.vectors[idx],
                                        train_ds.labels[idx])
            if config.optimizer == "adam":
                t = step + 1
                corr1 = 1.0 - ADAM_BETA1 ** t
                corr2 = 1.0 - ADAM_BETA2 ** t
                for i in range(len(weights)):
                    for param, grad, m1, v2 in (
                            (weights[i], grads_w[i], m_w[i], v_w[i]),
                            (biases[i], grads_b[i], m_b[i], v_b[i])):
                        m1 *= ADAM_BETA1
                        m1 += (1.0 - ADAM_BETA1) * grad
                        v2 *= ADAM_BETA2
                        v2 += (1.0 - ADAM_BETA2) * grad * grad
                        param -= (config.learning_rate * (m1 / corr1)
                                  / (np.sqrt(v2 / corr2) + ADAM_EPS))
            else:
                rate = lr_at(config, step)
                for i in range(len(weights)):
                    weights[i] -= rate * grads_w[i]
                    biases[i] -= rate * grads_b[i]
            step += 1
            if step % check_every == 0 and run_check(step, epoch):
                trace.stop_reason = "early-stopping"
                halted = True
                break
            if config.max_steps > 0 and step >= config.max_steps:
                break
        epoch += 1

    if not trace.stop_reason:
        trace.stop_reason = "step-budget"
    if halted and stopper is not None and stopper.snapshot is not None:
        snap_w, snap_b = stopper.snapshot
        weights[:] = snap_w
        biases[:] = snap_b
        trace.restored_step = stopper.snapshot_step
    if not (trace.steps and trace.steps[-1] == step):
        t_loss, t_acc = evaluate(current, eval_x, eval_y)
        v_loss, v_acc = evaluate(current, val_ds.vectors, val_ds.labels)
        trace.record(step, epoch, t_loss, v_loss, t_acc, v_acc)

    final = replace(model, weights=tuple(w.copy() for w in weights),
                    biases=tuple(b.copy() for b in biases))
    return final, trace


def predict_map(model, image, stats=None):
    """Per-pixel argmax class map; invalid pixels stay invalid."""
    stats = stats if stats is not None else model.stats
    if stats is None:
        raise ValidationError("prediction needs scaling statistics")
    if image.feature_count != model.input_size:
        raise ValidationError(
            f"feature image width {image.feature_count} does not match "
            f"model input {model.input_size}")
    flat = image.values.reshape(-1, image.feature_count)
    denom = np.where(stats.std == 0.0, 1.0, stats.std)
    scaled = (flat - stats.mean) / denom
    scaled[:, stats.constant] = 0.0
    labels = np.full(flat.shape[0], INVALID_LABEL, dtype=np.int64)
    flags = image.valid.reshape(-1)
    idx = np.nonzero(flags)[0]
    for lo in range(0, idx.shape[0], 65536):
        sub = idx[lo:lo + 65536]
        labels[sub] = forward(model, scaled[sub]).argmax(axis=1)
    return LabelMask(image.width, image.height,
                     labels.reshape(image.height, image.width),
                     flags.reshape(image.height, image.width).copy())


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def save_model(model, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{_MODEL_MAGIC}{model.version}\n")
        fh.write("layers = " + " ".join(str(s) for s in model.layer_sizes) + "\n")
        fh.write("activations = " + " ".join(model.activations) + "\n")
        fh.write(f"scaling = {int(model.stats is not None)}\n")
        if model.stats is not None:
            fh.write("mean = " + " ".join("%.17g" % v for v in model.stats.mean) + "\n")
            fh.write("std = " + " ".join("%.17g" % v for v in model.stats.std) + "\n")
        for i, (w, b) in enumerate(zip(model.weights, model.biases)):
            fh.write(f"layer {i}\n")
            for row in w:
                fh.write(",".join("%.17g" % v for v in row) + "\n")
            fh.write("bias\n")
            fh.write(",".join("%.17g" % v for v in b) + "\n")
        fh.write("end\n")


def _expect(fh, path, want):
    line = fh.readline()
    if line.rstrip("\n") != want:
        raise ModelFormatError(f"{path}: expected {want!r}, got {line!r}")


def _floats(line, path, count):
    parts = line.rstrip("\n").split(",")
    if len(parts) != count:
        raise ModelFormatError(f"{path}: expected {count} values per row")
    try:
        return [float(v) for v in parts]
    except ValueError as exc:
        raise ModelFormatError(f"{path}: {exc}") from exc


def load_model(path):
    try:
        fh = open(path, "r", encoding="utf-8")
    except OSError as exc:
        raise ModelFormatError(f"cannot read model {path}: {exc}") from exc
    with fh:
        magic = fh.readline().rstrip("\n")
        if not magic.startswith(_MODEL_MAGIC):
            raise ModelFormatError(f"{path}: not a model file")
        try:
            version = int(magic[len(_MODEL_MAGIC):])
        except ValueError as exc:
            raise ModelFormatError(f"{path}: bad version line") from exc
        if version != MODEL_VERSION:
            raise ModelVersionError(
                f"{path}: model version {version} is not supported "
                f"(expected {MODEL_VERSION})")

        def keyval(key):
            line = fh.readline()
            head, _, value = line.partition("=")
            if head.strip() != key:
                raise ModelFormatError(f"{path}: expected {key}")
            return value.strip()

        try:
            sizes = tuple(int(v) for v in keyval("layers").split())
            activations = tuple(keyval("activations").split())
            has_scaling = int(keyval("scaling"))
        except ValueError as exc:
            raise ModelFormatError(f"{path}: bad header: {exc}") from exc
        stats = None
        if has_scaling:
            try:
                mean = np.array([float(v) for v in keyval("mean").split()])
                std = np.array([float(v) for v in keyval("std").split()])
            except ValueError as exc:
                raise ModelFormatError(f"{path}: bad scaling row: {exc}") from exc
            stats = ScalingStats(mean, std)
        weights = []
        biases = []
        for i, (n_in, n_out) in enumerate(zip(sizes, sizes[1:])):
            _expect(fh, path, f"layer {i}")
            w = np.empty((n_in, n_out))
            for r in range(n_in):
                w[r] = _floats(fh.readline(), path, n_out)
            _expect(fh, path, "bias")
            b = np.array(_floats(fh.readline(), path, n_out))
            weights.append(w)
            biases.append(b)
        _expect(fh, path, "end")
    try:
        return MlpModel(sizes, activations, tuple(weights), tuple(biases), stats)
    except ValidationError as exc:
        raise ModelFormatError(f"{path}: inconsistent model: {exc}") from exc


def write_trace(trace, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("step,epoch,train_loss,val_loss,train_acc,val_acc\n")
        for i in range(len(trace.steps)):
            fh.write(f"{trace.steps[i]},{trace.epochs[i]},"
                     f"{trace.train_loss[i]:.9g},{trace.val_loss[i]:.9g},"
                     f"{trace.train_acc[i]:.9g},{trace.val_acc[i]:.9g}\n")
        fh.write(f"# stop: {trace.stop_reason}\n")
