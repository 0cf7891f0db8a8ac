"""Multi-task impact classifier: shared trunk, one 3-class head per horizon.

Plain numpy implementation: ReLU hidden layers, inverted dropout on the
shared trunk, softmax heads trained with weighted cross-entropy (adaptive
moment estimation by default), early stopping on the aggregate validation
loss with best-epoch restore. Single-task ablations reuse the same machinery
with exactly one head, and share the trunk/head init streams so a multi-task
run with one nonzero task weight is bit-for-bit equivalent.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .corpus import HORIZONS, Horizon, ImpactClass
from .indicators import N_FEATURES, Standardizer
from .metrics import confusion_from_predictions, overall_metrics, stratified_kfold
from .seeding import derive_seed, derived_rng

MISSING_LABEL = -1

DEFAULT_HEAD_WIDTHS: dict[Horizon, tuple[int, ...]] = {
    Horizon.SHORT: (64, 32),
    Horizon.MID: (64,),
    Horizon.LONG: (64, 32),
}


@dataclass(frozen=True)
class NetworkConfig:
    input_dim: int = N_FEATURES
    shared_layer_widths: tuple[int, ...] = (128, 64)
    task_head_widths: Mapping[Horizon, tuple[int, ...]] = field(
        default_factory=lambda: dict(DEFAULT_HEAD_WIDTHS)
    )
    classes_per_task: int = 3
    shared_dropout_rate: float = 0.5
    seed: int = 0

    def __post_init__(self) -> None:
        if self.input_dim < 1:
            raise ValueError("input_dim must be positive")
        widths = list(self.shared_layer_widths)
        for ws in self.task_head_widths.values():
            widths.extend(ws)
        if any(w < 1 for w in widths):
            raise ValueError("layer widths must be positive")
        if not self.task_head_widths:
            raise ValueError("at least one task head is required")
        if not 0.0 <= self.shared_dropout_rate < 1.0:
            raise ValueError("dropout rate must be in [0, 1)")

    @property
    def tasks(self) -> tuple[Horizon, ...]:
        return tuple(h for h in HORIZONS if h in self.task_head_widths)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 200
    early_stop_patience: int = 10
    task_loss_weights: Mapping[Horizon, float] = field(
        default_factory=lambda: {h: 1.0 for h in HORIZONS}
    )
    validation_fraction: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-7
    optimizer: str = "adam"
    class_weighting: bool = False
    val_stratify_task: Optional[Horizon] = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.early_stop_patience < 0:
            raise ValueError("early_stop_patience must be >= 0")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must be in (0, 1)")
        weights = list(self.task_loss_weights.values())
        if any(w < 0 for w in weights) or not any(w > 0 for w in weights):
            raise ValueError("task weights must be >= 0 with at least one > 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def weight(self, task: Horizon) -> float:
        return float(self.task_loss_weights.get(task, 0.0))


@dataclass
class DenseLayer:
    W: np.ndarray  # (fan_in, fan_out)
    b: np.ndarray  # (fan_out,)


@dataclass(frozen=True)
class TaskOutput:
    logits: np.ndarray
    probabilities: np.ndarray
    predicted_class: ImpactClass


@dataclass
class EpochStats:
    epoch: int
    train_loss_total: float
    val_loss_total: float
    train_loss_per_task: dict[Horizon, float]
    val_loss_per_task: dict[Horizon, float]


@dataclass
class MtlModel:
    config: NetworkConfig
    shared: list[DenseLayer]
    heads: dict[Horizon, list[DenseLayer]]
    standardizer: Optional[Standardizer] = None
    history: list[EpochStats] = field(default_factory=list)

    @property
    def tasks(self) -> tuple[Horizon, ...]:
        return self.config.tasks

    def parameters(self) -> list[tuple[str, np.ndarray]]:
        """Flat (name, array) view in a fixed order; arrays are live views."""
        out = []
        for i, layer in enumerate(self.shared):
            out.append((f"shared.{i}.W", layer.W))
            out.append((f"shared.{i}.b", layer.b))
        for task in self.tasks:
            for i, layer in enumerate(self.heads[task]):
                out.append((f"head.{task.key}.{i}.W", layer.W))
                out.append((f"head.{task.key}.{i}.b", layer.b))
        return out

    def parameter_count(self) -> int:
        return sum(arr.size for _, arr in self.parameters())

    def copy_parameters(self) -> list[np.ndarray]:
        return [arr.copy() for _, arr in self.parameters()]

    def restore_parameters(self, saved: Sequence[np.ndarray]) -> None:
        for (_, arr), val in zip(self.parameters(), saved):
            arr[...] = val


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise stable softmax (max-logit subtraction)."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _he_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_network(config: NetworkConfig) -> MtlModel:
    """Variance-scaled symmetric init, zero biases, deterministic per seed.

    The trunk and each head draw from independent derived streams, so
    models that share a trunk configuration share its initial weights
    regardless of which heads exist.
    """
    shared = []
    rng = derived_rng(config.seed, "init", "shared")
    fan_in = config.input_dim
    for width in config.shared_layer_widths:
        shared.append(DenseLayer(W=_he_uniform(rng, fan_in, width), b=np.zeros(width)))
        fan_in = width
    trunk_out = fan_in

    heads = {}
    for task in config.tasks:
        rng = derived_rng(config.seed, "init", "head", task.key)
        layers = []
        fan_in = trunk_out
        for width in config.task_head_widths[task]:
            layers.append(DenseLayer(W=_he_uniform(rng, fan_in, width), b=np.zeros(width)))
            fan_in = width
        layers.append(
            DenseLayer(
                W=_he_uniform(rng, fan_in, config.classes_per_task),
                b=np.zeros(config.classes_per_task),
            )
        )
        heads[task] = layers
    return MtlModel(config=config, shared=shared, heads=heads)


# --------------------------------------------------------------------------
# forward / backward
# --------------------------------------------------------------------------

@dataclass
class _ForwardCache:
    shared_inputs: list[np.ndarray]  # input to each shared layer
    shared_pre: list[np.ndarray]  # pre-activation
    dropout_masks: list[Optional[np.ndarray]]
    trunk_out: np.ndarray
    head_inputs: dict[Horizon, list[np.ndarray]]
    head_pre: dict[Horizon, list[np.ndarray]]
    logits: dict[Horizon, np.ndarray]


def _forward_batch(
    model: MtlModel,
    X: np.ndarray,
    training: bool,
    dropout_rng: Optional[np.random.Generator] = None,
    tasks: Optional[Sequence[Horizon]] = None,
) -> _ForwardCache:
    rate = model.config.shared_dropout_rate
    use_dropout = training and rate > 0.0
    a = np.asarray(X, dtype=np.float64)
    shared_inputs, shared_pre, masks = [], [], []
    for layer in model.shared:
        shared_inputs.append(a)
        z = a @ layer.W + layer.b
        shared_pre.append(z)
        a = relu(z)
        if use_dropout:
            mask = (dropout_rng.random(a.shape) >= rate) / (1.0 - rate)
            a = a * mask
            masks.append(mask)
        else:
            masks.append(None)
    trunk_out = a

    head_inputs: dict[Horizon, list[np.ndarray]] = {}
    head_pre: dict[Horizon, list[np.ndarray]] = {}
    logits: dict[Horizon, np.ndarray] = {}
    for task in tasks if tasks is not None else model.tasks:
        a = trunk_out
        inputs, pres = [], []
        layers = model.heads[task]
        for layer in layers[:-1]:
            inputs.append(a)
            z = a @ layer.W + layer.b
            pres.append(z)
            a = relu(z)
        inputs.append(a)
        logits[task] = a @ layers[-1].W + layers[-1].b
        head_inputs[task] = inputs
        head_pre[task] = pres
    return _ForwardCache(
        shared_inputs=shared_inputs,
        shared_pre=shared_pre,
        dropout_masks=masks,
        trunk_out=trunk_out,
        head_inputs=head_inputs,
        head_pre=head_pre,
        logits=logits,
    )


def forward(
    model: MtlModel, x: np.ndarray, training: bool = False,
    dropout_rng: Optional[np.random.Generator] = None,
) -> dict[Horizon, TaskOutput]:
    """Run one standardized feature vector through every task head."""
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite model input")
    if training and model.config.shared_dropout_rate > 0 and dropout_rng is None:
        dropout_rng = derived_rng(model.config.seed, "dropout", "adhoc")
    cache = _forward_batch(model, x, training, dropout_rng)
    out = {}
    for task in model.tasks:
        logits = cache.logits[task][0]
        probs = softmax(logits)
        out[task] = TaskOutput(
            logits=logits,
            probabilities=probs,
            predicted_class=ImpactClass(int(np.argmax(probs))),
        )
    return out


def predict(model: MtlModel, x: np.ndarray) -> dict[Horizon, ImpactClass]:
    """Most probable class per task; ties go to the lowest class index."""
    return {task: out.predicted_class for task, out in forward(model, x).items()}


def predict_batch(
    model: MtlModel, X: np.ndarray, tasks: Optional[Sequence[Horizon]] = None
) -> dict[Horizon, np.ndarray]:
    cache = _forward_batch(model, X, training=False, tasks=tasks)
    return {
        task: np.argmax(logits, axis=1) for task, logits in cache.logits.items()
    }


def predict_proba(model: MtlModel, X: np.ndarray, task: Horizon) -> np.ndarray:
    """(n, 3) class probabilities for one task."""
    cache = _forward_batch(model, X, training=False, tasks=(task,))
    return softmax(cache.logits[task])


def multi_task_loss(
    outputs: Mapping[Horizon, TaskOutput],
    labels: Mapping[Horizon, ImpactClass],
    weights: Mapping[Horizon, float],
) -> float:
    """Weighted sum over tasks of cross-entropy, for one instance.

    Computed from logits via log-softmax so a confident wrong prediction
    never produces log(0).
    """
    total = 0.0
    for task, w in weights.items():
        if w == 0.0:
            continue
        if task not in labels:
            raise ValueError(f"missing label for weighted task {task.key}")
        logp = log_softmax(outputs[task].logits)
        total += w * -float(logp[int(labels[task])])
    return total


def _batch_task_losses(
    logits: dict[Horizon, np.ndarray],
    labels: Mapping[Horizon, np.ndarray],
    tasks: Sequence[Horizon],
    class_weights: Optional[Mapping[Horizon, np.ndarray]] = None,
) -> dict[Horizon, float]:
    """Per-task mean cross-entropy over instances with a label (not -1)."""
    out = {}
    for task in tasks:
        y = labels[task]
        valid = y != MISSING_LABEL
        if not valid.any():
            out[task] = 0.0
            continue
        logp = log_softmax(logits[task][valid])
        ce = -logp[np.arange(valid.sum()), y[valid]]
        if class_weights is not None and task in class_weights:
            w = class_weights[task][y[valid]]
            out[task] = float((ce * w).sum() / w.sum())
        else:
            out[task] = float(ce.mean())
    return out


def _backward_batch(
    model: MtlModel,
    cache: _ForwardCache,
    labels: Mapping[Horizon, np.ndarray],
    weights: Mapping[Horizon, float],
    tasks: Sequence[Horizon],
    class_weights: Optional[Mapping[Horizon, np.ndarray]] = None,
) -> dict[str, np.ndarray]:
    """Gradients of the weighted multi-task batch loss w.r.t. every parameter."""
    grads: dict[str, np.ndarray] = {
        name: np.zeros_like(arr) for name, arr in model.parameters()
    }
    d_trunk = np.zeros_like(cache.trunk_out)

    for task in tasks:
        w_task = float(weights.get(task, 0.0))
        if w_task == 0.0:
            continue
        y = labels[task]
        valid = y != MISSING_LABEL
        n_valid = int(valid.sum())
        if n_valid == 0:
            continue
        probs = softmax(cache.logits[task])
        dlogits = probs.copy()
        rows = np.flatnonzero(valid)
        dlogits[rows, y[valid]] -= 1.0
        if class_weights is not None and task in class_weights:
            w_inst = np.zeros(len(y))
            w_inst[rows] = class_weights[task][y[valid]]
            dlogits *= (w_task / w_inst.sum()) * w_inst[:, None]
        else:
            dlogits[~valid] = 0.0
            dlogits *= w_task / n_valid

        layers = model.heads[task]
        delta = dlogits
        for i in range(len(layers) - 1, -1, -1):
            a_in = cache.head_inputs[task][i]
            grads[f"head.{task.key}.{i}.W"] += a_in.T @ delta
            grads[f"head.{task.key}.{i}.b"] += delta.sum(axis=0)
            delta = delta @ layers[i].W.T
            if i > 0:
                delta = delta * (cache.head_pre[task][i - 1] > 0)
        d_trunk = d_trunk + delta

    delta = d_trunk
    for i in range(len(model.shared) - 1, -1, -1):
        mask = cache.dropout_masks[i]
        if mask is not None:
            delta = delta * mask
        delta = delta * (cache.shared_pre[i] > 0)
        grads[f"shared.{i}.W"] += cache.shared_inputs[i].T @ delta
        grads[f"shared.{i}.b"] += delta.sum(axis=0)
        if i > 0:
            delta = delta @ model.shared[i].W.T
    return grads


def batch_loss(
    model: MtlModel,
    X: np.ndarray,
    labels: Mapping[Horizon, np.ndarray],
    cfg: TrainConfig,
    training: bool = False,
    dropout_rng: Optional[np.random.Generator] = None,
    class_weights: Optional[Mapping[Horizon, np.ndarray]] = None,
) -> float:
    tasks = [t for t in model.tasks if cfg.weight(t) > 0]
    cache = _forward_batch(model, X, training, dropout_rng, tasks=tasks)
    per_task = _batch_task_losses(cache.logits, labels, tasks, class_weights)
    return sum(cfg.weight(t) * per_task[t] for t in tasks)


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------

class _Adam:
    def __init__(self, params: list[tuple[str, np.ndarray]], cfg: TrainConfig):
        self.cfg = cfg
        self.m = {name: np.zeros_like(arr) for name, arr in params}
        self.v = {name: np.zeros_like(arr) for name, arr in params}
        self.t = 0

    def step(self, params: list[tuple[str, np.ndarray]], grads: dict[str, np.ndarray]) -> None:
        cfg = self.cfg
        self.t += 1
        b1c = 1.0 - cfg.beta1 ** self.t
        b2c = 1.0 - cfg.beta2 ** self.t
        for name, arr in params:
            g = grads[name]
            if cfg.optimizer == "sgd":
                arr -= cfg.learning_rate * g
                continue
            m = self.m[name]
            v = self.v[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            arr -= cfg.learning_rate * (m / b1c) / (np.sqrt(v / b2c) + cfg.epsilon)


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

def _stratified_split(
    labels: np.ndarray, fraction: float, seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """(train_idx, val_idx); per-label proportional sampling, >=1 per label."""
    rng = np.random.default_rng(seed)
    val: list[int] = []
    for lab in np.unique(labels):
        members = np.flatnonzero(labels == lab)
        members = members[rng.permutation(len(members))]
        n_val = max(1, int(round(fraction * len(members)))) if len(members) > 1 else 0
        val.extend(members[:n_val].tolist())
    val_idx = np.array(sorted(val), dtype=np.int64)
    train_idx = np.setdiff1d(np.arange(len(labels)), val_idx)
    return train_idx, val_idx


def _as_label_arrays(
    labels: Mapping[Horizon, Sequence[int]], tasks: Sequence[Horizon], n: int
) -> dict[Horizon, np.ndarray]:
    out = {}
    for task in tasks:
        if task not in labels:
            raise ValueError(f"missing labels for task {task.key}")
        y = np.asarray(labels[task], dtype=np.int64)
        if y.shape != (n,):
            raise ValueError(f"labels for {task.key} must have length {n}")
        out[task] = y
    return out


def _inverse_frequency_weights(y: np.ndarray) -> np.ndarray:
    counts = np.bincount(y[y != MISSING_LABEL], minlength=3).astype(np.float64)
    weights = np.where(counts > 0, 1.0, 0.0)
    weights[counts > 0] = counts[counts > 0].sum() / (3.0 * counts[counts > 0])
    return weights


def train(
    model: MtlModel,
    X: np.ndarray,
    labels: Mapping[Horizon, Sequence[int]],
    cfg: TrainConfig,
) -> MtlModel:
    """Mini-batch training with early stopping on weighted validation loss.

    ``labels`` maps each task to per-instance class indices; -1 excludes an
    instance from that task. Returns the same model object with the best
    validation epoch's parameters restored and the epoch history attached.
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if n < 2 * cfg.batch_size:
        raise ValueError(
            f"need at least {2 * cfg.batch_size} instances, got {n}"
        )
    tasks = [t for t in model.tasks if cfg.weight(t) > 0]
    if not tasks:
        raise ValueError("no task has positive weight")
    y = _as_label_arrays(labels, tasks, n)

    stratify_task = cfg.val_stratify_task
    if stratify_task is None or stratify_task not in tasks:
        stratify_task = Horizon.LONG if Horizon.LONG in tasks else tasks[-1]
    train_idx, val_idx = _stratified_split(
        y[stratify_task], cfg.validation_fraction, derive_seed(cfg.seed, "valsplit")
    )

    class_weights = None
    if cfg.class_weighting:
        class_weights = {
            task: _inverse_frequency_weights(y[task][train_idx]) for task in tasks
        }

    X_tr, X_val = X[train_idx], X[val_idx]
    y_tr = {t: y[t][train_idx] for t in tasks}
    y_val = {t: y[t][val_idx] for t in tasks}

    shuffle_rng = derived_rng(cfg.seed, "shuffle")
    dropout_rng = derived_rng(cfg.seed, "dropout")
    optimizer = _Adam(model.parameters(), cfg)

    best_val = math.inf
    best_params = model.copy_parameters()
    epochs_since_improve = 0
    model.history = []

    for epoch in range(cfg.max_epochs):
        order = shuffle_rng.permutation(len(X_tr))
        epoch_losses = {t: 0.0 for t in tasks}
        n_batches = 0
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            xb = X_tr[batch]
            yb = {t: y_tr[t][batch] for t in tasks}
            cache = _forward_batch(model, xb, True, dropout_rng, tasks=tasks)
            per_task = _batch_task_losses(cache.logits, yb, tasks, class_weights)
            total = sum(cfg.weight(t) * per_task[t] for t in tasks)
            if not math.isfinite(total):
                raise RuntimeError(
                    f"non-finite training loss at epoch {epoch}: {per_task}"
                )
            grads = _backward_batch(model, cache, yb, cfg.task_loss_weights, tasks, class_weights)
            optimizer.step(model.parameters(), grads)
            for t in tasks:
                epoch_losses[t] += per_task[t]
            n_batches += 1

        train_per_task = {t: epoch_losses[t] / n_batches for t in tasks}
        val_cache = _forward_batch(model, X_val, False, tasks=tasks)
        val_per_task = _batch_task_losses(val_cache.logits, y_val, tasks, class_weights)
        val_total = sum(cfg.weight(t) * val_per_task[t] for t in tasks)
        model.history.append(
            EpochStats(
                epoch=epoch,
                train_loss_total=sum(cfg.weight(t) * train_per_task[t] for t in tasks),
                val_loss_total=val_total,
                train_loss_per_task=train_per_task,
                val_loss_per_task=val_per_task,
            )
        )

        if val_total < best_val:
            best_val = val_total
            best_params = model.copy_parameters()
            epochs_since_improve = 0
        else:
            epochs_since_improve += 1
            if epochs_since_improve > cfg.early_stop_patience:
                break

    model.restore_parameters(best_params)
    return model


def train_stl(
    task: Horizon,
    X: np.ndarray,
    labels: Sequence[int],
    cfg: TrainConfig,
    network: Optional[NetworkConfig] = None,
) -> MtlModel:
    """Single-task ablation: same trunk, exactly one head, weight 1."""
    base = network if network is not None else NetworkConfig()
    single = replace(
        base, task_head_widths={task: tuple(base.task_head_widths[task])}
    )
    single_cfg = replace(
        cfg, task_loss_weights={task: 1.0}, val_stratify_task=task
    )
    model = init_network(single)
    return train(model, X, {task: labels}, single_cfg)


# --------------------------------------------------------------------------
# gradient checking
# --------------------------------------------------------------------------

def _kink_margin(model: MtlModel, X: np.ndarray, tasks: Sequence[Horizon]) -> float:
    """Smallest |pre-activation| over every rectifier in the network."""
    cache = _forward_batch(model, X, training=False, tasks=tasks)
    margins = [float(np.abs(z).min()) for z in cache.shared_pre]
    for t in tasks:
        margins.extend(float(np.abs(z).min()) for z in cache.head_pre[t])
    return min(margins) if margins else math.inf


def gradient_check(
    model: MtlModel,
    X: np.ndarray,
    labels: Mapping[Horizon, Sequence[int]],
    cfg: TrainConfig,
    n_coordinates: int = 200,
    step: float = 1e-5,
    seed: int = 0,
    jitter: float = 0.05,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Dropout must be disabled (the loss is otherwise stochastic). The loss is
    non-differentiable wherever a rectifier pre-activation is exactly zero
    (zero-init biases fed by an all-dead layer sit exactly there), so by
    default the check runs at a seeded jittered parameter point with a safe
    margin around every kink; the original parameters are restored. Set
    jitter=0 to check at the exact current point.
    """
    if model.config.shared_dropout_rate != 0.0:
        raise ValueError("gradient_check requires shared_dropout_rate == 0")
    X = np.asarray(X, dtype=np.float64)
    tasks = [t for t in model.tasks if cfg.weight(t) > 0]
    y = _as_label_arrays(labels, tasks, X.shape[0])

    saved = model.copy_parameters()
    try:
        if jitter > 0.0:
            margin_needed = 100.0 * step
            for attempt in range(50):
                rng_j = derived_rng(seed, "gradcheck", "jitter", str(attempt))
                for (_, arr), orig in zip(model.parameters(), saved):
                    arr[...] = orig + rng_j.normal(0.0, jitter, size=arr.shape)
                if _kink_margin(model, X, tasks) > margin_needed:
                    break
            else:
                raise RuntimeError("could not find a kink-free parameter point")

        cache = _forward_batch(model, X, training=False, tasks=tasks)
        grads = _backward_batch(model, cache, y, cfg.task_loss_weights, tasks)

        flat: list[tuple[str, int]] = []
        for name, arr in model.parameters():
            flat.extend((name, i) for i in range(arr.size))
        rng = np.random.default_rng(seed)
        n_coords = min(n_coordinates, len(flat))
        picks = rng.choice(len(flat), size=n_coords, replace=False)

        params = dict(model.parameters())
        max_rel = 0.0
        for p in picks:
            name, i = flat[int(p)]
            arr = params[name]
            orig = arr.flat[i]
            arr.flat[i] = orig + step
            loss_plus = batch_loss(model, X, y, cfg)
            arr.flat[i] = orig - step
            loss_minus = batch_loss(model, X, y, cfg)
            arr.flat[i] = orig
            g_num = (loss_plus - loss_minus) / (2.0 * step)
            g_ana = grads[name].flat[i]
            rel = abs(g_ana - g_num) / max(abs(g_ana), abs(g_num), 1e-8)
            max_rel = max(max_rel, rel)
        return max_rel
    finally:
        model.restore_parameters(saved)


# --------------------------------------------------------------------------
# grid search
# --------------------------------------------------------------------------

NETWORK_FIELDS = {
    "shared_layer_widths",
    "task_head_widths",
    "shared_dropout_rate",
    "input_dim",
}

TRAIN_FIELDS = {
    "learning_rate",
    "batch_size",
    "max_epochs",
    "early_stop_patience",
    "task_loss_weights",
    "validation_fraction",
    "optimizer",
    "class_weighting",
}


@dataclass(frozen=True)
class GridCell:
    assignment: tuple[tuple[str, object], ...]
    score: float
    fold_scores: tuple[float, ...]


@dataclass(frozen=True)
class GridSearchResult:
    best_network: NetworkConfig
    best_train: TrainConfig
    best_score: float
    cells: tuple[GridCell, ...]


def grid_search(
    space: Mapping[str, Sequence[object]],
    X: np.ndarray,
    labels: Mapping[Horizon, Sequence[int]],
    k: int,
    seed: int,
    base_network: Optional[NetworkConfig] = None,
    base_train: Optional[TrainConfig] = None,
    score_fn: Optional[Callable[[MtlModel, np.ndarray, Mapping[Horizon, np.ndarray]], float]] = None,
) -> GridSearchResult:
    """Exhaustive search over hyperparameter candidates.

    Every cell is scored by stratified k-fold cross-validation: the per-task
    macro-averaged per-class MCC is summed over tasks and averaged over
    folds. Ties keep the first cell in deterministic enumeration order (keys
    in the order given, candidates in list order).
    """
    if not space:
        raise ValueError("empty search space")
    if k < 2:
        raise ValueError("k must be >= 2")
    unknown = set(space) - NETWORK_FIELDS - TRAIN_FIELDS
    if unknown:
        raise ValueError(f"unknown hyperparameters: {sorted(unknown)}")

    base_network = base_network if base_network is not None else NetworkConfig()
    base_train = base_train if base_train is not None else TrainConfig()
    tasks = base_network.tasks
    n = np.asarray(X).shape[0]
    y = _as_label_arrays(labels, tasks, n)

    stratify_task = Horizon.LONG if Horizon.LONG in tasks else tasks[-1]
    stratify = [ImpactClass(int(v)) for v in y[stratify_task]]
    folds = stratified_kfold(stratify, k, derive_seed(seed, "gridsearch", "folds"))

    def default_score(model: MtlModel, X_test, y_test) -> float:
        preds = predict_batch(model, X_test)
        total = 0.0
        for task in model.tasks:
            actual = [ImpactClass(int(v)) for v in y_test[task]]
            predicted = [ImpactClass(int(v)) for v in preds[task]]
            cm = confusion_from_predictions(actual, predicted)
            total += overall_metrics(cm).macro.mcc
        return total

    scorer = score_fn if score_fn is not None else default_score

    keys = list(space.keys())
    cells: list[GridCell] = []
    best: Optional[tuple[float, int]] = None
    configs: list[tuple[NetworkConfig, TrainConfig]] = []
    for combo in itertools.product(*(space[k_] for k_ in keys)):
        assignment = tuple(zip(keys, combo))
        net_kwargs = {k_: v for k_, v in assignment if k_ in NETWORK_FIELDS}
        train_kwargs = {k_: v for k_, v in assignment if k_ in TRAIN_FIELDS}
        network = replace(base_network, **net_kwargs) if net_kwargs else base_network
        train_cfg = replace(base_train, **train_kwargs) if train_kwargs else base_train

        fold_scores = []
        for train_idx, test_idx in folds.splits():
            model = init_network(network)
            train(
                model,
                np.asarray(X)[train_idx],
                {t: y[t][train_idx] for t in tasks},
                train_cfg,
            )
            fold_scores.append(
                scorer(model, np.asarray(X)[test_idx], {t: y[t][test_idx] for t in tasks})
            )
        score = float(np.mean(fold_scores))
        cells.append(
            GridCell(assignment=assignment, score=score, fold_scores=tuple(fold_scores))
        )
        configs.append((network, train_cfg))
        if best is None or score > best[0]:
            best = (score, len(cells) - 1)

    best_score, best_i = best
    return GridSearchResult(
        best_network=configs[best_i][0],
        best_train=configs[best_i][1],
        best_score=best_score,
        cells=tuple(cells),
    )


# --------------------------------------------------------------------------
# checkpoint and training-log persistence
# --------------------------------------------------------------------------

CHECKPOINT_SCHEMA = "patimpact-checkpoint/1"


def _network_to_json(config: NetworkConfig) -> dict:
    return {
        "input_dim": config.input_dim,
        "shared_layer_widths": list(config.shared_layer_widths),
        "task_head_widths": {
            h.key: list(w) for h, w in config.task_head_widths.items()
        },
        "classes_per_task": config.classes_per_task,
        "shared_dropout_rate": config.shared_dropout_rate,
        "seed": config.seed,
    }


def _network_from_json(obj: dict) -> NetworkConfig:
    return NetworkConfig(
        input_dim=int(obj["input_dim"]),
        shared_layer_widths=tuple(obj["shared_layer_widths"]),
        task_head_widths={
            Horizon.from_key(k): tuple(v) for k, v in obj["task_head_widths"].items()
        },
        classes_per_task=int(obj["classes_per_task"]),
        shared_dropout_rate=float(obj["shared_dropout_rate"]),
        seed=int(obj["seed"]),
    )


def save_checkpoint(path, model: MtlModel) -> None:
    obj = {
        "schema": CHECKPOINT_SCHEMA,
        "network": _network_to_json(model.config),
        "standardizer": (
            model.standardizer.to_json_obj() if model.standardizer else None
        ),
        "parameters": [
            {"name": name, "shape": list(arr.shape), "data": arr.ravel().tolist()}
            for name, arr in model.parameters()
        ],
        "history": [
            {
                "epoch": e.epoch,
                "train_loss_total": e.train_loss_total,
                "val_loss_total": e.val_loss_total,
                "train_loss_per_task": {t.key: v for t, v in e.train_loss_per_task.items()},
                "val_loss_per_task": {t.key: v for t, v in e.val_loss_per_task.items()},
            }
            for e in model.history
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path) -> MtlModel:
    with open(path, "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    if obj.get("schema") != CHECKPOINT_SCHEMA:
        raise ValueError(f"unsupported checkpoint schema {obj.get('schema')!r}")
    model = init_network(_network_from_json(obj["network"]))
    by_name = {p["name"]: p for p in obj["parameters"]}
    for name, arr in model.parameters():
        saved = by_name[name]
        arr[...] = np.array(saved["data"]).reshape(saved["shape"])
    if obj.get("standardizer"):
        model.standardizer = Standardizer.from_json_obj(obj["standardizer"])
    model.history = [
        EpochStats(
            epoch=int(e["epoch"]),
            train_loss_total=float(e["train_loss_total"]),
            val_loss_total=float(e["val_loss_total"]),
            train_loss_per_task={
                Horizon.from_key(k): float(v) for k, v in e["train_loss_per_task"].items()
            },
            val_loss_per_task={
                Horizon.from_key(k): float(v) for k, v in e["val_loss_per_task"].items()
            },
        )
        for e in obj.get("history", [])
    ]
    return model


def export_training_log_csv(path, model: MtlModel) -> None:
    """CSV: epoch, total train/val losses, then per-task train/val losses."""
    tasks = model.tasks
    header = ["epoch", "train_loss_total", "val_loss_total"]
    header += [f"train_loss_{t.key}" for t in tasks]
    header += [f"val_loss_{t.key}" for t in tasks]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for e in model.history:
            row = [str(e.epoch), repr(e.train_loss_total), repr(e.val_loss_total)]
            row += [repr(e.train_loss_per_task.get(t, math.nan)) for t in tasks]
            row += [repr(e.val_loss_per_task.get(t, math.nan)) for t in tasks]
            fh.write(",".join(row) + "\n")
