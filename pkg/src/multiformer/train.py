"""Supervised training: loss, optimizer, batching, evaluation.

The loop is deliberately plain: seeded shuffles, one graph per batch,
AdamW with decoupled weight decay on matrix weights only, and a
tab-separated per-epoch metrics log so runs are byte-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import GradCheckReport, Tensor, grad_check
from .data import HsiCube, LabelRaster, extract_patch
from .exceptions import ContractError, TrainingDiverged
from .model import ModelConfig, Params, cast_params, forward, init_params, random_params


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 64
    learning_rate: float = 5e-4
    weight_decay: float = 5e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 0  # 0 = final checkpoint only
    cosine_schedule: bool = False

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ContractError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ContractError(f"batch_size must be >= 1, got {self.batch_size}")


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def cross_entropy(logits: Tensor, label: int) -> Tensor:
    """Negative log softmax probability of a 1-based class label.

    Computed in log space (log-sum-exp with max shift); the backward
    rule is softmax(logits) minus the label's one-hot vector.
    """
    if logits.data.ndim != 1:
        raise ContractError(f"cross_entropy: logits must be a vector, got shape {logits.shape}")
    k = logits.shape[0]
    if not 1 <= label <= k:
        raise ContractError(f"cross_entropy: label {label} outside 1..{k}")
    z = logits.data
    m = z.max()
    log_norm = m + np.log(np.exp(z - m).sum())
    loss = np.asarray(log_norm - z[label - 1], dtype=logits.dtype)

    def backward_fn(g):
        soft = np.exp(z - log_norm)
        soft[label - 1] -= 1.0
        return (g * soft,)

    return ad._result(loss, (logits,), backward_fn)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: Params) -> "AdamState":
        return cls(
            step=0,
            m={name: np.zeros_like(t.data) for name, t in params.items()},
            v={name: np.zeros_like(t.data) for name, t in params.items()},
        )


def weight_decay_applies(name: str) -> bool:
    """Decay matrix weights only: layer norms, biases, and fusion weights keep
    their scale-free/selector roles."""
    if name.startswith("scaf."):
        return False
    return name.rsplit(".", 1)[-1] not in ("bias", "beta", "gamma")


def adam_step(params: Params, state: AdamState, config: TrainConfig, learning_rate: float | None = None) -> None:
    """One AdamW update in place; missing grads count as zero."""
    lr = config.learning_rate if learning_rate is None else learning_rate
    state.step += 1
    t = state.step
    bc1 = 1.0 - config.beta1**t
    bc2 = 1.0 - config.beta2**t
    for name, tensor in params.items():
        g = tensor.grad
        if g is None:
            g = np.zeros_like(tensor.data)
        m = state.m[name]
        v = state.v[name]
        m *= config.beta1
        m += (1.0 - config.beta1) * g
        v *= config.beta2
        v += (1.0 - config.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + config.eps)
        tensor.data = tensor.data - lr * update
        if config.weight_decay and weight_decay_applies(name):
            tensor.data = tensor.data - lr * config.weight_decay * tensor.data


def _epoch_learning_rate(config: TrainConfig, epoch: int) -> float:
    if not config.cosine_schedule or config.epochs <= 1:
        return config.learning_rate
    progress = epoch / (config.epochs - 1) if config.epochs > 1 else 0.0
    return config.learning_rate * 0.5 * (1.0 + np.cos(np.pi * progress))


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class EpochStats:
    epoch: int
    loss: float
    train_acc: float
    test_oa: float | None = None

    def format(self) -> str:
        line = f"{self.epoch}\t{self.loss:.6f}\t{self.train_acc:.4f}"
        if self.test_oa is not None:
            line += f"\t{self.test_oa:.4f}"
        return line


def format_metrics_log(history: Sequence[EpochStats]) -> str:
    return "".join(stats.format() + "\n" for stats in history)


def fit_patches(
    params: Params,
    patches: np.ndarray,
    labels: np.ndarray,
    model_config: ModelConfig,
    train_config: TrainConfig,
    eval_patches: np.ndarray | None = None,
    eval_labels: np.ndarray | None = None,
) -> list[EpochStats]:
    """Train in place on (n, s, s, c) patches with 1-based labels."""
    n = len(patches)
    labels = np.asarray(labels, dtype=np.int64)
    rng = np.random.Generator(np.random.Philox(train_config.seed))
    state = AdamState.for_params(params)
    history: list[EpochStats] = []
    for epoch in range(1, train_config.epochs + 1):
        lr = _epoch_learning_rate(train_config, epoch - 1)
        order = rng.permutation(n)
        loss_sum = 0.0
        correct = 0
        for start in range(0, n, train_config.batch_size):
            batch = order[start : start + train_config.batch_size]
            ad.zero_grads(params)
            losses = []
            for i in batch:
                logits = forward(patches[i], params, model_config)
                if int(np.argmax(logits.data)) + 1 == labels[i]:
                    correct += 1
                losses.append(cross_entropy(logits, int(labels[i])))
            total = losses[0] if len(losses) == 1 else ad.add(losses[0], losses[1])
            for extra in losses[2:]:
                total = ad.add(total, extra)
            batch_loss = ad.scale(total, 1.0 / len(batch))
            value = float(batch_loss.data)
            if not np.isfinite(value):
                raise TrainingDiverged(f"non-finite loss {value} at epoch {epoch}, batch start {start}")
            loss_sum += value * len(batch)
            ad.backward(batch_loss)
            adam_step(params, state, train_config, learning_rate=lr)
        test_oa = None
        if eval_patches is not None and eval_labels is not None:
            preds = predict_patches(params, model_config, eval_patches)
            test_oa = float((preds == eval_labels).mean())
        history.append(EpochStats(epoch=epoch, loss=loss_sum / n, train_acc=correct / n, test_oa=test_oa))
    return history


def predict_patches(params: Params, model_config: ModelConfig, patches: np.ndarray) -> np.ndarray:
    """Argmax class per patch, ties broken toward the lowest class id."""
    preds = np.empty(len(patches), dtype=np.int64)
    for i, patch in enumerate(patches):
        logits = forward(patch, params, model_config).data
        preds[i] = int(np.argmax(logits)) + 1
    return preds


def train(
    cube: HsiCube,
    labels: LabelRaster | None,
    split: np.ndarray,
    model_config: ModelConfig,
    train_config: TrainConfig,
    params: Params | None = None,
    eval_split: np.ndarray | None = None,
) -> tuple[Params, list[EpochStats]]:
    """Train on the (row, col, class) triples of ``split``; returns the
    trained parameters and the per-epoch history. A label raster, when
    given, cross-checks the split against the ground truth."""
    if labels is not None:
        for r, c, cls in split:
            if labels.labels[int(r), int(c)] != cls:
                raise ContractError(
                    f"split row ({r}, {c}) labeled {cls} but raster says {labels.labels[int(r), int(c)]}"
                )
    if params is None:
        params = init_params(model_config, train_config.seed)
    patches = np.stack([extract_patch(cube, int(r), int(c), model_config.patch_size) for r, c, _ in split])
    y = split[:, 2]
    eval_patches = eval_labels = None
    if eval_split is not None and len(eval_split):
        eval_patches = np.stack(
            [extract_patch(cube, int(r), int(c), model_config.patch_size) for r, c, _ in eval_split]
        )
        eval_labels = eval_split[:, 2]
    history = fit_patches(params, patches, y, model_config, train_config, eval_patches, eval_labels)
    return params, history


def evaluate(params: Params, model_config: ModelConfig, cube: HsiCube, split: np.ndarray) -> np.ndarray:
    """Confusion matrix (true class rows, predicted columns) over the
    (row, col, class) triples of ``split``."""
    k = model_config.num_classes
    cm = np.zeros((k, k), dtype=np.int64)
    for r, c, cls in split:
        patch = extract_patch(cube, int(r), int(c), model_config.patch_size)
        logits = forward(patch, params, model_config).data
        cm[int(cls) - 1, int(np.argmax(logits))] += 1
    return cm


# ---------------------------------------------------------------------------
# gradient verification suite
# ---------------------------------------------------------------------------


def tiny_config(num_classes: int = 3) -> ModelConfig:
    """Smallest config that still exercises every code path."""
    return ModelConfig(
        num_classes=num_classes,
        bands=6,
        patch_size=5,
        spectral_neighbors=3,
        num_layers=2,
        inner_dim=8,
        embed_dim=8,
        heads_inner=1,
        heads_outer=1,
        neighborhood_scales=(3, 5),
        filter_sizes=(3, 5),
    )


def gradient_suite(seed: int = 0, eps: float = 1e-5, config: ModelConfig | None = None) -> GradCheckReport:
    """Finite-difference check of every parameter group on a tiny model.

    Runs the whole pipeline (tokenization, both block stacks, fusion,
    head, loss) in float64 against central differences. Parameters are
    drawn at generic scale rather than from the training initializer:
    near-identity starting points leave some projection gradients below
    finite-difference resolution.
    """
    if config is None:
        config = tiny_config()
    params64 = cast_params(random_params(config, seed), np.float64)
    rng = np.random.Generator(np.random.Philox(seed + 1))
    patch = rng.uniform(0.0, 1.0, size=(config.patch_size, config.patch_size, config.bands))
    label = 1 + seed % config.num_classes

    def loss_fn(p: Mapping[str, Tensor]) -> Tensor:
        return cross_entropy(forward(patch, p, config), label)

    return grad_check(loss_fn, params64, eps=eps)
