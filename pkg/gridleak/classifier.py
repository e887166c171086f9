"""
Image-shaped binary classifier shared by the meta-classifiers and the
raw-data baseline.

Inputs are (rows, columns) matrices, signatures or day x half-hour
consumption. The network is a stack of strided 3x3 convolutions with ReLU,
global average pooling and one logistic output unit. Training uses
class-weighted binary cross-entropy and picks the epoch count by stratified
k-fold early stopping before refitting on all samples.
"""

from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from numpy.typing import NDArray
from sklearn.model_selection import StratifiedKFold
from tqdm import tqdm

from gridleak.errors import ConfigError, ContractError, ShapeError
from gridleak.log import log
from gridleak.metrics import roc_auc
from gridleak.numerics import (
    ComputeNode,
    Conv2d,
    Dense,
    OptimizerState,
    Tensor,
    adam_step,
    backward,
    bce_with_logits,
    child_seed,
    global_avg_pool,
    load_container,
    named_parameters,
    relu,
    reshape,
    save_container,
)


@dataclass(frozen=True)
class ClassifierSettings:
    """Architecture and training protocol of the classifier."""

    channels: Tuple[int, ...] = (8, 16, 16)
    max_epochs: int = 40
    batch_size: int = 16
    learning_rate: float = 3e-3
    l2: float = 1e-4
    folds: int = 5
    patience: int = 6

    def validate(self) -> None:
        """Raise ConfigError on unusable settings."""
        if not self.channels or any(c < 1 for c in self.channels):
            raise ConfigError("classifier channels must be positive")
        if self.max_epochs < 1 or self.batch_size < 1:
            raise ConfigError("max_epochs and batch_size must be >= 1")
        if self.learning_rate <= 0 or self.l2 < 0:
            raise ConfigError("learning_rate must be > 0 and l2 >= 0")
        if self.folds < 2:
            raise ConfigError("folds must be >= 2")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")

    def as_dict(self) -> Dict[str, Any]:
        """Plain mapping, suitable for JSON."""
        values = asdict(self)
        values["channels"] = list(self.channels)
        return values

    @classmethod
    def from_dict(cls, values: Mapping[str, Any]) -> "ClassifierSettings":
        """Build from a mapping, rejecting unknown keys."""
        known = {item.name for item in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"Unknown classifier keys: {sorted(unknown)}")
        settings = dict(values)
        if "channels" in settings:
            settings["channels"] = tuple(settings["channels"])
        result = cls(**settings)
        result.validate()
        return result


class ConvNet:
    """Strided convolution blocks, global pooling and a logistic unit."""

    def __init__(self, channels: Sequence[int], seed: int) -> None:
        rng = np.random.default_rng(seed)
        self.blocks: List[Conv2d] = []
        previous = 1
        for index, width in enumerate(channels):
            self.blocks.append(
                Conv2d(previous, width, 3, 2, 1, rng, f"block{index}")
            )
            previous = width
        self.head = Dense(previous, 1, rng, "head")

    def parameters(self) -> Dict[str, ComputeNode]:
        """Trainable nodes by name."""
        return named_parameters([*self.blocks, self.head])

    def forward(self, inputs: Tensor) -> ComputeNode:
        """Logits of shape (batch, 1) for (batch, rows, columns) inputs."""
        batch, rows, columns = inputs.shape
        node = reshape(inputs, (batch, 1, rows, columns))
        for block in self.blocks:
            node = relu(block(node))
        return self.head(global_avg_pool(node))

    def probabilities(self, inputs: Tensor) -> Tensor:
        """Logistic outputs in [0, 1], one per input matrix."""
        logits = self.forward(inputs).value[:, 0]
        return 0.5 * (1.0 + np.tanh(0.5 * logits))

    def snapshot(self) -> Dict[str, Tensor]:
        """Copy of the current weights."""
        return {
            name: node.value.copy() for name, node in self.parameters().items()
        }

    def restore(self, weights: Mapping[str, Tensor]) -> None:
        """Overwrite the weights with a :meth:`snapshot`."""
        for name, node in self.parameters().items():
            if weights[name].shape != node.shape:
                raise ShapeError(f"Weight {name} has the wrong shape")
            node.value = np.array(weights[name], dtype=np.float64)


def check_labels(labels: NDArray[np.int64], target: str) -> None:
    """Refuse label vectors the classifier cannot be trained on."""
    values = np.asarray(labels)
    if values.size == 0:
        raise ContractError(f"No labelled samples for {target}")
    if not np.isin(values, (0, 1)).all():
        raise ContractError(f"Labels for {target} must be 0 or 1")
    counts = np.bincount(values.astype(np.int64), minlength=2)
    if counts.min() == 0:
        raise ContractError(
            f"Labels for {target} hold a single class "
            f"({int(counts[0])} negative, {int(counts[1])} positive)"
        )
    if counts.min() < 2:
        raise ContractError(
            f"{target} needs at least 2 samples per class, got "
            f"{int(counts[0])} negative and {int(counts[1])} positive"
        )


def class_weights(labels: NDArray[np.int64]) -> Tensor:
    """Per-sample weights that give both classes the same total weight."""
    values = np.asarray(labels, dtype=np.int64)
    counts = np.bincount(values, minlength=2).astype(np.float64)
    return values.size / (2.0 * counts[values])


def _weighted_loss(
    net: ConvNet, inputs: Tensor, labels: Tensor, weights: Tensor
) -> float:
    return float(
        bce_with_logits(net.forward(inputs), labels, weights).value
    )


def _train(
    net: ConvNet,
    inputs: Tensor,
    labels: NDArray[np.int64],
    settings: ClassifierSettings,
    epochs: int,
    seed: int,
    validation: Optional[Tuple[Tensor, NDArray[np.int64]]] = None,
) -> int:
    """
    Run up to ``epochs`` epochs of Adam on ``net``.

    With a validation split the weights of the epoch with the lowest
    validation loss are restored and that epoch (1-based) is returned;
    training stops after ``patience`` epochs without improvement.
    """
    rng = np.random.default_rng(seed)
    state = OptimizerState(settings.learning_rate, settings.l2)
    params = net.parameters()
    targets = labels.astype(np.float64)
    weights = class_weights(labels)

    if validation is not None:
        val_inputs, val_labels = validation
        val_targets = val_labels.astype(np.float64)
        val_weights = class_weights(val_labels)
        best_loss = _weighted_loss(net, val_inputs, val_targets, val_weights)
        best_epoch = 0
        best_weights = net.snapshot()

    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(targets))
        for begin in range(0, len(order), settings.batch_size):
            batch = order[begin : begin + settings.batch_size]
            loss = bce_with_logits(
                net.forward(inputs[batch]), targets[batch], weights[batch]
            )
            adam_step(state, params, backward(loss))

        if validation is None:
            continue

        current = _weighted_loss(net, val_inputs, val_targets, val_weights)
        if current < best_loss:
            best_loss, best_epoch = current, epoch
            best_weights = net.snapshot()
        elif epoch - best_epoch >= settings.patience:
            break

    if validation is None:
        return epochs

    net.restore(best_weights)
    return best_epoch


class TrainedClassifier:
    """A fitted network and what it was fitted on."""

    def __init__(
        self,
        net: ConvNet,
        settings: ClassifierSettings,
        input_shape: Tuple[int, int],
        metadata: Dict[str, Any],
    ) -> None:
        self.net = net
        self.settings = settings
        self.input_shape = input_shape
        self.metadata = metadata

    @property
    def target(self) -> str:
        """Name of the property the classifier predicts."""
        return str(self.metadata["target"])

    @property
    def cv_auc(self) -> float:
        """Out-of-fold ROC-AUC measured during training."""
        return float(self.metadata["cv_auc"])

    def predict_proba(self, inputs: Tensor) -> Tensor:
        """Probabilities for a (batch, rows, columns) stack."""
        stack = np.asarray(inputs, dtype=np.float64)
        if stack.ndim != 3 or stack.shape[1:] != self.input_shape:
            raise ShapeError(
                f"Classifier for {self.target} expects inputs of shape "
                f"{self.input_shape}, got {stack.shape[1:]}"
            )
        return self.net.probabilities(stack)

    def save(self, path: Path) -> None:
        """Write the weights and metadata to a container."""
        metadata = {
            "kind": "classifier",
            "settings": self.settings.as_dict(),
            "input_shape": list(self.input_shape),
            **self.metadata,
        }
        save_container(path, self.net.snapshot(), metadata)

    @classmethod
    def load(cls, path: Path) -> "TrainedClassifier":
        """Read a classifier written by :meth:`save`."""
        tensors, metadata = load_container(path)
        settings = ClassifierSettings.from_dict(metadata.pop("settings"))
        rows, columns = metadata.pop("input_shape")
        metadata.pop("kind", None)
        net = ConvNet(settings.channels, 0)
        net.restore(tensors)
        return cls(net, settings, (rows, columns), metadata)


def fit_classifier(
    inputs: Tensor,
    labels: NDArray[np.int64],
    settings: ClassifierSettings,
    seed: int,
    target: str,
) -> TrainedClassifier:
    """
    Train a classifier with cross-validated early stopping.

    Every fold trains until its validation loss stops improving; the median
    of the best epochs is then used to refit one network on all samples.
    Out-of-fold probabilities give the reported ``cv_auc``.
    """
    settings.validate()
    stack = np.asarray(inputs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if stack.ndim != 3 or len(stack) != len(labels):
        raise ShapeError(
            f"Expected (samples, rows, columns) inputs for {len(labels)} "
            f"labels, got {stack.shape}"
        )
    check_labels(labels, target)

    smallest = int(np.bincount(labels, minlength=2).min())
    folds = min(settings.folds, smallest)
    splitter = StratifiedKFold(
        n_splits=folds, shuffle=True, random_state=child_seed(seed, 0) % 2**32
    )

    best_epochs: List[int] = []
    out_of_fold = np.zeros(len(labels))
    splits = list(splitter.split(np.zeros(len(labels)), labels))
    for fold, (train_idx, val_idx) in enumerate(
        tqdm(splits, desc=f"{target} folds", leave=False, disable=None)
    ):
        net = ConvNet(settings.channels, child_seed(seed, 1, fold))
        best = _train(
            net,
            stack[train_idx],
            labels[train_idx],
            settings,
            settings.max_epochs,
            child_seed(seed, 2, fold),
            (stack[val_idx], labels[val_idx]),
        )
        best_epochs.append(best)
        out_of_fold[val_idx] = net.probabilities(stack[val_idx])

    epochs = max(1, int(np.median(best_epochs)))
    net = ConvNet(settings.channels, child_seed(seed, 1, folds))
    _train(net, stack, labels, settings, epochs, child_seed(seed, 2, folds))

    cv_auc = roc_auc(out_of_fold, labels)
    log.info(
        "Trained classifier for %s on %d samples: %d epochs, CV AUC %.3f",
        target,
        len(labels),
        epochs,
        cv_auc,
    )
    metadata = {
        "target": target,
        "cv_auc": cv_auc,
        "epochs": epochs,
        "fold_epochs": best_epochs,
        "folds": folds,
        "samples": int(len(labels)),
        "seed": seed,
    }
    return TrainedClassifier(
        net, settings, (stack.shape[1], stack.shape[2]), metadata
    )
