"""LeNet-family reference classifiers and the three-model ensemble."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import ShapeError, UsageError
from .tensor_core import (
    Conv2D,
    Dense,
    Flatten,
    MaxPool2D,
    Network,
    ReLU,
    Softmax,
    load_weights,
    save_weights,
    sgd_train,
)

VARIANTS = ("lenet1", "lenet4", "lenet5")
MIN_SIDE = 8


def _kernel_for(input_shape) -> int:
    # largest of 5/3/2 that still leaves room for two conv-pool stages
    side = min(input_shape[0], input_shape[1])
    return 5 if side >= 20 else 3 if side >= 12 else 2


def build_variant(variant: str, input_shape, n_classes: int, kernel: int | None = None) -> Network:
    """Layer stack for one of the LeNet variants.

    lenet1: conv-pool, then straight to the output layer.
    lenet4: conv-pool-conv-pool, one hidden dense layer (84).
    lenet5: conv-pool-conv-pool, two hidden dense layers (120, 84).
    """
    if variant not in VARIANTS:
        raise UsageError(f"unknown variant {variant!r}; choose from {', '.join(VARIANTS)}")
    input_shape = tuple(int(d) for d in input_shape)
    if len(input_shape) != 3:
        raise ShapeError(f"input_shape must be (H, W, C), got {input_shape}")
    h, w, c = input_shape
    if min(h, w) < MIN_SIDE:
        raise ShapeError(f"input {input_shape} too small for the conv/pool stack (need H, W >= {MIN_SIDE})")
    if n_classes < 2:
        raise UsageError("need at least two classes")
    k = kernel or _kernel_for(input_shape)

    def flat_width(layers):
        shape = input_shape
        for layer in layers:
            shape = layer.output_shape(shape)
        return int(np.prod(shape))

    if variant == "lenet1":
        trunk = [Conv2D(k, k, c, 4), ReLU(), MaxPool2D()]
        head_widths: list[int] = []
    else:
        trunk = [Conv2D(k, k, c, 6), ReLU(), MaxPool2D(), Conv2D(k, k, 6, 16), ReLU(), MaxPool2D()]
        head_widths = [84] if variant == "lenet4" else [120, 84]
    try:
        width = flat_width(trunk)
    except ShapeError as exc:
        raise ShapeError(f"{variant} cannot be built on {input_shape}: {exc}") from None
    layers = trunk + [Flatten()]
    for hw in head_widths:
        layers += [Dense(width, hw), ReLU()]
        width = hw
    layers += [Dense(width, n_classes), Softmax()]
    return Network(layers, input_shape, name=variant)


def predict_label(model: Network, x) -> tuple[int, np.ndarray]:
    probs, _ = model.forward(x)
    # np.argmax picks the first maximum, which is the lowest class index on ties
    return int(np.argmax(probs)), probs


class LeNetClassifier(ClassifierMixin, BaseEstimator):
    """scikit-learn compatible wrapper around a LeNet variant trained with SGD.

    Parameters
    ----------
    variant : {"lenet1", "lenet4", "lenet5"}
    epochs : int
    learning_rate : float
    batch_size : int
    momentum : float
    n_classes : int or None
        Output width; inferred from ``y`` when None.
    random_state : int
        Seeds both initialisation and minibatch shuffling.
    """

    def __init__(
        self,
        variant="lenet5",
        epochs=12,
        learning_rate=0.01,
        batch_size=32,
        momentum=0.9,
        n_classes=None,
        random_state=0,
    ):
        self.variant = variant
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.momentum = momentum
        self.n_classes = n_classes
        self.random_state = random_state

    def _check_X(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 3:
            X = X[..., None]
        if X.ndim != 4:
            raise ShapeError(f"expected images shaped (N, H, W, C), got {X.shape}")
        return X

    def fit(self, X, y):
        X = self._check_X(X)
        y = np.asarray(y, dtype=np.int64)
        if len(X) != len(y):
            raise UsageError(f"{len(X)} images but {len(y)} labels")
        n_classes = self.n_classes or int(y.max()) + 1
        net = build_variant(self.variant, X.shape[1:], n_classes).init_params(self.random_state)
        result = sgd_train(
            net, X, y, self.epochs, self.learning_rate, self.random_state,
            batch_size=self.batch_size, momentum=self.momentum,
        )
        self.network_ = result.model
        self.loss_curve_ = result.losses
        self.classes_ = np.arange(n_classes)
        return self

    def partial_fit(self, X, y, epochs=1):
        """Continue training from the current weights."""
        check_is_fitted(self, "network_")
        X = self._check_X(X)
        result = sgd_train(
            self.network_, X, np.asarray(y), epochs, self.learning_rate, self.random_state,
            batch_size=self.batch_size, momentum=self.momentum,
        )
        self.network_ = result.model
        self.loss_curve_ = list(self.loss_curve_) + result.losses
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "network_")
        return self.network_.predict_proba(self._check_X(X))

    def predict(self, X):
        return self.predict_proba(X).argmax(axis=1)

    @classmethod
    def from_network(cls, network: Network, **params):
        est = cls(variant=network.name if network.name in VARIANTS else "lenet5", **params)
        est.network_ = network
        est.loss_curve_ = []
        est.classes_ = np.arange(network.n_classes)
        return est


@dataclass(frozen=True)
class ModelEnsemble:
    """Exactly three models sharing input shape and class count."""

    models: tuple[Network, ...]

    def __post_init__(self):
        models = tuple(self.models)
        object.__setattr__(self, "models", models)
        if len(models) != 3:
            raise UsageError(f"an ensemble has exactly three models, got {len(models)}")
        shapes = {m.input_shape for m in models}
        classes = {m.n_classes for m in models}
        if len(shapes) != 1 or len(classes) != 1:
            raise ShapeError("ensemble members disagree on input shape or class count")

    @property
    def input_shape(self):
        return self.models[0].input_shape

    @property
    def n_classes(self) -> int:
        return self.models[0].n_classes

    @property
    def names(self) -> list[str]:
        return [m.name for m in self.models]

    def __len__(self):
        return 3

    def __iter__(self):
        return iter(self.models)

    def __getitem__(self, i) -> Network:
        return self.models[i]

    def predict_labels(self, X) -> np.ndarray:
        """``(n_models, N)`` label matrix for a batch."""
        return np.stack([m.predict_proba(X).argmax(axis=1) for m in self.models])

    def save(self, directory) -> list[Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = []
        for i, m in enumerate(self.models):
            path = directory / f"model{i}_{m.name}.dprb"
            save_weights(m, path)
            paths.append(path)
        (directory / "ensemble.json").write_text(
            json.dumps({"models": [p.name for p in paths], "names": self.names}, indent=2)
        )
        return paths

    @classmethod
    def load(cls, directory) -> "ModelEnsemble":
        directory = Path(directory)
        meta = json.loads((directory / "ensemble.json").read_text())
        return cls(tuple(
            load_weights(directory / f, name) for f, name in zip(meta["models"], meta["names"])
        ))


@dataclass
class TrainConfig:
    variants: Sequence[str] = VARIANTS
    epochs: int = 12
    learning_rate: float = 0.01
    batch_size: int = 32
    momentum: float = 0.9
    rng_seed: int = 0


@dataclass
class EnsembleReport:
    names: list[str]
    test_accuracy: list[float]
    train_accuracy: list[float] = field(default_factory=list)
    losses: list[list[float]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "models": [
                {"name": n, "test_accuracy": a, "train_accuracy": t, "loss_curve": l}
                for n, a, t, l in zip(self.names, self.test_accuracy, self.train_accuracy, self.losses)
            ]
        }


def train_ensemble(train, test, config: TrainConfig | None = None):
    """Train the three variants; returns ``(ModelEnsemble, EnsembleReport)``.

    ``train`` and ``test`` are ``(images, labels)`` pairs.
    """
    config = config or TrainConfig()
    X, y = train
    Xt, yt = test
    if len(config.variants) != 3:
        raise UsageError("train_ensemble needs exactly three variants")
    n_classes = int(max(np.max(y), np.max(yt) if len(yt) else 0)) + 1
    estimators = []
    for i, variant in enumerate(config.variants):
        est = LeNetClassifier(
            variant=variant,
            epochs=config.epochs,
            learning_rate=config.learning_rate,
            batch_size=config.batch_size,
            momentum=config.momentum,
            n_classes=n_classes,
            random_state=config.rng_seed + i,
        ).fit(X, y)
        estimators.append(est)
    ensemble = ModelEnsemble(tuple(e.network_ for e in estimators))
    report = EnsembleReport(
        names=ensemble.names,
        test_accuracy=[float(e.score(Xt, yt)) for e in estimators],
        train_accuracy=[float(e.score(X, y)) for e in estimators],
        losses=[list(e.loss_curve_) for e in estimators],
    )
    return ensemble, report
