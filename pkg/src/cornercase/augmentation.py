"""Augmented retraining with generated corner cases and two control sets."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import transforms
from .exceptions import UsageError
from .generator import load_corpus
from .model_zoo import ModelEnsemble
from .tensor_core import accuracy, sgd_train

PROVENANCES = (
    "corner_case",
    "seed_already_diverged",
    "control_random_original",
    "control_random_transform",
)
CONTROLS = ("random_original", "random_transform")


@dataclass
class AugmentedSet:
    images: np.ndarray
    labels: np.ndarray
    provenance: list[str] = field(default_factory=list)
    source_ids: list[int] = field(default_factory=list)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if not (len(self.images) == len(self.labels) == len(self.provenance) == len(self.source_ids)):
            raise UsageError("augmented set columns differ in length")
        bad = set(self.provenance) - set(PROVENANCES)
        if bad:
            raise UsageError(f"unknown provenance {sorted(bad)}")

    def __len__(self):
        return len(self.labels)

    def __iter__(self):
        return iter(zip(self.images, self.labels, self.provenance))

    @classmethod
    def empty(cls, image_shape) -> "AugmentedSet":
        return cls(np.zeros((0,) + tuple(image_shape)), np.zeros(0, dtype=np.int64), [], [])


def build_augmented(corpus, seeds=None, image_shape=None) -> AugmentedSet:
    """One entry per corner case, labelled with its seed's original label.

    ``corpus`` is a list of CornerCase or a corpus directory. ``seeds`` is an
    optional label vector indexed by seed id; when given it is the label
    source, otherwise each record's ``original_label`` is used.
    """
    if isinstance(corpus, (str, Path)):
        records, images = load_corpus(corpus)
        cases = [(r["seed_id"], r["original_label"], r["iterations"], img) for r, img in zip(records, images)]
    else:
        cases = [(c.seed_id, c.original_label, c.iterations, c.image) for c in corpus]
    if not cases:
        if image_shape is None:
            raise UsageError("image_shape is needed to build an empty augmented set")
        return AugmentedSet.empty(image_shape)
    labels = []
    for seed_id, original, _, _ in cases:
        if seeds is None:
            labels.append(int(original))
        else:
            labels.append(int(np.asarray(seeds)[seed_id]))
    return AugmentedSet(
        images=np.stack([np.asarray(img, dtype=np.float64) for *_, img in cases]),
        labels=np.asarray(labels),
        provenance=["seed_already_diverged" if it == 0 else "corner_case" for _, _, it, _ in cases],
        source_ids=[int(s) for s, *_ in cases],
    )


def build_control(
    kind: str,
    size: int,
    dataset,
    rng,
    exclude: Sequence[int] = (),
    rotation: float = 15.0,
    shift: float = 0.1,
    zoom: tuple[float, float] = (0.9, 1.1),
) -> AugmentedSet:
    """Control augmentation of ``size`` images drawn from ``dataset`` = ``(X, y)``.

    ``random_original`` samples unchanged images (pass the test split) without
    replacement, skipping ``exclude``. ``random_transform`` applies a random
    rotation/shift/zoom to randomly drawn images (pass the training split).
    """
    if kind not in CONTROLS:
        raise UsageError(f"unknown control {kind!r}; choose from {', '.join(CONTROLS)}")
    X, y = dataset
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if size < 0:
        raise UsageError("control size must be non-negative")
    if size == 0:
        return AugmentedSet.empty(X.shape[1:])
    if kind == "random_original":
        pool = np.setdiff1d(np.arange(len(X)), np.asarray(exclude, dtype=np.int64))
        if size > len(pool):
            raise UsageError(f"asked for {size} control images but only {len(pool)} are available")
        picks = np.sort(rng.choice(pool, size=size, replace=False))
        return AugmentedSet(X[picks].copy(), y[picks], ["control_random_original"] * size, picks.tolist())
    if len(X) == 0:
        raise UsageError("no images to transform")
    picks = rng.choice(len(X), size=size, replace=size > len(X))
    out = np.empty((size,) + X.shape[1:])
    for k, i in enumerate(picks):
        m = transforms.random_affine(rng, X.shape[1:], rotation, shift, zoom)
        out[k] = transforms.apply(X[i], transforms.Affine(m))
    return AugmentedSet(out, y[picks], ["control_random_transform"] * size, picks.tolist())


def relative_improvement(before: float, after: float) -> float | None:
    """``(after - before) / before`` in percent; None when ``before`` is 0."""
    if before == 0:
        return None
    return 100.0 * (after - before) / before


@dataclass
class ModelRetrain:
    name: str
    augmented_before: float
    augmented_after: float
    test_before: float
    test_after: float

    @property
    def improvement(self) -> float | None:
        return relative_improvement(self.augmented_before, self.augmented_after)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["relative_improvement_pct"] = self.improvement
        return d


@dataclass
class RetrainReport:
    strategy: str
    epochs: int
    n_train: int
    n_augmented: int
    models: list[ModelRetrain]

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "epochs": self.epochs,
            "n_train": self.n_train,
            "n_augmented": self.n_augmented,
            "models": [m.to_dict() for m in self.models],
        }


def retrain_and_eval(
    ensemble: ModelEnsemble,
    original_train,
    augmented: AugmentedSet,
    original_test,
    epochs: int,
    eval_set: AugmentedSet | None = None,
    learning_rate: float = 0.01,
    batch_size: int = 32,
    momentum: float = 0.9,
    rng_seed: int = 0,
    strategy: str = "corner_cases",
):
    """Fine-tune every model on ``original_train`` plus ``augmented``.

    Accuracy "on the augmented set" is measured on ``eval_set`` when given
    (the corner-case set, so control strategies are scored on the same
    images) and on ``augmented`` otherwise. Returns ``(ensemble, report)``.
    """
    X, y = original_train
    Xt, yt = original_test
    X = np.asarray(X, dtype=np.float64)
    if len(X) == 0 or len(augmented) == 0 or len(Xt) == 0:
        raise UsageError("retraining needs non-empty training, augmented and test sets")
    target = augmented if eval_set is None else eval_set
    X_all = np.concatenate([X, augmented.images])
    y_all = np.concatenate([np.asarray(y, dtype=np.int64), augmented.labels])
    retrained, rows = [], []
    for i, model in enumerate(ensemble):
        new = sgd_train(model, X_all, y_all, epochs, learning_rate, rng_seed + i, batch_size, momentum).model
        retrained.append(new)
        rows.append(ModelRetrain(
            name=model.name,
            augmented_before=accuracy(model, target.images, target.labels),
            augmented_after=accuracy(new, target.images, target.labels),
            test_before=accuracy(model, Xt, yt),
            test_after=accuracy(new, Xt, yt),
        ))
    report = RetrainReport(strategy, int(epochs), len(X), len(augmented), rows)
    return ModelEnsemble(tuple(retrained)), report


def format_table(reports: Sequence[RetrainReport]) -> str:
    """Plain-text table with one row per (strategy, model)."""
    head = f"{'strategy':<18} {'model':<8} {'cc before':>9} {'cc after':>9} {'improve%':>9} {'test before':>11} {'test after':>10}"
    lines = [head, "-" * len(head)]
    for rep in reports:
        for m in rep.models:
            imp = "n/a" if m.improvement is None else f"{m.improvement:.1f}"
            lines.append(
                f"{rep.strategy:<18} {m.name:<8} {100 * m.augmented_before:9.1f} {100 * m.augmented_after:9.1f} "
                f"{imp:>9} {100 * m.test_before:11.1f} {100 * m.test_after:10.1f}"
            )
    return "\n".join(lines)


__all__ = [
    "AugmentedSet",
    "ModelRetrain",
    "RetrainReport",
    "build_augmented",
    "build_control",
    "format_table",
    "relative_improvement",
    "retrain_and_eval",
]
