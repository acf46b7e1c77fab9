"""Differential test generation by joint gradient ascent.

For a seed on which the three models agree on class ``c`` the loop ascends

    sum_{i != j} F_i(x)[c] - lambda1 * F_j(x)[c] + lambda2 * f_n(x)

where ``j`` is the model being pushed away from ``c`` and ``f_n`` the
normalised value of a not-yet-covered neuron. Every step is projected onto a
transformation family and clamped to the valid pixel range; the first input
on which the models disagree is registered as a corner case.
"""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from PIL import Image
from sklearn.base import BaseEstimator

from . import transforms
from .coverage import CoverageMap, NeuronId, mean_ratio, neuron_activations, neuron_value_and_seed
from .datasets import from_uint8, to_uint8
from .exceptions import CornerCaseError, UsageError
from .model_zoo import ModelEnsemble

log = logging.getLogger(__name__)

POLICIES = ("least_confident", "round_robin")

# Per-family step used when GenerationConfig.step is None. Light, contrast,
# occlusion and overlay steps are in intensity units (ten grey levels), affine
# in pixels, blur in sigma units.
DEFAULT_STEPS = {
    "light": 10 / 255,
    "contrast": 10 / 255,
    "affine": 2.0,
    "blur": 0.5,
    "occl_rect": 10 / 255,
    "occl_dots": 10 / 255,
    "overlay": 10 / 255,
}


@dataclass
class GenerationConfig:
    lambda1: float = 2.5
    lambda2: float = 2.0
    step: float | None = None
    threshold: float = 0.0
    max_iters: int = 200
    constraint: str = "occl_rect"
    deviating_policy: str = "least_confident"
    neuron_model: int = 0
    coverage: bool = True
    rect_size: tuple | None = None
    dots: int = 4
    dot_color: str = "black"
    rng_seed: int = 0

    def validate(self) -> "GenerationConfig":
        for name in ("lambda1", "lambda2", "threshold"):
            v = getattr(self, name)
            if not np.isfinite(v):
                raise UsageError(f"{name} must be finite")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise UsageError("lambda1 and lambda2 must be non-negative")
        if self.step is not None and not (np.isfinite(self.step) and self.step > 0):
            raise UsageError("step must be positive")
        if not 0.0 <= self.threshold <= 1.0:
            raise UsageError("threshold must lie in [0, 1]")
        if int(self.max_iters) <= 0:
            raise UsageError("max_iters must be positive")
        if self.constraint.partition(":")[0] not in transforms.FAMILIES:
            raise UsageError(f"unknown constraint {self.constraint!r}")
        if self.deviating_policy not in POLICIES:
            raise UsageError(f"deviating_policy must be one of {POLICIES}")
        if self.neuron_model not in (0, 1, 2):
            raise UsageError("neuron_model must be 0, 1 or 2")
        return self

    @property
    def family(self) -> str:
        return self.constraint.partition(":")[0]

    def step_size(self) -> float:
        return float(self.step) if self.step is not None else DEFAULT_STEPS[self.family]


@dataclass
class CornerCase:
    image: np.ndarray
    seed_id: int
    original_label: int
    labels: tuple[int, ...]
    probabilities: list[np.ndarray]
    deviating: tuple[int, ...]
    majority: int | None
    j: int | None
    iterations: int
    trail: list = field(default_factory=list)
    objective: float = 0.0
    constraint: str = "occl_rect"
    elapsed_ms: float = 0.0

    def record(self, image_file: str) -> dict:
        return {
            "seed_id": int(self.seed_id),
            "original_label": int(self.original_label),
            "labels": [int(v) for v in self.labels],
            "deviating": [int(v) for v in self.deviating],
            "iterations": int(self.iterations),
            "constraint": self.constraint,
            "objective": float(self.objective),
            "image_file": image_file,
        }


class Divergence(NamedTuple):
    deviating: tuple[int, ...]
    majority: int | None


def obj_differential(prob_vectors: Sequence[np.ndarray], c: int, j: int, lambda1: float) -> float:
    """Agreeing models' confidence in ``c`` minus ``lambda1`` times model ``j``'s."""
    if not 0 <= j < len(prob_vectors):
        raise UsageError(f"model index {j} out of range")
    if not all(0 <= c < len(p) for p in prob_vectors):
        raise UsageError(f"class {c} out of range")
    others = sum(float(p[c]) for i, p in enumerate(prob_vectors) if i != j)
    return others - lambda1 * float(prob_vectors[j][c])


def obj_joint(obj1: float, neuron_value: float, lambda2: float) -> float:
    return obj1 + lambda2 * neuron_value


def detect_divergence(labels: Sequence[int]) -> Divergence | None:
    labels = [int(v) for v in labels]
    if len(labels) != 3:
        raise UsageError("divergence is defined for exactly three labels")
    if labels[0] == labels[1] == labels[2]:
        return None
    for value in set(labels):
        if labels.count(value) == 2:
            return Divergence(tuple(i for i, v in enumerate(labels) if v != value), value)
    return Divergence((0, 1, 2), None)


def _forward_all(ensemble: ModelEnsemble, x):
    traces = [m.trace(x) for m in ensemble]
    probs = [t.probabilities for t in traces]
    labels = tuple(int(np.argmax(p)) for p in probs)
    return probs, traces, labels


def _update_coverage(ensemble, traces, maps):
    if maps is None:
        return
    for model, tr, cmap in zip(ensemble, traces, maps):
        cmap.update(neuron_activations(model, tr.activations))


def _joint_gradient(ensemble, traces, c, j, lambda1, lambda2, target, neuron_model):
    total, grad = 0.0, None
    for i, (model, tr) in enumerate(zip(ensemble, traces)):
        weight = -lambda1 if i == j else 1.0
        probs = tr.probabilities
        seed = np.zeros_like(probs)
        seed[c] = weight
        seeds = {len(model.layers) - 1: seed}
        total += weight * float(probs[c])
        if target is not None and lambda2 > 0 and i == neuron_model:
            fn, nseed = neuron_value_and_seed(model, tr.activations, target)
            total += lambda2 * fn
            for k, g in nseed.items():
                seeds[k] = seeds[k] + lambda2 * g if k in seeds else lambda2 * g
        g = model.backprop_input(tr, seeds)
        grad = g if grad is None else grad + g
    return total, grad


def joint_value_and_gradient(
    ensemble: ModelEnsemble,
    x: np.ndarray,
    c: int,
    j: int,
    lambda1: float,
    lambda2: float,
    target: NeuronId | None,
    neuron_model: int = 0,
):
    """Joint objective at ``x`` and its input gradient, summed over the three models."""
    _, traces, _ = _forward_all(ensemble, x)
    return _joint_gradient(ensemble, traces, c, j, lambda1, lambda2, target, neuron_model)


def _joint_value(ensemble, probs, traces, c, j, config, target) -> float:
    obj1 = obj_differential(probs, c, j, config.lambda1)
    fn = 0.0
    if target is not None and config.lambda2 > 0:
        m = config.neuron_model
        fn, _ = neuron_value_and_seed(ensemble[m], traces[m].activations, target)
    return obj_joint(obj1, fn, config.lambda2)


def _normalise(grad: np.ndarray) -> np.ndarray:
    rms = float(np.sqrt(np.mean(grad * grad)))
    if rms == 0.0 or not np.isfinite(rms):
        return np.zeros_like(grad)
    return grad / rms


def _pick_j(probs, c: int, policy: str, seed_id: int) -> int:
    if policy == "round_robin":
        return int(seed_id) % 3
    return int(np.argmin([float(p[c]) for p in probs]))


def _seed_rng(config: GenerationConfig, seed_id: int) -> np.random.Generator:
    return np.random.default_rng([int(config.rng_seed), int(seed_id)])


def generate_from_seed(
    ensemble: ModelEnsemble,
    seed_image,
    seed_label: int,
    config: GenerationConfig,
    coverage_maps: Sequence[CoverageMap] | None = None,
    seed_id: int = 0,
    callback=None,
) -> CornerCase | None:
    """Run the ascent from one seed; returns the first corner case or None.

    ``coverage_maps`` (one per model) are updated in place with every
    processed input. A step that lowers the joint objective without causing
    a disagreement is rejected and retried with half the step (except for
    dot occlusion, whose proposal does not depend on the step).
    ``callback(iteration, image, probabilities)`` is called after every
    accepted step.
    """
    config.validate()
    start = time.perf_counter()
    x = np.array(seed_image, dtype=np.float64)
    if x.ndim == 2:
        x = x[..., None]
    if x.shape != ensemble.input_shape:
        raise UsageError(f"seed shape {x.shape} does not match ensemble input {ensemble.input_shape}")
    if x.min() < 0 or x.max() > 1:
        raise UsageError("seed pixels must lie in [0, 1]")
    rng = _seed_rng(config, seed_id)
    use_cov = config.coverage and coverage_maps is not None

    probs, traces, labels = _forward_all(ensemble, x)
    _update_coverage(ensemble, traces, coverage_maps)
    div = detect_divergence(labels)
    if div is not None:
        return CornerCase(
            image=x, seed_id=seed_id, original_label=int(seed_label), labels=labels,
            probabilities=probs, deviating=div.deviating, majority=div.majority, j=None,
            iterations=0, trail=[], objective=0.0, constraint=config.constraint,
            elapsed_ms=1000 * (time.perf_counter() - start),
        )

    c = labels[0]
    j = _pick_j(probs, c, config.deviating_policy, seed_id)
    owner = coverage_maps[config.neuron_model] if use_cov else None
    target = owner.select_uncovered(rng) if owner is not None and config.lambda2 > 0 else None
    base_step = step = config.step_size()
    # dots ignore the step size, so a rejected dot step would only repeat itself
    backtrack = config.family != "occl_dots"
    trail = []
    value, grad = _joint_gradient(
        ensemble, traces, c, j, config.lambda1, config.lambda2, target, config.neuron_model
    )
    for it in range(1, int(config.max_iters) + 1):
        spec = transforms.constrain_gradient(
            _normalise(grad), config.constraint, step, rng, image=x,
            rect_size=config.rect_size, dots=config.dots, dot_color=config.dot_color,
        )
        x_new = transforms.apply(x, spec)
        probs_new, traces_new, labels = _forward_all(ensemble, x_new)
        _update_coverage(ensemble, traces_new, coverage_maps)
        diverged = detect_divergence(labels) is not None
        if backtrack and not diverged and _joint_value(ensemble, probs_new, traces_new, c, j, config, target) < value:
            # overshoot: stay put and retry with half the step
            step *= 0.5
            continue
        x, probs, traces, step = x_new, probs_new, traces_new, base_step
        trail.append(spec)
        if callback is not None:
            callback(it, x, probs)
        if owner is not None and target is not None and owner.is_covered(target):
            target = owner.select_uncovered(rng)
        if diverged:
            # register the 8-bit image so the stored PNG replays to the same labels
            xq = from_uint8(to_uint8(x))
            q_probs, q_traces, q_labels = _forward_all(ensemble, xq)
            q_div = detect_divergence(q_labels)
            if q_div is not None:
                return CornerCase(
                    image=xq, seed_id=seed_id, original_label=int(seed_label), labels=q_labels,
                    probabilities=q_probs, deviating=q_div.deviating, majority=q_div.majority, j=j,
                    iterations=it, trail=trail,
                    objective=_joint_value(ensemble, q_probs, q_traces, c, j, config, target),
                    constraint=config.constraint,
                    elapsed_ms=1000 * (time.perf_counter() - start),
                )
        value, grad = _joint_gradient(
            ensemble, traces, c, j, config.lambda1, config.lambda2, target, config.neuron_model
        )
    return None


@dataclass
class CampaignStats:
    n_seeds: int
    n_cases: int
    conversion: float | None
    coverage: float
    per_model_coverage: list[float]
    iterations: list[int | None]
    first_divergence_ms: list[float | None]
    coverage_after: list[float]
    already_diverged: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class CampaignResult:
    corpus: list[CornerCase]
    coverage_maps: list[CoverageMap]
    stats: CampaignStats


def _fresh_maps(ensemble, threshold):
    return [CoverageMap(m, threshold) for m in ensemble]


def _run_one(args):
    ensemble, image, label, config, seed_id = args
    maps = _fresh_maps(ensemble, config.threshold)
    case = generate_from_seed(ensemble, image, label, config, maps, seed_id)
    return seed_id, case, maps


def run_campaign(
    ensemble: ModelEnsemble,
    seeds,
    config: GenerationConfig,
    seed_ids: Sequence[int] | None = None,
    workers: int = 1,
) -> CampaignResult:
    """Generate from every seed; ``seeds`` is an ``(images, labels)`` pair.

    Each seed works on a private coverage record that starts empty and is
    merged into the campaign record afterwards, so results do not depend on
    the number of workers or on scheduling order.
    """
    config.validate()
    images, labels = seeds
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if seed_ids is None:
        seed_ids = list(range(len(images)))
    if not (len(images) == len(labels) == len(seed_ids)):
        raise UsageError("seed images, labels and ids must have equal length")
    if len(set(seed_ids)) != len(seed_ids):
        raise UsageError("seed ids must be unique")
    jobs = [(ensemble, images[k], int(labels[k]), config, int(seed_ids[k])) for k in range(len(images))]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_one, jobs))
    else:
        results = [_run_one(job) for job in jobs]
    results.sort(key=lambda r: r[0])

    campaign_maps = _fresh_maps(ensemble, config.threshold)
    corpus, iterations, times, coverage_after = [], [], [], []
    for seed_id, case, maps in results:
        campaign_maps = [a.merge(b) for a, b in zip(campaign_maps, maps)]
        coverage_after.append(mean_ratio(campaign_maps))
        if case is None:
            iterations.append(None)
            times.append(None)
        else:
            corpus.append(case)
            iterations.append(case.iterations)
            times.append(case.elapsed_ms)
    n = len(jobs)
    stats = CampaignStats(
        n_seeds=n,
        n_cases=len(corpus),
        conversion=(len(corpus) / n) if n else None,
        coverage=mean_ratio(campaign_maps),
        per_model_coverage=[m.coverage_ratio() for m in campaign_maps],
        iterations=iterations,
        first_divergence_ms=times,
        coverage_after=coverage_after,
        already_diverged=sum(1 for c in corpus if c.iterations == 0),
    )
    return CampaignResult(corpus, campaign_maps, stats)


def replay_labels(ensemble: ModelEnsemble, image) -> tuple[int, ...]:
    return _forward_all(ensemble, np.asarray(image, dtype=np.float64))[2]


# -- corpus directory ------------------------------------------------------------


def _save_png(path: Path, image: np.ndarray) -> None:
    pix = to_uint8(image)
    if pix.shape[-1] == 1:
        Image.fromarray(pix[..., 0], mode="L").save(path, optimize=False)
    else:
        Image.fromarray(pix, mode="RGB").save(path, optimize=False)


def write_corpus(corpus: Sequence[CornerCase], directory) -> Path:
    """One PNG per case plus ``corpus.jsonl``; ordered by seed id."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for case in sorted(corpus, key=lambda c: c.seed_id):
        name = f"case_{case.seed_id:06d}.png"
        _save_png(directory / name, case.image)
        lines.append(json.dumps(case.record(name), sort_keys=True))
    path = directory / "corpus.jsonl"
    path.write_text("".join(line + "\n" for line in lines))
    return path


class CorpusError(CornerCaseError, OSError):
    """Corrupt or incomplete corpus directory."""


_REQUIRED = ("seed_id", "original_label", "labels", "deviating", "iterations", "constraint", "objective", "image_file")


def load_corpus(directory):
    """Read a corpus directory back as ``(records, images)``."""
    directory = Path(directory)
    index = directory / "corpus.jsonl"
    if not index.exists():
        raise CorpusError(f"{index} not found")
    records, images = [], []
    for n, line in enumerate(index.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CorpusError(f"corpus.jsonl line {n}: {exc}") from None
        missing = [k for k in _REQUIRED if k not in rec]
        if missing:
            raise CorpusError(f"corpus.jsonl line {n}: missing {', '.join(missing)}")
        try:
            img = np.asarray(Image.open(directory / rec["image_file"]))
        except (OSError, ValueError) as exc:
            raise CorpusError(f"corpus.jsonl line {n}: cannot read image: {exc}") from None
        if img.ndim == 2:
            img = img[..., None]
        records.append(rec)
        images.append(from_uint8(img))
    return records, images


class CornerCaseGenerator(BaseEstimator):
    """Estimator front end: ``fit(X, y)`` runs a campaign over the seeds ``X``.

    After fitting, ``corpus_``, ``coverage_maps_`` and ``stats_`` hold the
    results. ``predict`` flags inputs on which the ensemble disagrees.
    """

    def __init__(
        self,
        ensemble=None,
        lambda1=2.5,
        lambda2=2.0,
        step=None,
        threshold=0.0,
        max_iters=200,
        constraint="occl_rect",
        deviating_policy="least_confident",
        neuron_model=0,
        dots=4,
        dot_color="black",
        rng_seed=0,
        workers=1,
    ):
        self.ensemble = ensemble
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.step = step
        self.threshold = threshold
        self.max_iters = max_iters
        self.constraint = constraint
        self.deviating_policy = deviating_policy
        self.neuron_model = neuron_model
        self.dots = dots
        self.dot_color = dot_color
        self.rng_seed = rng_seed
        self.workers = workers

    def config(self) -> GenerationConfig:
        return GenerationConfig(
            lambda1=self.lambda1, lambda2=self.lambda2, step=self.step, threshold=self.threshold,
            max_iters=self.max_iters, constraint=self.constraint,
            deviating_policy=self.deviating_policy, neuron_model=self.neuron_model,
            dots=self.dots, dot_color=self.dot_color, rng_seed=self.rng_seed,
        ).validate()

    def fit(self, X, y, seed_ids=None):
        if self.ensemble is None:
            raise UsageError("CornerCaseGenerator needs an ensemble")
        result = run_campaign(self.ensemble, (X, y), self.config(), seed_ids, self.workers)
        self.corpus_ = result.corpus
        self.coverage_maps_ = result.coverage_maps
        self.stats_ = result.stats
        return self

    def predict(self, X):
        X = np.asarray(X, dtype=np.float64)
        labels = self.ensemble.predict_labels(X)
        return np.array([detect_divergence(col) is not None for col in labels.T])
