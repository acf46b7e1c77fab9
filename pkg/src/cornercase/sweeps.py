"""Parameter sweeps over lambda, threshold and seed count, with CSV/JSON reports."""

from __future__ import annotations

import csv
import io
import json
import time
import warnings
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .coverage import CoverageMap, mean_ratio
from .exceptions import UsageError
from .generator import GenerationConfig, generate_from_seed, run_campaign
from .model_zoo import ModelEnsemble


def trimmed_mean(samples: Sequence[float]) -> float:
    """Mean after dropping one minimum and one maximum (plain mean below 3 samples)."""
    s = sorted(float(v) for v in samples)
    if not s:
        raise UsageError("no samples")
    if len(s) >= 3:
        s = s[1:-1]
    return float(np.mean(s))


@dataclass
class Axis:
    name: str
    values: list


@dataclass
class SweepReport:
    """A 1-D or 2-D grid of cells; a cell of ``None`` marks a failed run."""

    kind: str
    unit: str
    axes: list[Axis]
    cells: list
    repetitions: int = 1
    aggregation: str = "single run"
    notes: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.axes) not in (1, 2):
            raise UsageError("a sweep report has one or two axes")
        self.cells = [None if v is None else float(v) for v in np.asarray(self.cells, dtype=object).ravel()]
        if len(self.cells) != int(np.prod([len(a.values) for a in self.axes])):
            raise UsageError("cell count does not match the axes")

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(len(a.values) for a in self.axes)

    def grid(self) -> np.ndarray:
        return np.array([np.nan if v is None else v for v in self.cells]).reshape(self.shape)

    def cell(self, *index):
        return self.cells[int(np.ravel_multi_index(index, self.shape))]

    def failed(self) -> list[tuple[int, ...]]:
        return [np.unravel_index(k, self.shape) for k, v in enumerate(self.cells) if v is None]

    def minima(self) -> dict:
        """Per-row and per-column minimum positions of a 2-D grid (none for 1x1)."""
        if len(self.shape) != 2 or self.shape == (1, 1):
            return {"rows": [], "columns": []}
        g = self.grid()
        rows, cols = [], []
        for r in range(g.shape[0]):
            if self.shape[1] > 1 and not np.all(np.isnan(g[r])):
                rows.append([r, int(np.nanargmin(g[r]))])
        for c in range(g.shape[1]):
            if self.shape[0] > 1 and not np.all(np.isnan(g[:, c])):
                cols.append([int(np.nanargmin(g[:, c])), c])
        return {"rows": rows, "columns": cols}

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "unit": self.unit,
            "axes": [{"name": a.name, "values": list(a.values)} for a in self.axes],
            "cells": list(self.cells),
            "repetitions": self.repetitions,
            "aggregation": self.aggregation,
            "notes": self.notes,
            "minima": self.minima(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "SweepReport":
        return cls(
            kind=d["kind"], unit=d["unit"],
            axes=[Axis(a["name"], list(a["values"])) for a in d["axes"]],
            cells=list(d["cells"]), repetitions=d["repetitions"],
            aggregation=d["aggregation"], notes=d.get("notes", {}),
        )

    @classmethod
    def from_json(cls, text: str) -> "SweepReport":
        return cls.from_dict(json.loads(text))

    def to_csv(self) -> str:
        """Long format, one line per cell; metadata in leading ``#`` lines."""
        buf = io.StringIO()
        meta = {k: v for k, v in self.to_dict().items() if k not in ("cells", "axes", "minima")}
        meta["axes"] = [{"name": a.name, "values": list(a.values)} for a in self.axes]
        buf.write("# " + json.dumps(meta, sort_keys=True) + "\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([a.name for a in self.axes] + ["value", "status"])
        for k, v in enumerate(self.cells):
            idx = np.unravel_index(k, self.shape)
            keys = [repr(a.values[i]) for a, i in zip(self.axes, idx)]
            w.writerow(keys + (["", "failed"] if v is None else [repr(v), "ok"]))
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "SweepReport":
        first, _, body = text.partition("\n")
        if not first.startswith("# "):
            raise UsageError("sweep CSV lacks its metadata line")
        meta = json.loads(first[2:])
        rows = list(csv.reader(io.StringIO(body)))[1:]
        cells = [None if status == "failed" else float(value) for *_, value, status in rows]
        return cls(
            kind=meta["kind"], unit=meta["unit"],
            axes=[Axis(a["name"], a["values"]) for a in meta["axes"]],
            cells=cells, repetitions=meta["repetitions"],
            aggregation=meta["aggregation"], notes=meta.get("notes", {}),
        )

    def table(self) -> str:
        g = self.grid()
        fmt = (lambda v: "failed" if np.isnan(v) else f"{v:.2f}")
        if len(self.shape) == 1:
            a = self.axes[0]
            lines = [f"{a.name:>10}  {self.kind} ({self.unit})"]
            lines += [f"{v!s:>10}  {fmt(x)}" for v, x in zip(a.values, g)]
            return "\n".join(lines)
        rows, cols = self.axes
        marks = {tuple(p) for p in self.minima()["rows"]} | {tuple(p) for p in self.minima()["columns"]}
        corner = f"{rows.name} \\ {cols.name}"
        lines = [f"{corner:>16}" + "".join(f"{c!s:>12}" for c in cols.values)]
        for r, rv in enumerate(rows.values):
            cells = "".join(f"{fmt(g[r, c]) + ('*' if (r, c) in marks else ''):>12}" for c in range(len(cols.values)))
            lines.append(f"{rv!s:>16}" + cells)
        if marks:
            lines.append("* row or column minimum")
        return "\n".join(lines)


def _first_divergence_ms(ensemble, seeds, config, seed_ids) -> float | None:
    """Wall-clock until the ascent yields its first corner case; None if it never does."""
    images, labels = seeds
    start = time.perf_counter()
    for k in range(len(images)):
        maps = [CoverageMap(m, config.threshold) for m in ensemble]
        case = generate_from_seed(ensemble, images[k], int(labels[k]), config, maps, int(seed_ids[k]))
        if case is not None and case.iterations > 0:
            return 1000.0 * (time.perf_counter() - start)
    return None


def sweep_lambda(
    ensemble: ModelEnsemble,
    seeds,
    config: GenerationConfig,
    lambda1_grid: Sequence[float],
    lambda2_grid: Sequence[float],
    repetitions: int = 10,
    seed_ids: Sequence[int] | None = None,
) -> SweepReport:
    """Runtime (ms) to the first generated corner case for every (lambda2, lambda1) pair.

    Rows are lambda2 and columns lambda1. Seeds the ensemble already disagrees
    on are passed over, since nothing is generated for them. Each seed starts
    from empty coverage maps, as in a campaign, so every repetition does the
    same work.
    """
    if not lambda1_grid or not lambda2_grid:
        raise UsageError("lambda grids must be non-empty")
    if repetitions < 1:
        raise UsageError("repetitions must be at least 1")
    images, labels = seeds
    ids = list(range(len(images))) if seed_ids is None else list(seed_ids)
    cells = []
    for l2 in lambda2_grid:
        for l1 in lambda1_grid:
            cfg = replace(config, lambda1=float(l1), lambda2=float(l2)).validate()
            samples = [_first_divergence_ms(ensemble, (images, labels), cfg, ids) for _ in range(repetitions)]
            cells.append(None if any(s is None for s in samples) else trimmed_mean(samples))
    return SweepReport(
        kind="first_divergence_runtime", unit="ms",
        axes=[Axis("lambda2", [float(v) for v in lambda2_grid]), Axis("lambda1", [float(v) for v in lambda1_grid])],
        cells=cells, repetitions=repetitions,
        aggregation="trimmed mean (min and max dropped)" if repetitions >= 3 else "mean",
        notes={"constraint": config.constraint, "threshold": config.threshold, "n_seeds": len(images)},
    )


def sweep_threshold(
    ensemble: ModelEnsemble,
    seeds,
    config: GenerationConfig,
    thresholds: Sequence[float],
    seed_ids: Sequence[int] | None = None,
    workers: int = 1,
) -> SweepReport:
    """Mean coverage (%) over the three models at each threshold.

    One campaign is run at ``config.threshold``; every threshold is then read
    from the same recorded activations, so the column is comparable across t.
    """
    ts = sorted(float(t) for t in thresholds)
    if not ts:
        raise UsageError("threshold grid must be non-empty")
    if any(not 0.0 <= t <= 1.0 for t in ts):
        raise UsageError("thresholds must lie in [0, 1]")
    result = run_campaign(ensemble, seeds, config, seed_ids, workers)
    cells = [100.0 * mean_ratio(result.coverage_maps, t) if result.stats.n_seeds else 0.0 for t in ts]
    return SweepReport(
        kind="neuron_coverage", unit="%", axes=[Axis("threshold", ts)], cells=cells,
        notes={
            "n_seeds": result.stats.n_seeds, "n_cases": result.stats.n_cases,
            "recorded_at_threshold": config.threshold, "constraint": config.constraint,
        },
    )


def sweep_seeds(
    ensemble: ModelEnsemble,
    pool,
    config: GenerationConfig,
    counts: Sequence[int],
    pool_ids: Sequence[int] | None = None,
    workers: int = 1,
) -> SweepReport:
    """Mean coverage (%) after the first ``n`` seeds of ``pool`` for each count ``n``."""
    counts = [int(n) for n in counts]
    if not counts:
        raise UsageError("seed-count grid must be non-empty")
    if len(set(counts)) != len(counts):
        warnings.warn(f"duplicate seed counts {counts} were merged", stacklevel=2)
    counts = sorted(set(counts))
    if counts[0] < 0:
        raise UsageError("seed counts must be non-negative")
    images, labels = pool
    if counts[-1] > len(images):
        raise UsageError(f"seed count {counts[-1]} exceeds the pool of {len(images)} images")
    n = counts[-1]
    ids = list(range(n)) if pool_ids is None else list(pool_ids)[:n]
    result = run_campaign(ensemble, (images[:n], labels[:n]), config, ids, workers)
    after = result.stats.coverage_after
    cells = [0.0 if k == 0 else 100.0 * after[k - 1] for k in counts]
    cases = [sum(1 for c in result.corpus if c.seed_id in set(ids[:k])) for k in counts]
    return SweepReport(
        kind="neuron_coverage", unit="%", axes=[Axis("seeds", counts)], cells=cells,
        notes={"n_cases": cases, "threshold": config.threshold, "constraint": config.constraint},
    )

