"""Neuron coverage bookkeeping.

A "neuron" is a unit of a dense layer or an output channel of a conv layer
(its spatial mean). Values are taken after the layer's ReLU when it has one
and min-max normalised per layer for each input separately. The softmax
layer is not counted.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, NamedTuple

import numpy as np

from .exceptions import UsageError
from .tensor_core import Network


class NeuronId(NamedTuple):
    layer_index: int
    unit_index: int


def neuron_layers(model: Network) -> list[tuple[int, int, int]]:
    """``(layer_index, source_index, units)`` for every counted layer.

    ``source_index`` is the activation the values are read from: the
    following ReLU when present, else the layer itself.
    """
    out = []
    for k, layer in enumerate(model.layers):
        if layer.kind not in ("dense", "conv2d"):
            continue
        src = k + 1 if k + 1 < len(model.layers) and model.layers[k + 1].kind == "relu" else k
        out.append((k, src, model.shapes[k + 1][-1]))
    return out


def _minmax(raw: np.ndarray) -> np.ndarray:
    lo, hi = raw.min(), raw.max()
    if hi <= lo:
        return np.zeros_like(raw)
    return (raw - lo) / (hi - lo)


@dataclass
class NeuronValues:
    """Normalised per-neuron values from one forward pass, keyed by layer index."""

    model: str
    layers: dict[int, np.ndarray]
    raw: dict[int, np.ndarray] = field(default_factory=dict, repr=False)

    def __getitem__(self, neuron: NeuronId) -> float:
        return float(self.layers[neuron.layer_index][neuron.unit_index])

    def items(self):
        for k, vals in self.layers.items():
            for u, v in enumerate(vals):
                yield NeuronId(k, u), float(v)


def _raw_values(model: Network, activations, k: int, src: int) -> np.ndarray:
    a = np.asarray(activations[src], dtype=np.float64)
    if model.layers[k].kind == "conv2d":
        return a.reshape(-1, a.shape[-1]).mean(axis=0)
    return a.reshape(-1)


def neuron_activations(model: Network, activations) -> NeuronValues:
    """Normalised neuron values from the activations of a single forward pass."""
    layers, raw = {}, {}
    for k, src, _ in neuron_layers(model):
        r = _raw_values(model, activations, k, src)
        raw[k] = r
        layers[k] = _minmax(r)
    return NeuronValues(model.name, layers, raw)


def neuron_value_and_seed(model: Network, activations, neuron: NeuronId):
    """Normalised value of one neuron and its gradient w.r.t. the activation it is read from.

    Returns ``(value, {source_index: gradient})`` ready to be used as a
    backpropagation seed. The min and max of the layer are differentiated too.
    """
    table = {k: src for k, src, _ in neuron_layers(model)}
    if neuron.layer_index not in table:
        raise UsageError(f"layer {neuron.layer_index} holds no counted neurons")
    k, n = neuron.layer_index, neuron.unit_index
    src = table[k]
    r = _raw_values(model, activations, k, src)
    lo, hi = int(np.argmin(r)), int(np.argmax(r))
    span = r[hi] - r[lo]
    a = np.asarray(activations[src])
    if span <= 0:
        return 0.0, {src: np.zeros_like(a)}
    value = (r[n] - r[lo]) / span
    dr = np.zeros_like(r)
    dr[n] += 1.0 / span
    dr[lo] += (value - 1.0) / span
    dr[hi] -= value / span
    if model.layers[k].kind == "conv2d":
        spatial = a.size // a.shape[-1]
        seed = np.broadcast_to(dr / spatial, a.shape).copy()
    else:
        seed = dr.reshape(a.shape)
    return float(value), {src: seed}


class CoverageMap:
    """Activated-neuron record for one model at threshold ``t``.

    Besides the activated set, the map keeps the highest normalised value seen
    for every neuron, so the ratio at any other threshold can be read back
    from the same recorded inputs (``ratio_at``).
    """

    def __init__(self, model: Network, threshold: float = 0.0):
        if not 0.0 <= threshold <= 1.0:
            raise UsageError(f"threshold must lie in [0, 1], got {threshold}")
        self.model = model.name
        self.threshold = float(threshold)
        self.table = [(k, units) for k, _, units in neuron_layers(model)]
        self.kinds = {k: model.layers[k].kind for k, _ in self.table}
        self.total_neurons = sum(units for _, units in self.table)
        self._offset = {}
        pos = 0
        for k, units in self.table:
            self._offset[k] = pos
            pos += units
        self.activated_mask = np.zeros(self.total_neurons, dtype=bool)
        self.high_water = np.full(self.total_neurons, -np.inf)

    def _index(self, neuron: NeuronId) -> int:
        units = dict(self.table).get(neuron.layer_index)
        if units is None or not 0 <= neuron.unit_index < units:
            raise UsageError(f"{neuron} is not a neuron of {self.model}")
        return self._offset[neuron.layer_index] + neuron.unit_index

    def _neuron(self, flat: int) -> NeuronId:
        for k, units in self.table:
            off = self._offset[k]
            if flat < off + units:
                return NeuronId(k, flat - off)
        raise IndexError(flat)

    @property
    def activated(self) -> set[NeuronId]:
        return {self._neuron(int(i)) for i in np.flatnonzero(self.activated_mask)}

    def is_covered(self, neuron: NeuronId) -> bool:
        return bool(self.activated_mask[self._index(neuron)])

    def _flat(self, values: NeuronValues) -> np.ndarray:
        if values.model != self.model or set(values.layers) != set(self._offset):
            raise UsageError(f"neuron values from {values.model!r} do not fit coverage map of {self.model!r}")
        parts = []
        for k, units in self.table:
            v = np.asarray(values.layers[k])
            if v.shape != (units,):
                raise UsageError(f"layer {k} has {units} neurons, got {v.shape}")
            parts.append(v)
        return np.concatenate(parts) if parts else np.zeros(0)

    def update(self, values: NeuronValues) -> int:
        """Mark neurons with value strictly above ``t``; returns the newly activated count."""
        flat = self._flat(values)
        np.maximum(self.high_water, flat, out=self.high_water)
        hit = flat > self.threshold
        new = int(np.count_nonzero(hit & ~self.activated_mask))
        self.activated_mask |= hit
        return new

    def select_uncovered(self, rng) -> NeuronId | None:
        free = np.flatnonzero(~self.activated_mask)
        if len(free) == 0:
            return None
        return self._neuron(int(free[rng.integers(len(free))]))

    def coverage_ratio(self) -> float:
        if self.total_neurons == 0:
            return 0.0
        return float(np.count_nonzero(self.activated_mask)) / self.total_neurons

    def ratio_at(self, threshold: float) -> float:
        """Coverage the recorded inputs would give at another threshold."""
        if self.total_neurons == 0:
            return 0.0
        return float(np.count_nonzero(self.high_water > threshold)) / self.total_neurons

    def copy(self) -> "CoverageMap":
        new = object.__new__(CoverageMap)
        new.__dict__.update(self.__dict__)
        new.activated_mask = self.activated_mask.copy()
        new.high_water = self.high_water.copy()
        return new

    def merge(self, other: "CoverageMap") -> "CoverageMap":
        """Union of two maps over the same model and threshold (returns a new map)."""
        if other.model != self.model or other.table != self.table or other.threshold != self.threshold:
            raise UsageError("can only merge coverage maps of the same model and threshold")
        out = self.copy()
        out.activated_mask |= other.activated_mask
        np.maximum(out.high_water, other.high_water, out=out.high_water)
        return out

    def report(self) -> dict:
        per_layer = []
        for k, units in self.table:
            off = self._offset[k]
            per_layer.append({
                "layer": k,
                "kind": self.kinds[k],
                "neurons": units,
                "activated": int(self.activated_mask[off:off + units].sum()),
            })
        return {
            "model": self.model,
            "total_neurons": self.total_neurons,
            "activated": int(self.activated_mask.sum()),
            "ratio": self.coverage_ratio(),
            "threshold": self.threshold,
            "per_layer": per_layer,
        }

    def __repr__(self):
        return (f"CoverageMap({self.model!r}, t={self.threshold}, "
                f"{int(self.activated_mask.sum())}/{self.total_neurons})")


def coverage_ratio(cmap: CoverageMap) -> float:
    return cmap.coverage_ratio()


def update(cmap: CoverageMap, values: NeuronValues) -> int:
    return cmap.update(values)


def select_uncovered(cmap: CoverageMap, rng) -> NeuronId | None:
    return cmap.select_uncovered(rng)


def mean_ratio(maps: Iterable[CoverageMap], threshold: float | None = None) -> float:
    maps = list(maps)
    if not maps:
        return 0.0
    if threshold is None:
        return float(np.mean([m.coverage_ratio() for m in maps]))
    return float(np.mean([m.ratio_at(threshold) for m in maps]))
