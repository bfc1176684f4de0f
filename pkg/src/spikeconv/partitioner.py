"""Greedy assignment of spiking neurons to virtual neurocores.

Populations are the input population plus one per spiking layer. Each core
holds a contiguous slab of one population. Resource counting:

* compartments: neurons x compartments-per-neuron (2 with soft reset, 1 with hard)
* fan-in axons of a core: distinct presynaptic neurons with a synapse into it
* fan-out axons of a core: over its neurons, the number of distinct destination
  cores each neuron projects to, summed

Synapses are structural (every kernel tap counts, whatever its value), which
over-counts rather than under-counts hardware axons.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .converter import SnnModel
from .errors import UnpartitionableLayerError
from .model import LayerKind, apply_layer, pool_stride
from . import ops


@dataclass(frozen=True)
class CoreConstraints:
    max_compartments: int = 1024
    max_fan_in_axons: int = 4096
    max_fan_out_axons: int = 4096

    def __post_init__(self):
        if min(self.max_compartments, self.max_fan_in_axons, self.max_fan_out_axons) < 1:
            raise ValueError("core constraints must be positive")


def compartment_cost(reset_mode: str) -> int:
    """Compartments per neuron: soft reset needs an extra one to keep the residual."""
    if reset_mode == "soft":
        return 2
    if reset_mode == "hard":
        return 1
    raise ValueError(f"unknown reset mode {reset_mode!r}")


@dataclass
class Core:
    population: int
    layer: str
    start: int
    stop: int
    compartments: int
    fan_in: int
    fan_out: int = 0

    @property
    def neurons(self) -> int:
        return self.stop - self.start


@dataclass
class PartitionPlan:
    reset_mode: str
    constraints: CoreConstraints
    populations: list[str] = field(default_factory=list)
    sizes: list[int] = field(default_factory=list)
    cores: list[Core] = field(default_factory=list)

    @property
    def core_count(self) -> int:
        return len(self.cores)

    def cores_per_layer(self) -> dict[str, int]:
        out = {name: 0 for name in self.populations}
        for core in self.cores:
            out[core.layer] += 1
        return out

    def to_dict(self) -> dict:
        return {"reset_mode": self.reset_mode, "constraints": asdict(self.constraints),
                "populations": [{"name": n, "neurons": s} for n, s in zip(self.populations, self.sizes)],
                "cores_per_layer": self.cores_per_layer(), "core_count": self.core_count,
                "cores": [asdict(c) for c in self.cores]}

    @classmethod
    def from_dict(cls, d: dict) -> "PartitionPlan":
        return cls(d["reset_mode"], CoreConstraints(**d["constraints"]),
                   [p["name"] for p in d["populations"]], [p["neurons"] for p in d["populations"]],
                   [Core(**c) for c in d["cores"]])

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    def table(self) -> str:
        counts = self.cores_per_layer()
        width = max([len("layer"), *(len(n) for n in self.populations)])
        lines = [f"{'layer':<{width}}  {'neurons':>8}  {'neurocores':>10}"]
        for name, size in zip(self.populations, self.sizes):
            lines.append(f"{name:<{width}}  {size:>8}  {counts[name]:>10}")
        lines.append(f"{'total':<{width}}  {sum(self.sizes):>8}  {self.core_count:>10}")
        return "\n".join(lines)


def populations(snn: SnnModel) -> tuple[list[str], list[tuple[int, ...]]]:
    if not snn.spiking_indices():
        return [], []
    names = ["input"] + [snn.layers[i].name for i in snn.spiking_indices()]
    shapes = [snn.input_shape] + [snn.shapes[i] for i in snn.spiking_indices()]
    return names, shapes


def _stage_specs(snn: SnnModel, pop: int):
    """Structural layers feeding population ``pop`` (>= 1) and its own layer spec."""
    idx = snn.spiking_indices()
    start = 0 if pop == 1 else idx[pop - 2] + 1
    stop = idx[pop - 1]
    return [snn.layers[i].spec for i in range(start, stop)], snn.layers[stop].spec


def receptive_fields(snn: SnnModel, pop: int) -> np.ndarray:
    """Presynaptic indices per neuron of population ``pop``, as ``(n, K)`` padded with -1."""
    names, shapes = populations(snn)
    pre, spec = _stage_specs(snn, pop)
    idx = np.arange(int(np.prod(shapes[pop - 1]))).reshape(shapes[pop - 1])
    for p in pre:
        if p.kind == LayerKind.ZERO_PAD2D:
            idx = np.pad(idx, [*p.pad, (0, 0)], constant_values=-1)
        elif p.kind == LayerKind.FLATTEN:
            idx = idx.reshape(-1)
        elif p.kind == LayerKind.RESHAPE:
            idx = idx.reshape(p.target_shape)
    kind = spec.kind
    if kind == LayerKind.DENSE:
        return np.broadcast_to(idx.reshape(-1), (spec.features, idx.size))
    if kind == LayerKind.CONV1D:
        stride = (spec.stride or (1,))[0]
        win = sliding_window_view(idx, spec.kernel[0], axis=0)[::stride]  # (ol, c, k)
        rows = win.reshape(win.shape[0], -1)
        return np.repeat(rows, spec.features, axis=0)
    if kind == LayerKind.AVG_POOL2D:
        stride = pool_stride(spec)
    else:
        stride = spec.stride or (1, 1)
    win = sliding_window_view(idx, spec.kernel, axis=(0, 1))[::stride[0], ::stride[1]]
    # win: (oh, ow, c, kh, kw)
    if kind == LayerKind.CONV2D:
        rows = win.reshape(win.shape[0] * win.shape[1], -1)
        return np.repeat(rows, spec.features, axis=0)
    # depthwise and pooling: one channel per neuron
    return win.reshape(-1, spec.kernel[0] * spec.kernel[1])


class _SourceOverflow(Exception):
    def __init__(self, pop: int):
        self.pop = pop


def _pack_population(pop: int, name: str, size: int, fields: np.ndarray | None, cost: int,
                     constraints: CoreConstraints, cap: int, src_core: np.ndarray | None,
                     fan_out: list[int], first_core: int) -> list[Core]:
    per_core = min(constraints.max_compartments // cost, cap)
    if per_core < 1:
        raise UnpartitionableLayerError(name, f"one neuron needs {cost} compartments, "
                                        f"cores hold {constraints.max_compartments}")
    cores: list[Core] = []
    if fields is None:  # input population: no presynaptic sources
        for start in range(0, size, per_core):
            stop = min(start + per_core, size)
            cores.append(Core(pop, name, start, stop, (stop - start) * cost, 0))
        return cores
    n_src = src_core.size
    in_core = np.zeros(n_src, bool)
    last_dest = np.full(n_src, -1, np.int64)
    core_id = first_core
    start, fan_in = 0, 0
    for n in range(size):
        srcs = fields[n]
        srcs = srcs[srcs >= 0]
        if srcs.size > constraints.max_fan_in_axons:
            raise UnpartitionableLayerError(
                name, f"neuron {n} has {srcs.size} presynaptic inputs, "
                      f"more than the {constraints.max_fan_in_axons} fan-in axons of a core")
        while True:
            count = n - start
            new_in = int(np.count_nonzero(~in_core[srcs]))
            fresh = srcs[last_dest[srcs] != core_id]
            inc = np.bincount(src_core[fresh], minlength=len(fan_out)) if fresh.size else None
            fits = ((count + 1) <= per_core and fan_in + new_in <= constraints.max_fan_in_axons
                    and (inc is None or all(fan_out[c] + inc[c] <= constraints.max_fan_out_axons
                                            for c in np.nonzero(inc)[0])))
            if fits:
                break
            if count == 0:
                raise _SourceOverflow(pop - 1)
            cores.append(Core(pop, name, start, n, count * cost, fan_in))
            core_id += 1
            start, fan_in = n, 0
            in_core[:] = False
        in_core[srcs] = True
        fan_in += new_in
        if inc is not None:
            for c in np.nonzero(inc)[0]:
                fan_out[c] += int(inc[c])
            last_dest[fresh] = core_id
    if size > start:
        cores.append(Core(pop, name, start, size, (size - start) * cost, fan_in))
    return cores


def partition(snn: SnnModel, constraints: CoreConstraints = CoreConstraints(),
              reset_mode: str | None = None) -> PartitionPlan:
    """First-fit packing in neuron index order, population by population.

    A source core whose fan-out overflows is re-packed with half as many
    neurons per core, and packing restarts.
    """
    reset_mode = reset_mode or snn.reset_mode
    cost = compartment_cost(reset_mode)
    names, shapes = populations(snn)
    sizes = [int(np.prod(s)) for s in shapes]
    fields = [None] + [receptive_fields(snn, p) for p in range(1, len(names))]
    caps = [constraints.max_compartments] * len(names)
    while True:
        cores: list[Core] = []
        fan_out: list[int] = []
        src_core = None
        try:
            for pop, (name, size) in enumerate(zip(names, sizes)):
                packed = _pack_population(pop, name, size, fields[pop], cost, constraints,
                                          caps[pop], src_core, fan_out, len(cores))
                cores.extend(packed)
                fan_out.extend([0] * len(packed))
                src_core = np.empty(size, np.int64)
                for offset, core in enumerate(packed, start=len(cores) - len(packed)):
                    src_core[core.start:core.stop] = offset
        except _SourceOverflow as exc:
            biggest = max(c.neurons for c in cores if c.population == exc.pop)
            if biggest <= 1:
                raise UnpartitionableLayerError(names[exc.pop], "fan-out axon limit unmet "
                                                "even with one neuron per core") from None
            caps[exc.pop] = biggest // 2
            continue
        break
    for core, fo in zip(cores, fan_out):
        core.fan_out = fo
    return PartitionPlan(reset_mode, constraints, names, sizes, cores)


# ----------------------------------------------------------------------------- validation

@dataclass(frozen=True)
class Violation:
    core: int | None
    kind: str
    value: int
    limit: int

    def __str__(self):
        where = f"core {self.core}" if self.core is not None else "plan"
        return f"{where}: {self.kind} {self.value} (limit {self.limit})"


def probe_connectivity(snn: SnnModel, pop: int, chunk: int = 256) -> np.ndarray:
    """Boolean ``(n_src, n_dst)`` synapse matrix found by pushing one-hot inputs
    through the layer with an all-ones kernel."""
    names, shapes = populations(snn)
    pre, spec = _stage_specs(snn, pop)
    src_shape = shapes[pop - 1]
    n_src = int(np.prod(src_shape))
    n_dst = int(np.prod(shapes[pop]))
    layer = snn.layers[snn.spiking_indices()[pop - 1]]
    ones = None if spec.kind == LayerKind.AVG_POOL2D else np.ones(layer.weights.shape)
    out = np.zeros((n_src, n_dst), bool)
    for start in range(0, n_src, chunk):
        stop = min(start + chunk, n_src)
        x = np.zeros((stop - start, n_src))
        x[np.arange(stop - start), np.arange(start, stop)] = 1.0
        x = x.reshape(stop - start, *src_shape)
        for p in pre:
            x = apply_layer(p, x, None, None)
        if spec.kind == LayerKind.AVG_POOL2D:
            y = ops.sum_pool2d(x, spec.kernel, pool_stride(spec))
        else:
            y = apply_layer(spec, x, ones, None)
        out[start:stop] = y.reshape(stop - start, -1) != 0
    return out


def validate_partition(plan: PartitionPlan, snn: SnnModel,
                       constraints: CoreConstraints | None = None) -> list[Violation]:
    """Recount every core's resources from the model and report violations.

    An empty list means the plan is valid. Tallies recorded in the plan that
    disagree with the recount are reported as ``"<resource> tally"`` entries.
    """
    constraints = constraints or plan.constraints
    cost = compartment_cost(plan.reset_mode)
    names, shapes = populations(snn)
    sizes = [int(np.prod(s)) for s in shapes]
    violations: list[Violation] = []
    by_pop: dict[int, list[int]] = {p: [] for p in range(len(names))}
    for ci, core in enumerate(plan.cores):
        if core.population not in by_pop or not 0 <= core.start < core.stop <= sizes[core.population]:
            violations.append(Violation(ci, "invalid neuron range", core.stop, -1))
            continue
        by_pop[core.population].append(ci)
    for p, size in enumerate(sizes):
        hits = np.zeros(size, np.int64)
        for ci in by_pop[p]:
            hits[plan.cores[ci].start:plan.cores[ci].stop] += 1
        unassigned = int(np.count_nonzero(hits == 0))
        doubled = int(np.count_nonzero(hits > 1))
        if unassigned:
            violations.append(Violation(None, f"unassigned neurons in {names[p]}", unassigned, 0))
        if doubled:
            violations.append(Violation(None, f"multiply assigned neurons in {names[p]}", doubled, 0))
    fan_in = {ci: 0 for ci in range(len(plan.cores))}
    fan_out = {ci: 0 for ci in range(len(plan.cores))}
    for p in range(1, len(names)):
        conn = probe_connectivity(snn, p)
        dst_cores = by_pop[p]
        if not dst_cores:
            continue
        # reach[j, k]: source neuron j has a synapse into destination core k
        reach = np.stack([conn[:, plan.cores[ci].start:plan.cores[ci].stop].any(axis=1)
                          for ci in dst_cores], axis=1)
        for k, ci in enumerate(dst_cores):
            fan_in[ci] = int(reach[:, k].sum())
        per_source = reach.sum(axis=1)
        for ci in by_pop[p - 1]:
            fan_out[ci] = int(per_source[plan.cores[ci].start:plan.cores[ci].stop].sum())
    for ci, core in enumerate(plan.cores):
        if ci not in fan_in:
            continue
        comp = core.neurons * cost
        checks = (("compartments", comp, constraints.max_compartments, core.compartments),
                  ("fan-in axons", fan_in[ci], constraints.max_fan_in_axons, core.fan_in),
                  ("fan-out axons", fan_out[ci], constraints.max_fan_out_axons, core.fan_out))
        for kind, value, limit, recorded in checks:
            if value > limit:
                violations.append(Violation(ci, kind, value, limit))
            if recorded != value:
                violations.append(Violation(ci, f"{kind} tally", recorded, value))
    return violations
