"""Mapping the network onto neurocore resources.

A core owns up to 1024 compartments, 4096 distinct presynaptic sources,
4096 distinct postsynaptic targets, and 128 KB of synapse memory.  Fan-in
and fan-out count *distinct* neurons: overlapping receptive fields of
neighbouring outputs share their sources, and zero padding contributes
nothing.  Synapse memory is the opposite: every stored entry costs its
byte even where the kernel hangs over the edge, so a conv compartment
always pays in_channels * k * k entries.

Layers are placed one at a time as contiguous channel-major slices of
their output volume, first-fit: every constraint grows monotonically with
the slice, so the largest slice that still fits is found by binary search
and becomes the next core.  Layers never share a core.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import Infeasible
from .network import CONV, DENSE, POOL, shape_chain


@dataclass(frozen=True)
class ChipConstraints:
    max_compartments: int = 1024
    max_fan_in: int = 4096
    max_fan_out: int = 4096
    synmem_bytes: int = 128 * 1024
    bytes_per_synapse: int = 1


def _syn_per_neuron(layer) -> int:
    if layer.kind == CONV:
        return layer.in_channels * layer.kernel * layer.kernel
    if layer.kind == POOL:
        return layer.kernel * layer.kernel
    return layer.in_channels


def _conv_in_footprint(out_mask, k, p, in_h, in_w):
    """Input positions read by the marked stride-1 conv outputs."""
    oh, ow = out_mask.shape
    canvas = np.zeros((in_h + 2 * p, in_w + 2 * p), dtype=bool)
    for dy in range(k):
        for dx in range(k):
            canvas[dy : dy + oh, dx : dx + ow] |= out_mask
    return canvas[p : p + in_h, p : p + in_w]


def _conv_out_footprint(in_mask, k, p):
    """Stride-1 conv outputs whose receptive field touches a marked input."""
    ih, iw = in_mask.shape
    padded = np.zeros((ih + 2 * p, iw + 2 * p), dtype=bool)
    padded[p : p + ih, p : p + iw] = in_mask
    oh, ow = ih + 2 * p - k + 1, iw + 2 * p - k + 1
    out = np.zeros((oh, ow), dtype=bool)
    for dy in range(k):
        for dx in range(k):
            out |= padded[dy : dy + oh, dx : dx + ow]
    return out


class _Geometry:
    """Fan-in / fan-out counting for contiguous slices of one layer."""

    def __init__(self, layer, in_shape, out_shape, next_layer):
        self.layer = layer
        self.in_shape = in_shape
        self.out_shape = out_shape
        self.next = next_layer
        self.size = int(np.prod(out_shape))
        self.syn_per_neuron = _syn_per_neuron(layer)

    def _mask(self, start, end):
        flat = np.zeros(self.size, dtype=bool)
        flat[start:end] = True
        return flat.reshape(self.out_shape)

    def fan_in(self, start, end) -> int:
        if end <= start:
            return 0
        layer = self.layer
        if layer.kind == DENSE:
            return layer.in_channels
        mask = self._mask(start, end)
        if layer.kind == CONV:
            spatial = mask.any(axis=0)
            fp = _conv_in_footprint(spatial, layer.kernel, layer.padding, self.in_shape[1], self.in_shape[2])
            return layer.in_channels * int(fp.sum())
        # pooling reads channel-by-channel from disjoint tiles
        iy = np.arange(self.in_shape[1]) // layer.kernel
        ix = np.arange(self.in_shape[2]) // layer.kernel
        return int(mask[:, iy[:, None], ix[None, :]].sum())

    def fan_out(self, start, end) -> int:
        if end <= start or self.next is None:
            return 0
        nxt = self.next
        if nxt.kind == DENSE:
            return nxt.out_channels
        mask = self._mask(start, end)
        if nxt.kind == CONV:
            spatial = mask.any(axis=0)
            fp = _conv_out_footprint(spatial, nxt.kernel, nxt.padding)
            return nxt.out_channels * int(fp.sum())
        k = nxt.kernel
        oh, ow = -(-mask.shape[1] // k), -(-mask.shape[2] // k)
        targets = np.zeros((mask.shape[0], oh, ow), dtype=bool)
        cs, ys, xs = np.nonzero(mask)
        targets[cs, ys // k, xs // k] = True
        return int(targets.sum())


@dataclass
class CoreAssignment:
    core: int
    layer: int
    kind: str
    start: int
    end: int
    compartments: int
    fan_in: int
    fan_out: int
    synapses: int
    syn_bytes: int


@dataclass
class MappingReport:
    cores: list
    constraints: ChipConstraints
    layer_cores: list
    totals: dict = field(default_factory=dict)

    @property
    def n_cores(self) -> int:
        return len(self.cores)

    def to_dict(self) -> dict:
        return {
            "constraints": {
                "max_compartments": self.constraints.max_compartments,
                "max_fan_in": self.constraints.max_fan_in,
                "max_fan_out": self.constraints.max_fan_out,
                "synmem_bytes": self.constraints.synmem_bytes,
                "bytes_per_synapse": self.constraints.bytes_per_synapse,
            },
            "n_cores": self.n_cores,
            "layer_cores": list(self.layer_cores),
            "totals": dict(self.totals),
            "cores": [
                {
                    "core": c.core,
                    "layer": c.layer,
                    "kind": c.kind,
                    "start": c.start,
                    "end": c.end,
                    "compartments": c.compartments,
                    "fan_in": c.fan_in,
                    "fan_out": c.fan_out,
                    "synapses": c.synapses,
                    "syn_bytes": c.syn_bytes,
                }
                for c in self.cores
            ],
        }


def resource_totals(network) -> dict:
    """Exact per-layer and total compartment/synapse counts, no placement."""
    shapes = shape_chain(network.input_size, network.layers)
    rows = []
    total_c = 0
    total_s = 0
    for li, (layer, shape) in enumerate(zip(network.layers, shapes)):
        comps = int(np.prod(shape))
        syn = comps * _syn_per_neuron(layer)
        rows.append({"layer": li, "kind": layer.kind, "compartments": comps, "synapses": syn})
        total_c += comps
        total_s += syn
    return {"layers": rows, "compartments": total_c, "synapses": total_s}


def _explain_single(geom, start, constraints) -> str:
    checks = [
        ("fan_in", geom.fan_in(start, start + 1), constraints.max_fan_in),
        ("fan_out", geom.fan_out(start, start + 1), constraints.max_fan_out),
        ("syn_bytes", geom.syn_per_neuron * constraints.bytes_per_synapse, constraints.synmem_bytes),
    ]
    bad = [f"{name}={got} > {cap}" for name, got, cap in checks if got > cap]
    return ", ".join(bad) or "no capacity"


def map_network(network, constraints: ChipConstraints | None = None) -> MappingReport:
    constraints = constraints or ChipConstraints()
    shapes = shape_chain(network.input_size, network.layers)
    in_shapes = [tuple(network.input_size)] + [tuple(s) for s in shapes[:-1]]
    geoms = [
        _Geometry(layer, in_shapes[li], tuple(shapes[li]), network.layers[li + 1] if li + 1 < len(network.layers) else None)
        for li, layer in enumerate(network.layers)
    ]

    cores = []
    layer_cores = [0] * len(geoms)
    for li, geom in enumerate(geoms):
        per_syn = geom.syn_per_neuron * constraints.bytes_per_synapse
        cap = constraints.max_compartments
        if per_syn > 0:
            cap = min(cap, constraints.synmem_bytes // per_syn)
        start = 0
        while start < geom.size:
            def fits(end):
                return (
                    geom.fan_in(start, end) <= constraints.max_fan_in
                    and geom.fan_out(start, end) <= constraints.max_fan_out
                )

            hi = min(geom.size, start + cap)
            if hi <= start or not fits(start + 1):
                raise Infeasible(
                    f"layer {li} ({geom.layer.kind}): neuron {start} exceeds a core by itself "
                    f"({_explain_single(geom, start, constraints)})"
                )
            lo = start + 1
            while lo < hi:
                mid = (lo + hi + 1) // 2
                if fits(mid):
                    lo = mid
                else:
                    hi = mid - 1
            n = lo - start
            cores.append(
                CoreAssignment(
                    core=len(cores),
                    layer=li,
                    kind=geom.layer.kind,
                    start=start,
                    end=lo,
                    compartments=n,
                    fan_in=geom.fan_in(start, lo),
                    fan_out=geom.fan_out(start, lo),
                    synapses=n * geom.syn_per_neuron,
                    syn_bytes=n * per_syn,
                )
            )
            layer_cores[li] += 1
            start = lo

    totals = resource_totals(network)
    n = len(cores)
    report = MappingReport(
        cores=cores,
        constraints=constraints,
        layer_cores=layer_cores,
        totals={
            "compartments": totals["compartments"],
            "synapses": totals["synapses"],
            "syn_bytes": totals["synapses"] * constraints.bytes_per_synapse,
            "n_cores": n,
            "compartment_utilization": totals["compartments"] / (n * constraints.max_compartments),
            "synmem_utilization": totals["synapses"]
            * constraints.bytes_per_synapse
            / (n * constraints.synmem_bytes),
        },
    )
    return report
