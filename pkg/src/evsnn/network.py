"""Spiking CNN definition, discrete LIF forward pass, prediction rules.

The neuron model is the iterative leaky integrate-and-fire update

    u[t] = u[t-1] * tau * (1 - o[t-1]) + drive[t]
    o[t] = 1  if u[t] >= v_th  else 0

so a spike at t-1 multiplicatively resets the carried potential, and the
surviving potential leaks by factor tau per step.  The drive is the layer's
weighted input (plus bias).  Average-pooling layers are spiking neurons of
this same kind with fixed uniform weights 1/kernel^2; a linear pooling mode
(pass the averaged value through, no neuron) is available for training
experiments.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import ops
from .errors import EmptyInput, InvalidConfig, ShapeMismatch
from .seeding import rng_stream

POOL = "avg_pool"
CONV = "conv2d"
DENSE = "dense"

POOLING_SPIKING = "spiking"
POOLING_LINEAR = "linear"

_FORMAT_NAME = "evsnn-network"
_FORMAT_VERSION = 1


@dataclass
class LifParams:
    v_th: float = 0.4
    tau: float = 0.2
    a1: float = 0.8  # full width of the surrogate-gradient window
    reset_value: float = 0.0


@dataclass
class LayerSpec:
    kind: str
    in_channels: int
    out_channels: int
    kernel: int = 0
    padding: int = 0
    stride: int = 1
    weight: np.ndarray | None = None
    bias: np.ndarray | None = None

    @property
    def learnable(self):
        return self.kind in (CONV, DENSE)

    @property
    def pool_weight(self):
        """Fixed synaptic weight of an averaging layer."""
        return 1.0 / float(self.kernel * self.kernel)


def conv_layer(in_channels, out_channels, kernel=3, padding=1):
    return LayerSpec(CONV, in_channels, out_channels, kernel=kernel, padding=padding)


def pool_layer(channels, kernel):
    return LayerSpec(POOL, channels, channels, kernel=kernel, stride=kernel)


def dense_layer(in_features, out_features):
    return LayerSpec(DENSE, in_features, out_features)


def shape_chain(input_size, layers):
    """Output shape of every layer; raises ShapeMismatch on inconsistency.

    Pooling uses ceil arithmetic (partial windows are zero-padded), which is
    what makes the dense head sizes work out on non-power-of-two inputs.
    """
    shapes = []
    current = tuple(input_size)
    for i, layer in enumerate(layers):
        if layer.kind == POOL:
            if len(current) != 3 or current[0] != layer.in_channels:
                raise ShapeMismatch(f"layer {i}: pool expects {layer.in_channels} channels, has {current}")
            current = (
                layer.in_channels,
                -(-current[1] // layer.kernel),
                -(-current[2] // layer.kernel),
            )
        elif layer.kind == CONV:
            if len(current) != 3 or current[0] != layer.in_channels:
                raise ShapeMismatch(f"layer {i}: conv expects {layer.in_channels} channels, has {current}")
            h = current[1] + 2 * layer.padding - layer.kernel + 1
            w = current[2] + 2 * layer.padding - layer.kernel + 1
            if h <= 0 or w <= 0:
                raise ShapeMismatch(f"layer {i}: conv output collapses on {current}")
            current = (layer.out_channels, h, w)
        elif layer.kind == DENSE:
            flat = int(np.prod(current))
            if flat != layer.in_channels:
                raise ShapeMismatch(
                    f"layer {i}: dense expects {layer.in_channels} inputs, previous layer yields {flat}"
                )
            current = (layer.out_channels,)
        else:
            raise InvalidConfig(f"unknown layer kind {layer.kind!r}")
        shapes.append(current)
    return shapes


@dataclass
class NetworkSpec:
    input_size: tuple
    layers: list
    lif: LifParams = field(default_factory=LifParams)

    def layer_shapes(self):
        return shape_chain(self.input_size, self.layers)

    def validate(self):
        self.layer_shapes()
        for i, layer in enumerate(self.layers):
            if not layer.learnable:
                continue
            if layer.weight is None:
                raise InvalidConfig(f"layer {i} has no weights")
            if layer.kind == CONV:
                want = (layer.out_channels, layer.in_channels, layer.kernel, layer.kernel)
            else:
                want = (layer.out_channels, layer.in_channels)
            if layer.weight.shape != want:
                raise ShapeMismatch(f"layer {i} weight shape {layer.weight.shape}, expected {want}")
            if layer.bias is not None and layer.bias.shape != (layer.out_channels,):
                raise ShapeMismatch(f"layer {i} bias shape {layer.bias.shape}")
        return self

    @property
    def output_size(self):
        return self.layer_shapes()[-1][0]


# architecture shared by all input variants: the dense head sizes are what
# the ceil-mode pooling chain produces for each input width
VARIANTS = {
    "full128": {"input": 128, "dense_in": 2048, "hidden": 1024},
    "win100": {"input": 100, "dense_in": 1568, "hidden": 512},
    "win50": {"input": 50, "dense_in": 512, "hidden": 144},
}


def build_network(variant: str, seed: int = 0, lif: LifParams | None = None) -> NetworkSpec:
    """Two conv blocks with average pooling, then a two-layer dense head.

    Weights start uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)]; biases start
    (and by policy stay) zero.
    """
    if variant not in VARIANTS:
        raise InvalidConfig(f"unknown variant {variant!r}; pick one of {sorted(VARIANTS)}")
    v = VARIANTS[variant]
    layers = [
        pool_layer(2, 4),
        conv_layer(2, 32),
        pool_layer(32, 2),
        conv_layer(32, 32),
        pool_layer(32, 2),
        dense_layer(v["dense_in"], v["hidden"]),
        dense_layer(v["hidden"], 2),
    ]
    net = NetworkSpec(
        input_size=(2, v["input"], v["input"]),
        layers=layers,
        lif=lif if lif is not None else LifParams(),
    )
    init_weights(net, seed)
    return net.validate()


def init_weights(network: NetworkSpec, seed: int):
    for li, layer in enumerate(network.layers):
        if not layer.learnable:
            continue
        rng = rng_stream(seed, "init", li)
        if layer.kind == CONV:
            fan_in = layer.in_channels * layer.kernel * layer.kernel
            shape = (layer.out_channels, layer.in_channels, layer.kernel, layer.kernel)
        else:
            fan_in = layer.in_channels
            shape = (layer.out_channels, layer.in_channels)
        bound = 1.0 / math.sqrt(fan_in)
        layer.weight = rng.uniform(-bound, bound, size=shape)
        layer.bias = np.zeros(layer.out_channels)
    return network


# --------------------------------------------------------------------------
# forward dynamics


def lif_step(u_prev, o_prev, x_in, params: LifParams):
    """One neuron update; x_in is the full synaptic drive for this step."""
    u = u_prev * params.tau * (1.0 - o_prev) + x_in
    o = (u >= params.v_th).astype(np.float64)
    return u, o


def layer_drive(layer: LayerSpec, inp):
    """Weighted input of a layer (bias included), batched over axis 0."""
    if layer.kind == POOL:
        return ops.pool_sum(inp, layer.kernel) * layer.pool_weight
    if layer.kind == CONV:
        return ops.conv2d(inp, layer.weight, layer.padding) + layer.bias[None, :, None, None]
    flat = inp.reshape(inp.shape[0], -1)
    return ops.dense(flat, layer.weight) + layer.bias[None, :]


@dataclass
class StateRecord:
    """Per-layer trajectories of one frame: arrays indexed [step, ...].

    drives holds the synaptic input, potentials the membrane value,
    spikes the emitted output (binary, except linear-pooling layers where
    it is the passed-through average).  frame is the layer-0 input.
    """

    frame: np.ndarray
    drives: list
    potentials: list
    spikes: list
    pooling: str = POOLING_SPIKING

    @property
    def n_steps(self):
        return self.spikes[-1].shape[0]


class _BatchState:
    def __init__(self, network, batch, shapes):
        self.u = [np.zeros((batch,) + s) for s in shapes]
        self.o = [np.zeros((batch,) + s) for s in shapes]


def _forward_batch(network, frames, steps, pooling=POOLING_SPIKING, record=True, state=None):
    """Run `steps` timesteps with constant input `frames` [B,2,H,W].

    Returns (per-layer records or None, output spike counts [B,out],
    final output potentials [B,out], state).
    """
    if pooling not in (POOLING_SPIKING, POOLING_LINEAR):
        raise InvalidConfig(f"unknown pooling mode {pooling!r}")
    if tuple(frames.shape[1:]) != tuple(network.input_size):
        raise ShapeMismatch(f"frames {frames.shape[1:]} vs network input {network.input_size}")
    shapes = network.layer_shapes()
    batch = frames.shape[0]
    if state is None:
        state = _BatchState(network, batch, shapes)
    lif = network.lif
    n_out = shapes[-1][0]
    counts = np.zeros((batch, n_out))
    rec = None
    if record:
        rec = {
            "drives": [np.zeros((steps, batch) + s) for s in shapes],
            "potentials": [np.zeros((steps, batch) + s) for s in shapes],
            "spikes": [np.zeros((steps, batch) + s) for s in shapes],
        }
    out = None
    for t in range(steps):
        inp = frames
        for li, layer in enumerate(network.layers):
            drive = layer_drive(layer, inp)
            if layer.kind == POOL and pooling == POOLING_LINEAR:
                out = drive
                u_now = state.u[li]  # untouched zeros
            else:
                u_now, out = lif_step(state.u[li], state.o[li], drive, lif)
                state.u[li], state.o[li] = u_now, out
            if record:
                rec["drives"][li][t] = drive
                rec["potentials"][li][t] = u_now
                rec["spikes"][li][t] = out
            inp = out
        counts += out
    return rec, counts, state.u[-1].copy(), state


def forward(network, frames, frame_repeat, pooling=POOLING_SPIKING, carry_state=False):
    """Run each spike frame for frame_repeat steps; one StateRecord each.

    Neuron state starts from zero for every frame unless carry_state is
    set, in which case it persists across consecutive frames.
    """
    records = []
    if carry_state:
        state = None
        for f in frames:
            bits = f.bits.astype(np.float64)[None]
            rec, _, _, state = _forward_batch(
                network, bits, frame_repeat, pooling=pooling, record=True, state=state
            )
            records.append(_slice_record(f, rec, 0, pooling))
        return records
    stacked = np.stack([f.bits for f in frames]).astype(np.float64)
    rec, _, _, _ = _forward_batch(network, stacked, frame_repeat, pooling=pooling, record=True)
    for i, f in enumerate(frames):
        records.append(_slice_record(f, rec, i, pooling))
    return records


def _slice_record(frame, rec, i, pooling):
    return StateRecord(
        frame=frame.bits.copy(),
        drives=[a[:, i] for a in rec["drives"]],
        potentials=[a[:, i] for a in rec["potentials"]],
        spikes=[a[:, i] for a in rec["spikes"]],
        pooling=pooling,
    )


# --------------------------------------------------------------------------
# prediction rules (shared with the chip emulator)


def pick_class(counts, final_potentials):
    """Argmax of spike counts; ties fall to the higher final potential,
    then to the lower class index."""
    counts = np.asarray(counts)
    best = np.flatnonzero(counts == counts.max())
    if len(best) == 1:
        return int(best[0])
    pots = np.asarray(final_potentials)[best]
    return int(best[np.flatnonzero(pots == pots.max())[0]])


def predict_frame(record: StateRecord) -> int:
    counts = record.spikes[-1].sum(axis=0)
    return pick_class(counts, record.potentials[-1][-1])


def predict_stream(frame_predictions) -> int:
    """Majority vote over per-frame predictions; ties keep the last frame's."""
    preds = list(frame_predictions)
    if not preds:
        raise EmptyInput("no frame predictions to vote on")
    counts = np.bincount(preds)
    winners = np.flatnonzero(counts == counts.max())
    if len(winners) > 1:
        return int(preds[-1])
    return int(winners[0])


# --------------------------------------------------------------------------
# serialization: JSON description plus little-endian float64 sidecar


def save_network(network: NetworkSpec, path) -> Path:
    path = Path(path)
    sidecar = path.with_suffix(".bin")
    chunks = []
    offset = 0
    layer_docs = []
    for layer in network.layers:
        doc = {
            "kind": layer.kind,
            "in_channels": layer.in_channels,
            "out_channels": layer.out_channels,
            "kernel": layer.kernel,
            "padding": layer.padding,
            "stride": layer.stride,
        }
        if layer.learnable:
            for name, arr in (("weight", layer.weight), ("bias", layer.bias)):
                doc[name] = {"offset": offset, "shape": list(arr.shape)}
                flat = np.ascontiguousarray(arr, dtype="<f8")
                chunks.append(flat.tobytes())
                offset += flat.size
        layer_docs.append(doc)
    doc = {
        "format": _FORMAT_NAME,
        "version": _FORMAT_VERSION,
        "input_size": list(network.input_size),
        "lif": {
            "v_th": network.lif.v_th,
            "tau": network.lif.tau,
            "a1": network.lif.a1,
            "reset_value": network.lif.reset_value,
        },
        "layers": layer_docs,
        "weights_file": sidecar.name,
    }
    sidecar.write_bytes(b"".join(chunks))
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def load_network(path) -> NetworkSpec:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise InvalidConfig(f"cannot read model {path}: {exc}")
    except ValueError as exc:
        raise InvalidConfig(f"model {path} is not valid JSON: {exc}")
    if doc.get("format") != _FORMAT_NAME:
        raise InvalidConfig(f"{path} is not a network file")
    if doc.get("version") != _FORMAT_VERSION:
        raise InvalidConfig(f"unsupported network format version {doc.get('version')}")
    blob = np.frombuffer((path.parent / doc["weights_file"]).read_bytes(), dtype="<f8")
    layers = []
    for ld in doc["layers"]:
        layer = LayerSpec(
            kind=ld["kind"],
            in_channels=ld["in_channels"],
            out_channels=ld["out_channels"],
            kernel=ld["kernel"],
            padding=ld["padding"],
            stride=ld["stride"],
        )
        for name in ("weight", "bias"):
            if name in ld:
                shape = tuple(ld[name]["shape"])
                start = ld[name]["offset"]
                arr = blob[start : start + int(np.prod(shape))].reshape(shape).astype(np.float64)
                setattr(layer, name, arr)
        layers.append(layer)
    lif = LifParams(**doc["lif"])
    net = NetworkSpec(input_size=tuple(doc["input_size"]), layers=layers, lif=lif)
    return net.validate()
