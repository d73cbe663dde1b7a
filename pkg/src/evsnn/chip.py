"""Fixed-point chip emulation of the trained network.

On the target neurocore a compartment keeps two integer state words and is
updated each timestep as

    comp_i' = comp_i * (4096 - delta_i) // 4096  +  (sum_j w_j s_j) << (6 + wgt_exp)
    comp_v' = comp_v * (4096 - delta_v) // 4096  +  comp_i'  +  bias
    spike   if comp_v' >= vth_mant << 6, then comp_v' resets to 0

with all divisions truncating toward zero.  With delta_i = 4096 the current
word carries no memory and the update matches the float network's dynamics
scaled by scale * 2**(6 + wgt_exp): weights are stored as small integers
(w * scale rounded onto the mantissa grid), vth_mant = scale * v_th, and
delta_v encodes the leak factor tau as (4096 - delta_v) / 4096.

Quantisation, the integer step itself, the end-to-end inference protocol
(each frame replicated for several timesteps followed by blank timesteps),
and a float-vs-integer equivalence check live here.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ops
from .errors import InvalidConfig, ShapeMismatch, WeightOverflow
from .network import (
    CONV,
    DENSE,
    POOL,
    POOLING_SPIKING,
    LifParams,
    NetworkSpec,
    pick_class,
    predict_stream,
    shape_chain,
)

DECAY_UNITY = 4096  # 12-bit decay denominator
DEFAULT_WEIGHT_SCALE = 25
DEFAULT_REPLICATION = 10
DEFAULT_BLANK = 7

_QFORMAT_NAME = "evsnn-quantized"
_QFORMAT_VERSION = 1


@dataclass(frozen=True)
class WeightEncoding:
    """Representable integer grid of a synapse bank: {lo..hi} step `step`."""

    step: int
    lo: int
    hi: int

    def grid_round(self, values):
        """Nearest representable integer, half away from zero, no clamping."""
        v = np.asarray(values, dtype=np.float64) / self.step
        q = np.sign(v) * np.floor(np.abs(v) + 0.5)
        return (q.astype(np.int64)) * self.step

    def contains(self, ints):
        ints = np.asarray(ints)
        return bool(np.all((ints >= self.lo) & (ints <= self.hi) & (ints % self.step == 0)))


# eight-bit banks: a mixed-sign bank gives up its lowest bit, a single-sign
# bank keeps full precision; the narrow signed grid is selectable
ENCODING_MIXED = WeightEncoding(step=2, lo=-255, hi=254)
ENCODING_POSITIVE = WeightEncoding(step=1, lo=0, hi=255)
ENCODING_NEGATIVE = WeightEncoding(step=1, lo=-255, hi=0)
ENCODING_SIGNED7 = WeightEncoding(step=1, lo=-128, hi=127)


def choose_encoding(weights) -> WeightEncoding:
    w = np.asarray(weights)
    has_pos = bool(np.any(w > 0))
    has_neg = bool(np.any(w < 0))
    if has_pos and has_neg:
        return ENCODING_MIXED
    if has_neg:
        return ENCODING_NEGATIVE
    return ENCODING_POSITIVE


@dataclass
class QuantLayer:
    kind: str
    in_channels: int
    out_channels: int
    kernel: int = 0
    padding: int = 0
    stride: int = 1
    weight: np.ndarray | None = None  # int64; pooling layers use a 0-d scalar
    wgt_exp: int = 0
    bias: int = 0
    vth_mant: int = 0
    delta_v: int = 0
    delta_i: int = DECAY_UNITY
    encoding: WeightEncoding = ENCODING_MIXED

    @property
    def learnable(self):
        return self.kind in (CONV, DENSE)


@dataclass
class QuantizedNetwork:
    input_size: tuple
    layers: list
    scale: int
    vth_mant: int
    delta_v: int
    delta_i: int
    lif_ref: LifParams = field(default_factory=LifParams)
    quant_error: list = field(default_factory=list)

    def layer_shapes(self):
        return shape_chain(self.input_size, self.layers)


@dataclass
class CubaState:
    comp_v: np.ndarray
    comp_i: np.ndarray

    @classmethod
    def zeros(cls, shape):
        return cls(np.zeros(shape, dtype=np.int64), np.zeros(shape, dtype=np.int64))


def fixed_decay(values, delta, mode="trunc"):
    """values * (4096 - delta) / 4096 in integer arithmetic.

    The default truncates toward zero, matching the chip; mode="floor"
    exists so the difference stays observable in one place.
    """
    if not 0 <= delta <= DECAY_UNITY:
        raise InvalidConfig(f"decay constant {delta} outside [0, {DECAY_UNITY}]")
    scaled = np.asarray(values, dtype=np.int64) * (DECAY_UNITY - delta)
    if mode == "floor":
        return scaled // DECAY_UNITY
    if mode != "trunc":
        raise InvalidConfig(f"unknown rounding mode {mode!r}")
    return np.sign(scaled) * (np.abs(scaled) // DECAY_UNITY)


def quantize(
    network: NetworkSpec,
    scale: int = DEFAULT_WEIGHT_SCALE,
    delta_i: int = DECAY_UNITY,
    encoding: WeightEncoding | None = None,
) -> QuantizedNetwork:
    """Translate a trained float network onto the integer grid.

    Per-weight error is bounded by half the grid step over the scale; a
    weight that lands outside its bank's representable range raises
    WeightOverflow rather than clamping silently.  delta_i defaults to the
    memoryless setting the float model corresponds to, and is overridable
    for studying mismatched translations.
    """
    if scale <= 0:
        raise InvalidConfig("scale must be positive")
    if not 0 <= delta_i <= DECAY_UNITY:
        raise InvalidConfig(f"delta_i {delta_i} outside [0, {DECAY_UNITY}]")
    lif = network.lif
    vth_mant = int(np.sign(scale * lif.v_th) * np.floor(abs(scale * lif.v_th) + 0.5))
    delta_v = int(DECAY_UNITY * (1.0 - lif.tau))  # truncation keeps the listed grid value
    if not 0 <= delta_v <= DECAY_UNITY:
        raise InvalidConfig(f"tau {lif.tau} translates outside the decay range")

    qlayers = []
    errors = []
    for li, layer in enumerate(network.layers):
        if layer.learnable:
            if layer.bias is not None and np.any(layer.bias != 0):
                raise InvalidConfig(f"layer {li}: non-zero bias cannot be translated (policy keeps bias 0)")
            enc = encoding if encoding is not None else choose_encoding(layer.weight)
            ints = enc.grid_round(layer.weight * scale)
            if not enc.contains(ints):
                bad = ints[(ints < enc.lo) | (ints > enc.hi)]
                raise WeightOverflow(
                    f"layer {li}: weight {bad.flat[0] / scale:.4f}*{scale} outside [{enc.lo}, {enc.hi}]"
                )
            err = np.abs(layer.weight - ints / scale)
            errors.append({"layer": li, "max_abs": float(err.max()), "rms": float(np.sqrt((err**2).mean()))})
        else:
            enc = encoding if encoding is not None else ENCODING_POSITIVE
            ints = enc.grid_round(np.asarray(layer.pool_weight * scale))
            if not enc.contains(ints):
                raise WeightOverflow(f"layer {li}: pooling weight does not fit the bank")
            err = abs(layer.pool_weight - int(ints) / scale)
            errors.append({"layer": li, "max_abs": float(err), "rms": float(err)})
        qlayers.append(
            QuantLayer(
                kind=layer.kind,
                in_channels=layer.in_channels,
                out_channels=layer.out_channels,
                kernel=layer.kernel,
                padding=layer.padding,
                stride=layer.stride,
                weight=ints,
                wgt_exp=0,
                bias=0,
                vth_mant=vth_mant,
                delta_v=delta_v,
                delta_i=delta_i,
                encoding=enc,
            )
        )
    return QuantizedNetwork(
        input_size=tuple(network.input_size),
        layers=qlayers,
        scale=scale,
        vth_mant=vth_mant,
        delta_v=delta_v,
        delta_i=delta_i,
        lif_ref=LifParams(lif.v_th, lif.tau, lif.a1, lif.reset_value),
        quant_error=errors,
    )


def _weighted_sum_int(layer: QuantLayer, spikes):
    """Integer synaptic sum of a layer for binary input spikes [B, ...]."""
    if layer.kind == POOL:
        return ops.pool_sum(spikes, layer.kernel) * int(layer.weight)
    if layer.kind == CONV:
        return ops.conv2d(spikes, layer.weight, layer.padding)
    return ops.dense(spikes.reshape(spikes.shape[0], -1), layer.weight)


def cuba_step(state: CubaState, layer: QuantLayer, input_spikes):
    """One integer timestep of one layer; returns (new state, spikes).

    Pure integer arithmetic throughout, so results are bit-identical on
    any platform.  The potential resets to zero in the same step a spike
    is emitted.
    """
    drive = _weighted_sum_int(layer, np.asarray(input_spikes, dtype=np.int64))
    comp_i = fixed_decay(state.comp_i, layer.delta_i) + (drive << (6 + layer.wgt_exp))
    comp_v = fixed_decay(state.comp_v, layer.delta_v) + comp_i + layer.bias
    spikes = (comp_v >= (layer.vth_mant << 6)).astype(np.int64)
    comp_v = np.where(spikes == 1, 0, comp_v)
    return CubaState(comp_v, comp_i), spikes


@dataclass
class EmulationResult:
    class_id: int
    frame_predictions: list
    trace: list  # per timestep: output-layer spike vector
    timesteps_per_inference: int


def _zero_states(qnet, batch):
    return [CubaState.zeros((batch,) + s) for s in qnet.layer_shapes()]


def _emulate_batch(qnet, frames, replication, blank, states, collect_trace=False):
    """Advance a batch [B,2,H,W] through one frame window; returns
    (spike counts [B,out], final potentials [B,out], trace)."""
    batch = frames.shape[0]
    n_out = qnet.layer_shapes()[-1][0]
    counts = np.zeros((batch, n_out), dtype=np.int64)
    zeros = np.zeros_like(frames)
    trace = []
    for step in range(replication + blank):
        spikes = frames if step < replication else zeros
        for li, layer in enumerate(qnet.layers):
            states[li], spikes = cuba_step(states[li], layer, spikes)
        counts += spikes
        if collect_trace:
            trace.append(spikes.copy())
    return counts, states[-1].comp_v.copy(), trace


def emulate_inference(
    qnet: QuantizedNetwork,
    frames,
    replication: int = DEFAULT_REPLICATION,
    blank: int = DEFAULT_BLANK,
) -> EmulationResult:
    """Chip-protocol inference over one stream's spike frames.

    Each frame drives the network for `replication` timesteps and is
    followed by `blank` zero-input timesteps; state decays through the
    blanks and is never reset between frames.  Per-frame predictions use
    the same spike-count / final-potential / lower-index rules as the
    float network, and the stream vote is shared too.
    """
    if replication < 1 or blank < 0:
        raise InvalidConfig("replication must be >= 1 and blank >= 0")
    if not frames:
        raise InvalidConfig("no frames to run")
    states = _zero_states(qnet, 1)
    preds = []
    trace = []
    for f in frames:
        bits = np.asarray(f.bits, dtype=np.int64)[None]
        if tuple(bits.shape[1:]) != tuple(qnet.input_size):
            raise ShapeMismatch(f"frame {bits.shape[1:]} vs network input {qnet.input_size}")
        counts, finals, t = _emulate_batch(qnet, bits, replication, blank, states, collect_trace=True)
        preds.append(pick_class(counts[0], finals[0]))
        trace.extend(v[0] for v in t)
    return EmulationResult(
        class_id=predict_stream(preds),
        frame_predictions=preds,
        trace=trace,
        timesteps_per_inference=replication + blank,
    )


def evaluate_emulated(qnet, streams, acc_cfg, replication=DEFAULT_REPLICATION, blank=DEFAULT_BLANK, threads=1):
    """Frame and stream accuracy of the integer network over full streams."""
    from .preprocess import fit_canvas, sample_frames
    from .training import EvalResult, _parallel_map

    h, w = qnet.input_size[1], qnet.input_size[2]
    prepared = [fit_canvas(s, w, h) for s in streams]
    per_stream = acc_cfg.frames_per_clip

    def run(chunk):
        hits_f = 0
        hits_s = 0
        for s in chunk:
            frames = sample_frames(s, 0, acc_cfg)
            result = emulate_inference(qnet, frames, replication, blank)
            hits_f += sum(int(p == s.label) for p in result.frame_predictions)
            hits_s += int(result.class_id == s.label)
        return hits_f, hits_s

    chunks = [prepared[i : i + 16] for i in range(0, len(prepared), 16)]
    parts = _parallel_map(run, chunks, threads)
    frame_hits = sum(p[0] for p in parts)
    stream_hits = sum(p[1] for p in parts)
    n_frames = per_stream * len(prepared)
    return EvalResult(
        acc_frames=frame_hits / max(1, n_frames),
        acc_streams=stream_hits / max(1, len(prepared)),
        n_frames=n_frames,
        n_streams=len(prepared),
    )


# --------------------------------------------------------------------------
# float vs integer equivalence


def equivalence_check(
    network: NetworkSpec,
    qnet: QuantizedNetwork,
    frames,
    replication: int = DEFAULT_REPLICATION,
    blank: int = DEFAULT_BLANK,
) -> dict:
    """Lockstep comparison of the float network against the integer one.

    The float side runs in spiking-pooling mode with every weight replaced
    by its dequantised value and is kept state-aligned with the integer
    side (after comparing, both sides continue from the integer spike
    decision).  A correct translation can then disagree only where the
    float potential sits within a provable error band of the threshold:
    the band per layer is the accumulated integer truncation error (at
    most 1 unit per step, decayed each step) plus the drift the decay
    grid itself introduces.  Mismatches outside the band mean the two
    models genuinely diverge, and feasible_equivalence comes back False.
    """
    lif = network.lif
    shapes = qnet.layer_shapes()
    nominal_delta_v = int(DECAY_UNITY * (1.0 - lif.tau))
    decay_eff = (DECAY_UNITY - nominal_delta_v) / DECAY_UNITY
    delta_tau = abs(lif.tau - decay_eff)

    deq = [
        (np.asarray(layer.weight, dtype=np.float64) / qnet.scale) for layer in qnet.layers
    ]
    units = [float(qnet.scale * (1 << (6 + layer.wgt_exp))) for layer in qnet.layers]

    u = [np.zeros((1,) + s) for s in shapes]
    o_prev = [np.zeros((1,) + s) for s in shapes]
    states = _zero_states(qnet, 1)
    bounds = [0.0] * len(qnet.layers)
    prev_mag = [0.0] * len(qnet.layers)

    compared = 0
    mismatches = 0
    boundary = 0
    out_of_band = 0
    zeros_f = None
    for f in frames:
        bits_i = np.asarray(f.bits, dtype=np.int64)[None]
        bits_f = bits_i.astype(np.float64)
        if zeros_f is None:
            zeros_f = np.zeros_like(bits_f)
        for step in range(replication + blank):
            inp_f = bits_f if step < replication else zeros_f
            inp_i = bits_i if step < replication else np.zeros_like(bits_i)
            for li, (layer, qlayer) in enumerate(zip(network.layers, qnet.layers)):
                if layer.kind == POOL:
                    drive = ops.pool_sum(inp_f, layer.kernel) * (float(qlayer.weight) / qnet.scale)
                elif layer.kind == CONV:
                    drive = ops.conv2d(inp_f, deq[li], layer.padding)
                else:
                    drive = ops.dense(inp_f.reshape(1, -1), deq[li])
                u[li] = u[li] * lif.tau * (1.0 - o_prev[li]) + drive
                spikes_f = u[li] >= lif.v_th
                states[li], spikes_i = cuba_step(states[li], qlayer, inp_i)

                bounds[li] = bounds[li] * decay_eff + delta_tau * prev_mag[li] * units[li] + 1.0
                prev_mag[li] = float(np.abs(u[li]).max())
                band = bounds[li] / units[li]
                diff = spikes_f != (spikes_i == 1)
                compared += diff.size
                n_diff = int(diff.sum())
                if n_diff:
                    mismatches += n_diff
                    near = np.abs(u[li] - lif.v_th) < band
                    boundary += int((diff & near).sum())
                    out_of_band += int((diff & ~near).sum())
                # re-align on the integer decision so later steps stay comparable
                o_prev[li] = spikes_i.astype(np.float64)
                inp_f = o_prev[li]
                inp_i = spikes_i
    return {
        "compared": compared,
        "mismatches": mismatches,
        "boundary_mismatches": boundary,
        "out_of_band_mismatches": out_of_band,
        "feasible_equivalence": out_of_band == 0,
        "error_band_units": [float(b) for b in bounds],
        "replication": replication,
        "blank": blank,
    }


# --------------------------------------------------------------------------
# serialization: JSON description plus little-endian int32 sidecar


def save_quantized(qnet: QuantizedNetwork, path) -> Path:
    path = Path(path)
    sidecar = path.with_suffix(".bin")
    chunks = []
    offset = 0
    layer_docs = []
    for layer in qnet.layers:
        arr = np.ascontiguousarray(np.atleast_1d(layer.weight), dtype="<i4")
        doc = {
            "kind": layer.kind,
            "in_channels": layer.in_channels,
            "out_channels": layer.out_channels,
            "kernel": layer.kernel,
            "padding": layer.padding,
            "stride": layer.stride,
            "wgt_exp": layer.wgt_exp,
            "bias": layer.bias,
            "encoding": {"step": layer.encoding.step, "lo": layer.encoding.lo, "hi": layer.encoding.hi},
            "weight": {"offset": offset, "shape": list(np.shape(layer.weight))},
        }
        chunks.append(arr.tobytes())
        offset += arr.size
        layer_docs.append(doc)
    doc = {
        "format": _QFORMAT_NAME,
        "version": _QFORMAT_VERSION,
        "input_size": list(qnet.input_size),
        "scale": qnet.scale,
        "vth_mant": qnet.vth_mant,
        "delta_v": qnet.delta_v,
        "delta_i": qnet.delta_i,
        "lif_ref": {
            "v_th": qnet.lif_ref.v_th,
            "tau": qnet.lif_ref.tau,
            "a1": qnet.lif_ref.a1,
            "reset_value": qnet.lif_ref.reset_value,
        },
        "quant_error": qnet.quant_error,
        "layers": layer_docs,
        "weights_file": sidecar.name,
    }
    sidecar.write_bytes(b"".join(chunks))
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def load_quantized(path) -> QuantizedNetwork:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise InvalidConfig(f"cannot read quantized model {path}: {exc}")
    except ValueError as exc:
        raise InvalidConfig(f"quantized model {path} is not valid JSON: {exc}")
    if doc.get("format") != _QFORMAT_NAME:
        raise InvalidConfig(f"{path} is not a quantized network file")
    if doc.get("version") != _QFORMAT_VERSION:
        raise InvalidConfig(f"unsupported quantized format version {doc.get('version')}")
    blob = np.frombuffer((path.parent / doc["weights_file"]).read_bytes(), dtype="<i4")
    layers = []
    for ld in doc["layers"]:
        shape = tuple(ld["weight"]["shape"])
        start = ld["weight"]["offset"]
        size = int(np.prod(shape)) if shape else 1
        arr = blob[start : start + size].astype(np.int64)
        weight = arr.reshape(shape) if shape else arr[0]
        layers.append(
            QuantLayer(
                kind=ld["kind"],
                in_channels=ld["in_channels"],
                out_channels=ld["out_channels"],
                kernel=ld["kernel"],
                padding=ld["padding"],
                stride=ld["stride"],
                weight=weight,
                wgt_exp=ld["wgt_exp"],
                bias=ld["bias"],
                vth_mant=doc["vth_mant"],
                delta_v=doc["delta_v"],
                delta_i=doc["delta_i"],
                encoding=WeightEncoding(**ld["encoding"]),
            )
        )
    return QuantizedNetwork(
        input_size=tuple(doc["input_size"]),
        layers=layers,
        scale=doc["scale"],
        vth_mant=doc["vth_mant"],
        delta_v=doc["delta_v"],
        delta_i=doc["delta_i"],
        lif_ref=LifParams(**doc["lif_ref"]),
        quant_error=doc["quant_error"],
    )
