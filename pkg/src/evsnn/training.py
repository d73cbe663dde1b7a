"""Surrogate-gradient training of the spiking network.

The backward pass is written out by hand: the loss gradient is carried
backwards through both the layer stack (spatial direction) and the
timestep chain (temporal direction).  For layer n with potential u and
spike output o the recursion over dL/du is

    P[t,n] = dL/do[t,n] * h(u[t,n]) + P[t+1,n] * tau * (1 - o[t,n])

where h is the rectangular surrogate derivative of the spike function and
the second term is the derivative of the leak path u[t+1] = u[t] * tau *
(1 - o[t]) + drive.  dL/do comes from the layer above at the same step
(or from the loss, for the top layer).  By default no gradient flows
through the spike that gates the reset; reset_grad="full" adds that
product-rule path for comparison.  Weight gradients sum P[t,n] against the
previous layer's outputs over all steps.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ops
from .errors import InvalidConfig, ShapeMismatch
from .network import (
    CONV,
    DENSE,
    POOL,
    POOLING_LINEAR,
    POOLING_SPIKING,
    NetworkSpec,
    StateRecord,
    _forward_batch,
    pick_class,
    predict_stream,
    save_network,
)
from .preprocess import AccumulationConfig, fit_canvas, random_clip, sample_frames
from .seeding import rng_stream

_EVAL_CHUNK = 256


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 40
    lr_initial: float = 1e-3
    lr_halving_period_epochs: int = 20
    t_sample_us: int = 1000
    t_length_us: int = 10_000
    frame_repeat: int = 20
    seed: int = 0
    pooling: str = POOLING_SPIKING
    reset_grad: str = "detached"
    grad_chunk: int = 32  # frames per accumulation slice; fixed so thread count cannot change results
    calibrate: bool = True

    def validate(self):
        if self.epochs < 0 or self.batch_size < 1 or self.grad_chunk < 1:
            raise InvalidConfig("epochs, batch_size and grad_chunk must be sensible")
        if self.lr_initial <= 0 or self.lr_halving_period_epochs < 1:
            raise InvalidConfig("learning rate and halving period must be positive")
        if self.frame_repeat < 1:
            raise InvalidConfig("frame_repeat must be at least 1")
        AccumulationConfig(self.t_sample_us, self.t_length_us, self.frame_repeat).validate()
        if self.pooling not in (POOLING_SPIKING, POOLING_LINEAR):
            raise InvalidConfig(f"unknown pooling mode {self.pooling!r}")
        if self.reset_grad not in ("detached", "full"):
            raise InvalidConfig(f"unknown reset_grad mode {self.reset_grad!r}")
        return self

    def accumulation(self):
        return AccumulationConfig(self.t_sample_us, self.t_length_us, self.frame_repeat)


@dataclass
class GradientSet:
    weights: dict
    biases: dict

    @classmethod
    def zeros_for(cls, network):
        w = {li: np.zeros_like(L.weight) for li, L in enumerate(network.layers) if L.learnable}
        b = {li: np.zeros_like(L.bias) for li, L in enumerate(network.layers) if L.learnable}
        return cls(w, b)

    def iadd(self, other):
        for li in self.weights:
            self.weights[li] += other.weights[li]
            self.biases[li] += other.biases[li]
        return self


@dataclass
class Metrics:
    acc_s: float = 0.0
    acc_test: float = 0.0
    acc_train: float = 0.0
    loss_curve: list = field(default_factory=list)
    history: list = field(default_factory=list)


@dataclass
class EvalResult:
    acc_frames: float
    acc_streams: float
    n_frames: int
    n_streams: int


def surrogate_grad(u, lif):
    """Rectangular window around threshold: 1/a1 inside, 0 outside."""
    return np.where(np.abs(u - lif.v_th) < lif.a1 / 2.0, 1.0 / lif.a1, 0.0)


def one_hot(labels, n_classes):
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((len(labels), n_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def _target_vector(label, n):
    """Accept a class index or an explicit target rate vector."""
    if isinstance(label, (int, np.integer)):
        if not 0 <= label < n:
            raise ShapeMismatch(f"label {label} outside {n} classes")
        y = np.zeros(n)
        y[label] = 1.0
        return y
    y = np.asarray(label, dtype=np.float64)
    if y.shape != (n,):
        raise ShapeMismatch(f"target shape {y.shape} vs {n} outputs")
    return y


def mse_loss(record: StateRecord, label) -> float:
    """Half squared distance between the target rates (one-hot of a class
    index) and the mean output spike rate over the frame's timesteps."""
    out = record.spikes[-1]
    y = _target_vector(label, out.shape[1])
    avg = out.mean(axis=0)
    return float(0.5 * ((y - avg) ** 2).sum())


def _op_adjoint(layer, grad_out, below_shape):
    """Map dL/d(drive of `layer`) to dL/d(output of the layer below)."""
    if layer.kind == CONV:
        return ops.conv2d_grad_input(grad_out, layer.weight, layer.padding)
    if layer.kind == POOL:
        return ops.pool_sum_grad(grad_out * layer.pool_weight, layer.kernel, below_shape[1], below_shape[2])
    g = ops.dense_grad_input(grad_out, layer.weight)
    return g.reshape((grad_out.shape[0],) + tuple(below_shape))


def _backward_batch(network, frames, rec, labels_1h, total_samples, pooling, reset_grad):
    """Gradients for one batch slice; loss scale is 1/total_samples so
    slices summed over a whole batch yield the batch-mean gradient."""
    lif = network.lif
    layers = network.layers
    steps = rec["spikes"][0].shape[0]
    shapes = network.layer_shapes()
    out_spikes = rec["spikes"][-1]
    avg = out_spikes.mean(axis=0)
    delta_out = (avg - labels_1h) / (total_samples * steps)
    losses = 0.5 * ((labels_1h - avg) ** 2).sum(axis=1)

    n = len(layers)
    grads = GradientSet.zeros_for(network)
    p_next = [np.zeros_like(rec["spikes"][li][0]) for li in range(n)]
    for t in reversed(range(steps)):
        p_cur = [None] * n
        for li in reversed(range(n)):
            layer = layers[li]
            if li == n - 1:
                dldo = delta_out
            else:
                dldo = _op_adjoint(layers[li + 1], p_cur[li + 1], shapes[li])
            if layer.kind == POOL and pooling == POOLING_LINEAR:
                p = dldo  # pass-through layer: no neuron, no temporal path
            else:
                u_t = rec["potentials"][li][t]
                o_t = rec["spikes"][li][t]
                if reset_grad == "full":
                    dldo = dldo - p_next[li] * u_t * lif.tau
                p = dldo * surrogate_grad(u_t, lif) + p_next[li] * lif.tau * (1.0 - o_t)
            p_cur[li] = p
            if layer.learnable:
                below = rec["spikes"][li - 1][t] if li > 0 else frames
                if layer.kind == CONV:
                    grads.weights[li] += ops.conv2d_grad_weight(below, p, layer.padding, layer.kernel)
                    grads.biases[li] += p.sum(axis=(0, 2, 3))
                else:
                    grads.weights[li] += ops.dense_grad_weight(below.reshape(below.shape[0], -1), p)
                    grads.biases[li] += p.sum(axis=0)
        p_next = p_cur
    return grads, losses


def backward(network, record: StateRecord, label, reset_grad="detached") -> GradientSet:
    """Per-sample gradients for one frame's StateRecord.

    `label` is a class index, or a full target rate vector for tests and
    non-classification uses.
    """
    rec = {
        "drives": [a[:, None] for a in record.drives],
        "potentials": [a[:, None] for a in record.potentials],
        "spikes": [a[:, None] for a in record.spikes],
    }
    frames = record.frame.astype(np.float64)[None]
    labels_1h = _target_vector(label, network.output_size)[None]
    grads, _ = _backward_batch(network, frames, rec, labels_1h, 1, record.pooling, reset_grad)
    return grads


# --------------------------------------------------------------------------
# optimisation


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_network(cls, network):
        m = {li: np.zeros_like(L.weight) for li, L in enumerate(network.layers) if L.learnable}
        v = {li: np.zeros_like(L.weight) for li, L in enumerate(network.layers) if L.learnable}
        return cls(m=m, v=v)


def adam_step(network, grads: GradientSet, state: AdamState, lr: float) -> AdamState:
    """Standard Adam update on the weights; biases are policy-frozen at 0."""
    state.step += 1
    b1c = 1.0 - state.beta1**state.step
    b2c = 1.0 - state.beta2**state.step
    for li, g in grads.weights.items():
        state.m[li] = state.beta1 * state.m[li] + (1.0 - state.beta1) * g
        state.v[li] = state.beta2 * state.v[li] + (1.0 - state.beta2) * g * g
        m_hat = state.m[li] / b1c
        v_hat = state.v[li] / b2c
        network.layers[li].weight -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return state


def lr_schedule(epoch: int, config: TrainConfig) -> float:
    """Initial rate halved every lr_halving_period_epochs epochs."""
    return config.lr_initial * 0.5 ** (epoch // config.lr_halving_period_epochs)


# --------------------------------------------------------------------------
# training and evaluation


def _parallel_map(fn, items, threads):
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _chunk_ranges(n, chunk):
    return [(a, min(a + chunk, n)) for a in range(0, n, chunk)]


def _prepare(streams, network):
    h, w = network.input_size[1], network.input_size[2]
    return [fit_canvas(s, w, h) for s in streams]


def _frames_to_array(frames):
    return np.stack([f.bits for f in frames]).astype(np.float64)


def calibrate_init(network, streams, config: TrainConfig):
    """Rescale each learnable layer once so its synaptic drive reaches the
    neurons' responsive range.

    Freshly initialised deep layers see sparse spike input and tiny
    fan-in-scaled weights, so their potentials sit near zero where both the
    spike function and its surrogate window are flat, and no gradient can
    reach the layers below.  This pass runs a small class-balanced clip
    batch (clips at t0 = 0, so it is deterministic) and scales weights
    layer by layer until the 99th percentile of positive drive sits a bit
    above threshold.  Purely an initialisation policy: the loss, surrogate
    and update rule are untouched.
    """
    target = 1.25 * network.lif.v_th
    per_class = max(1, config.batch_size // 2)
    chosen = []
    for label in (0, 1):
        chosen.extend([s for s in streams if s.label == label][:per_class])
    acc_cfg = config.accumulation()
    frames = []
    for s in chosen:
        frames.extend(sample_frames(s, 0, acc_cfg))
    if not frames:
        return network
    data = _frames_to_array(frames)
    for li, layer in enumerate(network.layers):
        if not layer.learnable:
            continue
        rec, _, _, _ = _forward_batch(
            network, data, config.frame_repeat, pooling=config.pooling, record=True
        )
        drive = rec["drives"][li]
        pos = drive[drive > 0]
        if pos.size == 0:
            continue
        q = float(np.quantile(pos, 0.99))
        if q > 0:
            layer.weight *= target / q
    return network


def evaluate(network, streams, config: TrainConfig, pooling=None, threads=1) -> EvalResult:
    """Deterministic accuracy: every stream is scored on the clip that
    starts at t0 = 0.  Frame accuracy counts every sample frame; stream
    accuracy counts majority votes."""
    config.validate()
    pooling = config.pooling if pooling is None else pooling
    streams = _prepare(streams, network)
    acc_cfg = config.accumulation()
    per_stream = acc_cfg.frames_per_clip
    frames = []
    labels = []
    for s in streams:
        frames.extend(sample_frames(s, 0, acc_cfg))
        labels.append(s.label)
    data = _frames_to_array(frames)

    def run(rng):
        a, b = rng
        _, counts, finals, _ = _forward_batch(
            network, data[a:b], config.frame_repeat, pooling=pooling, record=False
        )
        return counts, finals

    parts = _parallel_map(run, _chunk_ranges(len(data), _EVAL_CHUNK), threads)
    counts = np.concatenate([p[0] for p in parts])
    finals = np.concatenate([p[1] for p in parts])
    preds = np.array([pick_class(counts[i], finals[i]) for i in range(len(data))])
    preds = preds.reshape(len(streams), per_stream)
    frame_hits = 0
    stream_hits = 0
    for i, label in enumerate(labels):
        frame_hits += int((preds[i] == label).sum())
        stream_hits += int(predict_stream(preds[i]) == label)
    return EvalResult(
        acc_frames=frame_hits / preds.size,
        acc_streams=stream_hits / len(streams),
        n_frames=int(preds.size),
        n_streams=len(streams),
    )


def train(
    dataset,
    network: NetworkSpec,
    config: TrainConfig,
    threads=1,
    metrics_sink=None,
    checkpoint_every=0,
    checkpoint_dir=None,
    resume=None,
):
    """Train in place; returns (network, Metrics).

    Each epoch shuffles the training streams, draws one random clip per
    stream, splits it into sample frames and treats every frame as one
    training sample.  Gradients are averaged over the frames of a batch
    and applied with Adam; the learning rate follows lr_schedule.
    metrics_sink, when given, receives one dict per epoch.
    """
    config.validate()
    train_streams = _prepare(dataset.train, network)
    acc_cfg = config.accumulation()
    adam = AdamState.for_network(network)
    start_epoch = 0
    if resume is not None:
        adam, start_epoch = resume
    elif config.calibrate and config.epochs > 0:
        calibrate_init(network, train_streams, config)

    metrics = Metrics()
    n_out = network.output_size
    for epoch in range(start_epoch, config.epochs):
        # fresh named streams per epoch, so a resumed run replays the
        # exact shuffles and clip draws of an uninterrupted one
        shuffle_rng = rng_stream(config.seed, "shuffle", epoch)
        clip_rng = rng_stream(config.seed, "clip", epoch)
        lr = lr_schedule(epoch, config)
        order = shuffle_rng.permutation(len(train_streams))
        epoch_loss = 0.0
        epoch_frames = 0
        for b0 in range(0, len(order), config.batch_size):
            batch_idx = order[b0 : b0 + config.batch_size]
            frames = []
            labels = []
            for si in batch_idx:
                s = train_streams[si]
                t0 = random_clip(s, config.t_length_us, clip_rng)
                clip = sample_frames(s, t0, acc_cfg)
                frames.extend(clip)
                labels.extend([s.label] * len(clip))
            data = _frames_to_array(frames)
            labels_1h = one_hot(labels, n_out)
            total = len(frames)

            def work(rng):
                a, b = rng
                rec, _, _, _ = _forward_batch(
                    network, data[a:b], config.frame_repeat, pooling=config.pooling, record=True
                )
                return _backward_batch(
                    network, data[a:b], rec, labels_1h[a:b], total, config.pooling, config.reset_grad
                )

            parts = _parallel_map(work, _chunk_ranges(total, config.grad_chunk), threads)
            grads = GradientSet.zeros_for(network)
            for g, losses in parts:  # fixed reduction order regardless of thread count
                grads.iadd(g)
                epoch_loss += float(losses.sum())
            epoch_frames += total
            adam = adam_step(network, grads, adam, lr)

        test_eval = evaluate(network, dataset.test, config, threads=threads)
        train_eval = evaluate(network, dataset.train, config, threads=threads)
        row = {
            "epoch": epoch,
            "lr": lr,
            "loss": epoch_loss / max(1, epoch_frames),
            "acc_s": test_eval.acc_frames,
            "acc_test": test_eval.acc_streams,
            "acc_train": train_eval.acc_streams,
        }
        metrics.loss_curve.append(row["loss"])
        metrics.history.append(row)
        metrics.acc_s = row["acc_s"]
        metrics.acc_test = row["acc_test"]
        metrics.acc_train = row["acc_train"]
        if metrics_sink is not None:
            metrics_sink(row)
        if checkpoint_every and checkpoint_dir and (epoch + 1) % checkpoint_every == 0:
            save_checkpoint(Path(checkpoint_dir) / f"ckpt_ep{epoch + 1:04d}", network, adam, epoch + 1)

    if config.epochs == start_epoch or config.epochs == 0:
        test_eval = evaluate(network, dataset.test, config, threads=threads)
        train_eval = evaluate(network, dataset.train, config, threads=threads)
        metrics.acc_s = test_eval.acc_frames
        metrics.acc_test = test_eval.acc_streams
        metrics.acc_train = train_eval.acc_streams
    return network, metrics


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(prefix, network, adam: AdamState, epoch: int):
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    save_network(network, prefix.with_suffix(".json"))
    slots = []
    chunks = []
    offset = 0
    for name, bank in (("m", adam.m), ("v", adam.v)):
        for li in sorted(bank):
            arr = np.ascontiguousarray(bank[li], dtype="<f8")
            slots.append({"slot": name, "layer": li, "shape": list(arr.shape), "offset": offset})
            chunks.append(arr.tobytes())
            offset += arr.size
    doc = {
        "format": "evsnn-adam",
        "version": 1,
        "epoch": epoch,
        "step": adam.step,
        "beta1": adam.beta1,
        "beta2": adam.beta2,
        "eps": adam.eps,
        "slots": slots,
        "arrays_file": prefix.name + ".adam.bin",
    }
    (prefix.parent / (prefix.name + ".adam.bin")).write_bytes(b"".join(chunks))
    (prefix.parent / (prefix.name + ".adam.json")).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return prefix


def load_checkpoint(prefix):
    from .network import load_network

    prefix = Path(prefix)
    network = load_network(prefix.with_suffix(".json"))
    doc = json.loads((prefix.parent / (prefix.name + ".adam.json")).read_text())
    if doc.get("format") != "evsnn-adam":
        raise InvalidConfig(f"{prefix} has no Adam sidecar")
    blob = np.frombuffer((prefix.parent / doc["arrays_file"]).read_bytes(), dtype="<f8")
    adam = AdamState.for_network(network)
    adam.step = doc["step"]
    adam.beta1, adam.beta2, adam.eps = doc["beta1"], doc["beta2"], doc["eps"]
    for slot in doc["slots"]:
        arr = blob[slot["offset"] : slot["offset"] + int(np.prod(slot["shape"]))].reshape(slot["shape"])
        getattr(adam, slot["slot"])[slot["layer"]] = arr.astype(np.float64)
    return network, adam, doc["epoch"]
