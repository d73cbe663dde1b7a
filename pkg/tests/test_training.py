import numpy as np
import pytest

from conftest import make_stream, tiny_conv_net
from evsnn.errors import InvalidConfig, ShapeMismatch
from evsnn.events import Dataset
from evsnn.network import (
    LifParams,
    NetworkSpec,
    build_network,
    conv_layer,
    dense_layer,
    forward,
    pool_layer,
)
from evsnn.preprocess import SpikeFrame
from evsnn.training import (
    AdamState,
    GradientSet,
    TrainConfig,
    adam_step,
    backward,
    calibrate_init,
    evaluate,
    load_checkpoint,
    lr_schedule,
    mse_loss,
    one_hot,
    save_checkpoint,
    surrogate_grad,
    train,
)
from oracles import torch_gradients


def single_record(network, bits, frame_repeat, pooling="spiking"):
    return forward(network, [SpikeFrame(bits=bits)], frame_repeat=frame_repeat, pooling=pooling)[0]


# --------------------------------------------------------------------------
# worked single-synapse case, checked by hand


def hand_net():
    layer = dense_layer(1, 1)
    layer.weight = np.array([[0.5]])
    layer.bias = np.zeros(1)
    return NetworkSpec(input_size=(1, 1, 1), layers=[layer])


def test_hand_worked_gradient_wrong_target():
    # w = 0.5 drives a spike on both of two steps (0.5 >= 0.4, reset, 0.5
    # again), so the rate is 1.  Asking for rate 0 gives dL/davg = 1,
    # spread over 2 steps: 0.5 per step, times surrogate 1.25 and input 1.
    net = hand_net()
    rec = single_record(net, np.ones((1, 1, 1)), frame_repeat=2)
    grads = backward(net, rec, np.array([0.0]))
    assert abs(grads.weights[0][0, 0] - 1.25) < 1e-12
    assert abs(grads.biases[0][0] - 1.25) < 1e-12


def test_hand_worked_gradient_satisfied_target():
    net = hand_net()
    rec = single_record(net, np.ones((1, 1, 1)), frame_repeat=2)
    grads = backward(net, rec, np.array([1.0]))
    assert grads.weights[0][0, 0] == 0.0
    assert grads.biases[0][0] == 0.0


def test_hand_worked_loss_values():
    net = hand_net()
    rec = single_record(net, np.ones((1, 1, 1)), frame_repeat=2)
    assert mse_loss(rec, np.array([1.0])) == 0.0
    assert mse_loss(rec, np.array([0.0])) == pytest.approx(0.5)


# --------------------------------------------------------------------------
# gradient checks against an unrolled autograd graph


def net_conv_only(seed):
    layers = [conv_layer(2, 3, kernel=3, padding=1), dense_layer(3 * 5 * 5, 2)]
    from evsnn.network import init_weights

    return init_weights(NetworkSpec(input_size=(2, 5, 5), layers=layers), seed)


def net_pool_front(seed):
    layers = [
        pool_layer(2, kernel=2),
        conv_layer(2, 4, kernel=3, padding=1),
        pool_layer(4, kernel=2),
        dense_layer(4 * 2 * 2, 2),
    ]
    from evsnn.network import init_weights

    return init_weights(NetworkSpec(input_size=(2, 7, 7), layers=layers), seed)


def net_dense_stack(seed):
    layers = [dense_layer(2 * 4 * 4, 6), dense_layer(6, 2)]
    from evsnn.network import init_weights

    return init_weights(NetworkSpec(input_size=(2, 4, 4), layers=layers), seed)


def wake(net, bits, T, pooling="spiking"):
    # scale each learnable layer so its drive reaches the responsive range;
    # a fresh fan-in init on sparse binary input leaves deep potentials flat
    # at zero, where gradients vanish on both sides of the comparison
    for li, L in enumerate(net.layers):
        if not L.learnable:
            continue
        rec = single_record(net, bits, frame_repeat=T, pooling=pooling)
        d = rec.drives[li]
        pos = d[d > 0]
        if pos.size:
            L.weight *= 0.5 / np.quantile(pos, 0.9)
    return net


CASES = [
    (tiny_conv_net, "spiking", "detached"),
    (tiny_conv_net, "spiking", "full"),
    (tiny_conv_net, "linear", "detached"),
    (net_conv_only, "spiking", "detached"),
    (net_conv_only, "spiking", "full"),
    (net_pool_front, "spiking", "detached"),
    (net_pool_front, "linear", "detached"),
    (net_pool_front, "spiking", "full"),
    (net_dense_stack, "spiking", "detached"),
    (net_dense_stack, "spiking", "full"),
]


@pytest.mark.parametrize("builder,pooling,reset_grad", CASES)
def test_backward_matches_torch(builder, pooling, reset_grad, rng):
    magnitude = 0.0
    for trial in range(3):
        net = builder(seed=10 + trial)
        c, h, w = net.input_size
        bits = (rng.random((c, h, w)) < 0.6).astype(np.float64)
        T = 2 + trial
        wake(net, bits, T, pooling=pooling)
        target = int(trial % 2)
        rec = single_record(net, bits, frame_repeat=T, pooling=pooling)
        got = backward(net, rec, target, reset_grad=reset_grad)
        ww, bb, loss = torch_gradients(net, bits, target, T, pooling=pooling, reset_grad=reset_grad)
        assert abs(mse_loss(rec, target) - loss) < 1e-10
        for li in ww:
            np.testing.assert_allclose(got.weights[li], ww[li], atol=1e-10)
            np.testing.assert_allclose(got.biases[li], bb[li], atol=1e-10)
            magnitude += float(np.abs(ww[li]).sum())
    # the agreement above must not be the degenerate zero-on-both-sides kind
    assert magnitude > 1e-6


def test_backward_rejects_bad_target():
    net = hand_net()
    rec = single_record(net, np.ones((1, 1, 1)), frame_repeat=1)
    with pytest.raises(ShapeMismatch):
        backward(net, rec, 5)
    with pytest.raises(ShapeMismatch):
        backward(net, rec, np.array([1.0, 0.0]))


def test_surrogate_window():
    lif = LifParams()  # v_th 0.4, a1 0.8: window is (0.0, 0.8), value 1.25
    u = np.array([0.0, 0.001, 0.4, 0.799, 0.8, -0.1])
    got = surrogate_grad(u, lif)
    np.testing.assert_array_equal(got, [0.0, 1.25, 1.25, 1.25, 0.0, 0.0])


def test_one_hot():
    np.testing.assert_array_equal(one_hot([1, 0], 2), [[0.0, 1.0], [1.0, 0.0]])


# --------------------------------------------------------------------------
# optimizer pieces


def test_lr_schedule_halves():
    cfg = TrainConfig(lr_initial=1e-3, lr_halving_period_epochs=20)
    assert lr_schedule(0, cfg) == 1e-3
    assert lr_schedule(19, cfg) == 1e-3
    assert lr_schedule(20, cfg) == 5e-4
    assert lr_schedule(40, cfg) == 2.5e-4


def test_adam_step_first_update_formula():
    net = hand_net()
    grads = GradientSet(weights={0: np.array([[0.2]])}, biases={0: np.array([0.7])})
    state = AdamState.for_network(net)
    adam_step(net, grads, state, lr=0.1)
    # after bias correction the first step is lr * g / (|g| + eps)
    expect = 0.5 - 0.1 * 0.2 / (0.2 + 1e-8)
    assert net.layers[0].weight[0, 0] == pytest.approx(expect, abs=1e-12)
    assert state.step == 1
    assert state.m[0][0, 0] == pytest.approx(0.1 * 0.2)
    assert state.v[0][0, 0] == pytest.approx(0.001 * 0.04)


def test_adam_keeps_biases_frozen():
    net = hand_net()
    grads = GradientSet(weights={0: np.array([[0.2]])}, biases={0: np.array([5.0])})
    adam_step(net, grads, AdamState.for_network(net), lr=0.1)
    assert net.layers[0].bias[0] == 0.0


def test_adam_two_steps_match_manual():
    net = hand_net()
    state = AdamState.for_network(net)
    g1, g2 = 0.3, -0.1
    w = 0.5
    m = v = 0.0
    for t, g in enumerate((g1, g2), start=1):
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w -= 0.05 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    for g in (g1, g2):
        adam_step(net, GradientSet(weights={0: np.array([[g]])}, biases={0: np.zeros(1)}), state, lr=0.05)
    assert net.layers[0].weight[0, 0] == pytest.approx(w, abs=1e-14)


def test_gradientset_iadd():
    net = hand_net()
    a = GradientSet(weights={0: np.array([[1.0]])}, biases={0: np.array([2.0])})
    b = GradientSet(weights={0: np.array([[0.5]])}, biases={0: np.array([0.25])})
    a.iadd(b)
    assert a.weights[0][0, 0] == 1.5 and a.biases[0][0] == 2.25
    z = GradientSet.zeros_for(net)
    assert z.weights[0].shape == (1, 1) and z.weights[0][0, 0] == 0.0


def test_train_config_validation():
    with pytest.raises(InvalidConfig):
        TrainConfig(batch_size=0).validate()
    with pytest.raises(InvalidConfig):
        TrainConfig(lr_initial=-1.0).validate()
    with pytest.raises(InvalidConfig):
        TrainConfig(pooling="max").validate()
    with pytest.raises(InvalidConfig):
        TrainConfig(reset_grad="soft").validate()
    with pytest.raises(InvalidConfig):
        TrainConfig(t_sample_us=0).validate()
    TrainConfig().validate()


# --------------------------------------------------------------------------
# training loop behaviour on a micro dataset


def micro_dataset(rng, n_train=6, n_test=4, wh=12, n_events=2600):
    streams = []
    for i in range(n_train + n_test):
        label = i % 2
        t = np.sort(rng.integers(0, 4000, n_events))
        # class 0 lights the left half, class 1 the right
        x = rng.integers(0, wh // 2, n_events) + (wh // 2) * label
        y = rng.integers(0, wh, n_events)
        p = rng.integers(0, 2, n_events)
        streams.append(make_stream(wh, wh, list(zip(t, x, y, p)), label=label, duration_us=4000))
    return Dataset(train=streams[:n_train], test=streams[n_train:])


def micro_config(epochs=2, **kw):
    base = dict(
        epochs=epochs,
        batch_size=3,
        lr_initial=5e-3,
        lr_halving_period_epochs=10,
        t_sample_us=1000,
        t_length_us=2000,
        frame_repeat=3,
        seed=11,
        grad_chunk=2,
    )
    base.update(kw)
    return TrainConfig(**base)


def micro_net(seed=1):
    from evsnn.network import init_weights

    layers = [
        pool_layer(2, kernel=2),
        conv_layer(2, 4, kernel=3, padding=1),
        pool_layer(4, kernel=2),
        dense_layer(4 * 3 * 3, 2),
    ]
    return init_weights(NetworkSpec(input_size=(2, 12, 12), layers=layers), seed)


def weights_blob(net):
    return b"".join(L.weight.tobytes() for L in net.layers if L.learnable)


def test_train_is_deterministic(rng):
    ds = micro_dataset(rng)
    n1, m1 = train(ds, micro_net(), micro_config())
    n2, m2 = train(ds, micro_net(), micro_config())
    assert weights_blob(n1) == weights_blob(n2)
    assert m1.loss_curve == m2.loss_curve
    assert m1.acc_test == m2.acc_test


def test_train_thread_count_does_not_change_results(rng):
    ds = micro_dataset(rng)
    n1, m1 = train(ds, micro_net(), micro_config(), threads=1)
    n2, m2 = train(ds, micro_net(), micro_config(), threads=3)
    assert weights_blob(n1) == weights_blob(n2)
    assert m1.loss_curve == m2.loss_curve


def test_train_updates_weights_and_reports(rng):
    ds = micro_dataset(rng)
    net = micro_net()
    before = weights_blob(net)
    rows = []
    _, metrics = train(ds, net, micro_config(), metrics_sink=rows.append)
    assert weights_blob(net) != before
    assert len(rows) == 2 and len(metrics.history) == 2
    assert rows[0]["epoch"] == 0 and "loss" in rows[0] and "acc_test" in rows[0]
    assert 0.0 <= metrics.acc_test <= 1.0


def test_train_zero_epochs_still_evaluates(rng):
    ds = micro_dataset(rng)
    net = micro_net()
    before = weights_blob(net)
    _, metrics = train(ds, net, micro_config(epochs=0))
    assert weights_blob(net) == before
    assert metrics.history == []
    assert 0.0 <= metrics.acc_test <= 1.0


def test_checkpoint_roundtrip(tmp_path, rng):
    net = micro_net(seed=3)
    adam = AdamState.for_network(net)
    adam.step = 7
    adam.m[1] += 0.25
    prefix = save_checkpoint(tmp_path / "ck", net, adam, epoch=4)
    net2, adam2, epoch = load_checkpoint(prefix)
    assert epoch == 4 and adam2.step == 7
    assert weights_blob(net) == weights_blob(net2)
    for li in adam.m:
        np.testing.assert_array_equal(adam.m[li], adam2.m[li])
        np.testing.assert_array_equal(adam.v[li], adam2.v[li])


def test_load_checkpoint_rejects_foreign(tmp_path):
    from evsnn.network import save_network

    save_network(micro_net(), tmp_path / "ck.json")
    (tmp_path / "ck.adam.json").write_text('{"format": "other"}')
    with pytest.raises(InvalidConfig):
        load_checkpoint(tmp_path / "ck")


def test_resume_matches_uninterrupted_run(tmp_path, rng):
    ds = micro_dataset(rng)
    full_net, full_metrics = train(ds, micro_net(), micro_config(epochs=3))

    net = micro_net()
    _, _ = train(ds, net, micro_config(epochs=2), checkpoint_every=2, checkpoint_dir=tmp_path)
    ck_net, adam, epoch = load_checkpoint(tmp_path / "ckpt_ep0002")
    assert epoch == 2
    resumed_net, resumed_metrics = train(
        ds, ck_net, micro_config(epochs=3), resume=(adam, epoch)
    )
    assert weights_blob(resumed_net) == weights_blob(full_net)
    assert resumed_metrics.acc_test == full_metrics.acc_test
    assert resumed_metrics.history[-1]["loss"] == full_metrics.history[-1]["loss"]


def test_calibrate_init_sets_drive_quantile(rng):
    from evsnn.preprocess import SpikeFrame, fit_canvas, sample_frames

    ds = micro_dataset(rng, n_train=8)
    cfg = micro_config()
    net = micro_net(seed=5)
    calibrate_init(net, ds.train, cfg)
    # rebuild the calibration batch: first stream of each class, clip at 0
    frames = []
    for label in (0, 1):
        s = next(s for s in ds.train if s.label == label)
        frames.extend(sample_frames(fit_canvas(s, 12, 12), 0, cfg.accumulation()))
    recs = forward(net, frames, frame_repeat=cfg.frame_repeat)
    for li in (1, 3):
        d = np.concatenate([r.drives[li].ravel() for r in recs])
        pos = d[d > 0]
        # each learnable layer was rescaled so the top of its positive drive
        # sits a fixed margin above threshold
        assert float(np.quantile(pos, 0.99)) == pytest.approx(1.25 * net.lif.v_th, rel=1e-9)
    assert sum(int(r.spikes[3].sum()) for r in recs) > 0


def test_calibrate_init_skips_silent_layers():
    cfg = micro_config()
    net = micro_net(seed=5)
    before = [L.weight.copy() for L in net.layers if L.learnable]
    empty = make_stream(12, 12, [(0, 0, 0, 1)], label=0, duration_us=4000)
    empty2 = make_stream(12, 12, [(0, 0, 0, 1)], label=1, duration_us=4000)
    calibrate_init(net, [empty, empty2], cfg)
    after = [L.weight for L in net.layers if L.learnable]
    # one lonely event cannot light the deeper layers; those keep their init
    np.testing.assert_array_equal(before[1], after[1])


def test_evaluate_counts(rng):
    ds = micro_dataset(rng, n_train=4, n_test=4)
    cfg = micro_config()
    res = evaluate(micro_net(), ds.test, cfg)
    per_stream = cfg.accumulation().frames_per_clip
    assert res.n_streams == 4
    assert res.n_frames == 4 * per_stream
    assert 0.0 <= res.acc_frames <= 1.0 and 0.0 <= res.acc_streams <= 1.0
    res2 = evaluate(micro_net(), ds.test, cfg, threads=4)
    assert res2 == res
