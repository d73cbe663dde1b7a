import numpy as np
import pytest

from evsnn.events import Dataset, EventStream
from evsnn.network import LifParams, NetworkSpec, conv_layer, dense_layer, init_weights, pool_layer


def make_stream(width, height, events, label=None, duration_us=None):
    """EventStream from a list of (t, x, y, p) tuples."""
    if events:
        t, x, y, p = (np.array(col, dtype=np.int64) for col in zip(*events))
    else:
        t = x = y = p = np.array([], dtype=np.int64)
    return EventStream(
        width=width,
        height=height,
        t=t,
        x=x,
        y=y,
        p=p,
        label=label,
        duration_us=duration_us or 0,
    )


def tiny_conv_net(seed=0, in_hw=6, lif=None):
    """pool2 -> conv(2->3,k3,p1) -> pool2 -> dense(->2), randomly initialised."""
    layers = [
        pool_layer(2, kernel=2),
        conv_layer(2, 3, kernel=3, padding=1),
        pool_layer(3, kernel=2),
        dense_layer(3 * ((in_hw // 2 + 1) // 2) ** 2, 2),
    ]
    net = NetworkSpec(input_size=(2, in_hw, in_hw), layers=layers, lif=lif or LifParams())
    init_weights(net, seed)
    return net


def random_frames(rng, shape, n, density=0.3):
    return [(rng.random(shape) < density).astype(np.uint8) for _ in range(n)]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_dataset(rng):
    """Four short labelled streams on a 12x12 canvas."""
    ds = Dataset()
    for split, n in (("train", 4), ("test", 2)):
        bucket = ds.train if split == "train" else ds.test
        for i in range(n):
            label = i % 2
            n_ev = 60
            events = [
                (int(t), int(x), int(y), int(p))
                for t, x, y, p in zip(
                    np.sort(rng.integers(0, 5000, n_ev)),
                    rng.integers(0, 12, n_ev),
                    rng.integers(0, 12, n_ev),
                    rng.integers(0, 2, n_ev),
                )
            ]
            bucket.append(make_stream(12, 12, events, label=label, duration_us=5000))
    return ds
