import numpy as np
import pytest

from snnconv import network as nw


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_mlp(rng, sizes, act="ReLU", levels=16):
    layers = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(nw.linear(rng.normal(0, 1 / np.sqrt(a), (b, a)), rng.normal(0, 0.1, b)))
        if i < len(sizes) - 2:
            layers.append(nw.relu() if act == "ReLU" else nw.quant_relu(levels))
    return nw.NetworkGraph(layers, (sizes[0],))
