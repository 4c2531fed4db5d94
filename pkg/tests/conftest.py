import numpy as np
import pytest

from uapfp import data, nn
from uapfp.numcore import RandomStream


@pytest.fixture(scope="session")
def small_task():
    """A 16-feature, 10-class synthetic task with a trained classifier on it."""
    spec = data.SynthSpec(M=16, N=10, points_per_class=50, noise=0.05, modes=2)
    d = data.synth_generate(spec, RandomStream(3))
    clf = nn.DenseClassifier(hidden_layer_sizes=(32, 32), activation="elu", epochs=60, schedule="cosine", seed=1)
    clf.fit(d.inputs, d.labels)
    return d, nn.snap_float32(clf.net_)


@pytest.fixture(scope="session")
def other_net(small_task):
    d, _ = small_task
    clf = nn.DenseClassifier(hidden_layer_sizes=(24,), activation="tanh", epochs=40, seed=8)
    clf.fit(d.inputs, d.labels)
    return nn.snap_float32(clf.net_)


def linear_net(w, b):
    return nn.DenseNet([nn.Layer(np.asarray(w, dtype=float), np.asarray(b, dtype=float), "identity")])
