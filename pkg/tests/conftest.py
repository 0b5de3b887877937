import numpy as np
import pytest

from tiletrain.modelio import synth_batch, synth_model


def max_error_ratio(got, ref, rel=1e-5, floor=1e-7):
    """Largest |got - ref| / max(rel * |ref|, floor) over paired arrays; <= 1 means within tolerance."""
    worst = 0.0
    for a, r in zip(got, ref):
        a = np.asarray(a, dtype=np.float64)
        r = np.asarray(r, dtype=np.float64)
        worst = max(worst, float(np.max(np.abs(a - r) / np.maximum(rel * np.abs(r), floor))))
    return worst


def conv_weights(model):
    return [fb.weights for fb in model.filters if fb is not None]


@pytest.fixture(scope="session")
def desk_model():
    return synth_model(11)


@pytest.fixture(scope="session")
def desk_batch(desk_model):
    return synth_batch(11, desk_model, 4)
