import numpy as np
import pytest

from graphshift.autodiff import backward


def numeric_gradcheck(fn, tensors, h=1e-5, rtol=1e-4, atol=1e-7):
    """Compare reverse-mode gradients of fn(*tensors) against central differences.

    fn must be a pure function of the tensor data (re-evaluated many times), so
    anything stochastic inside it has to be re-seeded on every call.
    """
    for t in tensors:
        t.grad = None
    loss = fn(*tensors)
    assert loss.data.size == 1, "gradcheck needs a scalar loss"
    backward(loss)
    for t in tensors:
        assert t.grad is not None, "no gradient reached a checked tensor"
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            up = float(fn(*tensors).data)
            flat[i] = keep - h
            down = float(fn(*tensors).data)
            flat[i] = keep
            nflat[i] = (up - down) / (2.0 * h)
        np.testing.assert_allclose(t.grad, numeric, rtol=rtol, atol=atol)


@pytest.fixture
def gradcheck():
    return numeric_gradcheck


@pytest.fixture
def rng():
    return np.random.default_rng(0)
