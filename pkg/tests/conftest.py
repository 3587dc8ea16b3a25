import numpy as np
import pytest

from dissim import tensor as T


def finite_difference_grads(fn, arrays, h=1e-5):
    """Central-difference gradients of a scalar-valued fn of float64 arrays."""
    grads = []
    for k, base in enumerate(arrays):
        g = np.zeros_like(base)
        flat, gflat = base.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = fn(*arrays)
            flat[i] = orig - h
            down = fn(*arrays)
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def tape_grads(fn, arrays):
    """Analytic gradients of a Tensor-valued fn via the tape."""
    tensors = [T.Tensor(a, dtype=np.float64, requires_grad=True) for a in arrays]
    with T.Tape() as tape:
        loss = fn(*tensors)
    grads = tape.backward(loss)
    return [grads[t] for t in tensors]


def rel_err(a, b):
    return np.abs(a - b).max() / max(np.abs(b).max(), 1e-12)


def assert_grad_matches(tensor_fn, numpy_fn, arrays, tol=1e-6, h=1e-5):
    analytic = tape_grads(tensor_fn, arrays)
    numeric = finite_difference_grads(numpy_fn, arrays, h=h)
    for a, n in zip(analytic, numeric):
        assert rel_err(a, n) < tol


@pytest.fixture
def rng():
    return np.random.default_rng(0)
