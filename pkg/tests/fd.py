"""Central finite-difference gradient oracle used across the test suite."""

import numpy as np

from dtiseg import tensor as T


def numeric_grad(f, arrays, h=1e-5):
    """Central differences of scalar f(*arrays) w.r.t. every entry of every array.

    f must rebuild its graph from plain numpy arrays on each call; arrays are
    perturbed in place and restored.
    """
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(*arrays)
            flat[i] = orig - h
            fm = f(*arrays)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def autodiff_grad(build, arrays):
    """Gradients of the scalar Tensor returned by build(*tensors)."""
    T.TAPE.clear()
    tensors = [T.Tensor(a.copy(), requires_grad=True, dtype=a.dtype) for a in arrays]
    loss = build(*tensors)
    loss.backward()
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]


def rel_err(a, b):
    """Infinity-norm relative disagreement between two gradient arrays."""
    denom = np.max(np.abs(b)) + 1e-12
    return np.max(np.abs(a - b)) / denom


def check_grads(build, arrays, tol=1e-4, h=1e-5):
    """Assert autodiff and central differences agree for every input array."""

    def scalar_f(*arrs):
        with T.no_grad():
            ts = [T.Tensor(a, dtype=a.dtype) for a in arrs]
            return build(*ts).item()

    num = numeric_grad(scalar_f, [a.copy() for a in arrays], h=h)
    ad = autodiff_grad(build, arrays)
    errs = [rel_err(a, n) for a, n in zip(ad, num)]
    assert max(errs) < tol, f"gradient mismatch: rel errs {errs}"
    return errs
