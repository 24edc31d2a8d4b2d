"""Shared test utilities: central-difference gradient oracle."""

import numpy as np

from avenas.tensor_core import Graph, Tensor, backward


def numeric_grad(fn, tensors, wrt, h=1e-5):
    """Central-difference gradient of scalar fn w.r.t. one input tensor.

    ``fn`` maps the tensor list to a scalar Tensor; evaluations run without a
    recording graph so they stay independent of the reverse-mode path.
    """
    t = tensors[wrt]
    g = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(fn(tensors).data)
        flat[i] = orig - h
        fm = float(fn(tensors).data)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


def autodiff_grads(fn, tensors):
    with Graph() as g:
        loss = fn(tensors)
    backward(g, loss)
    return [g.grad(t) for t in tensors]


def rel_error(a, b):
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-8)
    return np.abs(a - b).max(initial=0.0) / denom


def check_gradients(fn, tensors, tol=1e-4, h=1e-5):
    """Compare reverse-mode gradients against central differences."""
    got = autodiff_grads(fn, tensors)
    for i, t in enumerate(tensors):
        if not t.requires_grad:
            continue
        want = numeric_grad(fn, tensors, i, h=h)
        err = rel_error(got[i], want)
        assert err < tol, f"gradient mismatch on input {i}: rel err {err:.3e}"


def rand_tensor(rng, shape, requires_grad=True, lo=-1.0, hi=1.0, avoid_zero=None):
    data = rng.uniform(lo, hi, size=shape)
    if avoid_zero is not None:
        # keep activations away from their kink so finite differences are clean
        data = np.where(np.abs(data) < avoid_zero,
                        np.sign(data) * avoid_zero + (data == 0) * avoid_zero, data)
    return Tensor(data, requires_grad=requires_grad)
