"""Shared test fixtures: the finite-difference gradient oracle."""

import numpy as np
import pytest

from stagenet import engine
from stagenet.engine import Tape, Tensor


def central_difference_grads(loss_fn, arrays, h=1e-5):
    """Numeric d(loss)/d(array) for each array, via central differences.

    `loss_fn` maps the list of float64 arrays to a python float.  Arrays are
    perturbed in place and restored.
    """
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        flat, gf = a.ravel(), g.ravel()
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            fp = loss_fn(arrays)
            flat[j] = orig - h
            fm = loss_fn(arrays)
            flat[j] = orig
            gf[j] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def assert_op_grads(op, args, kwargs=None, h=1e-5, rtol=1e-4, atol=1e-6, seed=0):
    """Check reverse-mode grads of `op` w.r.t. every positional arg.

    Non-scalar outputs are contracted against a fixed random projection so
    every output element influences the scalar loss.  Everything runs in
    float64.
    """
    kwargs = dict(kwargs or {})
    arrays = [np.array(a, dtype=np.float64) for a in args]

    def forward(arrs):
        ts = [Tensor(a, dtype=np.float64) for a in arrs]
        return op(*ts, **kwargs).data

    proj = np.random.default_rng(seed).standard_normal(forward(arrays).shape)

    def loss_fn(arrs):
        return float((forward(arrs) * proj).sum())

    ts = [Tensor(a.copy(), requires_grad=True, dtype=np.float64) for a in arrays]
    with Tape() as tape:
        out = op(*ts, **kwargs)
        loss = engine.sum_all(engine.mul(out, Tensor(proj, dtype=np.float64)))
    engine.backward(tape, loss)

    numeric = central_difference_grads(loss_fn, arrays, h=h)
    for t, num in zip(ts, numeric):
        assert t.grad is not None
        np.testing.assert_allclose(t.grad, num, rtol=rtol, atol=atol)


@pytest.fixture
def fd_check():
    return assert_op_grads


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
