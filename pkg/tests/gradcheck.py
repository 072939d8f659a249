"""Central finite-difference gradient oracle used across the test suite."""

import numpy as np

from dancegen.tensor import Tensor, backward


def numeric_grads(f, arrays, h=1e-5):
    """Central differences of a scalar-valued f at the given arrays."""
    grads = []
    for i in range(len(arrays)):
        x = arrays[i]
        g = np.zeros_like(x)
        flat = x.reshape(-1)
        gf = g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            hi = f(arrays)
            flat[j] = orig - h
            lo = f(arrays)
            flat[j] = orig
            gf[j] = (hi - lo) / (2.0 * h)
        grads.append(g)
    return grads


def check_gradients(build, arrays, tol=1e-4, h=1e-5):
    """Compare reverse-mode gradients of ``build`` against central differences.

    ``build`` maps a list of Tensors to a Tensor of any shape; a fixed random
    projection reduces it to a scalar so every output element is exercised.
    Returns the worst relative error seen.
    """
    probe_rng = np.random.default_rng(1234)
    out_shape = build([Tensor(a) for a in arrays]).shape
    probe = probe_rng.standard_normal(out_shape)

    def scalar(arrs):
        out = build([Tensor(a) for a in arrs])
        return float((out.data * probe).sum())

    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = build(leaves)
    loss = (out * Tensor(probe)).sum()
    backward(loss)

    fd = numeric_grads(scalar, [a.copy() for a in arrays], h=h)
    worst = 0.0
    for leaf, ref in zip(leaves, fd):
        got = leaf.grad if leaf.grad is not None else np.zeros_like(ref)
        scale = max(np.abs(ref).max(), np.abs(got).max(), 1e-8)
        err = np.abs(got - ref).max() / scale
        worst = max(worst, err)
    assert worst < tol, f"gradient mismatch: relative error {worst:.3e} >= {tol}"
    return worst
