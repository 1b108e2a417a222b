"""Central finite-difference checker for the autodiff engine."""

import numpy as np

from symplex import autodiff as ad


def rel_error(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b))))


def check(fn, arrays, seed=0, h=1e-5):
    """Max relative error between analytic and numeric gradients of
    ``sum(W * fn(*params))`` with a random projection W."""
    rng = np.random.default_rng(seed)
    params = [ad.parameter(a.copy()) for a in arrays]
    out = fn(*params)
    W = rng.normal(size=out.shape)
    ad.sum(ad.mul(out, W)).backward()
    worst = 0.0
    for p in params:
        num = np.zeros_like(p.data)
        it = np.nditer(p.data, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = p.data[idx]
            p.data[idx] = orig + h
            with ad.no_grad():
                hi = float(np.sum(fn(*params).data * W))
            p.data[idx] = orig - h
            with ad.no_grad():
                lo = float(np.sum(fn(*params).data * W))
            p.data[idx] = orig
            num[idx] = (hi - lo) / (2 * h)
        # ignore entries where both are tiny: relative error is meaningless there
        big = (np.abs(num) + np.abs(p.grad)) > 1e-7
        if big.any():
            worst = max(worst, rel_error(num[big], p.grad[big]))
    return worst
