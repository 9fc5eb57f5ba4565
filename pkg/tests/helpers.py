"""Shared oracles for the test suite.

Everything here is deliberately independent of the library's fast paths:
finite differences for gradients, scalar python loops for recurrent cells,
and brute-force interval logic. Oracle bugs would show up as disagreement
with closed-form [TRIVIAL] cases, which are asserted separately.
"""

import math

import numpy as np

from densecap_seq import autodiff as ad
from densecap_seq.autodiff import Tensor

FD_EPS = 1e-5
FD_RTOL = 1e-4
FD_ATOL = 1e-8


def fd_gradcheck(loss_fn, tensors, rng=None, max_entries=None,
                 eps=FD_EPS, rtol=FD_RTOL, atol=FD_ATOL):
    """Compare autodiff gradients of scalar loss_fn() against central
    finite differences, perturbing the given leaf tensors in place.

    When max_entries is set, a random subset of entries per tensor is
    probed (rng required); otherwise every entry is checked.
    """
    for t in tensors:
        t.grad = None
    loss = loss_fn()
    ad.backward(loss)
    for t in tensors:
        assert t.grad is not None, "missing gradient on a probed tensor"
        flat = t.data.reshape(-1)
        gflat = t.grad.reshape(-1)
        idxs = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idxs = rng.choice(flat.size, size=max_entries, replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            with ad.no_grad():
                f_plus = loss_fn().item()
            flat[i] = orig - eps
            with ad.no_grad():
                f_minus = loss_fn().item()
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * eps)
            got = gflat[i]
            tol = rtol * max(abs(fd), abs(got)) + atol
            assert abs(got - fd) <= tol, (
                f"gradient mismatch at entry {i}: autodiff {got!r} vs fd {fd!r}"
            )


def scalar_sigmoid(x):
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def scalar_gru_step(w_x, w_h, b, x, h):
    """Element-by-element re-implementation of the fused GRU step.

    Column blocks are [update | reset | candidate]; the candidate applies
    the reset gate to the recurrent term only.
    """
    hd = w_h.shape[0]
    xx = [sum(x[i] * w_x[i, j] for i in range(len(x))) + b[j] for j in range(3 * hd)]
    hh = [sum(h[i] * w_h[i, j] for i in range(hd)) for j in range(3 * hd)]
    out = []
    for j in range(hd):
        z = scalar_sigmoid(xx[j] + hh[j])
        r = scalar_sigmoid(xx[hd + j] + hh[hd + j])
        n = math.tanh(xx[2 * hd + j] + r * hh[2 * hd + j])
        out.append((1.0 - z) * n + z * h[j])
    return out


def scalar_lstm_step(w_x, w_h, b, x, h, c):
    """Scalar-loop LSTM step; column blocks [input | forget | cell | output]."""
    hd = w_h.shape[0]
    s = [
        sum(x[i] * w_x[i, j] for i in range(len(x)))
        + b[j]
        + sum(h[i] * w_h[i, j] for i in range(hd))
        for j in range(4 * hd)
    ]
    h_out, c_out = [], []
    for j in range(hd):
        gi = scalar_sigmoid(s[j])
        gf = scalar_sigmoid(s[hd + j])
        cand = math.tanh(s[2 * hd + j])
        go = scalar_sigmoid(s[3 * hd + j])
        cn = gf * c[j] + gi * cand
        c_out.append(cn)
        h_out.append(go * math.tanh(cn))
    return h_out, c_out


def brute_tiou(a, b):
    """Interval tIoU by literal segment-set enumeration."""
    sa = set(range(a[0], a[1] + 1))
    sb = set(range(b[0], b[1] + 1))
    union = sa | sb
    if not union:
        return 0.0
    return len(sa & sb) / len(union)


def random_leaf(rng, shape, scale=1.0):
    return Tensor(rng.uniform(-scale, scale, size=shape), requires_grad=True)
