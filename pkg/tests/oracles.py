"""Independent reference implementations used as test oracles.

Everything here is written as plain loops over the definitions, on
purpose: these must not share code paths with the package under test.
"""
import math

import numpy as np


def naive_convolve(x, h):
    out = [0.0] * (len(x) + len(h) - 1)
    for i, a in enumerate(x):
        for j, b in enumerate(h):
            out[i + j] += a * b
    return np.array(out)


def naive_conv2d_same(x, W, b):
    C, H, Wd = x.shape
    O, _, kh, kw = W.shape
    top, left = (kh - 1) // 2, (kw - 1) // 2
    out = np.zeros((O, H, Wd))
    for o in range(O):
        for r in range(H):
            for s in range(Wd):
                acc = b[o]
                for c in range(C):
                    for i in range(kh):
                        for j in range(kw):
                            rr, ss = r + i - top, s + j - left
                            if 0 <= rr < H and 0 <= ss < Wd:
                                acc += x[c, rr, ss] * W[o, c, i, j]
                out[o, r, s] = acc
    return out


def naive_matmul(x, W, b):
    n, d = x.shape
    m = W.shape[1]
    out = np.zeros((n, m))
    for r in range(n):
        for k in range(m):
            acc = b[k]
            for j in range(d):
                acc += x[r, j] * W[j, k]
            out[r, k] = acc
    return out


def _sig(z):
    return 1.0 / (1.0 + math.exp(-z))


def scalar_lstm(x, Wx, Wh, b, units):
    """Element-by-element LSTM recurrence, gate order (i, f, g, o)."""
    T, D = x.shape
    U = units
    h = [0.0] * U
    c = [0.0] * U
    out = np.zeros((T, U))
    for t in range(T):
        z = []
        for k in range(4 * U):
            acc = b[k]
            for j in range(D):
                acc += x[t, j] * Wx[j, k]
            for j in range(U):
                acc += h[j] * Wh[j, k]
            z.append(acc)
        new_c, new_h = [], []
        for u in range(U):
            i = _sig(z[u])
            f = _sig(z[U + u])
            g = math.tanh(z[2 * U + u])
            o = _sig(z[3 * U + u])
            cc = f * c[u] + i * g
            new_c.append(cc)
            new_h.append(o * math.tanh(cc))
        c, h = new_c, new_h
        out[t] = h
    return out


def finite_difference(f, arr, eps=1e-5, indices=None):
    """Central differences of scalar ``f()`` w.r.t. entries of ``arr`` (in place)."""
    flat = arr.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    out = {}
    for i in idx:
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        out[i] = (fp - fm) / (2 * eps)
    return out


def max_rel_error(analytic: dict, numeric: dict, floor=1e-6):
    worst = 0.0
    for i, n in numeric.items():
        a = analytic[i]
        worst = max(worst, abs(a - n) / max(abs(a), abs(n), floor))
    return worst


def gradient_check(run, store, inputs=(), samples=12, seed=0, eps=1e-5, floor=1e-6):
    """Compare analytic and central-difference gradients of a scalar loss.

    ``run(backprop)`` must evaluate the loss and, when ``backprop`` is
    true, back-propagate it and return the gradients of ``inputs`` (a list
    aligned with ``inputs``). Parameter gradients are read from ``store``.
    Returns the worst relative error over sampled entries of every
    parameter and input; ``floor`` bounds the denominator of the relative
    error for entries near zero.
    """
    rng = np.random.default_rng(seed)
    store.zero_grad()
    input_grads = run(True)
    analytic = {k: np.array(v, dtype=np.float64) for k, v in store.grads.items()}
    worst = {}

    def loss():
        return float(run(False))

    targets = [(k, store.params[k], analytic[k]) for k in store.params]
    targets += [(f"input{j}", x, np.asarray(g)) for j, (x, g) in enumerate(zip(inputs, input_grads))]
    for name, arr, grad in targets:
        n = arr.size
        pick = rng.choice(n, size=min(samples, n), replace=False)
        num = finite_difference(loss, arr, eps, pick)
        worst[name] = max_rel_error({i: grad.reshape(-1)[i] for i in pick}, num, floor)
    store.zero_grad()
    return worst


def naive_psm(clean, reverb, lo=0.0, hi=1.0, eps=1e-8):
    T, F = clean.mag.shape
    out = np.zeros((T, F))
    for t in range(T):
        for f in range(F):
            y = reverb.mag[t, f]
            if y < eps:
                out[t, f] = lo
                continue
            v = clean.mag[t, f] * np.cos(reverb.phase[t, f] - clean.phase[t, f]) / y
            out[t, f] = min(max(v, lo), hi)
    return out


def naive_losses(mask, clean, reverb):
    T, F = mask.shape
    sq = ab = 0.0
    for t in range(T):
        for f in range(F):
            r = mask[t, f] * reverb.mag[t, f] - clean.mag[t, f] * np.cos(reverb.phase[t, f] - clean.phase[t, f])
            sq += r * r
            ab += abs(r)
    return sq / (T * F), ab / (T * F)
