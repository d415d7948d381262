"""Independent reference computations used across the test suite.

Nothing here touches the autodiff engine: gradients come from central
differences on plain numpy functions of the raw arrays.
"""

import numpy as np

FD_STEP = 1e-5


def central_difference(f, arrays, step=FD_STEP):
    """Numerical gradient of scalar ``f()`` w.r.t. each array in ``arrays`` (mutated in place, restored)."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + step
            hi = f()
            arr[idx] = old - step
            lo = f()
            arr[idx] = old
            g[idx] = (hi - lo) / (2 * step)
        grads.append(g)
    return grads


def rel_error(a, b):
    """Max elementwise error scaled by the larger gradient magnitude (floored at 1)."""
    a, b = np.asarray(a), np.asarray(b)
    scale = max(1.0, float(np.abs(a).max(initial=0)), float(np.abs(b).max(initial=0)))
    return float(np.abs(a - b).max(initial=0) / scale)


def conv2d_loops(x, k, stride=1, padding=0):
    """Direct nested-loop cross-correlation."""
    x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    n, c, h, w = x.shape
    f, _, kh, kw = k.shape
    ho, wo = (h - kh) // stride + 1, (w - kw) // stride + 1
    out = np.zeros((n, f, ho, wo))
    for b in range(n):
        for o in range(f):
            for i in range(ho):
                for j in range(wo):
                    patch = x[b, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
                    out[b, o, i, j] = (patch * k[o]).sum()
    return out


def linear_boundary_distance(W, b, x):
    """Exact l2 distance from ``x`` to the nearest class boundary of logits ``W x + b``."""
    z = W @ x + b
    k = int(np.argmax(z))
    best = np.inf
    for j in range(len(z)):
        if j != k:
            best = min(best, (z[k] - z[j]) / np.linalg.norm(W[k] - W[j]))
    return best


def xoshiro256pp_reference(state, n):
    """Pure-Python xoshiro256++ (reference algorithm, arbitrary-precision ints masked to 64 bits)."""
    mask = (1 << 64) - 1
    s = [int(w) for w in state]
    rotl = lambda x, k: ((x << k) | (x >> (64 - k))) & mask  # noqa: E731
    out = []
    for _ in range(n):
        out.append((rotl((s[0] + s[3]) & mask, 23) + s[0]) & mask)
        t = (s[1] << 17) & mask
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = rotl(s[3], 45)
    return out
