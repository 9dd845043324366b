"""Independent brute-force oracles used to freeze expected values.

Everything here is written as plainly as possible (nested loops, no
vectorization) so it can be trusted as a reference against the production
implementations. Oracles never call into the code paths they check.
"""

import numpy as np


def conv2d_loops(x, w, b, stride, padding):
    """Six nested loops over [C_in,H,W] x [C_out,C_in,k,k]."""
    c_in, h, wd = x.shape
    c_out, _, k, _ = w.shape
    h_out = (h + 2 * padding - k) // stride + 1
    w_out = (wd + 2 * padding - k) // stride + 1
    xp = np.zeros((c_in, h + 2 * padding, wd + 2 * padding))
    xp[:, padding:padding + h, padding:padding + wd] = x
    out = np.zeros((c_out, h_out, w_out))
    for o in range(c_out):
        for i in range(h_out):
            for j in range(w_out):
                acc = b[o]
                for c in range(c_in):
                    for ki in range(k):
                        for kj in range(k):
                            acc += xp[c, i * stride + ki, j * stride + kj] * w[o, c, ki, kj]
                out[o, i, j] = acc
    return out


def depthwise_loops(x, w, b, stride, padding):
    """Per-channel convolution with independent kernels."""
    c, h, wd = x.shape
    _, k, _ = w.shape
    h_out = (h + 2 * padding - k) // stride + 1
    w_out = (wd + 2 * padding - k) // stride + 1
    xp = np.zeros((c, h + 2 * padding, wd + 2 * padding))
    xp[:, padding:padding + h, padding:padding + wd] = x
    out = np.zeros((c, h_out, w_out))
    for ch in range(c):
        for i in range(h_out):
            for j in range(w_out):
                acc = b[ch]
                for ki in range(k):
                    for kj in range(k):
                        acc += xp[ch, i * stride + ki, j * stride + kj] * w[ch, ki, kj]
                out[ch, i, j] = acc
    return out


def dense_loops(x, w, b):
    """Triple loop over [N,D_in] x [D_in,D_out]."""
    n, d_in = x.shape
    _, d_out = w.shape
    out = np.zeros((n, d_out))
    for i in range(n):
        for j in range(d_out):
            acc = b[j]
            for k in range(d_in):
                acc += x[i, k] * w[k, j]
            out[i, j] = acc
    return out


def gap_loops(x):
    c, h, w = x.shape
    out = np.zeros(c)
    for ch in range(c):
        acc = 0.0
        for i in range(h):
            for j in range(w):
                acc += x[ch, i, j]
        out[ch] = acc / (h * w)
    return out


def smp_loops(x):
    c, h, w = x.shape
    out = np.zeros(h * w)
    for i in range(h):
        for j in range(w):
            best = x[0, i, j]
            for ch in range(1, c):
                best = max(best, x[ch, i, j])
            out[i * w + j] = best
    return out


def sap_loops(x):
    c, h, w = x.shape
    out = np.zeros(h * w)
    for i in range(h):
        for j in range(w):
            acc = 0.0
            for ch in range(c):
                acc += x[ch, i, j]
            out[i * w + j] = acc / c
    return out


def cross_correlation_loops(z_a, z_b, eps):
    """Two-pass scalar implementation: standardize per dimension with the
    unbiased batch std, then C_ij = sum_b zn_a[b,i] zn_b[b,j] / N."""
    n, d = z_a.shape

    def standardize(z):
        zn = np.zeros_like(z)
        for j in range(d):
            mean = sum(z[b, j] for b in range(n)) / n
            var = sum((z[b, j] - mean) ** 2 for b in range(n)) / (n - 1)
            std = var ** 0.5
            for b in range(n):
                zn[b, j] = (z[b, j] - mean) / (std + eps)
        return zn

    za, zb = standardize(z_a), standardize(z_b)
    c = np.zeros((d, d))
    for i in range(d):
        for j in range(d):
            c[i, j] = sum(za[b, i] * zb[b, j] for b in range(n)) / n
    return c


def barlow_terms_loops(c, lam, alpha1, alpha2):
    """Scalar double loop of the twin objective over a correlation matrix."""
    d = c.shape[0]
    invariance = 0.0
    redundancy = 0.0
    for i in range(d):
        for j in range(d):
            if i == j:
                invariance += (1.0 - c[i, j]) ** 2
            else:
                redundancy += c[i, j] ** 2
    return invariance, redundancy, alpha1 * invariance + alpha2 * lam * redundancy
