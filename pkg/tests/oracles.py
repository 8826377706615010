"""Independent reference computations used by the tests.

These are written from the definitions with plain loops so they share no
code path with the package under test.
"""
import cmath
import math

import numpy as np


def naive_dft(x):
    """Direct O(n^2) DFT, returns the full complex spectrum."""
    x = [float(v) for v in x]
    n = len(x)
    return np.array(
        [sum(x[t] * cmath.exp(-2j * math.pi * k * t / n) for t in range(n)) for k in range(n)]
    )


def dft_peak_hz(x, rate, skip_dc=True):
    """Frequency (Hz) of the largest positive-frequency DFT magnitude."""
    spec = np.abs(naive_dft(x))
    n = len(x)
    half = spec[: n // 2 + 1]
    start = 1 if skip_dc else 0
    k = start + int(np.argmax(half[start:]))
    return k * rate / n


def dft_peak_bin(frame):
    spec = np.abs(naive_dft(frame))
    half = spec[: len(frame) // 2 + 1]
    return int(np.argmax(half))


def nbtsf_entrywise(h, z, W1, W2, U, V, W1p, W2p):
    """F_enhance[i][j] = (W1 h)_i U_j (W2 z)_i V_j + (W1' h)_j + (W2' z)_j, looped."""
    k, l = W1.shape[0], U.shape[0]
    p = [sum(W1[i, a] * h[a] for a in range(len(h))) for i in range(k)]
    q = [sum(W2[i, a] * z[a] for a in range(len(z))) for i in range(k)]
    r = [sum(W1p[j, a] * h[a] for a in range(len(h))) for j in range(l)]
    s = [sum(W2p[j, a] * z[a] for a in range(len(z))) for j in range(l)]
    out = np.zeros((k, l))
    for i in range(k):
        for j in range(l):
            out[i, j] = p[i] * U[j] * q[i] * V[j] + r[j] + s[j]
    return out


def ols_normal_equations(X, y):
    """phi0, phi via (A^T A) beta = A^T y with A = [1 | X]."""
    X = np.asarray(X, dtype=float)
    A = np.hstack([np.ones((X.shape[0], 1)), X])
    beta = np.linalg.solve(A.T @ A, A.T @ np.asarray(y, dtype=float))
    return beta[0], beta[1:]


def conv1d_loop(x, w, b):
    """Same-padded cross-correlation, x (C_in, T), w (C_out, C_in, K)."""
    c_out, c_in, K = w.shape
    T = x.shape[1]
    left = (K - 1) // 2
    out = np.zeros((c_out, T))
    for o in range(c_out):
        for t in range(T):
            acc = b[o]
            for c in range(c_in):
                for k in range(K):
                    idx = t + k - left
                    if 0 <= idx < T:
                        acc += w[o, c, k] * x[c, idx]
            out[o, t] = acc
    return out
