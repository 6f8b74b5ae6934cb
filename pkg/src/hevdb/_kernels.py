"""Compiled inner loops for the ring layer.

All moduli are below 2**50.  ``_mm`` computes a*b mod q by estimating the
quotient in float64 (error below 1) and correcting with wrapping uint64
arithmetic, so the result is exact.
"""

import numpy as np
from numba import njit


@njit(inline="always", cache=True)
def _mm(a, b, q):
    quo = np.int64(np.floor(np.float64(a) * np.float64(b) / np.float64(q)))
    r = np.int64(np.uint64(a) * np.uint64(b) - np.uint64(quo) * np.uint64(q))
    if r < 0:
        r += q
    elif r >= q:
        r -= q
    return r


@njit(inline="always", cache=True)
def _mm_pre(a, w, wf, q):
    quo = np.int64(np.floor(np.float64(a) * wf))
    r = np.int64(np.uint64(a) * np.uint64(w) - np.uint64(quo) * np.uint64(q))
    if r < 0:
        r += q
    elif r >= q:
        r -= q
    return r


@njit(cache=True)
def mulmod_flat(a, b, q):
    out = np.empty_like(a)
    for i in range(a.size):
        out[i] = _mm(a[i], b[i], q)
    return out


@njit(cache=True)
def mulmod_scalar_flat(a, w, q):
    wf = np.float64(w) / np.float64(q)
    out = np.empty_like(a)
    for i in range(a.size):
        out[i] = _mm_pre(a[i], w, wf, q)
    return out


@njit(cache=True)
def ntt_rows(x, bitrev, pre, pref, stage_w, stage_wf, q):
    """Twist by ``pre`` then radix-2 DIT transform of every row of ``x``."""
    rows, n = x.shape
    out = np.empty_like(x)
    for row in range(rows):
        for i in range(n):
            j = bitrev[i]
            out[row, i] = _mm_pre(x[row, j], pre[j], pref[j], q)
        m = 1
        off = 0
        while m < n:
            for k in range(0, n, 2 * m):
                for j in range(m):
                    t = _mm_pre(out[row, k + j + m], stage_w[off + j], stage_wf[off + j], q)
                    u = out[row, k + j]
                    s = u + t
                    if s >= q:
                        s -= q
                    v = u - t
                    if v < 0:
                        v += q
                    out[row, k + j] = s
                    out[row, k + j + m] = v
            off += m
            m *= 2
    return out


@njit(cache=True)
def intt_rows(x, bitrev, post, postf, stage_w, stage_wf, q):
    """Inverse of :func:`ntt_rows` (transform with inverse twiddles, then untwist)."""
    rows, n = x.shape
    out = np.empty_like(x)
    for row in range(rows):
        for i in range(n):
            out[row, i] = x[row, bitrev[i]]
        m = 1
        off = 0
        while m < n:
            for k in range(0, n, 2 * m):
                for j in range(m):
                    t = _mm_pre(out[row, k + j + m], stage_w[off + j], stage_wf[off + j], q)
                    u = out[row, k + j]
                    s = u + t
                    if s >= q:
                        s -= q
                    v = u - t
                    if v < 0:
                        v += q
                    out[row, k + j] = s
                    out[row, k + j + m] = v
            off += m
            m *= 2
        for i in range(n):
            out[row, i] = _mm_pre(out[row, i], post[i], postf[i], q)
    return out


@njit(cache=True)
def mac_rows(a, keys, moduli):
    """Hoisted key-switch inner product in the NTT domain.

    a:    (S, L, n)        operands, one per module component, L residues
    keys: (J, S, C, L, n)  switching keys
    returns (J, C, L, n) with out[j, c, l] = sum_s a[s, l] * keys[j, s, c, l]
    """
    S, L, n = a.shape
    J, _, C, _, _ = keys.shape
    out = np.zeros((J, C, L, n), dtype=np.int64)
    for j in range(J):
        for c in range(C):
            for l in range(L):
                q = moduli[l]
                qf = np.float64(q)
                for s in range(S):
                    for k in range(n):
                        x = a[s, l, k]
                        y = keys[j, s, c, l, k]
                        quo = np.int64(np.floor(np.float64(x) * np.float64(y) / qf))
                        r = np.int64(np.uint64(x) * np.uint64(y) - np.uint64(quo) * np.uint64(q))
                        if r < 0:
                            r += q
                        elif r >= q:
                            r -= q
                        v = out[j, c, l, k] + r
                        if v >= q:
                            v -= q
                        out[j, c, l, k] = v
    return out


@njit(cache=True)
def tensor_mac(a, b, q):
    """Degree-2 product sum_i a[i] (x) b[i] of (R, 2, n) ciphertext stacks, one pass.

    Returns (3, n): a0*b0, a0*b1 + a1*b0, a1*b1, each summed over i mod q.
    """
    R, _, n = a.shape
    out = np.zeros((3, n), dtype=np.int64)
    for i in range(R):
        for k in range(n):
            a0, a1 = a[i, 0, k], a[i, 1, k]
            b0, b1 = b[i, 0, k], b[i, 1, k]
            v = out[0, k] + _mm(a0, b0, q)
            out[0, k] = v - q if v >= q else v
            v = out[1, k] + _mm(a0, b1, q)
            v = v - q if v >= q else v
            v += _mm(a1, b0, q)
            out[1, k] = v - q if v >= q else v
            v = out[2, k] + _mm(a1, b1, q)
            out[2, k] = v - q if v >= q else v
    return out


@njit(cache=True)
def plain_mac(a, b, q):
    """sum_i a[i] * b[i] for (R, n) plaintexts against (R, 2, n) ciphertexts; returns (2, n)."""
    R, _, n = b.shape
    out = np.zeros((2, n), dtype=np.int64)
    for i in range(R):
        for k in range(n):
            x = a[i, k]
            v = out[0, k] + _mm(x, b[i, 0, k], q)
            out[0, k] = v - q if v >= q else v
            v = out[1, k] + _mm(x, b[i, 1, k], q)
            out[1, k] = v - q if v >= q else v
    return out


@njit(cache=True)
def mac_rows_diag(a, keys, moduli):
    """Like :func:`mac_rows` but each row j has its own operands.

    a:    (J, S, L, n)
    keys: (J, S, C, L, n)
    returns (J, C, L, n)
    """
    J, S, L, n = a.shape
    C = keys.shape[2]
    out = np.zeros((J, C, L, n), dtype=np.int64)
    for j in range(J):
        for c in range(C):
            for l in range(L):
                q = moduli[l]
                for s in range(S):
                    for k in range(n):
                        v = out[j, c, l, k] + _mm(a[j, s, l, k], keys[j, s, c, l, k], q)
                        if v >= q:
                            v -= q
                        out[j, c, l, k] = v
    return out


@njit(inline="always", cache=True)
def _shift_into(dst, src, e, n, q, subtract):
    """dst +=/-= X^e * src in Z_q[X]/(X^n + 1)."""
    neg = False
    if e >= n:
        e -= n
        neg = True
    for k in range(n):
        if k >= e:
            v = src[k - e]
            flip = neg
        else:
            v = src[k - e + n]
            flip = not neg
        if flip != subtract:
            v = dst[k] - v
            if v < 0:
                v += q
        else:
            v = dst[k] + v
            if v >= q:
                v -= q
        dst[k] = v


@njit(cache=True)
def monomial_rows(x, exps, q):
    """Row-wise multiplication of (R, n) by X^exps[R] (exponents in [0, 2n))."""
    R, n = x.shape
    out = np.zeros_like(x)
    for i in range(R):
        _shift_into(out[i], x[i], exps[i], n, q, False)
    return out


@njit(cache=True)
def monomial_dft(x, stage_e, q):
    """Radix-2 DIT transform over the leading axis with monomial twiddles.

    x: (r, M, n), already in bit-reversed order along axis 0.
    stage_e: concatenated twiddle exponents (stage m contributes m entries).
    Each butterfly is one polynomial addition and one subtraction.
    """
    r, M, n = x.shape
    out = x.copy()
    t = np.empty(n, dtype=np.int64)
    m = 1
    off = 0
    while m < r:
        for k in range(0, r, 2 * m):
            for j in range(m):
                e = stage_e[off + j]
                for c in range(M):
                    a = out[k + j, c]
                    b = out[k + j + m, c]
                    t[:] = 0
                    _shift_into(t, b, e, n, q, False)
                    for i in range(n):
                        u = a[i]
                        v = u + t[i]
                        if v >= q:
                            v -= q
                        w = u - t[i]
                        if w < 0:
                            w += q
                        a[i] = v
                        b[i] = w
        off += m
        m *= 2
    return out


@njit(cache=True)
def select_rows(sel, cells, q):
    """out[c, k] = sum_i sel[i, k] * cells[i, c]  (NTT domain).

    sel: (R, K, n) ciphertext components, cells: (R, C, n) plaintexts.
    """
    R, K, n = sel.shape
    C = cells.shape[1]
    out = np.zeros((C, K, n), dtype=np.int64)
    for i in range(R):
        for c in range(C):
            for k in range(K):
                for t in range(n):
                    v = out[c, k, t] + _mm(sel[i, k, t], cells[i, c, t], q)
                    if v >= q:
                        v -= q
                    out[c, k, t] = v
    return out
