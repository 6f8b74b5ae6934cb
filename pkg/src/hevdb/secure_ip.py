"""Secure inner product: Decompose, Cache and Score.

A query ciphertext is decomposed into r ring-LWE ciphertexts, part j
encrypting ``phi_j(r^-1 * q)``.  A block of up to d key ciphertexts is cached
as r ciphertexts, part j encrypting ``sum_t phi_j(k_t) X^t``.  Score multiplies
part-wise and sums, which traces the query-key product down to its constant
term and packs the d scores into one polynomial.

All parts are held in the NTT domain as int64 arrays of shape ``(r, 2, d)``.
"""

from __future__ import annotations

import threading
from collections import Counter
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import _kernels as _k
from .errors import CapacityError, ParameterError, ProtocolError
from .lattice import (
    MlweCiphertext,
    SwitchKeySet,
    gen_a_batch,
    intt_rns,
    ntt_rns,
    relinearize,
)
from .ring import RingParams, embed_array, mod_down, mod_up

# ---------------------------------------------------------------------------
# instrumentation


class OpCounter:
    """Thread-safe tallies of the structural operations (ModUp, ModDown, ...)."""

    def __init__(self):
        self._lock = threading.Lock()
        self._c = Counter()

    def add(self, name: str, n: int = 1) -> None:
        with self._lock:
            self._c[name] += n

    def reset(self) -> None:
        with self._lock:
            self._c.clear()

    def snapshot(self) -> dict:
        with self._lock:
            return dict(self._c)

    def __getitem__(self, name):
        with self._lock:
            return self._c[name]


counters = OpCounter()


# ---------------------------------------------------------------------------
# butterfly plan


def _bitrev(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    out = np.zeros(n, dtype=np.intp)
    for b in range(bits):
        out |= ((idx >> b) & 1) << (bits - 1 - b)
    return out


class ButterflyPlan:
    """Fast multiplication by the r x r monomial matrix B.

    With Z = X^s, ``(B x)_i = sum_l Z^{(2P(i)+1) l} x_l`` where
    ``P(i) = ((2i+1)^-1 mod 2r - 1) / 2``.  It factors as a twist by Z^l, a
    length-r DFT with root W = Z^2, and the row permutation P.
    """

    def __init__(self, params: RingParams):
        self.params = params
        r, s, d = params.r, params.s, params.d
        self.r, self.s, self.d = r, s, d
        two_r = 2 * r
        i = np.arange(r)
        inv = np.array([pow(2 * k + 1, -1, two_r) for k in range(r)], dtype=np.int64)
        self.perm = (inv - 1) // 2
        if not np.all((inv * (2 * i + 1)) % two_r == 1):
            raise ParameterError("butterfly permutation table failed its congruence check")
        self.bitrev = _bitrev(r)
        stage = []
        m = 1
        while m < r:
            stage.extend((2 * s * j * (r // (2 * m))) % (2 * d) for j in range(m))
            m *= 2
        self.stage_e = np.array(stage, dtype=np.int64)
        self.twist_e = (s * i) % (2 * d)
        self.log_r = r.bit_length() - 1
        # phi_{i,r}: X^v Z^w -> X^v Z^{w(2i+1)}, as gather tables
        c = np.arange(d)
        v, w = c % s, c // s
        src = np.empty((r, d), dtype=np.intp)
        neg = np.empty((r, d), dtype=bool)
        for row in range(r):
            w2 = (w * (2 * row + 1)) % two_r
            dest = v + s * (w2 % r)
            src[row, dest] = c
            neg[row, dest] = w2 >= r
        self.phi_src, self.phi_neg = src, neg

    @property
    def additions(self) -> int:
        """Polynomial additions per component for one application."""
        return self.r * self.log_r

    def _twist(self, x: np.ndarray, exps: np.ndarray) -> np.ndarray:
        r, M, d = x.shape
        e = np.repeat(exps, M)
        return _k.monomial_rows(np.ascontiguousarray(x.reshape(r * M, d)), e, self.params.q).reshape(x.shape)

    def _dft(self, x: np.ndarray) -> np.ndarray:
        counters.add("butterfly_additions", self.additions)
        return _k.monomial_dft(np.ascontiguousarray(x[self.bitrev]), self.stage_e, self.params.q)

    def apply(self, x: np.ndarray) -> np.ndarray:
        """B x for x of shape (r, M, d)."""
        return self._dft(self._twist(x, self.twist_e))[self.perm]

    def apply_dense(self, x: np.ndarray) -> np.ndarray:
        """B x by the definition, r^2 monomial products (reference path)."""
        r, s, d, q = self.r, self.s, self.d, self.params.q
        out = np.zeros_like(x)
        l = np.arange(r)
        for i in range(r):
            e = (s * (2 * self.perm[i] + 1) * l) % (2 * d)
            terms = self._twist(x, e)
            out[i] = np.mod(terms.sum(axis=0), q)  # r terms < 2^50 each: no overflow
        return out

    def expand(self, x: np.ndarray) -> np.ndarray:
        """Transposed transform ``y_c = sum_i Z^{c(2i+1)} x_i``.

        Applied to a decomposed query this turns parts encrypting
        ``phi_i(r^-1 * m)`` into ciphertexts of the individual traces.
        """
        return self._twist(self._dft(x), self.twist_e)

    def expand_dense(self, x: np.ndarray) -> np.ndarray:
        r, s, d, q = self.r, self.s, self.d, self.params.q
        out = np.zeros_like(x)
        i = np.arange(r)
        for c in range(r):
            out[c] = np.mod(self._twist(x, (s * c * (2 * i + 1)) % (2 * d)).sum(axis=0), q)
        return out

    def phi_r(self, x: np.ndarray) -> np.ndarray:
        """Row i of x (shape (r, M, d)) gets the coefficient permutation phi_{i,r}."""
        src = np.broadcast_to(self.phi_src[:, None, :], x.shape)
        out = np.take_along_axis(x, src, axis=-1)
        neg = np.broadcast_to(self.phi_neg[:, None, :], x.shape)
        return np.where(neg & (out != 0), self.params.q - out, out)


@lru_cache(maxsize=8)
def butterfly_plan(params: RingParams) -> ButterflyPlan:
    return ButterflyPlan(params)


# ---------------------------------------------------------------------------
# containers


@dataclass(frozen=True, eq=False)
class DecomposedQuery:
    parts: np.ndarray  # (r, 2, d) NTT domain
    epoch: int = 0

    def coefficients(self, params: RingParams) -> np.ndarray:
        return params.ring_d.intt(self.parts.reshape(-1, params.d)).reshape(self.parts.shape)


@dataclass(frozen=True, eq=False)
class CachedBlock:
    parts: np.ndarray  # (r, 2, d) NTT domain
    block_index: int = 0
    occupancy: int = 0
    epoch: int = 0

    def coefficients(self, params: RingParams) -> np.ndarray:
        return params.ring_d.intt(self.parts.reshape(-1, params.d)).reshape(self.parts.shape)

    def __eq__(self, other):
        if not isinstance(other, CachedBlock):
            return NotImplemented
        return (
            self.block_index == other.block_index
            and self.occupancy == other.occupancy
            and self.epoch == other.epoch
            and np.array_equal(self.parts, other.parts)
        )

    def to_bytes(self) -> bytes:
        return self.parts.astype("<i8").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes, params: RingParams, block_index=0, occupancy=0, epoch=0) -> "CachedBlock":
        parts = np.frombuffer(data, dtype="<i8", count=2 * params.r * params.d).astype(np.int64)
        return cls(parts.reshape(params.r, 2, params.d), block_index, occupancy, epoch)

    @staticmethod
    def size(params: RingParams) -> int:
        return 8 * 2 * params.r * params.d


def _small_to_ntt_d(a: np.ndarray, ring_small, d: int) -> np.ndarray:
    """NTT_d(embed(a)) via the r-point NTT: the result is the r-point one tiled."""
    r = a.shape[-1]
    return np.tile(ring_small.ntt(a), d // r)


def _check(params: RingParams, keys: SwitchKeySet):
    if keys.params != params:
        raise ParameterError("key set was generated for different ring parameters")


# ---------------------------------------------------------------------------
# Decompose


def decompose(query: MlweCiphertext, keys: SwitchKeySet) -> DecomposedQuery:
    params = keys.params
    q, p, r, s, d = params.q, params.p, params.r, params.s, params.d
    b = np.asarray(query.b, dtype=np.int64)
    if b.shape != (r,):
        raise ParameterError(f"query ciphertext has {b.shape[-1]} coefficients, expected r={r}")
    rr, rpr = params.ring_r, params.ring_pr
    a = gen_a_batch([query.rho], params)[0]  # (s, r)
    a = rr.scalar_mul(a, params.r_inv)
    b = rr.scalar_mul(b, params.r_inv)
    # ModUp each a_u once; the reduced-dimension NTT lifts it to degree d
    up = mod_up(a, q, p)  # (s, 2, r)
    counters.add("modup", s)
    a_hat = np.stack(
        [_small_to_ntt_d(up[:, 0], rr, d), _small_to_ntt_d(up[:, 1], rpr, d)], axis=1
    )  # (s, 2, d)
    moduli = np.array([q, p], dtype=np.int64)
    acc = _k.mac_rows(np.ascontiguousarray(a_hat), keys.decompose, moduli)  # (r, 2, 2, d)
    ct = mod_down(intt_rns(acc, params), q, p, params.p_inv_mod_q)  # (r, 2, d)
    counters.add("moddown", r)
    rq = params.ring_d
    parts = rq.ntt(ct.reshape(2 * r, d)).reshape(r, 2, d)
    parts[:, 0] = np.mod(parts[:, 0] + _small_to_ntt_d(b, rr, d), q)
    for j in range(1, r):
        parts[j] = parts[j][:, rq.automorphism_ntt_index(2 * j + 1)]
    counters.add("automorphism", r - 1)
    return DecomposedQuery(parts, keys.epoch)


# ---------------------------------------------------------------------------
# Cache


def _block_arrays(block_keys, params: RingParams):
    n = len(block_keys)
    if n > params.d:
        raise CapacityError(f"block holds {n} keys, at most d={params.d} allowed")
    r, s, d = params.r, params.s, params.d
    b = np.zeros((d, r), dtype=np.int64)
    a = np.zeros((d, s, r), dtype=np.int64)
    if n:
        b[:n] = np.stack([np.asarray(ct.b, dtype=np.int64) for ct in block_keys])
        a[:n] = gen_a_batch([ct.rho for ct in block_keys], params)
    return b, a


def interleave(x: np.ndarray, params: RingParams) -> np.ndarray:
    """Group d small-ring polynomials by stride: ``out[l] = sum_v X^v embed(x[v + s*l])``.

    ``x`` has shape (d, ..., r); the result has shape (r, ..., d).
    """
    r, s, d = params.r, params.s, params.d
    mid = x.shape[1:-1]
    y = x.reshape((r, s) + mid + (r,))
    y = np.moveaxis(y, 1, -1)  # (r, ..., r_t, s_v)
    return np.ascontiguousarray(y.reshape((r,) + mid + (d,)))


def cache(block_keys, keys: SwitchKeySet, block_index: int = 0) -> CachedBlock:
    """Encrypt ``sum_t phi_j(k_t) X^t`` for each j from up to d key ciphertexts.

    Empty slots are zero ciphertexts, so they contribute nothing.
    """
    params = keys.params
    q, p, r, s, d = params.q, params.p, params.r, params.s, params.d
    plan = butterfly_plan(params)
    b, a = _block_arrays(block_keys, params)
    b = params.ring_d.scalar_mul(b, params.r_inv)
    a = params.ring_d.scalar_mul(a, params.r_inv)
    ct = np.concatenate([interleave(b, params)[:, None], interleave(a, params)], axis=1)  # (r, 1+s, d)
    ct = plan.phi_r(plan.apply(ct))
    up = mod_up(ct[:, 1:], q, p)  # (r, s, 2, d)
    counters.add("modup", r * s)
    a_hat = ntt_rns(up, params)
    moduli = np.array([q, p], dtype=np.int64)
    acc = _k.mac_rows_diag(np.ascontiguousarray(a_hat), keys.cache_keys, moduli)
    out = mod_down(intt_rns(acc, params), q, p, params.p_inv_mod_q)  # (r, 2, d)
    counters.add("moddown", r)
    out[:, 0] = np.mod(out[:, 0] + ct[:, 0], q)
    out = params.ring_d.scalar_mul(out, r)
    parts = params.ring_d.ntt(out.reshape(2 * r, d)).reshape(r, 2, d)
    return CachedBlock(parts, block_index, len(block_keys), keys.epoch)


def cache_plain(block: np.ndarray, params: RingParams, dense: bool = False) -> np.ndarray:
    """Plaintext image of Cache on (n <= d, r) small-ring polynomials.

    Returns (r, d) with row j = ``sum_t phi_j(embed(block[t])) X^t``.  With
    ``dense=True`` the matrix B is applied directly instead of by butterflies.
    """
    plan = butterfly_plan(params)
    x = np.zeros((params.d, params.r), dtype=np.int64)
    x[: len(block)] = np.mod(block, params.q)
    y = interleave(x, params)[:, None]
    y = plan.apply_dense(y) if dense else plan.apply(y)
    return plan.phi_r(y)[:, 0]


def cache_direct(block: np.ndarray, params: RingParams) -> np.ndarray:
    """Reference: ``phi_j(sum_t embed(k_t) X^{t * inv(j)})`` with inv(j) = (2j+1)^-1 mod 2d.

    This is the matrix M applied to the embedded keys before factoring.
    """
    q, r, d = params.q, params.r, params.d
    rq = params.ring_d
    k = np.zeros((d, d), dtype=np.int64)
    k[: len(block)] = embed_array(np.mod(block, q), d)
    out = np.zeros((r, d), dtype=np.int64)
    t = np.arange(d)
    for j in range(r):
        inv = pow(2 * j + 1, -1, 2 * d)
        row = np.mod(_k.monomial_rows(k, (t * inv) % (2 * d), q).sum(axis=0), q)
        out[j] = rq.automorphism(row, 2 * j + 1)
    return out


# ---------------------------------------------------------------------------
# Score


def _same_epoch(a, b):
    if a.epoch != b.epoch:
        raise ProtocolError(f"key epoch mismatch: {a.epoch} vs {b.epoch}")


def score_product(qd: DecomposedQuery, block: CachedBlock, params: RingParams) -> np.ndarray:
    """Degree-2 ciphertext ``sum_i q_i (x) k_i`` as (3, d) coefficients."""
    _same_epoch(qd, block)
    q = params.q
    Q, K = qd.parts, block.parts
    if Q.shape != K.shape:
        raise ParameterError("query and block have different shapes")
    return params.ring_d.intt(_k.tensor_mac(Q, K, q))


def score(qd: DecomposedQuery, block: CachedBlock, keys: SwitchKeySet) -> np.ndarray:
    """Encrypted score polynomial ``(c0, c1)``; coefficient t is ``delta^2 <query, key_t>``."""
    params = keys.params
    _same_epoch(qd, keys)
    d0, d1, d2 = score_product(qd, block, params)
    counters.add("relinearize")
    return relinearize(d0, d1, d2, keys.relin, params)


def decompose_plain(q_plain: np.ndarray, params: RingParams) -> np.ndarray:
    """NTT-domain ``phi_i(r^-1 q)`` for i < r, shape (r, d)."""
    rq = params.ring_d
    base = rq.ntt(rq.scalar_mul(np.mod(np.asarray(q_plain, dtype=np.int64), params.q), params.r_inv))
    return np.stack([base[rq.automorphism_ntt_index(2 * i + 1)] for i in range(params.r)])


def score_plain(q_plain: np.ndarray, block: CachedBlock, params: RingParams, q_parts: np.ndarray | None = None) -> np.ndarray:
    """Plaintext-query score: ``sum_i phi_i(r^-1 q) * k_i`` without relinearization.

    ``q_parts`` may carry a precomputed :func:`decompose_plain` result so that
    many blocks share the automorphisms.
    """
    if q_parts is None:
        if np.shape(q_plain)[-1] != params.d:
            raise ParameterError(f"plaintext query must have degree d={params.d}")
        q_parts = decompose_plain(q_plain, params)
    return params.ring_d.intt(_k.plain_mac(q_parts, block.parts, params.q))
