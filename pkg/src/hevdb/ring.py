"""Exact arithmetic in Z_q[X]/(X^n + 1).

Polynomials are int64 numpy arrays whose last axis holds the coefficients in
standard representation ``[0, q)``.  Leading axes are batch axes, so one call
transforms many polynomials at once.  Values modulo ``q*p`` are kept in RNS
form with a residue axis of length 2 just before the coefficient axis
(index 0 holds the residue mod ``q``, index 1 the residue mod ``p``).

Moduli must stay below 2**50: modular products are computed with a float64
quotient estimate followed by an exact wrapping int64 correction.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import _kernels as _k
from .errors import ParameterError

MAX_MODULUS_BITS = 50

# NTT-friendly primes just below 2**50, both congruent to 1 mod 2**14.
DEFAULT_Q = 1125899906826241
DEFAULT_P = 1125899906629633


# ---------------------------------------------------------------------------
# scalar helpers


def _is_power_of_two(x: int) -> bool:
    return x > 0 and x & (x - 1) == 0


def primitive_root_2n(n: int, q: int) -> int:
    """Smallest-base primitive 2n-th root of unity modulo prime ``q``."""
    if (q - 1) % (2 * n):
        raise ParameterError(f"q={q} is not 1 mod 2n={2 * n}")
    for base in range(2, 10_000):
        psi = pow(base, (q - 1) // (2 * n), q)
        if pow(psi, n, q) == q - 1:
            return psi
    raise ParameterError(f"no primitive 2n-th root found for q={q}")


# ---------------------------------------------------------------------------
# vectorised modular kernels


def mulmod(a: np.ndarray, b: np.ndarray, q: int) -> np.ndarray:
    """Elementwise ``a*b mod q`` for operands in ``[0, q)``, q < 2**50."""
    a, b = np.asarray(a, dtype=np.int64), np.asarray(b, dtype=np.int64)
    shape = np.broadcast_shapes(a.shape, b.shape)
    # materialise broadcasts so numba only ever sees plain writeable arrays
    a = a if a.shape == shape else np.array(np.broadcast_to(a, shape))
    b = b if b.shape == shape else np.array(np.broadcast_to(b, shape))
    out = _k.mulmod_flat(np.ascontiguousarray(a).ravel(), np.ascontiguousarray(b).ravel(), q)
    return out.reshape(shape)


def addmod(a: np.ndarray, b: np.ndarray, q: int) -> np.ndarray:
    r = a + b
    r[r >= q] -= q
    return r


def submod(a: np.ndarray, b: np.ndarray, q: int) -> np.ndarray:
    r = a - b
    r[r < 0] += q
    return r


def negmod(a: np.ndarray, q: int) -> np.ndarray:
    return np.where(a == 0, a, q - a)


def centered(a: np.ndarray, q: int) -> np.ndarray:
    """Map ``[0, q)`` to the symmetric range ``(-q/2, q/2]``."""
    return np.where(a > q // 2, a - q, a)


def reduce(a, q: int) -> np.ndarray:
    """Reduce arbitrary (possibly negative or big-int) values into ``[0, q)``."""
    arr = np.asarray(a)
    if arr.dtype == object:
        return np.array([int(x) % q for x in arr.ravel()], dtype=np.int64).reshape(arr.shape)
    return np.mod(arr.astype(np.int64), q)


# ---------------------------------------------------------------------------
# the ring


class Ring:
    """Negacyclic ring Z_q[X]/(X^n + 1) with precomputed NTT tables.

    Tables are built once and never mutated, so a ring can be shared freely
    between threads.
    """

    def __init__(self, n: int, q: int, psi: int | None = None):
        if not _is_power_of_two(n):
            raise ParameterError(f"ring degree {n} is not a power of two")
        if q.bit_length() > MAX_MODULUS_BITS:
            raise ParameterError(f"modulus exceeds {MAX_MODULUS_BITS} bits")
        self.n = n
        self.q = q
        self.psi = primitive_root_2n(n, q) if psi is None else psi
        if pow(self.psi, n, q) != q - 1:
            raise ParameterError("psi is not a primitive 2n-th root of unity")

        psi_inv = pow(self.psi, -1, q)
        n_inv = pow(n, -1, q)
        self._tw = self._const([pow(self.psi, i, q) for i in range(n)])
        self._untw = self._const([n_inv * pow(psi_inv, i, q) % q for i in range(n)])

        bits = n.bit_length() - 1
        self._bitrev = np.array(
            [int(format(i, f"0{bits}b")[::-1], 2) if bits else 0 for i in range(n)],
            dtype=np.intp,
        )
        omega = self.psi * self.psi % q
        omega_inv = pow(omega, -1, q)
        fwd, inv = [], []
        m = 1
        while m < n:
            step = n // (2 * m)
            fwd += [pow(omega, k * step, q) for k in range(m)]
            inv += [pow(omega_inv, k * step, q) for k in range(m)]
            m *= 2
        self._fwd = self._const(fwd or [1])
        self._inv = self._const(inv or [1])
        self._auto_cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        self._auto_ntt_cache: dict[int, np.ndarray] = {}

    def _const(self, values):
        w = np.array(values, dtype=np.int64)
        return w, w.astype(np.float64) / self.q

    def __repr__(self):
        return f"Ring(n={self.n}, q={self.q})"

    # -- transforms -------------------------------------------------------

    def ntt(self, a: np.ndarray) -> np.ndarray:
        """Evaluate at psi^(2k+1) for k = 0..n-1 (natural order)."""
        a = np.asarray(a, dtype=np.int64)
        flat = np.ascontiguousarray(a).reshape(-1, self.n)
        out = _k.ntt_rows(flat, self._bitrev, *self._tw, *self._fwd, self.q)
        return out.reshape(a.shape)

    def intt(self, a: np.ndarray) -> np.ndarray:
        a = np.asarray(a, dtype=np.int64)
        flat = np.ascontiguousarray(a).reshape(-1, self.n)
        out = _k.intt_rows(flat, self._bitrev, *self._untw, *self._inv, self.q)
        return out.reshape(a.shape)

    # -- arithmetic -------------------------------------------------------

    def mul(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return self.intt(mulmod(self.ntt(a), self.ntt(b), self.q))

    def add(self, a, b):
        return addmod(a, b, self.q)

    def sub(self, a, b):
        return submod(a, b, self.q)

    def neg(self, a):
        return negmod(a, self.q)

    def scalar_mul(self, a: np.ndarray, c: int) -> np.ndarray:
        a = np.asarray(a, dtype=np.int64)
        out = _k.mulmod_scalar_flat(np.ascontiguousarray(a).ravel(), c % self.q, self.q)
        return out.reshape(a.shape)

    # -- automorphisms X -> X^g, g odd -------------------------------------

    def _auto_table(self, g: int):
        g %= 2 * self.n
        if g % 2 == 0:
            raise ParameterError("automorphism exponent must be odd")
        if g not in self._auto_cache:
            n = self.n
            e = (np.arange(n, dtype=np.int64) * g) % (2 * n)
            src = np.empty(n, dtype=np.intp)
            neg = np.empty(n, dtype=bool)
            src[e % n] = np.arange(n)
            neg[e % n] = e >= n
            self._auto_cache[g] = (src, neg)
        return self._auto_cache[g]

    def automorphism(self, a: np.ndarray, g: int) -> np.ndarray:
        """Coefficient-domain map p(X) -> p(X^g)."""
        src, neg = self._auto_table(g)
        out = a[..., src]
        return np.where(neg & (out != 0), self.q - out, out)

    def automorphism_ntt_index(self, g: int) -> np.ndarray:
        """Gather index so that ``ntt(auto(a, g)) == ntt(a)[..., idx]``."""
        g %= 2 * self.n
        if g not in self._auto_ntt_cache:
            k = np.arange(self.n, dtype=np.int64)
            self._auto_ntt_cache[g] = ((((2 * k + 1) * g) % (2 * self.n)) - 1) // 2
        return self._auto_ntt_cache[g]

    def monomial_mul(self, a: np.ndarray, e) -> np.ndarray:
        """Multiply by X^e. ``e`` may be an int or an array broadcasting
        against ``a.shape[:-1]`` (one exponent per polynomial)."""
        n = self.n
        e = np.asarray(e, dtype=np.int64) % (2 * n)
        k = np.arange(n, dtype=np.int64)
        pos = (k - e[..., None]) % (2 * n)  # source exponent, in [0, 2n)
        neg = pos >= n
        src = pos % n
        out = np.take_along_axis(a, np.broadcast_to(src, a.shape[:-1] + (n,)), axis=-1)
        return np.where(neg & (out != 0), self.q - out, out)


def schoolbook_multiply(a, b, q: int) -> np.ndarray:
    """O(n^2) negacyclic product with Python integers; test oracle."""
    n = len(a)
    acc = [0] * n
    for i, ai in enumerate(a):
        ai = int(ai)
        if not ai:
            continue
        for j, bj in enumerate(b):
            k = i + j
            if k < n:
                acc[k] += ai * int(bj)
            else:
                acc[k - n] -= ai * int(bj)
    return np.array([x % q for x in acc], dtype=np.int64)


# ---------------------------------------------------------------------------
# parameters


@dataclass(frozen=True)
class RingParams:
    """Public parameters: degree d, slot count r, moduli q and p, scale delta.

    The defaults are desk-scale (d=2048).  ``production`` gives d=4096 with
    log2(q*p) ~ 100 bits, inside the 128-bit envelope of the homomorphic
    encryption security tables; the desk preset is not 128-bit secure.
    """

    d: int = 2048
    r: int = 128
    q: int = DEFAULT_Q
    p: int = DEFAULT_P
    delta: float = 2.0**22
    _rings: dict = field(default_factory=dict, init=False, repr=False, compare=False, hash=False)

    def __post_init__(self):
        d, r, q, p = self.d, self.r, self.q, self.p
        if not (_is_power_of_two(d) and _is_power_of_two(r)):
            raise ParameterError("d and r must be powers of two")
        if r > d:
            raise ParameterError("r must not exceed d")
        for name, m in (("q", q), ("p", p)):
            if m % 2 == 0 or (m - 1) % (2 * d):
                raise ParameterError(f"{name} must be odd and 1 mod 2d")
            if m.bit_length() > MAX_MODULUS_BITS:
                raise ParameterError(f"{name} exceeds {MAX_MODULUS_BITS} bits")
        if q == p:
            raise ParameterError("q and p must differ")
        if self.delta <= 0:
            raise ParameterError("delta must be positive")

    @property
    def s(self) -> int:
        return self.d // self.r

    @property
    def log_q(self) -> int:
        return self.q.bit_length()

    @cached_property
    def r_inv(self) -> int:
        return pow(self.r, -1, self.q)

    @cached_property
    def p_inv_mod_q(self) -> int:
        return pow(self.p, -1, self.q)

    @cached_property
    def p_mod_q(self) -> int:
        return self.p % self.q

    def _ring(self, key, factory):
        if key not in self._rings:
            self._rings[key] = factory()
        return self._rings[key]

    @property
    def ring_d(self) -> Ring:
        return self._ring("qd", lambda: Ring(self.d, self.q))

    @property
    def ring_pd(self) -> Ring:
        return self._ring("pd", lambda: Ring(self.d, self.p))

    @property
    def ring_r(self) -> Ring:
        # psi_r = psi_d^s keeps the small-ring NTT consistent with the embedding
        return self._ring("qr", lambda: Ring(self.r, self.q, pow(self.ring_d.psi, self.s, self.q)))

    @property
    def ring_pr(self) -> Ring:
        return self._ring("pr", lambda: Ring(self.r, self.p, pow(self.ring_pd.psi, self.s, self.p)))

    def to_bytes(self) -> bytes:
        return struct.pack("<IIQQd", self.d, self.r, self.q, self.p, self.delta)

    @classmethod
    def from_bytes(cls, data: bytes) -> "RingParams":
        d, r, q, p, delta = struct.unpack("<IIQQd", data[: cls.packed_size()])
        return cls(d=d, r=r, q=q, p=p, delta=delta)

    @staticmethod
    def packed_size() -> int:
        return struct.calcsize("<IIQQd")


def slots_for_dim(dim: int) -> int:
    """Next power of two >= dim (96 -> 128, 768 -> 1024)."""
    r = 1
    while r < dim:
        r *= 2
    return r


PRESETS = {
    "toy": dict(d=16, r=4, delta=2.0**20),
    "small": dict(d=256, r=128, delta=2.0**22),
    "desk": dict(d=2048, r=128, delta=2.0**22),
    "production": dict(d=4096, r=128, delta=2.0**22),
}


def preset(name: str = "desk", **overrides) -> RingParams:
    if name not in PRESETS:
        raise ParameterError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return RingParams(**{**PRESETS[name], **overrides})


def params_for_dim(dim: int, name: str = "desk", **overrides) -> RingParams:
    """Preset with r sized to hold a ``dim``-dimensional vector."""
    base = PRESETS[name]
    r = max(slots_for_dim(dim), 1)
    if r > overrides.get("d", base["d"]):
        raise ParameterError(f"dimension {dim} does not fit ring degree {base['d']}")
    return preset(name, **{"r": r, **overrides})


# ---------------------------------------------------------------------------
# polynomial value type and the ring-level operations


@dataclass(frozen=True, eq=False)
class PolyModQ:
    """A polynomial with coefficients in ``[0, modulus)``."""

    coeffs: np.ndarray
    modulus: int

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=np.int64)
        if c.ndim != 1:
            raise ParameterError("PolyModQ holds a single polynomial")
        if c.size and (c.min() < 0 or c.max() >= self.modulus):
            raise ParameterError("coefficient outside [0, modulus)")
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)

    @classmethod
    def from_ints(cls, values, modulus: int, degree: int | None = None) -> "PolyModQ":
        vals = [int(v) % modulus for v in values]
        if degree is not None:
            vals = vals + [0] * (degree - len(vals))
        return cls(np.array(vals, dtype=np.int64), modulus)

    @property
    def degree(self) -> int:
        return len(self.coeffs)

    def __eq__(self, other):
        if not isinstance(other, PolyModQ):
            return NotImplemented
        return self.modulus == other.modulus and np.array_equal(self.coeffs, other.coeffs)

    def __repr__(self):
        return f"PolyModQ(degree={self.degree}, modulus={self.modulus})"

    def to_bytes(self) -> bytes:
        return poly_to_bytes(self.coeffs, self.modulus)

    @classmethod
    def from_bytes(cls, data: bytes) -> "PolyModQ":
        coeffs, modulus, _ = poly_from_bytes(data)
        return cls(coeffs, modulus)


def _ring_for(degree: int, modulus: int) -> Ring:
    key = (degree, modulus)
    ring = _RING_CACHE.get(key)
    if ring is None:
        ring = _RING_CACHE[key] = Ring(degree, modulus)
    return ring


_RING_CACHE: dict[tuple[int, int], Ring] = {}


def negacyclic_multiply(a: PolyModQ, b: PolyModQ) -> PolyModQ:
    if a.degree != b.degree or a.modulus != b.modulus:
        raise ParameterError("operands differ in degree or modulus")
    ring = _ring_for(a.degree, a.modulus)
    return PolyModQ(ring.mul(a.coeffs, b.coeffs), a.modulus)


def apply_automorphism(a: PolyModQ, i: int, r: int | None = None) -> PolyModQ:
    """phi_i: p(X) -> p(X^(2i+1)); ``i`` must lie in ``[0, r)`` when r is given."""
    bound = a.degree if r is None else r
    if not 0 <= i < bound:
        raise ParameterError(f"automorphism index {i} outside [0, {bound})")
    ring = _ring_for(a.degree, a.modulus)
    return PolyModQ(ring.automorphism(a.coeffs, 2 * i + 1), a.modulus)


def embed(a: PolyModQ, d: int) -> PolyModQ:
    """Natural embedding p(X) -> p(X^(d/r))."""
    r = a.degree
    if d % r:
        raise ParameterError(f"{r} does not divide {d}")
    out = np.zeros(d, dtype=np.int64)
    out[:: d // r] = a.coeffs
    return PolyModQ(out, a.modulus)


def embed_array(a: np.ndarray, d: int) -> np.ndarray:
    r = a.shape[-1]
    out = np.zeros(a.shape[:-1] + (d,), dtype=np.int64)
    out[..., :: d // r] = a
    return out


def mod_up(a: np.ndarray, q: int, p: int) -> np.ndarray:
    """Lift from mod q to RNS mod q*p using the centered representative.

    Returns shape ``a.shape[:-1] + (2, n)``.
    """
    c = centered(a, q)
    return np.stack([a, np.mod(c, p)], axis=-2)


def mod_down(x: np.ndarray, q: int, p: int, p_inv: int | None = None) -> np.ndarray:
    """round(x / p) mod q for ``x`` in RNS form (..., 2, n)."""
    if p_inv is None:
        p_inv = pow(p, -1, q)
    xq = x[..., 0, :]
    xp = centered(x[..., 1, :], p)
    diff = np.mod(xq - np.mod(xp, q), q)
    out = _k.mulmod_scalar_flat(np.ascontiguousarray(diff).ravel(), p_inv, q)
    return out.reshape(diff.shape)


def rns_from_ints(values, q: int, p: int) -> np.ndarray:
    vals = [int(v) for v in values]
    return np.array([[v % q for v in vals], [v % p for v in vals]], dtype=np.int64)


def rns_to_ints(x: np.ndarray, q: int, p: int) -> list[int]:
    """CRT-combine a (2, n) RNS array into integers in ``[0, q*p)``."""
    qp = q * p
    cq = p * pow(p, -1, q)
    cp = q * pow(q, -1, p)
    return [(int(a) * cq + int(b) * cp) % qp for a, b in zip(x[0], x[1])]


# ---------------------------------------------------------------------------
# serialization


_POLY_HEADER = struct.Struct("<IQ")


def poly_to_bytes(coeffs: np.ndarray, modulus: int) -> bytes:
    """Degree (u32) + modulus (u64) + little-endian u64 coefficients."""
    c = np.asarray(coeffs, dtype="<i8")
    return _POLY_HEADER.pack(c.shape[-1], modulus) + c.tobytes()


def poly_from_bytes(data: bytes, offset: int = 0) -> tuple[np.ndarray, int, int]:
    """Returns ``(coeffs, modulus, next_offset)``."""
    degree, modulus = _POLY_HEADER.unpack_from(data, offset)
    start = offset + _POLY_HEADER.size
    end = start + 8 * degree
    if end > len(data):
        raise ParameterError("truncated polynomial")
    coeffs = np.frombuffer(data[start:end], dtype="<i8").astype(np.int64)
    if coeffs.size and (coeffs.min() < 0 or coeffs.max() >= modulus):
        raise ParameterError("coefficient outside [0, modulus)")
    return coeffs, modulus, end


def pack_bits(values: np.ndarray, bits: int) -> bytes:
    """Pack non-negative integers (< 2**bits) at ``bits`` bits each, LSB first."""
    v = np.ascontiguousarray(values, dtype="<u8").ravel()
    allbits = np.unpackbits(v.view(np.uint8).reshape(-1, 8), axis=1, bitorder="little")
    return np.packbits(allbits[:, :bits].ravel(), bitorder="little").tobytes()


def unpack_bits(data: bytes, bits: int, count: int) -> np.ndarray:
    raw = np.unpackbits(np.frombuffer(data, dtype=np.uint8), bitorder="little")
    raw = raw[: bits * count].reshape(count, bits)
    full = np.zeros((count, 64), dtype=np.uint8)
    full[:, :bits] = raw
    return np.packbits(full, axis=1, bitorder="little").view("<u8").ravel().astype(np.int64)


def packed_size(count: int, bits: int) -> int:
    return (count * bits + 7) // 8
