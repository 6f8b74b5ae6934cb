"""Single-server PIR over the value store.

Records are AES blobs of a fixed power-of-two slot size.  Their bytes are the
coefficients (8-bit limbs) of plaintext polynomials laid out on a
``rows x cols`` grid.  A retrieval sends two kinds of seeded MLWE selectors:

* a row selector at scale ``floor(q / 256)``;
* ``LEVELS`` column selectors at scales ``BASE**k``.

The server decomposes each selector and applies the inverse butterfly to get
one ciphertext per row (column) encrypting 0 or the scale.  Stage 1 takes
plaintext-ciphertext products across rows; stage 2 contracts the columns by
gadget-decomposing the stage-1 ciphertexts against the column selectors.  No
server-side state depends on the records beyond the raw cells.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as _k
from .errors import CapacityError, IntegrityError, ParameterError, ProtocolError
from .lattice import (
    MlweCiphertext,
    Randomness,
    SecretKey,
    SwitchKeySet,
    decrypt_rlwe,
    encrypt_mlwe_batch,
    key_switch,
)
from .ring import RingParams, centered
from .secure_ip import butterfly_plan, counters, decompose

LIMB_BITS = 8
PLAIN_MOD = 1 << LIMB_BITS
BASE_BITS = 10
BASE = 1 << BASE_BITS
DECODE_MARGIN = 0.25  # max distance from the nearest limb before we refuse to decode
NTT_CACHE_BYTES = 512 << 20


def levels(params: RingParams) -> int:
    return math.ceil(params.q.bit_length() / BASE_BITS)


def grid_side(capacity: int) -> int:
    """Side of the square grid holding ``capacity`` records: 2^ceil(log4 n)."""
    side = 1
    while side * side < capacity:
        side *= 2
    return side


# ---------------------------------------------------------------------------
# the matrix


@dataclass(eq=False)
class PirMatrix:
    """Grid of record slots; slot i sits at row ``i // cols``, column ``i % cols``."""

    params: RingParams
    slot_bytes: int
    rows: int = 1
    cols: int = 1
    limbs: np.ndarray = field(default=None, repr=False)  # (rows*cols, slot_bytes) uint8
    _ntt: np.ndarray | None = field(default=None, repr=False)  # (rows*cols, chunks, d)
    _ntt_ok: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.slot_bytes <= 0 or self.slot_bytes & (self.slot_bytes - 1):
            raise ParameterError("record slot size must be a power of two")
        if self.limbs is None:
            self.limbs = np.zeros((self.rows * self.cols, self.slot_bytes), dtype=np.uint8)
        self._reset_ntt()

    @property
    def chunks(self) -> int:
        return -(-self.slot_bytes // self.params.d)

    @property
    def capacity(self) -> int:
        return self.rows * self.cols

    def _reset_ntt(self):
        n = self.capacity * self.chunks * self.params.d * 8
        self._ntt = np.zeros((self.capacity, self.chunks, self.params.d), dtype=np.int64) if n <= NTT_CACHE_BYTES else None
        self._ntt_ok = np.zeros(self.capacity, dtype=bool)

    @classmethod
    def build(cls, params: RingParams, slot_bytes: int, blobs=()) -> "PirMatrix":
        side = grid_side(max(len(blobs), 1))
        m = cls(params, slot_bytes, side, side)
        for i, blob in enumerate(blobs):
            m.set(i, blob)
        return m

    def cell(self, slot: int) -> tuple[int, int]:
        if not 0 <= slot < self.capacity:
            raise ParameterError(f"slot {slot} outside the {self.rows}x{self.cols} grid")
        return divmod(slot, self.cols)

    def ensure_capacity(self, n: int) -> bool:
        """Grow the grid to hold n records; returns True if the layout changed."""
        if n <= self.capacity:
            return False
        side = grid_side(n)
        old = self.limbs
        self.rows = self.cols = side
        self.limbs = np.zeros((side * side, old.shape[1]), dtype=np.uint8)
        self.limbs[: old.shape[0]] = old
        self._reset_ntt()
        return True

    def set(self, slot: int, blob: bytes) -> None:
        if len(blob) > self.slot_bytes:
            raise CapacityError(f"record of {len(blob)} bytes exceeds slot size {self.slot_bytes}")
        self.cell(slot)
        self.limbs[slot] = 0
        self.limbs[slot, : len(blob)] = np.frombuffer(bytes(blob), dtype=np.uint8)
        self._ntt_ok[slot] = False

    def clear(self, slot: int) -> None:
        self.limbs[slot] = 0
        self._ntt_ok[slot] = False

    def get(self, slot: int) -> bytes:
        """Direct lookup (the oracle for retrieval)."""
        self.cell(slot)
        return self.limbs[slot].tobytes()

    def _polys(self, sel) -> np.ndarray:
        limbs = self.limbs[sel]
        out = np.zeros((limbs.shape[0], self.chunks * self.params.d), dtype=np.int64)
        out[:, : self.slot_bytes] = limbs
        return out

    def cell_ntt(self) -> np.ndarray:
        """(rows*cols, chunks, d) NTT of every cell, reusing per-cell results."""
        d = self.params.d
        rq = self.params.ring_d
        if self._ntt is None:
            return rq.ntt(self._polys(slice(None)).reshape(-1, d)).reshape(self.capacity, self.chunks, d)
        stale = np.flatnonzero(~self._ntt_ok)
        if stale.size:
            self._ntt[stale] = rq.ntt(self._polys(stale).reshape(-1, d)).reshape(stale.size, self.chunks, d)
            self._ntt_ok[stale] = True
        return self._ntt

    def copy(self) -> "PirMatrix":
        m = PirMatrix(self.params, self.slot_bytes, self.rows, self.cols, self.limbs.copy())
        return m


# ---------------------------------------------------------------------------
# client side


@dataclass(frozen=True, eq=False)
class PirQuery:
    """Seeded selectors.  ``row`` has one ciphertext per r rows; ``col`` has
    ``levels`` groups, each with one ciphertext per r columns."""

    row: tuple
    col: tuple
    epoch: int = 0

    def ciphertexts(self):
        yield from self.row
        for group in self.col:
            yield from group


def _selector_messages(index: int, count: int, scale: int, params: RingParams) -> np.ndarray:
    """One small-ring message per group of r positions; coefficient Y^-c holds the scale."""
    r, q = params.r, params.q
    out = np.zeros((-(-count // r), r), dtype=np.int64)
    g, c = divmod(index, r)
    if c == 0:
        out[g, 0] = scale % q
    else:
        out[g, r - c] = (-scale) % q
    return out


def pir_query(slot: int, rows: int, cols: int, sk: SecretKey, rng: Randomness | None = None, epoch: int = 0) -> PirQuery:
    params = sk.params
    if not 0 <= slot < rows * cols:
        raise ParameterError(f"slot {slot} outside the {rows}x{cols} grid")
    rng = rng or Randomness()
    row, col = divmod(slot, cols)
    row_ct = encrypt_mlwe_batch(_selector_messages(row, rows, params.q // PLAIN_MOD, params), sk, rng)
    col_cts = tuple(
        tuple(encrypt_mlwe_batch(_selector_messages(col, cols, BASE**k, params), sk, rng))
        for k in range(levels(params))
    )
    return PirQuery(tuple(row_ct), col_cts, epoch)


def pir_decode(answer: np.ndarray, sk: SecretKey, slot_bytes: int) -> bytes:
    """Round each coefficient to its 8-bit limb; refuse when noise is too close to the gap."""
    params = sk.params
    x = decrypt_rlwe(np.asarray(answer, dtype=np.int64), sk).reshape(-1)
    y = x.astype(np.float64) * (PLAIN_MOD / params.q)
    near = np.rint(y)
    if np.abs(y - near).max(initial=0.0) > DECODE_MARGIN:
        raise IntegrityError("PIR answer does not decode: noise exceeds the limb margin")
    limbs = np.mod(near.astype(np.int64), PLAIN_MOD).astype(np.uint8)
    return limbs[:slot_bytes].tobytes()


# ---------------------------------------------------------------------------
# server side


def expand_selectors(cts, count: int, keys: SwitchKeySet) -> np.ndarray:
    """Decompose each selector and run the inverse butterfly.

    Returns (count, 2, d) NTT-domain ciphertexts, entry i encrypting the
    constant scale when i is the selected index and 0 otherwise.
    """
    params = keys.params
    r, d = params.r, params.d
    rq = params.ring_d
    plan = butterfly_plan(params)
    out = []
    for ct in cts:
        parts = decompose(ct, keys).coefficients(params)
        sel = plan.expand(parts)
        out.append(rq.ntt(sel.reshape(2 * r, d)).reshape(r, 2, d))
    sel = np.concatenate(out)
    if sel.shape[0] < count:
        raise ProtocolError("selector does not cover the grid")
    return np.ascontiguousarray(sel[:count])


def _gadget_digits(x: np.ndarray, q: int, ell: int) -> np.ndarray:
    """Balanced base-2^10 digits of centered x with sum_k BASE^k * out[k] == x (mod q)."""
    v = centered(x, q)
    out = []
    for _ in range(ell - 1):
        lo = ((v + BASE // 2) % BASE) - BASE // 2
        out.append(lo)
        v = (v - lo) // BASE
    out.append(v)  # top digit absorbs the carry, |v| <= BASE/2 + 1
    return np.stack(out)


def pir_answer(matrix: PirMatrix, query: PirQuery, keys: SwitchKeySet) -> np.ndarray:
    """Returns (chunks, 2, d) coefficient-domain ciphertexts of the selected cell."""
    params = keys.params
    if query.epoch != keys.epoch:
        raise ProtocolError(f"key epoch mismatch: {query.epoch} vs {keys.epoch}")
    q, d = params.q, params.d
    rq = params.ring_d
    rows, cols, chunks = matrix.rows, matrix.cols, matrix.chunks
    ell = levels(params)
    if len(query.col) != ell:
        raise ProtocolError(f"expected {ell} column selector levels, got {len(query.col)}")
    row_sel = expand_selectors(query.row, rows, keys)  # (rows, 2, d)
    col_sel = np.concatenate([expand_selectors(g, cols, keys) for g in query.col])  # (ell*cols, 2, d)

    cells = matrix.cell_ntt().reshape(rows, cols * chunks, d)
    stage1 = _k.select_rows(row_sel, np.ascontiguousarray(cells), q)  # (cols*chunks, 2, d)
    f = rq.intt(stage1.reshape(-1, d)).reshape(cols, chunks, 2, d)

    digits = _gadget_digits(f, q, ell)  # (ell, cols, chunks, 2, d)
    dig_ntt = rq.ntt(np.mod(digits, q).reshape(-1, d)).reshape(ell * cols, chunks * 2, d)
    acc = _k.select_rows(col_sel, np.ascontiguousarray(dig_ntt), q)  # (chunks*2, 2, d)
    acc = rq.intt(acc.reshape(-1, d)).reshape(chunks, 2, 2, d)
    a0, a1 = acc[:, 0], acc[:, 1]  # encryptions of f0 and f1 of the chosen column
    out = np.empty((chunks, 2, d), dtype=np.int64)
    for c in range(chunks):
        ks = key_switch(a1[c, 1], keys.pir_keys, params)  # a1.c1 * s'^2 -> s'
        out[c, 0] = np.mod(a0[c, 0] + ks[0], q)
        out[c, 1] = np.mod(a0[c, 1] + a1[c, 0] + ks[1], q)
    counters.add("pir_answers")
    return out


def query_size(rows: int, cols: int, params: RingParams) -> int:
    groups = lambda n: -(-n // params.r)  # noqa: E731
    return (groups(rows) + levels(params) * groups(cols)) * MlweCiphertext.size(params)
