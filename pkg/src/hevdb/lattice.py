"""Keys, MLWE/RLWE encryption, key switching and AES payload encryption.

Sign convention: a ciphertext ``(b, a)`` decrypts as ``b + <a, s>``.
Ring-LWE ciphertexts over R_{q,d} are int64 arrays of shape ``(..., 2, d)``
holding ``(c0, c1)``.  Switching keys are stored in the NTT domain with shape
``(2, 2, d)``: component (beta, alpha) x residue (mod q, mod p).
"""

from __future__ import annotations

import hashlib
import secrets
import struct
import threading
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from . import _kernels as _k
from .errors import CapacityError, IntegrityError, ParameterError, ProtocolError
from .ring import (
    RingParams,
    centered,
    embed_array,
    mod_down,
    mod_up,
    mulmod,
    pack_bits,
    packed_size,
    unpack_bits,
)

XOF_ID = b"HEVDB-GenA-shake128-v1"
SEED_BYTES = 16
ERROR_ETA = 21  # centered binomial, variance 10.5 (sigma ~ 3.2)
B_FRESH = ERROR_ETA
AES_NONCE_BYTES = 12
AES_TAG_BYTES = 16
AES_OVERHEAD = AES_NONCE_BYTES + AES_TAG_BYTES + 4


# ---------------------------------------------------------------------------
# randomness


class Randomness:
    """SHAKE-256 keyed stream; deterministic when given a seed.

    Without a seed, 32 bytes are drawn from the OS CSPRNG.  A lock guards the
    block counter so one instance may be shared between threads.
    """

    def __init__(self, seed: bytes | int | None = None):
        if seed is None:
            seed = secrets.token_bytes(32)
        elif isinstance(seed, int):
            seed = seed.to_bytes(32, "little", signed=False)
        self._seed = bytes(seed)
        self._counter = 0
        self._lock = threading.Lock()

    def bytes(self, n: int) -> bytes:
        with self._lock:
            c = self._counter
            self._counter += 1
        return hashlib.shake_256(self._seed + c.to_bytes(8, "little")).digest(n)

    def seed128(self) -> bytes:
        return self.bytes(SEED_BYTES)

    def ternary(self, shape) -> np.ndarray:
        shape = tuple(np.atleast_1d(shape))
        n = int(np.prod(shape))
        out = np.empty(0, dtype=np.int64)
        while out.size < n:
            raw = np.frombuffer(self.bytes(2 * n + 16), dtype=np.uint8)
            out = np.concatenate([out, raw[raw < 255].astype(np.int64) % 3 - 1])
        return out[:n].reshape(shape)

    def cbd(self, shape, eta: int = ERROR_ETA) -> np.ndarray:
        shape = tuple(np.atleast_1d(shape))
        n = int(np.prod(shape))
        nbytes = (2 * eta + 7) // 8
        raw = np.frombuffer(self.bytes(n * nbytes), dtype=np.uint8).reshape(n, nbytes)
        bits = np.unpackbits(raw, axis=1)[:, : 2 * eta].astype(np.int64)
        return (bits[:, :eta].sum(1) - bits[:, eta:].sum(1)).reshape(shape)

    def uniform(self, q: int, shape) -> np.ndarray:
        shape = tuple(np.atleast_1d(shape))
        n = int(np.prod(shape))
        return _uniform_from_stream(self.bytes, q, n).reshape(shape)


def _uniform_from_stream(draw, q: int, n: int) -> np.ndarray:
    mask = (1 << q.bit_length()) - 1
    out = np.empty(0, dtype=np.int64)
    while out.size < n:
        words = np.frombuffer(draw(8 * (n - out.size) + 64), dtype="<u8") & np.uint64(mask)
        out = np.concatenate([out, words[words < np.uint64(q)].astype(np.int64)])
    return out[:n]


def gen_a(rho: bytes, params: RingParams) -> np.ndarray:
    """Expand a 128-bit seed into the (s, r) uniform a-vector; deterministic."""
    n = params.s * params.r
    xof = hashlib.shake_128(XOF_ID + rho)
    # rejection is ~1e-11 per word at the default q; re-digest longer if ever short
    length = 8 * n + 64
    while True:
        words = np.frombuffer(xof.digest(length), dtype="<u8")
        words = words & np.uint64((1 << params.q.bit_length()) - 1)
        ok = words[words < np.uint64(params.q)]
        if ok.size >= n:
            return ok[:n].astype(np.int64).reshape(params.s, params.r)
        length *= 2


def gen_a_batch(rhos, params: RingParams) -> np.ndarray:
    out = np.empty((len(rhos), params.s, params.r), dtype=np.int64)
    for i, rho in enumerate(rhos):
        out[i] = gen_a(rho, params)
    return out


# ---------------------------------------------------------------------------
# keys


@dataclass(eq=False)
class SecretKey:
    """Client-only key material.  Never serialized by server-facing code."""

    params: RingParams
    mlwe: np.ndarray  # (s, r) ternary, centered ints
    rlwe: np.ndarray  # (d,) ternary, centered ints
    aes_key: bytes

    @property
    def pir_sk(self) -> np.ndarray:
        return self.rlwe

    @cached_property
    def mlwe_ntt(self) -> np.ndarray:
        return self.params.ring_r.ntt(np.mod(self.mlwe, self.params.q))

    @cached_property
    def rlwe_ntt(self) -> np.ndarray:
        return self.params.ring_d.ntt(np.mod(self.rlwe, self.params.q))

    def to_bytes(self) -> bytes:
        return (
            b"HESK"
            + self.params.to_bytes()
            + self.aes_key
            + (self.mlwe + 1).astype(np.uint8).tobytes()
            + (self.rlwe + 1).astype(np.uint8).tobytes()
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "SecretKey":
        if data[:4] != b"HESK":
            raise ParameterError("not a secret key file")
        off = 4
        params = RingParams.from_bytes(data[off:])
        off += RingParams.packed_size()
        aes_key = data[off : off + 32]
        off += 32
        mlwe = np.frombuffer(data[off : off + params.d], dtype=np.uint8).astype(np.int64) - 1
        off += params.d
        rlwe = np.frombuffer(data[off : off + params.d], dtype=np.uint8).astype(np.int64) - 1
        return cls(params, mlwe.reshape(params.s, params.r), rlwe, aes_key)


def gen_sk(params: RingParams, rng: Randomness | None = None) -> SecretKey:
    rng = rng or Randomness()
    return SecretKey(
        params=params,
        mlwe=rng.ternary((params.s, params.r)),
        rlwe=rng.ternary(params.d),
        aes_key=rng.bytes(32),
    )


def _inverse_exponent(g: int, two_d: int) -> int:
    return pow(g, -1, two_d)


def gen_switch_key(source: np.ndarray, target: np.ndarray, params: RingParams, rng: Randomness) -> np.ndarray:
    """Key taking a ciphertext component under ``source`` to key ``target``.

    Both keys are small centered integer polynomials of degree d.  Returns the
    NTT-domain array ``(beta, alpha) x (mod q, mod p)`` with
    ``beta + alpha * target = p * source + e  (mod q*p)``.
    """
    q, p, d = params.q, params.p, params.d
    rq, rp = params.ring_d, params.ring_pd
    e = rng.cbd(d)
    alpha = np.stack([rng.uniform(q, d), rng.uniform(p, d)])
    alpha_ntt = np.stack([rq.ntt(alpha[0]), rp.ntt(alpha[1])])
    t_ntt = np.stack([rq.ntt(np.mod(target, q)), rp.ntt(np.mod(target, p))])
    body = np.stack(
        [
            np.mod(e + rq.scalar_mul(np.mod(source, q), p), q),
            np.mod(e, p),  # p*source vanishes mod p
        ]
    )
    body_ntt = np.stack([rq.ntt(body[0]), rp.ntt(body[1])])
    prod = np.stack([mulmod(alpha_ntt[0], t_ntt[0], q), mulmod(alpha_ntt[1], t_ntt[1], p)])
    beta_ntt = np.stack([np.mod(body_ntt[0] - prod[0], q), np.mod(body_ntt[1] - prod[1], p)])
    return np.stack([beta_ntt, alpha_ntt])


@dataclass(eq=False)
class SwitchKeySet:
    """Public evaluation keys sent to the server at Init.

    ``decompose``: (r, s, 2, 2, d) keys from embed(s_u) to phi_j^{-1}(s').
    ``relin``: (2, 2, d) key from s'^2 to s'; it doubles as the PIR key.
    The cache keys (from phi_j(embed(s_u)) to s') are phi_j applied to the
    decompose keys, so they are derived rather than stored.
    """

    params: RingParams
    decompose: np.ndarray
    relin: np.ndarray
    epoch: int = 0
    _cache_keys: np.ndarray | None = field(default=None, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @property
    def pir_keys(self) -> np.ndarray:
        return self.relin

    @property
    def cache_keys(self) -> np.ndarray:
        with self._lock:
            if self._cache_keys is None:
                params = self.params
                out = np.empty_like(self.decompose)
                for j in range(params.r):
                    idx = params.ring_d.automorphism_ntt_index(2 * j + 1)
                    out[j] = self.decompose[j][..., idx]
                self._cache_keys = out
            return self._cache_keys

    def to_bytes(self) -> bytes:
        head = b"HEPK" + struct.pack("<BQ", 1, self.epoch) + self.params.to_bytes()
        return head + self.decompose.astype("<i8").tobytes() + self.relin.astype("<i8").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "SwitchKeySet":
        if data[:4] != b"HEPK":
            raise ParameterError("not a switch key set")
        version, epoch = struct.unpack_from("<BQ", data, 4)
        if version != 1:
            raise ProtocolError(f"unsupported key format version {version}")
        off = 4 + struct.calcsize("<BQ")
        params = RingParams.from_bytes(data[off:])
        off += RingParams.packed_size()
        shape = (params.r, params.s, 2, 2, params.d)
        count = int(np.prod(shape))
        dec = np.frombuffer(data, dtype="<i8", count=count, offset=off).astype(np.int64).reshape(shape)
        off += 8 * count
        rel = np.frombuffer(data, dtype="<i8", count=4 * params.d, offset=off).astype(np.int64)
        return cls(params, dec, rel.reshape(2, 2, params.d), epoch)


def gen_pk(sk: SecretKey, rng: Randomness | None = None, epoch: int = 0) -> SwitchKeySet:
    rng = rng or Randomness()
    params = sk.params
    d, r, s = params.d, params.r, params.s
    rq = params.ring_d
    s_emb = embed_array(sk.mlwe, d)  # (s, d) centered ints
    dec = np.empty((r, s, 2, 2, d), dtype=np.int64)
    for j in range(r):
        g_inv = _inverse_exponent(2 * j + 1, 2 * d)
        target = centered(rq.automorphism(np.mod(sk.rlwe, params.q), g_inv), params.q)
        for u in range(s):
            dec[j, u] = gen_switch_key(s_emb[u], target, params, rng)
    s2 = centered(rq.mul(np.mod(sk.rlwe, params.q), np.mod(sk.rlwe, params.q)), params.q)
    relin = gen_switch_key(s2, sk.rlwe, params, rng)
    return SwitchKeySet(params, dec, relin, epoch)


# ---------------------------------------------------------------------------
# MLWE (seeded) ciphertexts over R_{q,r}^s


@dataclass(frozen=True, eq=False)
class MlweCiphertext:
    """Seeded module-LWE ciphertext: one small-ring polynomial and a seed."""

    b: np.ndarray  # (r,)
    rho: bytes

    def expand_a(self, params: RingParams) -> np.ndarray:
        return gen_a(self.rho, params)

    def __eq__(self, other):
        if not isinstance(other, MlweCiphertext):
            return NotImplemented
        return self.rho == other.rho and np.array_equal(self.b, other.b)

    def to_bytes(self, params: RingParams) -> bytes:
        return self.rho + pack_bits(self.b, params.log_q)

    @classmethod
    def from_bytes(cls, data: bytes, params: RingParams) -> "MlweCiphertext":
        if len(data) != cls.size(params):
            raise ParameterError("MLWE ciphertext has wrong length")
        b = unpack_bits(data[SEED_BYTES:], params.log_q, params.r)
        if b.max(initial=0) >= params.q:
            raise ParameterError("coefficient outside [0, q)")
        return cls(b, bytes(data[:SEED_BYTES]))

    @staticmethod
    def size(params: RingParams) -> int:
        return SEED_BYTES + packed_size(params.r, params.log_q)


def encrypt_mlwe_batch(messages: np.ndarray, sk: SecretKey, rng: Randomness | None = None) -> list[MlweCiphertext]:
    """Encrypt an (N, r) array of small-ring messages (already in [0, q))."""
    rng = rng or Randomness()
    params = sk.params
    q, rr = params.q, params.ring_r
    messages = np.atleast_2d(np.asarray(messages, dtype=np.int64))
    if messages.shape[-1] != params.r:
        raise ParameterError(f"MLWE message must have {params.r} coefficients")
    n = messages.shape[0]
    rhos = [rng.seed128() for _ in range(n)]
    a = gen_a_batch(rhos, params)
    acc = np.zeros((n, params.r), dtype=np.int64)
    a_ntt = rr.ntt(a)
    for u in range(params.s):
        acc = np.mod(acc + mulmod(a_ntt[:, u], sk.mlwe_ntt[u], q), q)
    as_ = rr.intt(acc)
    e = np.mod(rng.cbd((n, params.r)), q)
    b = np.mod(messages + e - as_, q)
    return [MlweCiphertext(b[i], rhos[i]) for i in range(n)]


def encrypt_mlwe(m: np.ndarray, sk: SecretKey, rng: Randomness | None = None) -> MlweCiphertext:
    return encrypt_mlwe_batch(np.asarray(m)[None, :], sk, rng)[0]


def decrypt_mlwe(ct: MlweCiphertext, sk: SecretKey) -> np.ndarray:
    params = sk.params
    rr = params.ring_r
    a_ntt = rr.ntt(ct.expand_a(params))
    acc = np.zeros(params.r, dtype=np.int64)
    for u in range(params.s):
        acc = np.mod(acc + mulmod(a_ntt[u], sk.mlwe_ntt[u], params.q), params.q)
    return np.mod(ct.b + rr.intt(acc), params.q)


# ---------------------------------------------------------------------------
# RLWE ciphertexts over R_{q,d}


def encrypt_rlwe(m: np.ndarray, sk: SecretKey, rng: Randomness | None = None) -> np.ndarray:
    rng = rng or Randomness()
    params = sk.params
    q, rq = params.q, params.ring_d
    c1 = rng.uniform(q, params.d)
    e = rng.cbd(params.d)
    c0 = np.mod(np.asarray(m) + e - rq.intt(mulmod(rq.ntt(c1), sk.rlwe_ntt, q)), q)
    return np.stack([c0, c1])


def decrypt_rlwe(ct: np.ndarray, sk: SecretKey) -> np.ndarray:
    """Decrypt one or many ``(..., 2, d)`` ciphertexts in the coefficient domain."""
    params = sk.params
    q, rq = params.q, params.ring_d
    c1s = rq.intt(mulmod(rq.ntt(ct[..., 1, :]), sk.rlwe_ntt, q))
    return np.mod(ct[..., 0, :] + c1s, q)


def ntt_rns(x: np.ndarray, params: RingParams) -> np.ndarray:
    """NTT each residue of an RNS array ``(..., 2, d)``."""
    return np.stack([params.ring_d.ntt(x[..., 0, :]), params.ring_pd.ntt(x[..., 1, :])], axis=-2)


def intt_rns(x: np.ndarray, params: RingParams) -> np.ndarray:
    return np.stack([params.ring_d.intt(x[..., 0, :]), params.ring_pd.intt(x[..., 1, :])], axis=-2)


def switch_product(a_hat_ntt: np.ndarray, keys: np.ndarray, params: RingParams) -> np.ndarray:
    """Hoisted inner product sum_u a_u * key_u, then a single ModDown.

    a_hat_ntt: (S, 2, d) NTT-domain ModUp'd operands.
    keys:      (J, S, 2, 2, d) switching keys.
    returns    (J, 2, d) coefficient-domain ciphertexts mod q.
    """
    moduli = np.array([params.q, params.p], dtype=np.int64)
    acc = _k.mac_rows(np.ascontiguousarray(a_hat_ntt), np.ascontiguousarray(keys), moduli)
    return mod_down(intt_rns(acc, params), params.q, params.p, params.p_inv_mod_q)


def key_switch(a: np.ndarray, swk: np.ndarray, params: RingParams) -> np.ndarray:
    """Switch one component ``a`` (coefficient domain, mod q) via ``swk``.

    Returns ``(c0, c1)`` with ``c0 + c1 * target ~ a * source``.
    """
    a_hat = ntt_rns(mod_up(np.asarray(a, dtype=np.int64), params.q, params.p), params)
    return switch_product(a_hat[None], swk[None, None], params)[0]


def key_switch_unhoisted(parts: np.ndarray, keys: np.ndarray, params: RingParams) -> np.ndarray:
    """Reference path: ModDown after every term, then add the results mod q."""
    out = np.zeros((2, params.d), dtype=np.int64)
    for a, k in zip(parts, keys):
        out = np.mod(out + key_switch(a, k, params), params.q)
    return out


def relinearize(d0: np.ndarray, d1: np.ndarray, d2: np.ndarray, relin_key: np.ndarray, params: RingParams) -> np.ndarray:
    """Fold a degree-2 ciphertext (coefficient domain) back to ``(c0, c1)``."""
    ks = key_switch(d2, relin_key, params)
    return np.stack([np.mod(d0 + ks[0], params.q), np.mod(d1 + ks[1], params.q)])


@dataclass(frozen=True)
class SwitchKey:
    """A single switching key tagged with the key labels it connects."""

    source: str
    target: str
    data: np.ndarray

    def apply(self, ct: np.ndarray, params: RingParams, key_label: str) -> np.ndarray:
        """Re-encrypt ``ct = (c0, c1)`` under ``source`` to ``target``."""
        if key_label != self.source:
            raise ProtocolError(f"ciphertext under {key_label!r}, key switches from {self.source!r}")
        ks = key_switch(ct[1], self.data, params)
        return np.stack([np.mod(ct[0] + ks[0], params.q), ks[1]])


# ---------------------------------------------------------------------------
# AES-256-GCM record payloads


def record_slot_bytes(payload_len: int) -> int:
    """Smallest power-of-two slot that holds a payload and the AEAD framing."""
    need = payload_len + AES_OVERHEAD
    slot = 1
    while slot < need:
        slot *= 2
    return slot


def _aes_key(key) -> bytes:
    return key.aes_key if isinstance(key, SecretKey) else bytes(key)


def encrypt_aes(v: bytes, key, rng: Randomness | None = None, slot_bytes: int | None = None) -> bytes:
    """AES-256-GCM with a fresh random 96-bit nonce.

    The plaintext is length-prefixed and, when ``slot_bytes`` is given,
    zero-padded so the blob is exactly ``slot_bytes`` long.
    """
    rng = rng or Randomness()
    v = bytes(v)
    framed = struct.pack("<I", len(v)) + v
    if slot_bytes is not None:
        room = slot_bytes - AES_NONCE_BYTES - AES_TAG_BYTES
        if len(framed) > room:
            raise CapacityError(f"payload of {len(v)} bytes exceeds record slot {slot_bytes}")
        framed += bytes(room - len(framed))
    nonce = rng.bytes(AES_NONCE_BYTES)
    return nonce + AESGCM(_aes_key(key)).encrypt(nonce, framed, None)


def decrypt_aes(blob: bytes, key) -> bytes:
    blob = bytes(blob)
    if len(blob) < AES_NONCE_BYTES + AES_TAG_BYTES + 4:
        raise IntegrityError("AES blob too short")
    nonce, body = blob[:AES_NONCE_BYTES], blob[AES_NONCE_BYTES:]
    try:
        framed = AESGCM(_aes_key(key)).decrypt(nonce, body, None)
    except InvalidTag as exc:
        raise IntegrityError("AES authentication failed") from exc
    (length,) = struct.unpack_from("<I", framed)
    if length > len(framed) - 4:
        raise IntegrityError("corrupt AES payload length")
    return framed[4 : 4 + length]
