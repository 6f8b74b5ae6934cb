"""The encrypted database and the client that talks to it.

The server side (:class:`EncryptedDatabase`) holds only public material:
seeded MLWE key ciphertexts, AES blobs, one cached block per d keys and the
switching keys.  The client side (:class:`Client`) holds the secret key, does
all encryption and decryption, and picks the top-k locally.

Ids handed out by :meth:`EncryptedDatabase.search` are slot positions.  A
delete moves the last record into the freed slot, so slots are not stable;
the server also keeps a monotone external id per record for stable handles.
"""

from __future__ import annotations

import heapq
import threading
import time
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from .encoding import decode_scores, encode_key, encode_query, encode_query_small, normalize
from .errors import CapacityError, ParameterError, ProtocolError
from .lattice import (
    MlweCiphertext,
    Randomness,
    SecretKey,
    SwitchKeySet,
    decrypt_aes,
    decrypt_rlwe,
    encrypt_aes,
    encrypt_mlwe_batch,
    gen_pk,
    gen_sk,
    record_slot_bytes,
)
from .pir import PirMatrix, PirQuery, pir_answer, pir_decode, pir_query
from .ring import RingParams
from .secure_ip import CachedBlock, cache, decompose, decompose_plain, score, score_plain

DEFAULT_K = 5
DEFAULT_SLOT_BYTES = 2048


def top_k(scores, k: int) -> list[int]:
    """Indices of the k largest scores, descending; ties go to the smaller index.

    Uses a bounded heap, O(n log k).
    """
    if k <= 0:
        return []
    scores = np.asarray(scores, dtype=np.float64)
    vals = scores.tolist()
    return heapq.nlargest(k, range(len(vals)), key=lambda i: (vals[i], -i))


@dataclass(frozen=True)
class SearchResult:
    ids: list
    scores: list


class RWLock:
    """Many readers or one writer; writers wait for readers to drain."""

    def __init__(self):
        self._cond = threading.Condition()
        self._readers = 0
        self._writer = False

    @contextmanager
    def read(self):
        with self._cond:
            while self._writer:
                self._cond.wait()
            self._readers += 1
        try:
            yield
        finally:
            with self._cond:
                self._readers -= 1
                self._cond.notify_all()

    @contextmanager
    def write(self):
        with self._cond:
            while self._writer or self._readers:
                self._cond.wait()
            self._writer = True
        try:
            yield
        finally:
            with self._cond:
                self._writer = False
                self._cond.notify_all()


# ---------------------------------------------------------------------------
# server state


class EncryptedDatabase:
    """Server-side state: keys, values, per-block caches and the PIR grid."""

    def __init__(self, keys: SwitchKeySet, slot_bytes: int = DEFAULT_SLOT_BYTES):
        self.keys = keys
        self.params: RingParams = keys.params
        self.slot_bytes = slot_bytes
        self.key: list[MlweCiphertext] = []
        self.value: list[bytes] = []
        self.cache: list[CachedBlock] = []
        self.ext_ids: list[int] = []
        self.next_ext = 0
        self.pir = PirMatrix.build(self.params, slot_bytes)
        self.generation = 0
        self.recache_total = 0
        self.last_recached: list[int] = []
        self._lock = RWLock()

    @property
    def epoch(self) -> int:
        return self.keys.epoch

    @property
    def num(self) -> int:
        return len(self.key)

    @property
    def blocks(self) -> int:
        return -(-self.num // self.params.d)

    def _check_epoch(self, epoch):
        if epoch is not None and epoch != self.epoch:
            raise ProtocolError(f"request for key epoch {epoch}, database is at epoch {self.epoch}")

    # -- mutations ---------------------------------------------------------

    def _recache(self, blocks) -> None:
        d = self.params.d
        cache_list = list(self.cache[: self.blocks])
        while len(cache_list) < self.blocks:
            cache_list.append(None)
        done = []
        for b in sorted(set(blocks)):
            if b >= self.blocks:
                continue
            cache_list[b] = cache(self.key[b * d : (b + 1) * d], self.keys, b)
            done.append(b)
        self.cache = cache_list
        self.recache_total += len(done)
        self.last_recached = done
        self.generation += 1

    def append(self, key_cts, blobs, epoch: int | None = None) -> list[int]:
        """Append records; re-caches only the blocks that received them."""
        key_cts, blobs = list(key_cts), [bytes(b) for b in blobs]
        if len(key_cts) != len(blobs):
            raise ParameterError("keys and values differ in length")
        for b in blobs:
            if len(b) != self.slot_bytes:
                raise CapacityError(f"value blob is {len(b)} bytes, slot size is {self.slot_bytes}")
        with self._lock.write():
            self._check_epoch(epoch)
            if not key_cts:
                self.last_recached = []
                return []
            start = self.num
            self.key.extend(key_cts)
            self.value.extend(blobs)
            ext = list(range(self.next_ext, self.next_ext + len(blobs)))
            self.next_ext += len(blobs)
            self.ext_ids.extend(ext)
            self.pir.ensure_capacity(self.num)
            for i, b in enumerate(blobs):
                self.pir.set(start + i, b)
            d = self.params.d
            self._recache(range(start // d, (self.num - 1) // d + 1))
            return ext

    def delete(self, slots, epoch: int | None = None) -> None:
        """Delete slot ids; each freed slot takes the current last record."""
        slots = sorted({int(s) for s in slots}, reverse=True)
        with self._lock.write():
            self._check_epoch(epoch)
            for s in slots:
                if not 0 <= s < self.num:
                    raise ParameterError(f"slot {s} out of range [0, {self.num})")
            d = self.params.d
            touched = set()
            for s in slots:
                last = self.num - 1
                if s != last:
                    self.key[s] = self.key[last]
                    self.value[s] = self.value[last]
                    self.ext_ids[s] = self.ext_ids[last]
                    self.pir.set(s, self.value[s])
                self.key.pop()
                self.value.pop()
                self.ext_ids.pop()
                self.pir.clear(last)
                touched.add(s // d)
                touched.add(last // d)
            self._recache(touched)

    def slots_for(self, ext_ids) -> list[int]:
        where = {e: i for i, e in enumerate(self.ext_ids)}
        try:
            return [where[int(e)] for e in ext_ids]
        except KeyError as exc:
            raise ParameterError(f"unknown record id {exc.args[0]}") from None

    # -- reads -------------------------------------------------------------

    def snapshot(self):
        """Consistent (caches, num, generation) view for a reader."""
        with self._lock.read():
            return tuple(self.cache), self.num, self.generation

    def search(self, query, epoch: int | None = None, plain: bool = False, timings: dict | None = None):
        """Score every block; returns (score ciphertexts, occupancies).

        ``query`` is an MLWE ciphertext, or with ``plain=True`` a degree-d
        plaintext polynomial.
        """
        with self._lock.read():
            self._check_epoch(epoch)
            blocks = tuple(self.cache)
            t0 = time.perf_counter()
            if plain:
                q_plain = np.asarray(query, dtype=np.int64)
                if q_plain.shape != (self.params.d,):
                    raise ParameterError(f"plaintext query must have {self.params.d} coefficients")
                q_parts = decompose_plain(q_plain, self.params)
            else:
                if not isinstance(query, MlweCiphertext):
                    raise ProtocolError("ciphertext search needs an MLWE query")
                dq = decompose(query, self.keys)
            t1 = time.perf_counter()
            if plain:
                out = [score_plain(q_plain, b, self.params, q_parts) for b in blocks]
            else:
                out = [score(dq, b, self.keys) for b in blocks]
            t2 = time.perf_counter()
            if timings is not None:
                timings["decompose"] = t1 - t0
                timings["score"] = t2 - t1
            return out, [b.occupancy for b in blocks]

    def pir_answer(self, query: PirQuery, epoch: int | None = None) -> np.ndarray:
        with self._lock.read():
            self._check_epoch(query.epoch if epoch is None else epoch)
            return pir_answer(self.pir, query, self.keys)

    def grid(self) -> tuple[int, int]:
        with self._lock.read():
            return self.pir.rows, self.pir.cols

    def status(self) -> dict:
        with self._lock.read():
            return {
                "num": self.num,
                "epoch": self.epoch,
                "blocks": self.blocks,
                "rows": self.pir.rows,
                "cols": self.pir.cols,
                "slot_bytes": self.slot_bytes,
                "generation": self.generation,
            }


# ---------------------------------------------------------------------------
# client


class Client:
    """Holds the secret key; everything that touches plaintext happens here."""

    def __init__(self, sk: SecretKey, rng: Randomness | None = None, epoch: int = 0):
        self.sk = sk
        self.params = sk.params
        self.rng = rng or Randomness()
        self.epoch = epoch

    @classmethod
    def generate(cls, params: RingParams, seed=None, epoch: int = 0) -> tuple["Client", SwitchKeySet]:
        """Fresh keys: the client keeps the secret key, the server gets the returned key set."""
        rng = Randomness(seed)
        sk = gen_sk(params, rng)
        return cls(sk, rng, epoch), gen_pk(sk, rng, epoch)

    # -- insert ------------------------------------------------------------

    def encrypt_keys(self, vectors) -> list[MlweCiphertext]:
        v = normalize(np.atleast_2d(np.asarray(vectors, dtype=np.float64)))
        if v.shape[0] == 0:
            return []
        return encrypt_mlwe_batch(encode_key(v, self.params), self.sk, self.rng)

    def encrypt_values(self, payloads, slot_bytes: int) -> list[bytes]:
        return [encrypt_aes(p, self.sk, self.rng, slot_bytes) for p in payloads]

    def encrypt_records(self, vectors, payloads, slot_bytes: int):
        keys = self.encrypt_keys(vectors)
        if payloads is None:
            payloads = [b""] * len(keys)
        if len(payloads) != len(keys):
            raise ParameterError("vectors and payloads differ in length")
        return keys, self.encrypt_values(payloads, slot_bytes)

    # -- search ------------------------------------------------------------

    def query(self, vector) -> MlweCiphertext:
        v = normalize(np.asarray(vector, dtype=np.float64))
        return encrypt_mlwe_batch(encode_query_small(v, self.params)[None], self.sk, self.rng)[0]

    def plain_query(self, vector) -> np.ndarray:
        return encode_query(normalize(np.asarray(vector, dtype=np.float64)), self.params)

    def decrypt_scores(self, cts, occupancies) -> np.ndarray:
        """Concatenate decrypted block scores, dropping padded slots."""
        if not cts:
            return np.zeros(0)
        polys = decrypt_rlwe(np.stack(cts), self.sk)
        vals = decode_scores(polys, self.params)
        return np.concatenate([vals[i, :occ] for i, occ in enumerate(occupancies)])

    def select(self, cts, occupancies, k: int = DEFAULT_K) -> SearchResult:
        scores = self.decrypt_scores(cts, occupancies)
        ids = top_k(scores, k)
        return SearchResult(ids, [float(scores[i]) for i in ids])

    # -- retrieval ---------------------------------------------------------

    def pir_query(self, slot: int, rows: int, cols: int) -> PirQuery:
        return pir_query(slot, rows, cols, self.sk, self.rng, self.epoch)

    def pir_decode(self, answer, slot_bytes: int) -> bytes:
        return decrypt_aes(pir_decode(answer, self.sk, slot_bytes), self.sk)


# ---------------------------------------------------------------------------
# in-process pairing of the two sides


class VectorDatabase:
    """Client and server in one process, wired together without a network."""

    def __init__(self, params: RingParams, seed=None, slot_bytes: int = DEFAULT_SLOT_BYTES, keys=None):
        if keys is None:
            self.client, pk = Client.generate(params, seed)
        else:
            self.client, pk = keys
        self.server = EncryptedDatabase(pk, slot_bytes)

    @classmethod
    def for_payload(cls, params: RingParams, payload_bytes: int, seed=None) -> "VectorDatabase":
        return cls(params, seed, record_slot_bytes(payload_bytes))

    @property
    def params(self) -> RingParams:
        return self.server.params

    @property
    def num(self) -> int:
        return self.server.num

    def insert(self, vectors, payloads=None) -> list[int]:
        keys, blobs = self.client.encrypt_records(vectors, payloads, self.server.slot_bytes)
        return self.server.append(keys, blobs, self.client.epoch)

    def delete(self, slots) -> None:
        self.server.delete(slots, self.client.epoch)

    def scores(self, vector, plain: bool = False) -> np.ndarray:
        q = self.client.plain_query(vector) if plain else self.client.query(vector)
        cts, occ = self.server.search(q, self.client.epoch, plain)
        return self.client.decrypt_scores(cts, occ)

    def search(self, vector, k: int = DEFAULT_K, plain: bool = False) -> SearchResult:
        q = self.client.plain_query(vector) if plain else self.client.query(vector)
        cts, occ = self.server.search(q, self.client.epoch, plain)
        return self.client.select(cts, occ, k)

    def retrieve(self, slots) -> list[bytes]:
        rows, cols = self.server.grid()
        out = []
        for s in slots:
            if not 0 <= int(s) < self.num:
                raise ParameterError(f"slot {s} out of range [0, {self.num})")
            ans = self.server.pir_answer(self.client.pir_query(int(s), rows, cols))
            out.append(self.client.pir_decode(ans, self.server.slot_bytes))
        return out

    def rebuild(self) -> "VectorDatabase":
        """Fresh database with the same keys and the same logical contents, built in one append."""
        fresh = VectorDatabase(self.params, keys=(self.client, self.server.keys), slot_bytes=self.server.slot_bytes)
        fresh.server.append(self.server.key, self.server.value)
        return fresh
