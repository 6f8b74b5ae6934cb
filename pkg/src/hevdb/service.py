"""Client/server boundary: wire frames, snapshots, the TCP server and a client session.

Frame layout (network byte order)::

    u32 length | u8 version | u8 tag | payload | u32 crc32(version, tag, payload)

``length`` counts everything after itself.  A frame with a bad checksum,
unknown version or unknown tag gets an ERROR reply and the connection stays
open.  Transport encryption is left to the deployment: every sensitive field
is already HE or AES ciphertext.
"""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import os
import socket
import socketserver
import struct
import tempfile
import threading
import time
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import CapacityError, HevdbError, IntegrityError, ParameterError, ProtocolError
from .lattice import MlweCiphertext, Randomness, SecretKey, SwitchKeySet
from .pir import PirMatrix, PirQuery
from .ring import RingParams, pack_bits, packed_size, preset, unpack_bits
from .secure_ip import CachedBlock
from .store import DEFAULT_K, DEFAULT_SLOT_BYTES, Client, EncryptedDatabase, SearchResult, top_k

log = logging.getLogger(__name__)

VERSION = 1
MAX_FRAME = 1 << 31
SNAPSHOT_MAGIC = b"HEVD"
SNAPSHOT_VERSION = 1
KEYFILE_MAGIC = b"HEVK"


class Tag(enum.IntEnum):
    INIT_PK = 1
    INSERT = 2
    DELETE = 3
    SEARCH_Q = 4
    SCORE_RESP = 5
    PIR_Q = 6
    PIR_RESP = 7
    STATUS = 8
    ERROR = 9


class ErrorCode(enum.IntEnum):
    PROTOCOL = 1
    INTEGRITY = 2
    PARAMETER = 3
    INTERNAL = 4


# ---------------------------------------------------------------------------
# framing


def encode_frame(tag: int, payload: bytes = b"", version: int = VERSION) -> bytes:
    body = struct.pack(">BB", version, int(tag)) + bytes(payload)
    return struct.pack(">I", len(body) + 4) + body + struct.pack(">I", zlib.crc32(body))


def _read_exact(stream, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = stream.read(n - len(buf))
        if not chunk:
            raise EOFError("connection closed")
        buf += chunk
    return bytes(buf)


def read_frame(stream) -> tuple[int, int, bytes]:
    """Read one frame; returns (version, tag, payload).

    The whole frame is consumed before any validation error is raised, so the
    stream stays aligned on the next frame.
    """
    (length,) = struct.unpack(">I", _read_exact(stream, 4))
    if length < 6 or length > MAX_FRAME:
        raise EOFError(f"unusable frame length {length}")
    data = _read_exact(stream, length)
    body, (crc,) = data[:-4], struct.unpack(">I", data[-4:])
    if zlib.crc32(body) != crc:
        raise IntegrityError("frame checksum mismatch")
    version, tag = body[0], body[1]
    if version != VERSION:
        raise ProtocolError(f"unsupported protocol version {version}")
    if tag not in Tag._value2member_map_:
        raise ProtocolError(f"unknown message tag {tag}")
    return version, tag, body[2:]


def error_payload(exc: BaseException) -> bytes:
    if isinstance(exc, IntegrityError):
        code = ErrorCode.INTEGRITY
    elif isinstance(exc, ProtocolError):
        code = ErrorCode.PROTOCOL
    elif isinstance(exc, (ParameterError, CapacityError)):
        code = ErrorCode.PARAMETER
    else:
        code = ErrorCode.INTERNAL
    return struct.pack(">B", code) + str(exc).encode()


def raise_error(payload: bytes):
    code, msg = payload[0], payload[1:].decode(errors="replace")
    cls = {ErrorCode.INTEGRITY: IntegrityError, ErrorCode.PROTOCOL: ProtocolError, ErrorCode.PARAMETER: ParameterError}
    raise cls.get(code, HevdbError)(msg)


# ---------------------------------------------------------------------------
# message bodies


class Reader:
    def __init__(self, data: bytes):
        self.data, self.off = data, 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.data):
            raise ProtocolError("truncated message")
        out = self.data[self.off : self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def done(self):
        if self.off != len(self.data):
            raise ProtocolError("trailing bytes in message")


def pack_poly_q(values: np.ndarray, params: RingParams) -> bytes:
    return pack_bits(np.asarray(values), params.log_q)


def unpack_poly_q(r: Reader, count: int, params: RingParams) -> np.ndarray:
    v = unpack_bits(r.take(packed_size(count, params.log_q)), params.log_q, count)
    if v.max(initial=0) >= params.q:
        raise ProtocolError("coefficient outside [0, q)")
    return v


def encode_insert(epoch: int, keys, blobs, params: RingParams) -> bytes:
    out = [struct.pack(">QI", epoch, len(keys))]
    for k, b in zip(keys, blobs):
        out.append(k.to_bytes(params))
        out.append(struct.pack(">I", len(b)) + b)
    return b"".join(out)


def decode_insert(payload: bytes, params: RingParams):
    r = Reader(payload)
    epoch, n = r.unpack(">QI")
    size = MlweCiphertext.size(params)
    keys, blobs = [], []
    for _ in range(n):
        keys.append(MlweCiphertext.from_bytes(r.take(size), params))
        (ln,) = r.unpack(">I")
        blobs.append(r.take(ln))
    r.done()
    return epoch, keys, blobs


def encode_delete(epoch: int, ids, external: bool = False) -> bytes:
    ids = list(ids)
    return struct.pack(">QBI", epoch, int(external), len(ids)) + struct.pack(f">{len(ids)}Q", *ids)


def decode_delete(payload: bytes):
    r = Reader(payload)
    epoch, external, n = r.unpack(">QBI")
    ids = list(r.unpack(f">{n}Q"))
    r.done()
    return epoch, bool(external), ids


def encode_search(epoch: int, query, params: RingParams) -> bytes:
    if isinstance(query, MlweCiphertext):
        return struct.pack(">QB", epoch, 0) + query.to_bytes(params)
    return struct.pack(">QB", epoch, 1) + pack_poly_q(query, params)


def decode_search(payload: bytes, params: RingParams):
    r = Reader(payload)
    epoch, mode = r.unpack(">QB")
    if mode == 0:
        query = MlweCiphertext.from_bytes(r.take(MlweCiphertext.size(params)), params)
    elif mode == 1:
        query = unpack_poly_q(r, params.d, params)
    else:
        raise ProtocolError(f"unknown search mode {mode}")
    r.done()
    return epoch, query, mode == 1


def encode_scores(cts, occ, timings: dict, params: RingParams) -> bytes:
    out = [struct.pack(">ddI", timings.get("decompose", 0.0), timings.get("score", 0.0), len(cts))]
    for ct, o in zip(cts, occ):
        out.append(struct.pack(">I", o) + pack_poly_q(ct, params))
    return b"".join(out)


def decode_scores_msg(payload: bytes, params: RingParams):
    r = Reader(payload)
    t_dec, t_score, n = r.unpack(">ddI")
    cts, occ = [], []
    for _ in range(n):
        (o,) = r.unpack(">I")
        occ.append(o)
        cts.append(unpack_poly_q(r, 2 * params.d, params).reshape(2, params.d))
    r.done()
    return cts, occ, {"decompose": t_dec, "score": t_score}


def encode_pir_query(q: PirQuery, params: RingParams) -> bytes:
    out = [struct.pack(">QHBH", q.epoch, len(q.row), len(q.col), len(q.col[0]) if q.col else 0)]
    out.extend(ct.to_bytes(params) for ct in q.ciphertexts())
    return b"".join(out)


def decode_pir_query(payload: bytes, params: RingParams) -> PirQuery:
    r = Reader(payload)
    epoch, n_row, n_lvl, n_col = r.unpack(">QHBH")
    size = MlweCiphertext.size(params)
    take = lambda: MlweCiphertext.from_bytes(r.take(size), params)  # noqa: E731
    row = tuple(take() for _ in range(n_row))
    col = tuple(tuple(take() for _ in range(n_col)) for _ in range(n_lvl))
    r.done()
    return PirQuery(row, col, epoch)


def encode_pir_answer(ans: np.ndarray, params: RingParams) -> bytes:
    return struct.pack(">H", ans.shape[0]) + pack_poly_q(ans, params)


def decode_pir_answer(payload: bytes, params: RingParams) -> np.ndarray:
    r = Reader(payload)
    (chunks,) = r.unpack(">H")
    out = unpack_poly_q(r, chunks * 2 * params.d, params).reshape(chunks, 2, params.d)
    r.done()
    return out


# ---------------------------------------------------------------------------
# snapshots (little-endian)


def snapshot_bytes(db: EncryptedDatabase) -> bytes:
    params = db.params
    with db._lock.read():
        pk = db.keys.to_bytes()
        parts = [
            SNAPSHOT_MAGIC,
            struct.pack("<H", SNAPSHOT_VERSION),
            params.to_bytes(),
            struct.pack("<QQIQII", db.epoch, db.num, db.slot_bytes, db.next_ext, db.pir.rows, db.pir.cols),
            struct.pack("<Q", len(pk)),
            pk,
        ]
        parts.extend(k.to_bytes(params) for k in db.key)
        parts.extend(db.value)
        for blk in db.cache:
            parts.append(struct.pack("<I", blk.occupancy) + blk.to_bytes())
        parts.append(np.asarray(db.ext_ids, dtype="<u8").tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def load_snapshot_bytes(data: bytes) -> EncryptedDatabase:
    if len(data) < 38 or data[:4] != SNAPSHOT_MAGIC:
        raise IntegrityError("not a database snapshot")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise IntegrityError("snapshot checksum mismatch")
    r = Reader(body)
    r.take(4)
    (version,) = r.unpack("<H")
    if version != SNAPSHOT_VERSION:
        raise ProtocolError(f"unsupported snapshot version {version}")
    params = RingParams.from_bytes(r.take(RingParams.packed_size()))
    epoch, num, slot_bytes, next_ext, rows, cols = r.unpack("<QQIQII")
    (pk_len,) = r.unpack("<Q")
    keys = SwitchKeySet.from_bytes(r.take(pk_len))
    if keys.params != params or keys.epoch != epoch:
        raise IntegrityError("snapshot key set disagrees with its header")
    db = EncryptedDatabase(keys, slot_bytes)
    size = MlweCiphertext.size(params)
    db.key = [MlweCiphertext.from_bytes(r.take(size), params) for _ in range(num)]
    db.value = [r.take(slot_bytes) for _ in range(num)]
    blocks = -(-num // params.d)
    csize = CachedBlock.size(params)
    for b in range(blocks):
        (occ,) = r.unpack("<I")
        db.cache.append(CachedBlock.from_bytes(r.take(csize), params, b, occ, epoch))
    db.ext_ids = np.frombuffer(r.take(8 * num), dtype="<u8").astype(int).tolist()
    r.done()
    db.next_ext = next_ext
    db.pir = PirMatrix(params, slot_bytes, rows, cols)
    for i, v in enumerate(db.value):
        db.pir.set(i, v)
    return db


def save_snapshot(db: EncryptedDatabase, path) -> None:
    """Atomic write: temp file in the same directory, fsync, rename."""
    path = Path(path)
    data = snapshot_bytes(db)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_snapshot(path) -> EncryptedDatabase:
    return load_snapshot_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# key files (client side only)


def save_keyfile(path, sk: SecretKey, epoch: int) -> None:
    data = KEYFILE_MAGIC + struct.pack("<Q", epoch) + sk.to_bytes()
    path = Path(path)
    fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
    with os.fdopen(fd, "wb") as f:
        f.write(data)


def load_keyfile(path) -> tuple[SecretKey, int]:
    data = Path(path).read_bytes()
    if data[:4] != KEYFILE_MAGIC:
        raise ParameterError(f"{path} is not a key file")
    (epoch,) = struct.unpack_from("<Q", data, 4)
    return SecretKey.from_bytes(data[12:]), epoch


# ---------------------------------------------------------------------------
# server


class ServerState:
    """Dispatch table over one shared database; persists after every mutation."""

    SNAPSHOT_NAME = "db.hevd"

    def __init__(self, data_dir=None, autosave: bool = True, preset_name: str = "desk"):
        self.preset_name = preset_name
        self.data_dir = Path(data_dir) if data_dir else None
        self.autosave = autosave and self.data_dir is not None
        self.db: EncryptedDatabase | None = None
        self._init_lock = threading.Lock()
        if self.data_dir:
            self.data_dir.mkdir(parents=True, exist_ok=True)
            snap = self.data_dir / self.SNAPSHOT_NAME
            if snap.exists():
                self.db = load_snapshot(snap)
                log.info("loaded %d records at epoch %d", self.db.num, self.db.epoch)

    def save(self):
        if self.autosave and self.db is not None:
            save_snapshot(self.db, self.data_dir / self.SNAPSHOT_NAME)

    def _need_db(self) -> EncryptedDatabase:
        if self.db is None:
            raise ProtocolError("server has no keys yet; send INIT_PK first")
        return self.db

    def status(self) -> dict:
        if self.db is None:
            return {"num": 0, "epoch": None, "initialized": False, "preset": self.preset_name}
        return {**self.db.status(), "initialized": True, "preset": self.preset_name, "params": self.db.params.to_bytes().hex()}

    def handle(self, tag: int, payload: bytes) -> tuple[int, bytes]:
        if tag == Tag.STATUS:
            return Tag.STATUS, json.dumps(self.status()).encode()
        if tag == Tag.INIT_PK:
            r = Reader(payload)
            (slot_bytes,) = r.unpack(">I")
            keys = SwitchKeySet.from_bytes(payload[r.off :])
            with self._init_lock:
                if self.db is not None and keys.epoch <= self.db.epoch:
                    raise ProtocolError(f"new key epoch {keys.epoch} must exceed {self.db.epoch}")
                self.db = EncryptedDatabase(keys, slot_bytes)
                self.save()
            return Tag.STATUS, json.dumps(self.status()).encode()
        db = self._need_db()
        params = db.params
        if tag == Tag.INSERT:
            epoch, keys, blobs = decode_insert(payload, params)
            ids = db.append(keys, blobs, epoch)
            self.save()
            return Tag.STATUS, json.dumps({**self.status(), "ids": ids, "recached": db.last_recached}).encode()
        if tag == Tag.DELETE:
            epoch, external, ids = decode_delete(payload)
            db._check_epoch(epoch)
            slots = db.slots_for(ids) if external else ids
            db.delete(slots, epoch)
            self.save()
            return Tag.STATUS, json.dumps({**self.status(), "recached": db.last_recached}).encode()
        if tag == Tag.SEARCH_Q:
            epoch, query, plain = decode_search(payload, params)
            timings: dict = {}
            cts, occ = db.search(query, epoch, plain, timings)
            return Tag.SCORE_RESP, encode_scores(cts, occ, timings, params)
        if tag == Tag.PIR_Q:
            ans = db.pir_answer(decode_pir_query(payload, params))
            return Tag.PIR_RESP, encode_pir_answer(ans, params)
        raise ProtocolError(f"tag {Tag(tag).name} is not a request")


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        state: ServerState = self.server.state
        while True:
            try:
                _, tag, payload = read_frame(self.rfile)
                rtag, rpayload = state.handle(tag, payload)
            except EOFError:
                return
            except HevdbError as exc:
                rtag, rpayload = Tag.ERROR, error_payload(exc)
            except Exception as exc:  # keep the session alive on handler bugs
                log.exception("request failed")
                rtag, rpayload = Tag.ERROR, error_payload(exc)
            try:
                self.wfile.write(encode_frame(rtag, rpayload))
                self.wfile.flush()
            except OSError:
                return


class HevdbServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, address, state: ServerState):
        self.state = state
        super().__init__(address, _Handler)

    def start_background(self) -> threading.Thread:
        t = threading.Thread(target=self.serve_forever, daemon=True)
        t.start()
        return t


def parse_address(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    try:
        return host or "127.0.0.1", int(port)
    except ValueError:
        raise ParameterError(f"bad address {addr!r}; expected host:port") from None


def serve(listen: str, data_dir=None, autosave: bool = True, preset_name: str = "desk") -> HevdbServer:
    """Bind a server (not yet serving); call ``serve_forever`` or ``start_background``."""
    preset(preset_name)  # fail fast on an unknown name
    return HevdbServer(parse_address(listen), ServerState(data_dir, autosave, preset_name))


# ---------------------------------------------------------------------------
# client session


@dataclass
class LatencyBreakdown:
    """Seconds spent per stage of one search."""

    encrypt: float = 0.0
    network: float = 0.0
    decompose: float = 0.0
    score: float = 0.0
    decrypt_topk: float = 0.0
    total: float = 0.0
    blocks: int = 0
    extra: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return asdict(self)


class Session:
    """Synchronous client connection; the secret key never leaves this object."""

    def __init__(self, address, client: Client | None = None, timeout: float | None = None, record: bool = False):
        self.address = parse_address(address) if isinstance(address, str) else address
        self.sock = socket.create_connection(self.address, timeout=timeout)
        self.stream = self.sock.makefile("rwb")
        self.client = client
        self.sent: list[bytes] | None = [] if record else None  # outgoing frames, for wire audits
        self.last_latency: LatencyBreakdown | None = None

    @classmethod
    def connect(cls, address, keyfile=None, **kw) -> "Session":
        client = None
        if keyfile is not None and Path(keyfile).exists():
            sk, epoch = load_keyfile(keyfile)
            client = Client(sk, Randomness(), epoch)
        return cls(address, client, **kw)

    def close(self):
        try:
            self.stream.close()
        finally:
            self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def request(self, tag: int, payload: bytes = b"") -> tuple[int, bytes]:
        frame = encode_frame(tag, payload)
        if self.sent is not None:
            self.sent.append(frame)
        self.stream.write(frame)
        self.stream.flush()
        _, rtag, rpayload = read_frame(self.stream)
        if rtag == Tag.ERROR:
            raise_error(rpayload)
        return rtag, rpayload

    def _expect(self, tag, payload, want):
        rtag, rpayload = self.request(tag, payload)
        if rtag != want:
            raise ProtocolError(f"expected {Tag(want).name}, got {Tag(rtag).name}")
        return rpayload

    def _need_client(self) -> Client:
        if self.client is None:
            raise ProtocolError("no key file loaded; run init first")
        return self.client

    # -- operations --------------------------------------------------------

    def status(self) -> dict:
        return json.loads(self._expect(Tag.STATUS, b"", Tag.STATUS))

    def init(self, params: RingParams | str | None = None, keyfile=None, slot_bytes: int = DEFAULT_SLOT_BYTES, seed=None) -> dict:
        """Generate fresh keys at the next epoch and send the public part.

        Without ``params`` the server's advertised preset is used.
        """
        cur = self.status()
        if params is None:
            params = cur.get("preset", "desk")
        if isinstance(params, str):
            params = preset(params)
        epoch = 0 if cur.get("epoch") is None else cur["epoch"] + 1
        self.client, pk = Client.generate(params, seed, epoch)
        if keyfile is not None:
            save_keyfile(keyfile, self.client.sk, epoch)
        return json.loads(self._expect(Tag.INIT_PK, struct.pack(">I", slot_bytes) + pk.to_bytes(), Tag.STATUS))

    def insert(self, vectors, payloads=None) -> dict:
        c = self._need_client()
        slot = self.status()["slot_bytes"]
        keys, blobs = c.encrypt_records(vectors, payloads, slot)
        body = encode_insert(c.epoch, keys, blobs, c.params)
        return json.loads(self._expect(Tag.INSERT, body, Tag.STATUS))

    def delete(self, ids, external: bool = False) -> dict:
        c = self._need_client()
        return json.loads(self._expect(Tag.DELETE, encode_delete(c.epoch, ids, external), Tag.STATUS))

    def search(self, vector, k: int = DEFAULT_K, plain: bool = False) -> SearchResult:
        c = self._need_client()
        t0 = time.perf_counter()
        q = c.plain_query(vector) if plain else c.query(vector)
        body = encode_search(c.epoch, q, c.params)
        t1 = time.perf_counter()
        payload = self._expect(Tag.SEARCH_Q, body, Tag.SCORE_RESP)
        t2 = time.perf_counter()
        cts, occ, server = decode_scores_msg(payload, c.params)
        scores = c.decrypt_scores(cts, occ)
        ids = top_k(scores, k)
        t3 = time.perf_counter()
        server_time = server["decompose"] + server["score"]
        self.last_latency = LatencyBreakdown(
            encrypt=t1 - t0,
            network=max(t2 - t1 - server_time, 0.0),
            decompose=server["decompose"],
            score=server["score"],
            decrypt_topk=t3 - t2,
            total=t3 - t0,
            blocks=len(cts),
        )
        return SearchResult(ids, [float(scores[i]) for i in ids])

    def get(self, slots) -> list[bytes]:
        c = self._need_client()
        st = self.status()
        out = []
        for s in slots:
            if not 0 <= int(s) < st["num"]:
                raise ParameterError(f"slot {s} out of range [0, {st['num']})")
            q = c.pir_query(int(s), st["rows"], st["cols"])
            ans = decode_pir_answer(self._expect(Tag.PIR_Q, encode_pir_query(q, c.params), Tag.PIR_RESP), c.params)
            out.append(c.pir_decode(ans, st["slot_bytes"]))
        return out


def latency_breakdown(session: Session, vector, plain: bool = False, k: int = DEFAULT_K) -> LatencyBreakdown:
    """Run one search and return its per-stage timing record."""
    session.search(vector, k, plain)
    return session.last_latency
