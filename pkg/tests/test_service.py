import io
import os
import stat
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from wire import RecordingProxy, needles_for_vector, of_tag, pir_query_header

from hevdb.encoding import normalize
from hevdb.errors import IntegrityError, ParameterError, ProtocolError
from hevdb.lattice import Randomness, encrypt_mlwe_batch
from hevdb.service import (
    HevdbServer,
    ServerState,
    Session,
    Tag,
    decode_delete,
    decode_insert,
    decode_pir_answer,
    decode_pir_query,
    decode_scores_msg,
    decode_search,
    encode_delete,
    encode_frame,
    encode_insert,
    encode_pir_answer,
    encode_pir_query,
    encode_scores,
    encode_search,
    latency_breakdown,
    load_keyfile,
    load_snapshot,
    load_snapshot_bytes,
    parse_address,
    read_frame,
    save_keyfile,
    save_snapshot,
    snapshot_bytes,
)
from hevdb.store import VectorDatabase


def unit(rng, n, dim):
    return normalize(rng.standard_normal((n, dim)))


@pytest.fixture
def server(tmp_path):
    srv = HevdbServer(("127.0.0.1", 0), ServerState(tmp_path / "data", preset_name="small"))
    srv.start_background()
    yield srv
    srv.shutdown()
    srv.server_close()


def connect(srv, **kw):
    addr = srv if isinstance(srv, tuple) else srv.server_address[:2]
    return Session(addr, **kw)


# -- frames -------------------------------------------------------------------


@given(st.sampled_from(list(Tag)), st.binary(max_size=2000))
def test_frame_roundtrip(tag, payload):
    frame = encode_frame(tag, payload)
    assert read_frame(io.BytesIO(frame)) == (1, tag, payload)
    (length,) = struct.unpack(">I", frame[:4])
    assert length == len(frame) - 4


def test_frame_errors():
    frame = bytearray(encode_frame(Tag.STATUS, b"abc"))
    frame[-1] ^= 0xFF
    with pytest.raises(IntegrityError):
        read_frame(io.BytesIO(bytes(frame)))
    with pytest.raises(ProtocolError):
        read_frame(io.BytesIO(encode_frame(Tag.STATUS, version=2)))
    with pytest.raises(ProtocolError):
        read_frame(io.BytesIO(encode_frame(77)))
    with pytest.raises(EOFError):
        read_frame(io.BytesIO(encode_frame(Tag.STATUS)[:5]))


def test_parse_address():
    assert parse_address("127.0.0.1:7878") == ("127.0.0.1", 7878)
    assert parse_address(":9") == ("127.0.0.1", 9)
    with pytest.raises(ParameterError):
        parse_address("nohost")


# -- message codecs -----------------------------------------------------------


@pytest.fixture(scope="module")
def vdb():
    from hevdb.ring import preset

    db = VectorDatabase(preset("small"), seed=5, slot_bytes=64)
    db.insert(unit(np.random.default_rng(0), 10, 16), [b"p%d" % i for i in range(10)])
    return db


def test_insert_codec(vdb):
    p = vdb.params
    keys, blobs = vdb.server.key[:3], vdb.server.value[:3]
    epoch, k2, b2 = decode_insert(encode_insert(4, keys, blobs, p), p)
    assert epoch == 4 and k2 == keys and b2 == blobs
    with pytest.raises(ProtocolError):
        decode_insert(encode_insert(4, keys, blobs, p)[:-1], p)
    with pytest.raises(ProtocolError):
        decode_insert(encode_insert(4, keys, blobs, p) + b"x", p)


def test_delete_codec():
    assert decode_delete(encode_delete(2, [5, 1, 9], external=True)) == (2, True, [5, 1, 9])


def test_search_codec(vdb):
    p = vdb.params
    q = vdb.client.query(np.ones(16))
    assert decode_search(encode_search(1, q, p), p)[1] == q
    plain = vdb.client.plain_query(np.ones(16))
    epoch, back, is_plain = decode_search(encode_search(1, plain, p), p)
    assert is_plain and np.array_equal(back, plain)
    with pytest.raises(ProtocolError):
        decode_search(struct.pack(">QB", 0, 7), p)


def test_scores_codec(vdb):
    p = vdb.params
    cts, occ = vdb.server.search(vdb.client.query(np.ones(16)))
    back, occ2, t = decode_scores_msg(encode_scores(cts, occ, {"score": 0.5}, p), p)
    assert occ2 == occ and all(np.array_equal(a, b) for a, b in zip(cts, back))
    assert t == {"decompose": 0.0, "score": 0.5}


def test_pir_codecs(vdb):
    p = vdb.params
    rows, cols = vdb.server.grid()
    q = vdb.client.pir_query(3, rows, cols)
    back = decode_pir_query(encode_pir_query(q, p), p)
    assert list(back.ciphertexts()) == list(q.ciphertexts())
    ans = vdb.server.pir_answer(q)
    assert np.array_equal(decode_pir_answer(encode_pir_answer(ans, p), p), ans)


def test_coefficient_range_checked(vdb):
    p = vdb.params
    bad = struct.pack(">H", 1) + b"\xff" * ((2 * p.d * p.log_q + 7) // 8)
    with pytest.raises(ProtocolError):
        decode_pir_answer(bad, p)


# -- snapshots and key files --------------------------------------------------


def test_snapshot_roundtrip(vdb):
    data = snapshot_bytes(vdb.server)
    back = load_snapshot_bytes(data)
    assert snapshot_bytes(back) == data
    assert back.cache == vdb.server.cache
    assert back.key == vdb.server.key and back.value == vdb.server.value
    assert back.ext_ids == vdb.server.ext_ids


def test_snapshot_corruption(vdb):
    data = bytearray(snapshot_bytes(vdb.server))
    data[100] ^= 1
    with pytest.raises(IntegrityError):
        load_snapshot_bytes(bytes(data))
    with pytest.raises(IntegrityError):
        load_snapshot_bytes(b"HEVD")
    with pytest.raises(IntegrityError):
        load_snapshot_bytes(bytes(snapshot_bytes(vdb.server))[:-1])


def test_snapshot_atomic(tmp_path, vdb):
    path = tmp_path / "db.hevd"
    save_snapshot(vdb.server, path)
    save_snapshot(vdb.server, path)
    assert sorted(os.listdir(tmp_path)) == ["db.hevd"]
    assert load_snapshot(path).cache == vdb.server.cache


def test_keyfile(tmp_path, vdb):
    path = tmp_path / "key"
    save_keyfile(path, vdb.client.sk, 3)
    assert stat.S_IMODE(path.stat().st_mode) == 0o600
    sk, epoch = load_keyfile(path)
    assert epoch == 3 and sk.to_bytes() == vdb.client.sk.to_bytes()
    path.write_bytes(b"junk")
    with pytest.raises(ParameterError):
        load_keyfile(path)


# -- live server --------------------------------------------------------------


def test_status_roundtrip(server):
    with connect(server) as s:
        assert s.status()["initialized"] is False
        s.init(slot_bytes=64, seed=1)
        st_ = s.status()
        assert st_["num"] == 0 and st_["epoch"] == 0


def test_requires_init(server):
    with connect(server) as s:
        with pytest.raises(ProtocolError):
            s.request(Tag.INSERT, b"")
        with pytest.raises(ProtocolError):
            s.insert(np.eye(2, 8))


def test_bad_frames_keep_connection(server):
    with connect(server) as s:
        frame = bytearray(encode_frame(Tag.STATUS))
        frame[-1] ^= 1
        for raw in (bytes(frame), encode_frame(Tag.STATUS, version=9), encode_frame(42)):
            s.stream.write(raw)
            s.stream.flush()
            _, tag, payload = read_frame(s.stream)
            assert tag == Tag.ERROR
        assert s.status()["initialized"] is False
        with pytest.raises(ProtocolError):
            s.request(Tag.SCORE_RESP)


def test_session_roundtrip(server):
    rng = np.random.default_rng(3)
    vecs = unit(rng, 40, 16)
    with connect(server) as s:
        s.init(slot_bytes=64, seed=2)
        out = s.insert(vecs, [b"rec%d" % i for i in range(40)])
        assert out["ids"] == list(range(40)) and out["num"] == 40
        res = s.search(vecs[7], k=3)
        assert res.ids[0] == 7
        assert s.search(vecs[9], k=1, plain=True).ids == [9]
        assert s.get([7, 0]) == [b"rec7", b"rec0"]
        s.delete([0])
        assert s.get([0]) == [b"rec39"]
        s.delete([39], external=True)  # record 39 now sits in slot 0
        assert s.status()["num"] == 38
        assert s.get([0]) == [b"rec38"]
        with pytest.raises(ParameterError):
            s.get([38])
        with pytest.raises(ParameterError):
            s.delete([1000])


def test_epoch_advances(server):
    with connect(server) as s:
        s.init(slot_bytes=64, seed=1)
        old = s.client
        s.init(slot_bytes=64, seed=2)
        assert s.status()["epoch"] == 1
        q = old.query(np.ones(8))
        with pytest.raises(ProtocolError):
            s.request(Tag.SEARCH_Q, encode_search(old.epoch, q, old.params))


def test_restart_reloads_snapshot(tmp_path):
    data = tmp_path / "d"
    srv = HevdbServer(("127.0.0.1", 0), ServerState(data, preset_name="small"))
    srv.start_background()
    rng = np.random.default_rng(4)
    vecs = unit(rng, 30, 16)
    with connect(srv) as s:
        s.init(slot_bytes=64, seed=3)
        s.insert(vecs)
        client = s.client
        q = client.query(vecs[5])
        before = s.request(Tag.SEARCH_Q, encode_search(client.epoch, q, client.params))
    srv.shutdown()
    srv.server_close()
    srv = HevdbServer(("127.0.0.1", 0), ServerState(data, preset_name="small"))
    srv.start_background()
    try:
        with connect(srv, client=client) as s:
            after = s.request(Tag.SEARCH_Q, encode_search(client.epoch, q, client.params))
            assert s.status()["num"] == 30
    finally:
        srv.shutdown()
        srv.server_close()
    # identical score ciphertexts; only the server timing fields differ
    assert before[1][20:] == after[1][20:]


def test_session_with_keyfile(server, tmp_path):
    key = tmp_path / "k"
    with Session.connect(server.server_address[:2], key) as s:
        assert s.client is None
        s.init(keyfile=key, slot_bytes=64, seed=4)
        s.insert(np.eye(3, 8))
    with Session.connect(server.server_address[:2], key) as s:
        assert s.search(np.eye(8)[2], k=1).ids == [2]


def test_latency_breakdown(server):
    with connect(server) as s:
        s.init(slot_bytes=64, seed=6)
        s.insert(unit(np.random.default_rng(1), 20, 16))
        lb = latency_breakdown(s, np.ones(16))
        parts = lb.encrypt + lb.network + lb.decompose + lb.score + lb.decrypt_topk
        assert lb.blocks == 1
        assert abs(parts - lb.total) < 0.05 + 0.05 * lb.total


def test_wire_hygiene(server):
    proxy = RecordingProxy(server.server_address[:2])
    rng = np.random.default_rng(9)
    vecs = unit(rng, 20, 16)
    secret_payload = b"PLAINTEXT-PAYLOAD-MARKER"
    try:
        with connect(proxy.address) as s:
            s.init(slot_bytes=64, seed=7)
            s.insert(vecs, [secret_payload] * 20)
            s.search(vecs[3])
            s.get([5])
            s.get([11])
            sk = s.client.sk
        frames = proxy.frames("to_server") + proxy.frames("to_client")
    finally:
        proxy.close()
    blob = b"".join(p for _, p in frames)
    forbidden = [secret_payload, sk.aes_key, sk.to_bytes()[-sk.params.d :]]
    forbidden += needles_for_vector(vecs[3]) + needles_for_vector(vecs[0])
    for needle in forbidden:
        assert needle not in blob
    pir = of_tag(frames, Tag.PIR_Q)
    assert len(pir) == 2
    # same schema fields and size for both slots: the index lives only inside ciphertexts
    assert pir_query_header(pir[0]) == pir_query_header(pir[1])
    assert len(pir[0]) == len(pir[1])


def test_bad_checksum_then_next_request(server):
    with connect(server) as s:
        s.init(slot_bytes=64, seed=8)
        raw = bytearray(encode_frame(Tag.STATUS))
        raw[6] ^= 0x10
        s.stream.write(bytes(raw))
        s.stream.flush()
        assert read_frame(s.stream)[1] == Tag.ERROR
        assert s.status()["initialized"]


def test_wrong_length_ciphertext_rejected(server):
    with connect(server) as s:
        s.init(slot_bytes=64, seed=9)
        c = s.client
        ct = encrypt_mlwe_batch(np.zeros((1, c.params.r), dtype=np.int64), c.sk, Randomness(1))[0]
        body = struct.pack(">QB", c.epoch, 0) + ct.to_bytes(c.params)[:-3]
        with pytest.raises(ProtocolError):
            s.request(Tag.SEARCH_Q, body)
        assert s.status()["num"] == 0
