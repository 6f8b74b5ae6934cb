import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hevdb.encoding import decode_scores, encode_key, encode_query, normalize, score_error_budget
from hevdb.errors import CapacityError
from hevdb.ring import RingParams, embed_array, schoolbook_multiply
from hevdb.secure_ip import cache_plain


def p16(**kw):
    return RingParams(**{"d": 8, "r": 4, "delta": 16.0, **kw})


def unit(rng, n, dim):
    return normalize(rng.standard_normal((n, dim)))


def test_zero_vectors_encode_to_zero():
    p = p16()
    assert not encode_query(np.zeros(4), p).any()
    assert not encode_key(np.zeros(4), p).any()


def test_first_coordinate_is_constant_term():
    p = p16()
    assert encode_query([1, 0, 0, 0], p).tolist() == [16] + [0] * 7
    assert encode_key([1, 0, 0, 0], p).tolist() == [16, 0, 0, 0]


def test_negative_exponent_layout():
    # X^-2 = -X^6 at d=8, s=2
    p = p16()
    expect = [0] * 8
    expect[6] = p.q - 16
    assert encode_query([0, 1, 0, 0], p).tolist() == expect


def test_dimension_overflow():
    with pytest.raises(CapacityError):
        encode_key(np.ones(5), p16())


def test_rounding_half_even():
    p = p16()
    assert encode_key([0.5 / 16, 1.5 / 16, 2.5 / 16, 0], p).tolist()[:3] == [0, 2, 2]


def test_decode_scores():
    p = p16()
    assert not decode_scores(np.zeros(8, dtype=np.int64), p).any()
    poly = np.zeros(8, dtype=np.int64)
    poly[3] = 256
    assert decode_scores(poly, p).tolist() == [0, 0, 0, 1.0, 0, 0, 0, 0]
    poly[3] = p.q - 256
    assert decode_scores(poly, p)[3] == -1.0


def test_normalize_keeps_zero_rows():
    v = normalize(np.array([[3.0, 4.0], [0.0, 0.0]]))
    assert np.allclose(v, [[0.6, 0.8], [0, 0]])


@given(st.integers(0, 2**32 - 1))
def test_constant_term_is_inner_product(seed):
    p = RingParams(d=16, r=4, delta=2.0**20)
    rng = np.random.default_rng(seed)
    u, v = unit(rng, 2, 4)
    prod = schoolbook_multiply(encode_query(u, p), embed_array(encode_key(v, p), p.d), p.q)
    got = decode_scores(prod, p)[0]
    assert abs(got - u @ v) <= 2 * p.r / p.delta


@given(st.integers(0, 2**32 - 1))
def test_roundtrip_precision(seed):
    p = RingParams(d=16, r=4, delta=2.0**20)
    v = np.random.default_rng(seed).uniform(-1, 1, 4)
    back = decode_scores(encode_key(v, p), p) * p.delta
    assert np.abs(back - v).max() <= 1 / (2 * p.delta)


# -- trace identities on plaintexts -------------------------------------------


def trace(poly, params):
    rq = params.ring_d
    out = np.zeros_like(poly)
    for i in range(params.r):
        out = np.mod(out + rq.automorphism(poly, 2 * i + 1), params.q)
    return out


@pytest.mark.parametrize("d,r", [(8, 4), (16, 4), (16, 16), (64, 8)])
def test_trace_identity(d, r, rng):
    p = RingParams(d=d, r=r, delta=2.0**20)
    for _ in range(50):
        u, v = unit(rng, 2, r)
        prod = schoolbook_multiply(encode_query(u, p), embed_array(encode_key(v, p), d), p.q)
        expect = np.zeros(d, dtype=np.int64)
        expect[0] = r * int(prod[0]) % p.q
        assert np.array_equal(trace(prod, p), expect)


@pytest.mark.parametrize("d,r", [(8, 4), (16, 4), (16, 8), (16, 16)])
def test_batched_identity(d, r, rng):
    # sum_i phi_i(q) * sum_j phi_i(k_j) X^j has r * sigma_j at X^j
    p = RingParams(d=d, r=r, delta=2.0**20)
    rq = p.ring_d
    for _ in range(20):
        keys = encode_key(unit(rng, d, r), p)
        query = encode_query(unit(rng, 1, r)[0], p)
        packed = cache_plain(keys, p)
        acc = np.zeros(d, dtype=np.int64)
        for i in range(r):
            acc = np.mod(acc + schoolbook_multiply(rq.automorphism(query, 2 * i + 1), packed[i], p.q), p.q)
        sigma = [schoolbook_multiply(query, embed_array(k, d), p.q)[0] for k in keys]
        assert acc.tolist() == [r * int(x) % p.q for x in sigma]


def test_score_error_budget(rng):
    p = RingParams(d=64, r=16, delta=2.0**12)
    dim = 12
    keys, q = unit(rng, 64, dim), unit(rng, 1, dim)[0]
    for k in keys:
        prod = schoolbook_multiply(encode_query(q, p), embed_array(encode_key(k, p), p.d), p.q)
        assert abs(decode_scores(prod, p)[0] - q @ k) <= score_error_budget(p, dim)
