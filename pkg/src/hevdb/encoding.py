"""Fixed-point encoding of real vectors into ring polynomials.

A key vector is stored in the small ring R_{q,r}; a query is laid out with
negative exponents so that the constant term of ``query * embed(key)`` is
``delta**2 * <query, key>``.  Rounding is half-to-even (``np.rint``).
"""

from __future__ import annotations

import numpy as np

from .errors import CapacityError
from .ring import RingParams, centered, embed_array


def normalize(vectors: np.ndarray) -> np.ndarray:
    """L2-normalise rows; zero rows stay zero."""
    v = np.asarray(vectors, dtype=np.float64)
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    return np.divide(v, norms, out=np.zeros_like(v), where=norms > 0)


def _fixed_point(v, params: RingParams) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] > params.r:
        raise CapacityError(f"vector dimension {v.shape[-1]} exceeds slot count r={params.r}")
    out = np.zeros(v.shape[:-1] + (params.r,), dtype=np.int64)
    out[..., : v.shape[-1]] = np.rint(v * params.delta).astype(np.int64)
    return out


def encode_key(v, params: RingParams) -> np.ndarray:
    """Small-ring key polynomial: coefficient ``round(delta*v[i])`` at X^i.

    Accepts a single vector or a 2-D batch; returns values in ``[0, q)``.
    """
    return np.mod(_fixed_point(v, params), params.q)


def encode_query_small(v, params: RingParams) -> np.ndarray:
    """Query in R_{q,r}: sum_i round(delta*v[i]) * Y^{-i} with Y^{-i} = -Y^{r-i}."""
    k = _fixed_point(v, params)
    out = np.zeros_like(k)
    out[..., 0] = k[..., 0]
    out[..., 1:] = -k[..., :0:-1]
    return np.mod(out, params.q)


def encode_query(v, params: RingParams) -> np.ndarray:
    """Degree-d query polynomial: coefficient ``-round(delta*v[i])`` at X^(d-s*i)."""
    return embed_array(encode_query_small(v, params), params.d)


def decode_scores(poly: np.ndarray, params: RingParams) -> np.ndarray:
    """Decrypted score polynomial -> real similarities ``centered(c) / delta**2``."""
    return centered(np.asarray(poly, dtype=np.int64), params.q).astype(np.float64) / params.delta**2


def score_error_budget(params: RingParams, dim: int | None = None) -> float:
    """Worst-case fixed-point error of a plaintext score for unit vectors."""
    dim = params.r if dim is None else dim
    return params.r / params.delta + params.r * dim / params.delta**2


# Ceiling on the decoded score error of an encrypted query, in units of
# 1/delta (1/16 at the default delta = 2**22).  Scores decoding further out
# than 1 + this budget count as decode failures.
SCORE_NOISE_BUDGET = 2**18


def cipher_error_budget(params: RingParams) -> float:
    return SCORE_NOISE_BUDGET / params.delta
