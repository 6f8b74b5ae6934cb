"""Homomorphically encrypted vector database.

Similarity search over encrypted embeddings with packed inner products,
cheap updates, and PIR-based record retrieval.
"""

from .encoding import decode_scores, encode_key, encode_query, normalize
from .errors import CapacityError, HevdbError, IntegrityError, ParameterError, ProtocolError
from .lattice import (
    MlweCiphertext,
    Randomness,
    SecretKey,
    SwitchKeySet,
    decrypt_aes,
    encrypt_aes,
    encrypt_mlwe,
    gen_pk,
    gen_sk,
)
from .ring import PRESETS, PolyModQ, RingParams, params_for_dim, preset
from .secure_ip import ButterflyPlan, CachedBlock, DecomposedQuery, cache, decompose, score, score_plain
from .store import Client, EncryptedDatabase, SearchResult, VectorDatabase, top_k

__version__ = "0.1.0"

__all__ = [
    "ButterflyPlan",
    "CachedBlock",
    "CapacityError",
    "Client",
    "DecomposedQuery",
    "EncryptedDatabase",
    "HevdbError",
    "IntegrityError",
    "MlweCiphertext",
    "PRESETS",
    "ParameterError",
    "PolyModQ",
    "ProtocolError",
    "Randomness",
    "RingParams",
    "SearchResult",
    "SecretKey",
    "SwitchKeySet",
    "VectorDatabase",
    "cache",
    "decode_scores",
    "decompose",
    "decrypt_aes",
    "encode_key",
    "encode_query",
    "encrypt_aes",
    "encrypt_mlwe",
    "gen_pk",
    "gen_sk",
    "normalize",
    "params_for_dim",
    "preset",
    "score",
    "score_plain",
    "top_k",
]
