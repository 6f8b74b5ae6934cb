"""Datasets, the plaintext oracle and evaluation metrics.

Vector files are either ``.fvecs`` (per row: little-endian int32 dimension,
then float32 values) or raw little-endian float32 with a ``<path>.shape``
sidecar holding ``rows cols``.
"""

from __future__ import annotations

import json
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .encoding import normalize
from .errors import ParameterError
from .lattice import MlweCiphertext
from .ring import RingParams, params_for_dim
from .secure_ip import CachedBlock
from .store import VectorDatabase, top_k


@dataclass
class VectorDataset:
    vectors: np.ndarray
    queries: np.ndarray
    ground_truth: np.ndarray | None = None

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        q = np.asarray(self.queries, dtype=np.float64)
        if v.ndim != 2:
            raise ParameterError("vectors must be a 2-D array")
        if q.size == 0:
            q = np.zeros((0, v.shape[1]))
        if q.ndim != 2 or q.shape[1] != v.shape[1]:
            raise ParameterError("queries must match the vector dimension")
        if not (np.all(np.isfinite(v)) and np.all(np.isfinite(q))):
            raise ParameterError("dataset contains non-finite values")
        self.vectors, self.queries = v, q
        if self.ground_truth is not None:
            gt = np.asarray(self.ground_truth, dtype=np.int64)
            if gt.size and (gt.min() < 0 or gt.max() >= len(v)):
                raise ParameterError("ground-truth id out of range")
            self.ground_truth = gt

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self):
        return len(self.vectors)


# ---------------------------------------------------------------------------
# file formats


def read_fvecs(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if not raw:
        return np.zeros((0, 0), dtype=np.float32)
    if len(raw) < 4:
        raise ParameterError("truncated fvecs header")
    dim = int(np.frombuffer(raw[:4], dtype="<i4")[0])
    if dim <= 0:
        raise ParameterError(f"bad fvecs dimension {dim}")
    row = 4 * (dim + 1)
    if len(raw) % row:
        raise ParameterError("fvecs file length is not a whole number of rows")
    arr = np.frombuffer(raw, dtype="<i4").reshape(-1, dim + 1)
    if np.any(arr[:, 0] != dim):
        raise ParameterError("fvecs rows disagree on dimension")
    return arr[:, 1:].view("<f4").copy()


def write_fvecs(path, vectors) -> None:
    v = np.asarray(vectors, dtype="<f4")
    head = np.full((v.shape[0], 1), v.shape[1], dtype="<i4")
    Path(path).write_bytes(np.hstack([head, v.view("<i4")]).tobytes())


def read_raw(path) -> np.ndarray:
    shape = Path(str(path) + ".shape")
    if not shape.exists():
        raise ParameterError(f"missing shape sidecar {shape}")
    rows, cols = (int(x) for x in shape.read_text().split())
    data = np.fromfile(path, dtype="<f4")
    if data.size != rows * cols:
        raise ParameterError(f"raw file holds {data.size} floats, sidecar says {rows}x{cols}")
    return data.reshape(rows, cols)


def write_raw(path, vectors) -> None:
    v = np.asarray(vectors, dtype="<f4")
    v.tofile(path)
    Path(str(path) + ".shape").write_text(f"{v.shape[0]} {v.shape[1]}\n")


def load_vectors(path, fmt: str = "auto", queries=None, normalized: bool = True) -> VectorDataset:
    """Load a vector file (and optionally a query file of the same format)."""

    def read(p):
        f = fmt
        if f == "auto":
            f = "fvecs" if str(p).endswith(".fvecs") else "raw"
        if f == "fvecs":
            return read_fvecs(p)
        if f == "raw":
            return read_raw(p)
        raise ParameterError(f"unknown vector format {fmt!r}")

    v = read(path).astype(np.float64)
    q = read(queries).astype(np.float64) if queries is not None else np.zeros((0, v.shape[1]))
    if v.size and q.size and v.shape[1] != q.shape[1]:
        raise ParameterError("query dimension differs from vector dimension")
    if normalized:
        v, q = normalize(v), normalize(q)
    return VectorDataset(v, q)


def synthetic(n: int, dim: int = 96, queries: int = 100, seed: int = 0) -> VectorDataset:
    """Unit-normalized Gaussian vectors; queries are drawn the same way."""
    rng = np.random.default_rng(seed)
    v = normalize(rng.standard_normal((n, dim)))
    q = normalize(rng.standard_normal((queries, dim)))
    return VectorDataset(v, q)


def parse_count(text: str) -> int:
    text = text.strip().lower()
    mult = {"k": 10**3, "m": 10**6}.get(text[-1:], 1)
    return int(float(text[:-1] if mult > 1 else text) * mult)


def load_dataset(source: str, queries=None) -> VectorDataset:
    """``synthetic:n=10k,dim=96,queries=100,seed=0`` or a file path."""
    if source.startswith("synthetic"):
        opts = dict(n="1k", dim="96", queries="100", seed="0")
        rest = source.partition(":")[2]
        for item in filter(None, rest.split(",")):
            key, _, val = item.partition("=")
            if key not in opts:
                raise ParameterError(f"unknown synthetic option {key!r}")
            opts[key] = val
        return synthetic(parse_count(opts["n"]), int(opts["dim"]), parse_count(opts["queries"]), int(opts["seed"]))
    return load_vectors(source, queries=queries)


# ---------------------------------------------------------------------------
# oracle and metrics


def exact_scores(vectors, query) -> np.ndarray:
    return np.asarray(vectors, dtype=np.float64) @ np.asarray(query, dtype=np.float64)


def exact_search(dataset, query, k: int) -> list[int]:
    vectors = dataset.vectors if isinstance(dataset, VectorDataset) else dataset
    return top_k(exact_scores(vectors, query), k)


@dataclass
class AccuracyReport:
    max_err: float
    mean_err: float
    std_err: float
    mrr_at_10: float
    recall1_at_1: float
    recall1_at_5: float
    queries: int = 0
    mode: str = "plain"

    def as_dict(self) -> dict:
        return asdict(self)


def rank_metrics(true_top1, found_lists) -> tuple[float, float, float]:
    """(MRR@10, 1-Recall@1, 1-Recall@5) in percent.

    ``found_lists[i]`` is the encrypted ranking for query i; the reciprocal
    rank counts only the first 10 positions.
    """
    n = len(true_top1)
    if n == 0:
        return 0.0, 0.0, 0.0
    mrr = r1 = r5 = 0.0
    for t, found in zip(true_top1, found_lists):
        found = list(found)[:10]
        if t in found:
            rank = found.index(t) + 1
            mrr += 1.0 / rank
            r1 += rank <= 1
            r5 += rank <= 5
    return 100 * mrr / n, 100 * r1 / n, 100 * r5 / n


def evaluate_accuracy(dataset: VectorDataset, mode: str = "plain", db: VectorDatabase | None = None,
                      params: RingParams | None = None, seed=0, scorer=None, limit: int | None = None) -> AccuracyReport:
    """Compare encrypted scores against the exact inner products.

    Errors are taken over each query's exact top-10.  ``scorer`` replaces the
    encrypted pipeline (a function query -> full score vector).
    """
    if mode not in ("plain", "cipher"):
        raise ParameterError("mode must be 'plain' or 'cipher'")
    if scorer is None:
        if db is None:
            db = VectorDatabase(params or params_for_dim(dataset.dim), seed=seed, slot_bytes=32)
            db.insert(dataset.vectors)
        scorer = lambda q: db.scores(q, plain=(mode == "plain"))  # noqa: E731
    queries = dataset.queries if limit is None else dataset.queries[:limit]
    errs, top1, found = [], [], []
    for q in queries:
        exact = exact_scores(dataset.vectors, q)
        got = np.asarray(scorer(q), dtype=np.float64)
        truth = top_k(exact, 10)
        errs.extend(np.abs(got[truth] - exact[truth]))
        top1.append(truth[0] if truth else -1)
        found.append(top_k(got, 10))
    errs = np.asarray(errs) if errs else np.zeros(1)
    mrr, r1, r5 = rank_metrics(top1, found)
    return AccuracyReport(float(errs.max()), float(errs.mean()), float(errs.std()), mrr, r1, r5, len(queries), mode)


# ---------------------------------------------------------------------------
# latency and storage


@dataclass
class LatencyRow:
    size: int
    blocks: int
    encrypt: float
    decompose: float
    score: float
    decrypt_topk: float
    total: float
    cache_build: float

    def as_dict(self) -> dict:
        return asdict(self)


def time_search(db: VectorDatabase, query, plain: bool = False, k: int = 5) -> dict:
    """One search with the per-stage split (in-process, so no network time)."""
    c, s = db.client, db.server
    t0 = time.perf_counter()
    q = c.plain_query(query) if plain else c.query(query)
    t1 = time.perf_counter()
    timings: dict = {}
    cts, occ = s.search(q, c.epoch, plain, timings)
    t2 = time.perf_counter()
    c.select(cts, occ, k)
    t3 = time.perf_counter()
    return {
        "encrypt": t1 - t0,
        "decompose": timings["decompose"],
        "score": timings["score"],
        "decrypt_topk": t3 - t2,
        "total": t3 - t0,
    }


def evaluate_latency(sizes, threads: int = 1, params: RingParams | None = None, dim: int = 96,
                     plain: bool = False, repeats: int = 3, seed: int = 0) -> list[LatencyRow]:
    """Median per-stage search time at each database size.

    One database grows through the sizes in increasing order.  With
    ``threads > 1`` that many searches run concurrently and the wall time per
    search is reported.
    """
    params = params or params_for_dim(dim)
    rng = np.random.default_rng(seed)
    rows: list[LatencyRow] = []
    sizes = sorted(int(s) for s in sizes)
    if not sizes:
        return rows
    db = VectorDatabase(params, seed=seed, slot_bytes=32)
    for size in sizes:
        if size == 0:
            rows.append(LatencyRow(0, 0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0))
            continue
        t = time.perf_counter()
        while db.num < size:
            step = min(size - db.num, 8 * params.d)
            db.insert(normalize(rng.standard_normal((step, dim))))
        build = time.perf_counter() - t
        qs = normalize(rng.standard_normal((repeats, dim)))
        if threads > 1:
            with ThreadPoolExecutor(threads) as pool:
                t = time.perf_counter()
                samples = list(pool.map(lambda q: time_search(db, q, plain), qs))
                wall = (time.perf_counter() - t) / repeats
            for s in samples:
                s["total"] = wall
        else:
            samples = [time_search(db, q, plain) for q in qs]
        med = {k: statistics.median(s[k] for s in samples) for k in samples[0]}
        rows.append(LatencyRow(size, db.server.blocks, med["encrypt"], med["decompose"], med["score"],
                               med["decrypt_topk"], med["total"], build))
    return rows


def evaluate_storage(db: VectorDatabase, dim: int, payload_bytes: int | None = None) -> dict:
    """Server bytes (keys, caches, values) against the raw floats and payloads."""
    s = db.server
    params = s.params
    n = s.num
    key_bytes = n * MlweCiphertext.size(params)
    cache_bytes = s.blocks * CachedBlock.size(params)
    value_bytes = n * s.slot_bytes
    raw_floats = n * dim * 4
    raw_payloads = n * (payload_bytes if payload_bytes is not None else 0)
    raw = raw_floats + raw_payloads
    total = key_bytes + cache_bytes + value_bytes
    return {
        "records": n,
        "key_bytes": key_bytes,
        "cache_bytes": cache_bytes,
        "value_bytes": value_bytes,
        "raw_float_bytes": raw_floats,
        "raw_payload_bytes": raw_payloads,
        "key_overhead": key_bytes / raw_floats if raw_floats else 0.0,
        "key_overhead_expected": params.log_q / 32,
        "total_overhead": total / raw if raw else 0.0,
    }


def write_report(report, path) -> None:
    Path(path).write_text(json.dumps(report, indent=2, default=float) + "\n")
