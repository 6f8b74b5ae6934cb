"""``hevdb`` command line.

Exit codes: 0 ok, 2 usage or bad argument, 3 protocol or connection
failure, 4 integrity failure (bad checksum, AEAD or PIR decode).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import bench
from .errors import CapacityError, IntegrityError, ParameterError, ProtocolError
from .lattice import record_slot_bytes
from .ring import PRESETS, params_for_dim, preset
from .service import Session, serve
from .store import DEFAULT_K, DEFAULT_SLOT_BYTES, VectorDatabase

EXIT_OK, EXIT_USAGE, EXIT_PROTOCOL, EXIT_INTEGRITY = 0, 2, 3, 4
DEFAULT_SERVER = "127.0.0.1:7878"
DEFAULT_KEYFILE = "~/.hevdb/key"


def _keyfile(args) -> Path:
    # the environment variable wins over --keyfile
    path = os.environ.get("HEVDB_KEYFILE") or args.keyfile or DEFAULT_KEYFILE
    return Path(path).expanduser()


def _ids(text: str) -> list[int]:
    try:
        return [int(x) for x in text.replace(" ", "").split(",") if x]
    except ValueError:
        raise ParameterError(f"bad id list {text!r}") from None


def _read_matrix(path: str) -> np.ndarray:
    p = Path(path)
    if p.suffix == ".npy":
        return np.atleast_2d(np.load(p))
    if p.suffix == ".fvecs":
        return bench.read_fvecs(p)
    if p.suffix in (".txt", ".csv", ".tsv"):
        return np.atleast_2d(np.loadtxt(p, delimiter="," if p.suffix == ".csv" else None))
    return bench.read_raw(p)


def _read_records(path: str, payloads: str | None):
    """JSON lines of {"vector": [...], "payload": "..."} or a vector file plus a payload file."""
    if path.endswith(".jsonl"):
        vecs, pays = [], []
        for line in Path(path).read_text().splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            vecs.append(rec["vector"])
            pays.append(str(rec.get("payload", "")).encode())
        return np.asarray(vecs, dtype=np.float64), pays
    vecs = _read_matrix(path)
    if payloads is None:
        return vecs, [b""] * len(vecs)
    pays = [line.encode() for line in Path(payloads).read_text().splitlines()]
    if len(pays) != len(vecs):
        raise ParameterError(f"{len(vecs)} vectors but {len(pays)} payload lines")
    return vecs, pays


def _query(text: str) -> np.ndarray:
    if Path(text).exists():
        return _read_matrix(text)[0]
    try:
        return np.array([float(x) for x in text.split(",")])
    except ValueError:
        raise ParameterError(f"query is neither a file nor a comma-separated vector: {text!r}") from None


def _print(obj):
    print(json.dumps(obj, indent=2, default=float))


def _session(args) -> Session:
    server = args.server or os.environ.get("HEVDB_SERVER") or DEFAULT_SERVER
    return Session.connect(server, _keyfile(args))


# ---------------------------------------------------------------------------
# commands


def cmd_serve(args):
    srv = serve(args.listen, args.data, preset_name=args.params)
    host, port = srv.server_address[:2]
    logging.getLogger(__name__).info("listening on %s:%d, data in %s", host, port, args.data)
    try:
        srv.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        srv.server_close()
    return EXIT_OK


def cmd_init(args):
    path = _keyfile(args)
    path.parent.mkdir(parents=True, exist_ok=True)
    with _session(args) as s:
        _print(s.init(args.params, path, args.slot_bytes))
    return EXIT_OK


def cmd_insert(args):
    vecs, pays = _read_records(args.file, args.payloads)
    with _session(args) as s:
        _print(s.insert(vecs, pays))
    return EXIT_OK


def cmd_delete(args):
    with _session(args) as s:
        _print(s.delete(_ids(args.ids), external=args.external))
    return EXIT_OK


def cmd_search(args):
    with _session(args) as s:
        res = s.search(_query(args.query), args.k, plain=args.plain_query)
        _print({"ids": res.ids, "scores": res.scores, "latency": s.last_latency.as_dict()})
    return EXIT_OK


def cmd_get(args):
    with _session(args) as s:
        out = []
        for i, v in zip(_ids(args.ids), s.get(_ids(args.ids))):
            try:
                out.append({"id": i, "payload": v.decode()})
            except UnicodeDecodeError:
                out.append({"id": i, "payload_hex": v.hex()})
        _print(out)
    return EXIT_OK


def cmd_bench(args):
    ds = bench.load_dataset(args.dataset)
    params = preset(args.params, r=params_for_dim(ds.dim, args.params).r) if args.params else params_for_dim(ds.dim)
    if args.what == "accuracy":
        report = bench.evaluate_accuracy(ds, args.mode, params=params, limit=args.limit).as_dict()
    elif args.what == "latency":
        sizes = [bench.parse_count(x) for x in args.sizes.split(",") if x]
        rows = bench.evaluate_latency(sizes, args.threads, params, ds.dim, plain=(args.mode == "plain"))
        report = {"rows": [r.as_dict() for r in rows]}
    else:
        db = VectorDatabase(params, seed=0, slot_bytes=record_slot_bytes(args.payload_bytes))
        db.insert(ds.vectors, [bytes(args.payload_bytes)] * len(ds))
        report = bench.evaluate_storage(db, ds.dim, args.payload_bytes)
    report = {"bench": args.what, "dataset": args.dataset, **report}
    if args.out:
        bench.write_report(report, args.out)
    _print(report)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hevdb", description="Homomorphically encrypted vector database")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def client(sp):
        sp.add_argument("--server", help=f"host:port (default {DEFAULT_SERVER}, or $HEVDB_SERVER)")
        sp.add_argument("--keyfile", help=f"secret key file (default {DEFAULT_KEYFILE}; $HEVDB_KEYFILE wins)")
        return sp

    sp = sub.add_parser("serve", help="run the server")
    sp.add_argument("--listen", default=DEFAULT_SERVER)
    sp.add_argument("--data", required=True, help="directory for the database snapshot")
    sp.add_argument("--params", default="desk", choices=sorted(PRESETS))
    sp.set_defaults(func=cmd_serve)

    sp = client(sub.add_parser("init", help="generate keys and register them with the server"))
    sp.add_argument("--params", choices=sorted(PRESETS), help="default: the server's preset")
    sp.add_argument("--slot-bytes", type=int, default=DEFAULT_SLOT_BYTES, help="encrypted record size (power of two)")
    sp.set_defaults(func=cmd_init)

    sp = client(sub.add_parser("insert", help="insert vectors with payloads"))
    sp.add_argument("--file", required=True, help=".jsonl records, or a vector file (.fvecs/.npy/.txt/raw)")
    sp.add_argument("--payloads", help="text file with one payload per line")
    sp.set_defaults(func=cmd_insert)

    sp = client(sub.add_parser("delete", help="delete records by slot id"))
    sp.add_argument("--ids", required=True)
    sp.add_argument("--external", action="store_true", help="ids are the stable ids returned by insert")
    sp.set_defaults(func=cmd_delete)

    sp = client(sub.add_parser("search", help="top-k search"))
    sp.add_argument("--query", required=True, help="comma-separated vector or a vector file")
    sp.add_argument("--k", type=int, default=DEFAULT_K)
    sp.add_argument("--plain-query", action="store_true", help="send the query unencrypted")
    sp.set_defaults(func=cmd_search)

    sp = client(sub.add_parser("get", help="retrieve records by slot id through PIR"))
    sp.add_argument("--ids", required=True)
    sp.set_defaults(func=cmd_get)

    sp = sub.add_parser("bench", help="accuracy, latency and storage reports (in-process)")
    sp.add_argument("what", choices=["accuracy", "latency", "storage"])
    sp.add_argument("--dataset", default="synthetic:n=1k,dim=96,queries=100")
    sp.add_argument("--mode", choices=["plain", "cipher"], default="plain")
    sp.add_argument("--sizes", default="1k,10k")
    sp.add_argument("--threads", type=int, default=1)
    sp.add_argument("--params", choices=sorted(PRESETS))
    sp.add_argument("--limit", type=int, help="evaluate only the first N queries")
    sp.add_argument("--payload-bytes", type=int, default=1024)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose or args.command == "serve" else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ParameterError, CapacityError, FileNotFoundError) as exc:
        print(f"hevdb: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except IntegrityError as exc:
        print(f"hevdb: integrity failure: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    except (ProtocolError, ConnectionError, OSError, EOFError) as exc:
        print(f"hevdb: protocol error: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL


if __name__ == "__main__":
    sys.exit(main())
