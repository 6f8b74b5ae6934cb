"""Run a server in a background thread and drive it over TCP.

    python3 demos/client_server.py

The same flow from a shell:

    hevdb serve --data /tmp/hevdb --params small &
    hevdb init --keyfile /tmp/hevdb.key --slot-bytes 128
    hevdb insert --keyfile /tmp/hevdb.key --file records.jsonl
    hevdb search --keyfile /tmp/hevdb.key --query 0.1,0.9,0.2
"""

import tempfile
from pathlib import Path

import numpy as np

from hevdb import normalize
from hevdb.service import Session, latency_breakdown, serve

workdir = Path(tempfile.mkdtemp(prefix="hevdb-demo-"))
server = serve("127.0.0.1:0", workdir / "data", preset_name="small")
server.start_background()
address = server.server_address[:2]
keyfile = workdir / "key"

rng = np.random.default_rng(7)
vectors = normalize(rng.standard_normal((300, 32)))
payloads = [f"row {i}".encode() for i in range(300)]

with Session.connect(address, keyfile) as s:
    print("server:", s.status())
    s.init(keyfile=keyfile, slot_bytes=64)
    s.insert(vectors, payloads)
    res = s.search(vectors[17], k=3)
    print("top-3:", res.ids, np.round(res.scores, 4))
    print("payloads:", s.get(res.ids))
    lb = latency_breakdown(s, vectors[17])
    print("latency (ms):", {k: round(v * 1e3, 2) for k, v in lb.as_dict().items() if isinstance(v, float)})

# a new session only needs the key file; the server restarts from its snapshot
server.shutdown()
server.server_close()
server = serve("127.0.0.1:0", workdir / "data", preset_name="small")
server.start_background()
with Session.connect(server.server_address[:2], keyfile) as s:
    print("after restart:", s.status()["num"], "records; top-1 =", s.search(vectors[17], k=1).ids)
server.shutdown()
server.server_close()
