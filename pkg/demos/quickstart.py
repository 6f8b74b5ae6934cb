"""In-process walkthrough: encrypt a small corpus, search it, fetch a record.

    python3 demos/quickstart.py
"""

import numpy as np

from hevdb import VectorDatabase, normalize, preset
from hevdb.bench import exact_search

rng = np.random.default_rng(0)
docs = [f"document {i}: {rng.bytes(6).hex()}".encode() for i in range(500)]
vectors = normalize(rng.standard_normal((len(docs), 64)))

# the small preset keeps key generation and caching under a second
db = VectorDatabase(preset("small"), seed=1, slot_bytes=128)
db.insert(vectors, docs)
print(f"{db.num} records in {db.server.blocks} encrypted blocks")

query = normalize(vectors[42] + 0.05 * rng.standard_normal(64))
hit = db.search(query, k=5)
print("encrypted query top-5:", hit.ids)
print("plaintext oracle top-5:", exact_search(vectors, query, 5))
print("scores:", np.round(hit.scores, 4))

# the payload comes back through PIR, so the server never learns which slot
print("record:", db.retrieve([hit.ids[0]])[0].decode())

# deleting moves the last record into the freed slot and recaches at most two blocks
db.delete([hit.ids[0]])
print("after delete, blocks recached:", db.server.last_recached)
print("new top-5:", db.search(query, k=5).ids)
