"""Recording TCP proxy and frame scanning helpers for wire-hygiene checks."""

import io
import socket
import struct
import threading

import numpy as np

from hevdb.service import Tag, read_frame


class RecordingProxy:
    """Forwards one listening port to the server and keeps every byte seen."""

    def __init__(self, upstream):
        self.upstream = upstream
        self.sock = socket.create_server(("127.0.0.1", 0))
        self.address = self.sock.getsockname()
        self.to_server = bytearray()
        self.to_client = bytearray()
        self._lock = threading.Lock()
        threading.Thread(target=self._accept, daemon=True).start()

    def _accept(self):
        while True:
            try:
                conn, _ = self.sock.accept()
            except OSError:
                return
            up = socket.create_connection(self.upstream)
            threading.Thread(target=self._pump, args=(conn, up, self.to_server), daemon=True).start()
            threading.Thread(target=self._pump, args=(up, conn, self.to_client), daemon=True).start()

    def _pump(self, src, dst, log):
        try:
            while chunk := src.recv(65536):
                with self._lock:
                    log.extend(chunk)
                dst.sendall(chunk)
        except OSError:
            pass
        finally:
            for s in (src, dst):
                try:
                    s.shutdown(socket.SHUT_RDWR)
                except OSError:
                    pass

    def close(self):
        self.sock.close()

    def frames(self, direction="to_server"):
        data = bytes(getattr(self, direction))
        stream = io.BytesIO(data)
        out = []
        while stream.tell() < len(data):
            out.append(read_frame(stream)[1:])
        return out


def needles_for_vector(v):
    """Byte patterns a leaked plaintext vector would show up as."""
    v = np.asarray(v)
    out = []
    for dt in ("<f8", ">f8", "<f4", ">f4"):
        out.append(v.astype(dt).tobytes()[:16])
    return out


def pir_query_header(payload):
    """The only non-ciphertext fields of a PIR query: epoch and selector counts."""
    return struct.unpack_from(">QHBH", payload)


def of_tag(frames, tag):
    return [p for t, p in frames if t == Tag(tag)]
