"""Key-value embedding store: immutable generation files plus TCP serving.

Generation file layout, little-endian throughout:

  header  {magic "DERM", format_version u32, dim u32, count u64, day u32}
  records count * {kind u8, id u64, source u16, dim * f32}, sorted by key
  trailer CRC-64 of everything above

Vectors are downcast to f32 at publish; the file is immutable once written,
and a repeat publish for the same day claims the next generation suffix.

The wire protocol frames one request per message: u32 length, then
{kind u8, id u64, source u16}. Responses are {status u8, dim u32, payload}.
"""

from __future__ import annotations

import json
import re
import socket
import socketserver
import struct
import threading
import zlib
from dataclasses import dataclass

import numpy as np

from .data import KIND_CODES, KIND_NAMES
from .errors import (
    BindFailureError,
    CorruptGenerationError,
    DimInconsistentError,
    IoFailureError,
)
from .ioutil import crc64
from .lifecycle import (
    AggregatedStoreState,
    AggregationHeuristic,
    StoreEntry,
)

STORE_MAGIC = b"DERM"
STORE_VERSION = 1

HEADER = "<4sIIQI"
RECORD_HEAD = "<BQH"

STATUS_OK = 0
STATUS_MISSING = 1
STATUS_BAD_REQUEST = 2

REQUEST_LEN = struct.calcsize(RECORD_HEAD)
MAX_FRAME = 4096


def source_code(tag: str) -> int:
    """Stable u16 code for a source-model tag."""
    return zlib.crc32(tag.encode("utf-8")) & 0xFFFF


@dataclass(frozen=True)
class StoreKey:
    kind: str
    entity_id: int
    source: str

    def packed(self) -> tuple[int, int, int]:
        return (KIND_CODES[self.kind], self.entity_id, source_code(self.source))


class StoreGeneration:
    """An immutable, checksum-verified set of served vectors."""

    def __init__(self, day: int, dim: int,
                 vectors: dict[tuple[int, int, int], np.ndarray]):
        self.day = day
        self.dim = dim
        self.vectors = vectors

    def __len__(self) -> int:
        return len(self.vectors)

    def lookup(self, key: StoreKey) -> np.ndarray | None:
        return self.vectors.get(key.packed())

    def lookup_packed(self, kind_code: int, entity_id: int,
                      source: int) -> np.ndarray | None:
        return self.vectors.get((kind_code, entity_id, source))


def generation_bytes(day: int, dim: int,
                     vectors: dict[tuple[int, int, int], np.ndarray]) -> bytes:
    parts = [struct.pack(HEADER, STORE_MAGIC, STORE_VERSION, dim,
                         len(vectors), day)]
    for key in sorted(vectors):
        parts.append(struct.pack(RECORD_HEAD, *key))
        parts.append(np.ascontiguousarray(vectors[key], dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<Q", crc64(body))


def parse_generation(blob: bytes, what: str = "generation") -> StoreGeneration:
    head = struct.calcsize(HEADER)
    if len(blob) < head + 8:
        raise CorruptGenerationError(f"{what} is truncated")
    body, (stored,) = blob[:-8], struct.unpack("<Q", blob[-8:])
    if crc64(body) != stored:
        raise CorruptGenerationError(f"{what} fails its checksum")
    magic, version, dim, count, day = struct.unpack_from(HEADER, body)
    if magic != STORE_MAGIC:
        raise CorruptGenerationError(f"{what} has wrong magic {magic!r}")
    if version != STORE_VERSION:
        raise CorruptGenerationError(f"{what} has unsupported version {version}")
    record = struct.calcsize(RECORD_HEAD) + 4 * dim
    if len(body) != head + count * record:
        raise CorruptGenerationError(
            f"{what} declares {count} records of dim {dim} but its size disagrees"
        )
    vectors = {}
    off = head
    for _ in range(count):
        kind_code, entity_id, src = struct.unpack_from(RECORD_HEAD, body, off)
        off += struct.calcsize(RECORD_HEAD)
        vec = np.frombuffer(body, dtype="<f4", count=dim, offset=off).copy()
        off += 4 * dim
        if kind_code not in KIND_NAMES:
            raise CorruptGenerationError(f"{what} has unknown kind {kind_code}")
        vectors[(kind_code, entity_id, src)] = vec
    return StoreGeneration(day, dim, vectors)


def load_generation(path) -> StoreGeneration:
    try:
        blob = open(path, "rb").read()
    except OSError as e:
        raise IoFailureError(f"cannot read generation {path}: {e}") from e
    return parse_generation(blob, f"generation {path}")


def generation_name(source: str, day: int, attempt: int) -> str:
    return f"{source}-day{day:03d}-g{attempt}.kv"


_GEN_RE = re.compile(r"(?P<source>.+)-day(?P<day>\d{3})-g(?P<attempt>\d+)\.kv$")


def list_generations(store_dir, source: str | None = None):
    """Sorted (day, attempt, path) triples found under store_dir."""
    if not store_dir.is_dir():
        return []
    out = []
    for p in store_dir.iterdir():
        m = _GEN_RE.fullmatch(p.name)
        if m and (source is None or m.group("source") == source):
            out.append((int(m.group("day")), int(m.group("attempt")), p))
    return sorted(out, key=lambda t: (t[0], t[1]))


def _pack_keyed(mapping: dict, source: str) -> tuple[int, dict]:
    """f32-downcast vectors keyed for the file format; enforces one dim."""
    src = source_code(source)
    vectors = {(KIND_CODES[kind], entity_id, src): np.asarray(v, dtype="<f4")
               for (kind, entity_id), v in mapping.items()}
    dims = {len(v) for v in vectors.values()}
    if len(dims) > 1:
        raise DimInconsistentError(f"mixed vector dims in state: {sorted(dims)}")
    return (dims.pop() if dims else 0), vectors


def state_payload(state: AggregatedStoreState, day: int, source: str) -> bytes:
    """The exact generation-file bytes a publish of this state would write."""
    dim, vectors = _pack_keyed(
        {k: e.vector for k, e in state.entries.items()}, source)
    return generation_bytes(day, dim, vectors)


def publish(state: AggregatedStoreState, day: int, source: str, store_dir):
    """Write the state's vectors as a new immutable generation file.

    Returns (path, StoreGeneration as loaded back from disk).
    """
    blob = state_payload(state, day, source)
    store_dir.mkdir(parents=True, exist_ok=True)
    existing = [a for d, a, _ in list_generations(store_dir, source) if d == day]
    attempt = max(existing, default=0) + 1
    path = store_dir / generation_name(source, day, attempt)
    try:
        with open(path, "wb") as f:
            f.write(blob)
    except OSError as e:
        raise IoFailureError(f"cannot write generation {path}: {e}") from e
    return path, load_generation(path)


# ---------------------------------------------------------------------------
# aggregated-state persistence (shares the generation file format)

STATE_VECTORS = "agg.kv"
STATE_BUFFER = "prev.kv"
STATE_META = "state.json"


def save_state(state: AggregatedStoreState, dir_path, source: str) -> None:
    dir_path.mkdir(parents=True, exist_ok=True)
    try:
        (dir_path / STATE_VECTORS).write_bytes(
            state_payload(state, state.day, source))
        if state.heuristic.kind == "ap":
            dim, buf = _pack_keyed(state.prev_daily, source)
            (dir_path / STATE_BUFFER).write_bytes(
                generation_bytes(state.day, dim, buf))
        meta = {
            "day": state.day,
            "heuristic": {"kind": state.heuristic.kind, "w": state.heuristic.w},
            "last_active": {
                f"{kind}:{entity_id}": e.last_active_day
                for (kind, entity_id), e in sorted(state.entries.items())
            },
            "source": source,
        }
        (dir_path / STATE_META).write_text(
            json.dumps(meta, sort_keys=True, indent=2) + "\n")
    except OSError as e:
        raise IoFailureError(f"cannot write state under {dir_path}: {e}") from e


def load_state(dir_path) -> AggregatedStoreState:
    try:
        meta = json.loads((dir_path / STATE_META).read_text())
    except OSError as e:
        raise IoFailureError(f"cannot read state under {dir_path}: {e}") from e
    heuristic = AggregationHeuristic(meta["heuristic"]["kind"],
                                     meta["heuristic"]["w"])
    heuristic.validate()
    gen = load_generation(dir_path / STATE_VECTORS)
    entries = {}
    for (kind_code, entity_id, _), vec in gen.vectors.items():
        key = (KIND_NAMES[kind_code], entity_id)
        last = meta["last_active"][f"{key[0]}:{entity_id}"]
        entries[key] = StoreEntry(vec.astype(np.float64), last)
    prev_daily = {}
    if heuristic.kind == "ap":
        buf = load_generation(dir_path / STATE_BUFFER)
        prev_daily = {
            (KIND_NAMES[kc], i): vec.astype(np.float64)
            for (kc, i, _), vec in buf.vectors.items()
        }
    return AggregatedStoreState(meta["day"], heuristic, entries, prev_daily)


# ---------------------------------------------------------------------------
# serving


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        gen: StoreGeneration = self.server.generation
        while True:
            frame = self.rfile.read(4)
            if len(frame) < 4:
                return
            (length,) = struct.unpack("<I", frame)
            if length > MAX_FRAME:
                self._respond(STATUS_BAD_REQUEST, b"")
                return
            payload = self.rfile.read(length)
            if len(payload) < length:
                return
            if length != REQUEST_LEN:
                self._respond(STATUS_BAD_REQUEST, b"")
                continue
            kind_code, entity_id, src = struct.unpack(RECORD_HEAD, payload)
            if kind_code not in KIND_NAMES:
                self._respond(STATUS_BAD_REQUEST, b"")
                continue
            vec = gen.lookup_packed(kind_code, entity_id, src)
            if vec is None:
                self._respond(STATUS_MISSING, b"")
            else:
                self._respond(STATUS_OK, vec.tobytes())

    def _respond(self, status: int, payload: bytes) -> None:
        dim = len(payload) // 4
        self.wfile.write(struct.pack("<BI", status, dim) + payload)
        self.wfile.flush()


class _Server(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True


class ServingHandle:
    def __init__(self, server: _Server, thread: threading.Thread):
        self.server = server
        self.thread = thread

    @property
    def address(self) -> tuple[str, int]:
        return self.server.server_address

    def close(self) -> None:
        self.server.shutdown()
        self.server.server_close()
        self.thread.join(timeout=5)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def serve(generation: StoreGeneration, bind_address=("127.0.0.1", 0)) -> ServingHandle:
    """Serve a loaded generation read-only over TCP; returns a live handle."""
    try:
        server = _Server(bind_address, _Handler)
    except OSError as e:
        raise BindFailureError(f"cannot bind {bind_address}: {e}") from e
    server.generation = generation
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return ServingHandle(server, thread)


class EmbeddingClient:
    """Blocking client; one request per call over a persistent connection."""

    def __init__(self, host: str, port: int, timeout: float = 10.0):
        self.sock = socket.create_connection((host, port), timeout=timeout)

    def request(self, key: StoreKey) -> tuple[int, np.ndarray | None]:
        kind_code, entity_id, src = key.packed()
        return self.request_packed(struct.pack(RECORD_HEAD, kind_code,
                                               entity_id, src))

    def request_packed(self, payload: bytes) -> tuple[int, np.ndarray | None]:
        self.sock.sendall(struct.pack("<I", len(payload)) + payload)
        head = self._read_exact(5)
        status, dim = struct.unpack("<BI", head)
        vec = None
        if dim:
            vec = np.frombuffer(self._read_exact(4 * dim), dtype="<f4").copy()
        return status, vec

    def _read_exact(self, n: int) -> bytes:
        chunks = []
        got = 0
        while got < n:
            chunk = self.sock.recv(n - got)
            if not chunk:
                raise IoFailureError("server closed the connection mid-response")
            chunks.append(chunk)
            got += len(chunk)
        return b"".join(chunks)

    def close(self) -> None:
        self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
