"""Visual localization service: lazy map loading, shard cache and the TCP front end."""

from __future__ import annotations

import logging
import socket
import threading
import time
from collections import OrderedDict
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .localizer import LocalizerParams, QueryFeatures, localize
from .mapbuilder import MapShard, ShardHandle, read_map
from .protocol import (
    MSG_REQUEST,
    MSG_RESPONSE,
    BadRequest,
    FailureStage,
    LocalizationRequest,
    LocalizationResponse,
    ProtocolError,
    Status,
    decode_request,
    decode_response,
    encode_frame,
    encode_request,
    encode_response,
    read_frame,
)
from .worldsim import CameraModel

log = logging.getLogger(__name__)


class ShardCache:
    """Thread-safe LRU of loaded shards with single-flight loading.

    Concurrent requests for a shard that is not resident trigger exactly one
    load; the other callers wait for it.
    """

    def __init__(self, handles: dict[int, ShardHandle], capacity: int = 256):
        if capacity < 1:
            raise ValueError("cache capacity must be >= 1")
        self.handles = handles
        self.capacity = capacity
        self._lru: OrderedDict[int, MapShard] = OrderedDict()
        self._inflight: dict[int, Future] = {}
        self._lock = threading.Lock()
        self.loads = 0
        self.evictions = 0
        self.hits = 0
        self.max_resident = 0
        self.trace: list[tuple[str, int]] = []

    def __len__(self) -> int:
        with self._lock:
            return len(self._lru)

    def resident_ids(self) -> list[int]:
        with self._lock:
            return list(self._lru)

    def get(self, image_id: int) -> MapShard:
        image_id = int(image_id)
        with self._lock:
            shard = self._lru.get(image_id)
            if shard is not None:
                self._lru.move_to_end(image_id)
                self.hits += 1
                return shard
            fut = self._inflight.get(image_id)
            owner = fut is None
            if owner:
                fut = Future()
                self._inflight[image_id] = fut
        if not owner:
            return fut.result()
        try:
            shard = self.handles[image_id].load()
        except BaseException as exc:
            with self._lock:
                del self._inflight[image_id]
            fut.set_exception(exc)
            raise
        with self._lock:
            self.loads += 1
            self.trace.append(("load", image_id))
            while len(self._lru) >= self.capacity:
                old, _ = self._lru.popitem(last=False)
                self.evictions += 1
                self.trace.append(("evict", old))
            self._lru[image_id] = shard
            self.max_resident = max(self.max_resident, len(self._lru))
            del self._inflight[image_id]
        fut.set_result(shard)
        return shard

    __call__ = get

    def resident_bytes(self) -> int:
        with self._lock:
            return sum(s.nbytes() for s in self._lru.values())


@dataclass
class ServiceStats:
    requests: int = 0
    ok: int = 0
    failed: int = 0
    latencies_ms: list[float] = field(default_factory=list)

    def record(self, ok: bool, ms: float, lock: threading.Lock) -> None:
        with lock:
            self.requests += 1
            self.ok += int(ok)
            self.failed += int(not ok)
            self.latencies_ms.append(ms)


class ServiceState:
    def __init__(self, index, handles, cam: CameraModel, cache_capacity: int = 256,
                 params: LocalizerParams = LocalizerParams(), workers: int = 1):
        self.index = index
        self.cam = cam
        self.params = params
        self.cache = ShardCache(handles, cache_capacity)
        self.stats = ServiceStats()
        self._stats_lock = threading.Lock()
        self._D: int | None = None
        # nested per-reference parallelism shares one bounded pool
        self.inner_pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None

    @property
    def D(self) -> int:
        if self._D is None:
            # descriptor width lives in the shard header; read 12 bytes, not the payload
            first = next(iter(self.cache.handles.values()))
            with open(first.path, "rb") as fh:
                self._D = int.from_bytes(fh.read(12)[6:8], "little")
        return self._D

    @property
    def G(self) -> int:
        return self.index.G

    def resident_index_bytes(self) -> int:
        return self.index.nbytes()

    def close(self) -> None:
        if self.inner_pool is not None:
            self.inner_pool.shutdown(wait=True)


def init_service(
    map_dir: str | Path,
    cam: CameraModel,
    cache_capacity: int = 256,
    params: LocalizerParams = LocalizerParams(),
    workers: int = 1,
) -> ServiceState:
    """Load only the global-descriptor index; shards stay on disk until retrieved."""
    index, handles = read_map(map_dir)
    return ServiceState(index, handles, cam, cache_capacity, params, workers)


def handle_request(state: ServiceState, req: LocalizationRequest) -> LocalizationResponse:
    t0 = time.perf_counter()
    resp = _handle(state, req)
    state.stats.record(resp.ok, 1e3 * (time.perf_counter() - t0), state._stats_lock)
    return resp


def _handle(state: ServiceState, req: LocalizationRequest) -> LocalizationResponse:
    bad = LocalizationResponse(req.request_id, Status.FAILED, failure_stage=FailureStage.BAD_REQUEST)
    kp = np.asarray(req.keypoints)
    desc = np.asarray(req.descriptors)
    glob = np.asarray(req.global_descriptor)
    K = len(kp)
    if K == 0 or kp.shape != (K, 2) or desc.shape != (K, state.D) or glob.shape != (state.G,):
        return bad
    if not (np.all(np.isfinite(kp)) and np.all(np.isfinite(desc)) and np.all(np.isfinite(glob))):
        return bad
    query = QueryFeatures(kp.astype(np.float64), desc.astype(np.float32), glob.astype(np.float32))
    try:
        res = localize(
            state.index,
            state.cache.get,
            query,
            state.cam,
            prior=req.prior,
            params=state.params,
            seed=req.request_id,
            executor=state.inner_pool,
        )
    except Exception:  # noqa: BLE001
        log.exception("request %d failed internally", req.request_id)
        return LocalizationResponse(req.request_id, Status.FAILED, failure_stage=FailureStage.INTERNAL)
    if not res.ok:
        return LocalizationResponse(
            req.request_id, Status.FAILED, failure_stage=FailureStage.from_name(res.stage)
        )
    return LocalizationResponse(req.request_id, Status.OK, res.pose, res.inlier_count, FailureStage.NONE)


def handle_payload(state: ServiceState, payload: bytes) -> LocalizationResponse:
    try:
        req = decode_request(payload, state.D, state.G)
    except BadRequest as exc:
        return LocalizationResponse(exc.request_id, Status.FAILED, failure_stage=FailureStage.BAD_REQUEST)
    return handle_request(state, req)


# ---------------------------------------------------------------------------
# TCP server


def parse_endpoint(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    return (host or "127.0.0.1"), int(port)


class VlsServer:
    """Accepts connections and answers each request frame exactly once.

    Requests on one connection are processed concurrently by the worker pool;
    responses are written in completion order.
    """

    def __init__(self, state: ServiceState, endpoint: str = "127.0.0.1:0", workers: int = 4):
        self.state = state
        host, port = parse_endpoint(endpoint)
        self._sock = socket.create_server((host, port), reuse_port=False)
        self._sock.settimeout(0.2)
        self.address = self._sock.getsockname()[:2]
        self._pool = ThreadPoolExecutor(max_workers=max(1, workers), thread_name_prefix="vls-worker")
        self._stop = threading.Event()
        self._conns: set[socket.socket] = set()
        self._conn_threads: list[threading.Thread] = []
        self._lock = threading.Lock()
        self._thread: threading.Thread | None = None
        self.transport_errors = 0

    @property
    def endpoint(self) -> str:
        return f"{self.address[0]}:{self.address[1]}"

    def start(self) -> "VlsServer":
        self._thread = threading.Thread(target=self.serve_forever, name="vls-accept", daemon=True)
        self._thread.start()
        return self

    def serve_forever(self) -> None:
        while not self._stop.is_set():
            try:
                conn, _ = self._sock.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            conn.settimeout(None)
            with self._lock:
                self._conns.add(conn)
            t = threading.Thread(target=self._serve_connection, args=(conn,), daemon=True)
            self._conn_threads.append(t)
            t.start()

    def _serve_connection(self, conn: socket.socket) -> None:
        write_lock = threading.Lock()
        pending: list[Future] = []

        def work(payload: bytes) -> None:
            # the reply is sent inside the task, so a finished future means a delivered response
            resp = handle_payload(self.state, payload)
            data = encode_frame(MSG_RESPONSE, encode_response(resp))
            try:
                with write_lock:
                    conn.sendall(data)
            except OSError as exc:
                log.warning("dropping response %d: %s", resp.request_id, exc)

        try:
            while True:
                frame = read_frame(conn)
                if frame is None:
                    break
                msg_type, payload = frame
                if msg_type != MSG_REQUEST:
                    raise ProtocolError(f"unexpected message type {msg_type}")
                pending.append(self._pool.submit(work, payload))
                pending = [f for f in pending if not f.done()]
        except (ProtocolError, OSError) as exc:
            with self._lock:
                self.transport_errors += 1
            log.warning("closing connection: %s", exc)
        finally:
            for fut in pending:
                try:
                    fut.result()
                except Exception:  # noqa: BLE001
                    pass
            with self._lock:
                self._conns.discard(conn)
            try:
                conn.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            conn.close()

    def shutdown(self) -> None:
        """Stop accepting, let in-flight requests finish, then close."""
        self._stop.set()
        if self._thread is not None:
            self._thread.join()
        self._sock.close()
        with self._lock:
            conns = list(self._conns)
        for c in conns:
            try:
                c.shutdown(socket.SHUT_RD)
            except OSError:
                pass
        for t in self._conn_threads:
            t.join(timeout=30)
        self._pool.shutdown(wait=True)

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.shutdown()


def serve(state: ServiceState, endpoint: str, workers: int = 4, stop: threading.Event | None = None) -> None:
    """Run until ``stop`` is set (or KeyboardInterrupt)."""
    server = VlsServer(state, endpoint, workers).start()
    log.info("serving on %s", server.endpoint)
    try:
        while not (stop.is_set() if stop else False):
            time.sleep(0.2)
    except KeyboardInterrupt:
        pass
    finally:
        server.shutdown()


class VlsClient:
    """Blocking client; ``submit`` returns a future so requests can be pipelined."""

    def __init__(self, endpoint: str, timeout: float = 30.0):
        host, port = parse_endpoint(endpoint)
        self._sock = socket.create_connection((host, port), timeout=timeout)
        self._sock.settimeout(None)
        self._pending: dict[int, Future] = {}
        self._lock = threading.Lock()
        self._closed = False
        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self._reader.start()

    def _read_loop(self) -> None:
        err: Exception = ConnectionError("connection closed")
        try:
            while True:
                frame = read_frame(self._sock)
                if frame is None:
                    break
                msg_type, payload = frame
                if msg_type != MSG_RESPONSE:
                    raise ProtocolError(f"unexpected message type {msg_type}")
                resp = decode_response(payload)
                with self._lock:
                    fut = self._pending.pop(resp.request_id, None)
                if fut is not None:
                    fut.set_result(resp)
        except (ProtocolError, OSError) as exc:
            err = exc
        with self._lock:
            pending, self._pending = self._pending, {}
        for fut in pending.values():
            fut.set_exception(err)

    def submit(self, req: LocalizationRequest) -> Future:
        fut: Future = Future()
        with self._lock:
            if req.request_id in self._pending:
                raise ValueError(f"request id {req.request_id} already in flight")
            self._pending[req.request_id] = fut
        self._sock.sendall(encode_frame(MSG_REQUEST, encode_request(req)))
        return fut

    def localize(self, req: LocalizationRequest, timeout: float | None = 60.0) -> LocalizationResponse:
        return self.submit(req).result(timeout)

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()
        self._reader.join(timeout=5)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
