"""Binary wire protocol between the fusion client and the localization service.

Frame: magic ``GFW1``, msg_type u8 (1 request, 2 response), payload_len u32,
payload. All fields little-endian. Descriptor dimensions are not on the wire;
the decoder takes them from the service's map.
"""

from __future__ import annotations

import enum
import socket
import struct
from dataclasses import dataclass

import numpy as np

from .geometry import Pose

MAGIC = b"GFW1"
MSG_REQUEST = 1
MSG_RESPONSE = 2
MAX_PAYLOAD = 16 * 1024 * 1024

FRAME_HEADER = struct.Struct("<4sBI")
_REQ_HEAD = struct.Struct("<QdB")
_POSE = struct.Struct("<7d")
_RESP = struct.Struct("<QBBI7d")


class ProtocolError(ValueError):
    """Unrecoverable framing error; the connection must be dropped."""


class BadRequest(ValueError):
    """Well-framed request whose payload does not parse."""

    def __init__(self, message: str, request_id: int = 0):
        super().__init__(message)
        self.request_id = request_id


class Status(enum.IntEnum):
    OK = 0
    FAILED = 1


class FailureStage(enum.IntEnum):
    NONE = 0
    BAD_REQUEST = 1
    RETRIEVAL = 2
    MATCHING = 3
    PNP = 4
    CLUSTERING = 5
    REFINEMENT = 6
    CONSTRAINT = 7
    INTERNAL = 8

    @classmethod
    def from_name(cls, name: str) -> "FailureStage":
        return cls[name.upper()]


@dataclass(eq=False)
class LocalizationRequest:
    request_id: int
    timestamp: float
    prior: Pose | None
    keypoints: np.ndarray  # (K, 2) float32
    descriptors: np.ndarray  # (K, D) float32
    global_descriptor: np.ndarray  # (G,) float32

    def __eq__(self, other):
        if not isinstance(other, LocalizationRequest):
            return NotImplemented
        same_prior = (self.prior is None and other.prior is None) or (
            self.prior is not None
            and other.prior is not None
            and np.array_equal(self.prior.q, other.prior.q)
            and np.array_equal(self.prior.t, other.prior.t)
        )
        return (
            self.request_id == other.request_id
            and self.timestamp == other.timestamp
            and same_prior
            and np.array_equal(np.asarray(self.keypoints, np.float32), np.asarray(other.keypoints, np.float32))
            and np.array_equal(np.asarray(self.descriptors, np.float32), np.asarray(other.descriptors, np.float32))
            and np.array_equal(
                np.asarray(self.global_descriptor, np.float32), np.asarray(other.global_descriptor, np.float32)
            )
        )


@dataclass(eq=False)
class LocalizationResponse:
    request_id: int
    status: Status
    pose: Pose | None = None
    inlier_count: int = 0
    failure_stage: FailureStage = FailureStage.NONE

    @property
    def ok(self) -> bool:
        return self.status == Status.OK

    def __eq__(self, other):
        if not isinstance(other, LocalizationResponse):
            return NotImplemented
        if (self.pose is None) != (other.pose is None):
            return False
        if self.pose is not None and not (
            np.array_equal(self.pose.q, other.pose.q) and np.array_equal(self.pose.t, other.pose.t)
        ):
            return False
        return (
            self.request_id == other.request_id
            and self.status == other.status
            and self.inlier_count == other.inlier_count
            and self.failure_stage == other.failure_stage
        )


def _pose_fields(p: Pose) -> tuple[float, ...]:
    return (*p.t, *p.q)


def _pose_from(vals) -> Pose:
    if not all(np.isfinite(vals)):
        raise ValueError("non-finite pose field")
    return Pose(vals[3:7], vals[0:3])


def encode_request(req: LocalizationRequest) -> bytes:
    kp = np.ascontiguousarray(req.keypoints, dtype="<f4").reshape(-1, 2)
    K = len(kp)
    desc = np.ascontiguousarray(req.descriptors, dtype="<f4").reshape(K, -1) if K else np.zeros((0, 0), "<f4")
    glob = np.ascontiguousarray(req.global_descriptor, dtype="<f4").reshape(-1)
    parts = [_REQ_HEAD.pack(req.request_id, req.timestamp, 1 if req.prior is not None else 0)]
    if req.prior is not None:
        parts.append(_POSE.pack(*_pose_fields(req.prior)))
    parts.append(struct.pack("<I", K))
    parts += [kp.tobytes(), desc.tobytes(), glob.tobytes()]
    return b"".join(parts)


def decode_request(payload: bytes, D: int, G: int) -> LocalizationRequest:
    """Parse a request payload; raises :class:`BadRequest` on any inconsistency."""
    n = len(payload)
    if n < _REQ_HEAD.size:
        raise BadRequest(f"payload of {n} bytes is shorter than the request header")
    request_id, timestamp, has_prior = _REQ_HEAD.unpack_from(payload, 0)
    off = _REQ_HEAD.size
    if has_prior not in (0, 1):
        raise BadRequest(f"has_prior={has_prior}", request_id)
    prior = None
    if has_prior:
        if n < off + _POSE.size:
            raise BadRequest("truncated prior pose", request_id)
        vals = _POSE.unpack_from(payload, off)
        off += _POSE.size
        try:
            prior = _pose_from(vals)
        except ValueError as exc:
            raise BadRequest(f"invalid prior pose: {exc}", request_id) from exc
    if n < off + 4:
        raise BadRequest("missing keypoint count", request_id)
    (K,) = struct.unpack_from("<I", payload, off)
    off += 4
    expected = off + 4 * (2 * K + K * D + G)
    if n != expected:
        raise BadRequest(f"payload is {n} bytes, K={K} implies {expected}", request_id)
    kp = np.frombuffer(payload, "<f4", 2 * K, off).reshape(K, 2)
    off += 8 * K
    desc = np.frombuffer(payload, "<f4", K * D, off).reshape(K, D)
    off += 4 * K * D
    glob = np.frombuffer(payload, "<f4", G, off)
    return LocalizationRequest(request_id, timestamp, prior, kp.astype(np.float32), desc.astype(np.float32), glob.astype(np.float32))


def encode_response(resp: LocalizationResponse) -> bytes:
    pose = resp.pose if resp.pose is not None else Pose.identity()
    return _RESP.pack(
        resp.request_id, int(resp.status), int(resp.failure_stage), resp.inlier_count, *_pose_fields(pose)
    )


def decode_response(payload: bytes) -> LocalizationResponse:
    if len(payload) != _RESP.size:
        raise ProtocolError(f"response payload is {len(payload)} bytes, expected {_RESP.size}")
    vals = _RESP.unpack(payload)
    request_id, status, stage, inliers = vals[:4]
    try:
        status = Status(status)
        stage = FailureStage(stage)
    except ValueError as exc:
        raise ProtocolError(str(exc)) from exc
    try:
        pose = _pose_from(vals[4:]) if status == Status.OK else None
    except ValueError as exc:
        raise ProtocolError(f"invalid pose: {exc}") from exc
    return LocalizationResponse(request_id, status, pose, inliers, stage)


def encode_frame(msg_type: int, payload: bytes) -> bytes:
    if len(payload) > MAX_PAYLOAD:
        raise ProtocolError(f"payload of {len(payload)} bytes exceeds {MAX_PAYLOAD}")
    return FRAME_HEADER.pack(MAGIC, msg_type, len(payload)) + payload


def parse_frame_header(header: bytes) -> tuple[int, int]:
    if len(header) != FRAME_HEADER.size:
        raise ProtocolError("truncated frame header")
    magic, msg_type, length = FRAME_HEADER.unpack(header)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}")
    if msg_type not in (MSG_REQUEST, MSG_RESPONSE):
        raise ProtocolError(f"unknown message type {msg_type}")
    if length > MAX_PAYLOAD:
        raise ProtocolError(f"payload length {length} exceeds {MAX_PAYLOAD}")
    return msg_type, length


def decode_frames(buffer: bytes) -> tuple[list[tuple[int, bytes]], bytes]:
    """Split complete frames off the front of ``buffer``; returns ``(frames, remainder)``."""
    frames = []
    off = 0
    while len(buffer) - off >= FRAME_HEADER.size:
        msg_type, length = parse_frame_header(buffer[off : off + FRAME_HEADER.size])
        end = off + FRAME_HEADER.size + length
        if end > len(buffer):
            break
        frames.append((msg_type, buffer[off + FRAME_HEADER.size : end]))
        off = end
    return frames, buffer[off:]


def _recv_exact(sock: socket.socket, n: int) -> bytes | None:
    chunks = []
    while n:
        chunk = sock.recv(min(n, 1 << 20))
        if not chunk:
            return None
        chunks.append(chunk)
        n -= len(chunk)
    return b"".join(chunks)


def read_frame(sock: socket.socket) -> tuple[int, bytes] | None:
    """Blocking read of one frame; ``None`` on clean EOF before a header."""
    header = _recv_exact(sock, FRAME_HEADER.size)
    if header is None:
        return None
    msg_type, length = parse_frame_header(header)
    payload = _recv_exact(sock, length) if length else b""
    if payload is None:
        raise ProtocolError("connection closed mid-frame")
    return msg_type, payload
