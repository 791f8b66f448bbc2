"""Offline mapping: triangulation, observation cones and the two-part binary map.

On disk a map directory holds ``map.idx`` (one record per mapping image: pose,
global descriptor, shard file name) and one ``shard_<image_id>.bin`` per image
with the landmarks it observed. Only the index is read eagerly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import Pose
from .worldsim import CameraModel, FrameObservation

INDEX_MAGIC = b"GFMI"
SHARD_MAGIC = b"GFMS"
FORMAT_VERSION = 1
INDEX_NAME = "map.idx"

_HEADER = struct.Struct("<4sHHI")

SHARD_RECORD = np.dtype(
    [
        ("id", "<u8"),
        ("p3d", "<f8", (3,)),
        ("n", "<f4", (3,)),
        ("theta", "<f4"),
        ("L", "<f4"),
        ("obs2d", "<f4", (2,)),
    ]
)


class InsufficientParallax(ValueError):
    pass


class BehindCamera(ValueError):
    pass


class DegenerateDirection(ValueError):
    pass


class EmptyMap(ValueError):
    pass


class FormatError(ValueError):
    def __init__(self, message: str, offset: int, path: str | Path | None = None):
        where = f"{path}: " if path else ""
        super().__init__(f"{where}{message} (byte offset {offset})")
        self.offset = offset
        self.path = path


@dataclass(frozen=True)
class ObservationCone:
    n: np.ndarray
    theta: float
    L: float


@dataclass(frozen=True, eq=False)
class MapLandmark:
    """A landmark with every per-image view that survived into the map."""

    id: int
    p3d: np.ndarray
    cone: ObservationCone
    views: list = field(default_factory=list)  # (image_id, obs2d (2,), descriptor (D,))


@dataclass(eq=False)
class MapIndex:
    image_ids: np.ndarray  # (N,) uint64
    positions: np.ndarray  # (N, 3) float64
    quaternions: np.ndarray  # (N, 4) float64, (w, x, y, z)
    global_descriptors: np.ndarray  # (N, G) float32
    shard_paths: list[str]

    def __post_init__(self):
        if len(np.unique(self.image_ids)) != len(self.image_ids):
            raise ValueError("image ids must be unique")
        self._row = {int(i): r for r, i in enumerate(self.image_ids)}

    def __len__(self) -> int:
        return len(self.image_ids)

    @property
    def G(self) -> int:
        return self.global_descriptors.shape[1]

    def row(self, image_id: int) -> int:
        return self._row[int(image_id)]

    def pose(self, image_id: int) -> Pose:
        r = self.row(image_id)
        return Pose(self.quaternions[r], self.positions[r])

    def nbytes(self) -> int:
        return (
            self.image_ids.nbytes
            + self.positions.nbytes
            + self.quaternions.nbytes
            + self.global_descriptors.nbytes
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, MapIndex):
            return NotImplemented
        return (
            np.array_equal(self.image_ids, other.image_ids)
            and np.array_equal(self.positions, other.positions)
            and np.array_equal(self.quaternions, other.quaternions)
            and np.array_equal(self.global_descriptors, other.global_descriptors)
            and self.global_descriptors.dtype == other.global_descriptors.dtype
            and self.shard_paths == other.shard_paths
        )


@dataclass(eq=False)
class MapShard:
    """Landmarks observed by one mapping image, stored column-wise."""

    image_id: int
    ids: np.ndarray  # (M,) uint64
    p3d: np.ndarray  # (M, 3) float64
    n: np.ndarray  # (M, 3) float32
    theta: np.ndarray  # (M,) float32
    L: np.ndarray  # (M,) float32
    obs2d: np.ndarray  # (M, 2) float32
    descriptors: np.ndarray  # (M, D) float32

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def D(self) -> int:
        return self.descriptors.shape[1]

    def nbytes(self) -> int:
        return sum(
            a.nbytes for a in (self.ids, self.p3d, self.n, self.theta, self.L, self.obs2d, self.descriptors)
        )

    def landmarks(self) -> list[MapLandmark]:
        return [
            MapLandmark(
                id=int(self.ids[k]),
                p3d=self.p3d[k],
                cone=ObservationCone(self.n[k].astype(float), float(self.theta[k]), float(self.L[k])),
                views=[(self.image_id, self.obs2d[k], self.descriptors[k])],
            )
            for k in range(len(self))
        ]

    def __eq__(self, other) -> bool:
        if not isinstance(other, MapShard):
            return NotImplemented
        return self.image_id == other.image_id and all(
            np.array_equal(getattr(self, f), getattr(other, f)) and getattr(self, f).dtype == getattr(other, f).dtype
            for f in ("ids", "p3d", "n", "theta", "L", "obs2d", "descriptors")
        )


# ---------------------------------------------------------------------------
# triangulation


def _projection_matrices(poses: Sequence[Pose], cam: CameraModel) -> np.ndarray:
    K = cam.K()
    out = []
    for p in poses:
        Rcw = p.R.T
        out.append(K @ np.hstack([Rcw, (-Rcw @ p.t)[:, None]]))
    return np.stack(out)


def triangulate_landmark(
    observations: Sequence[tuple[Pose, np.ndarray]],
    cam: CameraModel,
    iterations: int = 10,
) -> np.ndarray:
    """Multi-view DLT followed by Gauss-Newton on the reprojection error (poses fixed)."""
    if len(observations) < 2:
        raise InsufficientParallax("need at least two observations")
    poses = [o[0] for o in observations]
    uv = np.array([o[1] for o in observations], dtype=float)
    centers = np.stack([p.t for p in poses])
    baseline = np.max(np.linalg.norm(centers - centers[0], axis=1))
    if baseline <= 1e-3:
        raise InsufficientParallax(f"baseline {baseline:.3g} m too small")
    Ps = _projection_matrices(poses, cam)
    A = np.concatenate([uv[:, :1] * Ps[:, 2] - Ps[:, 0], uv[:, 1:] * Ps[:, 2] - Ps[:, 1]])
    # condition rows so pixel scale does not dominate
    A /= np.linalg.norm(A, axis=1, keepdims=True)
    _, s, Vt = np.linalg.svd(A)
    if s[-2] < 1e-12 * s[0]:
        raise InsufficientParallax("DLT system is rank deficient")
    Xh = Vt[-1]
    if abs(Xh[3]) < 1e-12 * np.linalg.norm(Xh):
        raise InsufficientParallax("point at infinity")
    X = Xh[:3] / Xh[3]
    if baseline / np.max(np.linalg.norm(X - centers, axis=1)) < 1e-3:
        raise InsufficientParallax("baseline/depth ratio below 1e-3")

    Rcw = np.stack([p.R.T for p in poses])
    for _ in range(iterations):
        pc = np.einsum("nij,nj->ni", Rcw, X - centers)
        z = pc[:, 2]
        if np.any(z <= 0):
            break
        r = np.stack([cam.fx * pc[:, 0] / z + cam.cx, cam.fy * pc[:, 1] / z + cam.cy], 1) - uv
        dproj = np.zeros((len(z), 2, 3))
        dproj[:, 0, 0] = cam.fx / z
        dproj[:, 0, 2] = -cam.fx * pc[:, 0] / z**2
        dproj[:, 1, 1] = cam.fy / z
        dproj[:, 1, 2] = -cam.fy * pc[:, 1] / z**2
        J = (dproj @ Rcw).reshape(-1, 3)
        step = np.linalg.lstsq(J, -r.reshape(-1), rcond=None)[0]
        X = X + step
        if np.linalg.norm(step) < 1e-12 * max(1.0, np.linalg.norm(X)):
            break
    depth = np.einsum("ij,ij->i", X - centers, np.stack([p.R[:, 2] for p in poses]))
    if np.any(depth <= 0):
        raise BehindCamera("triangulated point has nonpositive depth in some view")
    return X


def reprojection_errors(X: np.ndarray, poses: Sequence[Pose], uv: np.ndarray, cam: CameraModel) -> np.ndarray:
    errs = []
    for p, obs in zip(poses, uv):
        pix, z = cam.project(p, X[None, :])
        errs.append(np.inf if z[0] <= 0 else float(np.linalg.norm(pix[0] - obs)))
    return np.array(errs)


# ---------------------------------------------------------------------------
# observation cones


def compute_cone(p3d: np.ndarray, camera_centers: np.ndarray) -> ObservationCone:
    """Max visible distance, normalized mean viewing direction and full cone angle."""
    p3d = np.asarray(p3d, dtype=float)
    C = np.asarray(camera_centers, dtype=float).reshape(-1, 3)
    if len(C) == 0:
        raise ValueError("need at least one camera")
    d = C - p3d
    dist = np.linalg.norm(d, axis=1)
    if np.any(dist <= 0):
        raise ValueError("camera center coincides with the landmark")
    u = d / dist[:, None]
    mean = u.mean(axis=0)
    norm = np.linalg.norm(mean)
    if norm < 1e-9:
        raise DegenerateDirection("viewing directions cancel out")
    n = mean / norm
    theta = 2.0 * float(np.max(np.arccos(np.clip(u @ n, -1.0, 1.0))))
    return ObservationCone(n=n, theta=theta, L=float(dist.max()))


def cone_contains(
    p3d: np.ndarray,
    n: np.ndarray,
    theta: np.ndarray,
    L: np.ndarray,
    position: np.ndarray,
    delta_L: float = 0.0,
    delta_theta: float = 0.0,
) -> np.ndarray:
    """Both visibility conditions for a camera at ``position`` (vectorized over landmarks)."""
    p3d = np.atleast_2d(p3d)
    d = np.asarray(position, dtype=float) - p3d
    dist = np.linalg.norm(d, axis=1)
    n64 = np.atleast_2d(np.asarray(n, dtype=np.float64))
    with np.errstate(invalid="ignore", divide="ignore"):
        cosang = np.einsum("ij,ij->i", n64, d) / dist
    ang = 2.0 * np.arccos(np.clip(cosang, -1.0, 1.0))
    L = np.asarray(L, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    return (dist < L + delta_L) & (ang < theta + delta_theta) & (dist > 0)


def _quantize_cone(p3d: np.ndarray, centers: np.ndarray, cone: ObservationCone):
    """float32 storage of a cone, rounded outward so every observing camera still passes."""
    n32 = cone.n.astype(np.float32)
    n64 = n32.astype(np.float64)
    d = centers - p3d
    dist = np.linalg.norm(d, axis=1)
    ang = 2.0 * np.arccos(np.clip((d @ n64) / dist, -1.0, 1.0))
    theta32 = np.nextafter(np.float32(ang.max()), np.float32(np.inf))
    while float(theta32) <= ang.max():
        theta32 = np.nextafter(theta32, np.float32(np.inf))
    L32 = np.nextafter(np.float32(dist.max()), np.float32(np.inf))
    while float(L32) <= dist.max():
        L32 = np.nextafter(L32, np.float32(np.inf))
    return n32, np.float32(theta32), np.float32(L32)


# ---------------------------------------------------------------------------
# build


def build_map(
    frames: Sequence[FrameObservation],
    cam: CameraModel,
    image_ids: Sequence[int] | None = None,
    max_reproj_px: float = 2.0,
) -> tuple[MapIndex, list[MapShard]]:
    """Triangulate every landmark seen in at least two frames and group it into per-image shards.

    Frame poses are taken as known (``true_pose``); landmark positions come
    only from triangulation. Landmarks whose refined position reprojects worse
    than ``max_reproj_px`` in any observing view are dropped.
    """
    if image_ids is None:
        image_ids = list(range(len(frames)))
    image_ids = [int(i) for i in image_ids]
    tracks: dict[int, list[tuple[int, int]]] = {}
    for f_idx, f in enumerate(frames):
        for k, lid in enumerate(f.landmark_ids.tolist()):
            tracks.setdefault(int(lid), []).append((f_idx, k))

    landmarks = {}
    for lid in sorted(tracks):
        obs = tracks[lid]
        if len(obs) < 2:
            continue
        poses = [frames[f].true_pose for f, _ in obs]
        uv = np.array([frames[f].keypoints[k] for f, k in obs])
        try:
            X = triangulate_landmark(list(zip(poses, uv)), cam)
        except (InsufficientParallax, BehindCamera, np.linalg.LinAlgError):
            continue
        if np.max(reprojection_errors(X, poses, uv, cam)) >= max_reproj_px:
            continue
        centers = np.stack([p.t for p in poses])
        try:
            cone = compute_cone(X, centers)
        except (DegenerateDirection, ValueError):
            continue
        landmarks[lid] = (X, _quantize_cone(X, centers, cone), obs)

    if not landmarks:
        raise EmptyMap("no landmark could be triangulated")

    per_image: dict[int, list[tuple[int, int]]] = {}
    for lid, (_, _, obs) in landmarks.items():
        for f, k in obs:
            per_image.setdefault(f, []).append((lid, k))

    D = frames[0].local_descriptors.shape[1] if len(frames[0]) else max(
        f.local_descriptors.shape[1] for f in frames
    )
    shards = []
    idx_rows = []
    for f_idx in sorted(per_image):
        entries = sorted(per_image[f_idx])
        f = frames[f_idx]
        lids = np.array([e[0] for e in entries], dtype=np.uint64)
        ks = np.array([e[1] for e in entries], dtype=int)
        shard = MapShard(
            image_id=image_ids[f_idx],
            ids=lids,
            p3d=np.stack([landmarks[int(l)][0] for l in lids]),
            n=np.stack([landmarks[int(l)][1][0] for l in lids]).astype(np.float32),
            theta=np.array([landmarks[int(l)][1][1] for l in lids], dtype=np.float32),
            L=np.array([landmarks[int(l)][1][2] for l in lids], dtype=np.float32),
            obs2d=f.keypoints[ks].astype(np.float32),
            descriptors=np.ascontiguousarray(f.local_descriptors[ks], dtype=np.float32).reshape(-1, D),
        )
        shards.append(shard)
        idx_rows.append(f_idx)

    index = MapIndex(
        image_ids=np.array([image_ids[i] for i in idx_rows], dtype=np.uint64),
        positions=np.stack([frames[i].true_pose.t for i in idx_rows]).astype(np.float64),
        quaternions=np.stack([frames[i].true_pose.q for i in idx_rows]).astype(np.float64),
        global_descriptors=np.stack([frames[i].global_descriptor for i in idx_rows]).astype(np.float32),
        shard_paths=[f"shard_{image_ids[i]}.bin" for i in idx_rows],
    )
    return index, shards


def all_landmarks(shards: Sequence[MapShard]) -> dict[int, MapLandmark]:
    """Merge shards into one landmark table keyed by id (views gathered across images)."""
    out: dict[int, MapLandmark] = {}
    for sh in shards:
        for k in range(len(sh)):
            lid = int(sh.ids[k])
            lm = out.get(lid)
            if lm is None:
                lm = MapLandmark(
                    id=lid,
                    p3d=sh.p3d[k],
                    cone=ObservationCone(sh.n[k].astype(float), float(sh.theta[k]), float(sh.L[k])),
                    views=[],
                )
                out[lid] = lm
            lm.views.append((sh.image_id, sh.obs2d[k], sh.descriptors[k]))
    return out


# ---------------------------------------------------------------------------
# serialization


def index_record_size(G: int, name: str) -> int:
    return 8 + 7 * 8 + 4 * G + 2 + len(name.encode("utf-8"))


def write_map(index: MapIndex, shards: Sequence[MapShard], directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    by_id = {sh.image_id: sh for sh in shards}
    G = index.G
    parts = [_HEADER.pack(INDEX_MAGIC, FORMAT_VERSION, G, len(index))]
    for r in range(len(index)):
        name = index.shard_paths[r].encode("utf-8")
        q = index.quaternions[r]
        t = index.positions[r]
        parts.append(struct.pack("<Q7d", int(index.image_ids[r]), *t, *q))
        parts.append(np.asarray(index.global_descriptors[r], dtype="<f4").tobytes())
        parts.append(struct.pack("<H", len(name)) + name)
    (directory / INDEX_NAME).write_bytes(b"".join(parts))
    for r in range(len(index)):
        sh = by_id[int(index.image_ids[r])]
        _write_shard(sh, directory / index.shard_paths[r])


def _write_shard(sh: MapShard, path: Path) -> None:
    D = sh.D
    rec = np.dtype(SHARD_RECORD.descr + [("desc", "<f4", (D,))])
    arr = np.zeros(len(sh), dtype=rec)
    arr["id"] = sh.ids
    arr["p3d"] = sh.p3d
    arr["n"] = sh.n
    arr["theta"] = sh.theta
    arr["L"] = sh.L
    arr["obs2d"] = sh.obs2d
    arr["desc"] = sh.descriptors
    path.write_bytes(_HEADER.pack(SHARD_MAGIC, FORMAT_VERSION, D, len(sh)) + arr.tobytes())


def _read_header(data: bytes, magic: bytes, path) -> tuple[int, int]:
    if len(data) < _HEADER.size:
        raise FormatError("truncated header", len(data), path)
    m, version, dim, count = _HEADER.unpack_from(data, 0)
    if m != magic:
        raise FormatError(f"bad magic {m!r}, expected {magic!r}", 0, path)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}", 4, path)
    return dim, count


def read_index(path: str | Path) -> MapIndex:
    data = Path(path).read_bytes()
    G, N = _read_header(data, INDEX_MAGIC, path)
    off = _HEADER.size
    ids = np.zeros(N, dtype=np.uint64)
    pos = np.zeros((N, 3))
    quat = np.zeros((N, 4))
    glob = np.zeros((N, G), dtype=np.float32)
    names = []
    fixed = 8 + 56 + 4 * G
    for r in range(N):
        if off + fixed + 2 > len(data):
            raise FormatError(f"truncated index record {r}", off, path)
        vals = struct.unpack_from("<Q7d", data, off)
        ids[r] = vals[0]
        pos[r] = vals[1:4]
        quat[r] = vals[4:8]
        off += 64
        glob[r] = np.frombuffer(data, dtype="<f4", count=G, offset=off)
        off += 4 * G
        (ln,) = struct.unpack_from("<H", data, off)
        off += 2
        if off + ln > len(data):
            raise FormatError(f"truncated shard name in record {r}", off, path)
        try:
            names.append(data[off : off + ln].decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise FormatError(f"bad shard name encoding in record {r}", off, path) from exc
        off += ln
    if off != len(data):
        raise FormatError(f"{len(data) - off} trailing bytes", off, path)
    return MapIndex(ids, pos, quat, glob, names)


def read_shard(path: str | Path, image_id: int | None = None) -> MapShard:
    data = Path(path).read_bytes()
    D, M = _read_header(data, SHARD_MAGIC, path)
    rec = np.dtype(SHARD_RECORD.descr + [("desc", "<f4", (D,))])
    need = _HEADER.size + M * rec.itemsize
    if len(data) != need:
        raise FormatError(f"expected {need} bytes, found {len(data)}", min(len(data), need), path)
    arr = np.frombuffer(data, dtype=rec, count=M, offset=_HEADER.size)
    if image_id is None:
        stem = Path(path).stem
        image_id = int(stem.split("_", 1)[1]) if stem.startswith("shard_") else -1
    return MapShard(
        image_id=int(image_id),
        ids=arr["id"].astype(np.uint64),
        p3d=arr["p3d"].astype(np.float64),
        n=arr["n"].astype(np.float32),
        theta=arr["theta"].astype(np.float32),
        L=arr["L"].astype(np.float32),
        obs2d=arr["obs2d"].astype(np.float32),
        descriptors=np.ascontiguousarray(arr["desc"], dtype=np.float32).reshape(M, D),
    )


@dataclass(frozen=True)
class ShardHandle:
    """Deferred reference to one shard file."""

    image_id: int
    path: Path

    def load(self) -> MapShard:
        return read_shard(self.path, self.image_id)


def read_map(directory: str | Path) -> tuple[MapIndex, dict[int, ShardHandle]]:
    directory = Path(directory)
    if not (directory / INDEX_NAME).is_file():
        raise FileNotFoundError(f"no {INDEX_NAME} in {directory}")
    index = read_index(directory / INDEX_NAME)
    handles = {
        int(i): ShardHandle(int(i), directory / name) for i, name in zip(index.image_ids, index.shard_paths)
    }
    return index, handles


def landmark_reprojection_ok(
    index: MapIndex, shards: Sequence[MapShard], cam: CameraModel, max_px: float
) -> bool:
    for sh in shards:
        pose = index.pose(sh.image_id)
        uv, z = cam.project(pose, sh.p3d)
        if np.any(z <= 0) or np.any(np.linalg.norm(uv - sh.obs2d.astype(float), axis=1) >= max_px):
            return False
    return True
