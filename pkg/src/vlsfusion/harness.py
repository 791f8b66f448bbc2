"""Scenario orchestration: build a map, run the fusion client, evaluate trajectories."""

from __future__ import annotations

import configparser
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import numpy as np

from .fusion import FusionConfig, FusionEngine
from .geometry import (
    Pose,
    Trajectory,
    ate_rmse,
    pose_accuracy_buckets,
    quat_from_rotvec,
    quat_mul,
    read_tum,
    write_tum,
)
from .localizer import LocalizerParams
from .mapbuilder import build_map, write_map
from .pgo import PgoConfig
from .protocol import LocalizationRequest, LocalizationResponse, Status
from .service import VlsClient, VlsServer, handle_request, init_service
from .worldsim import (
    CameraModel,
    NoiseSpec,
    SimTrajectory,
    generate_trajectory,
    generate_world,
    render_observations,
    render_trajectory,
    simulate_vio,
)

log = logging.getLogger(__name__)

DEFAULT_THRESHOLDS = ((0.25, 2.0), (0.5, 5.0), (5.0, 10.0))
VLS_MODES = ("inprocess", "wire", "simulated")


class InitializationFailed(RuntimeError):
    pass


class ServiceUnavailable(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# scenario


@dataclass(frozen=True)
class WorldSpec:
    n_landmarks: int = 6000
    extent: tuple[float, float, float] = (100.0, 100.0, 5.0)
    descriptor_dim: int = 64
    global_dim: int = 256


@dataclass(frozen=True)
class PassSpec:
    shape: str = "circle"
    length: float = 500.0
    frame_hz: float = 10.0
    keyframe_every: int = 5
    speed: float = 5.0
    start: float = 0.0
    radius_offset: float = 0.0
    pixel_sigma: float = 0.0
    descriptor_sigma: float = 0.0


@dataclass(frozen=True)
class ServiceSpec:
    mode: str = "inprocess"
    endpoint: str = "127.0.0.1:0"
    cache: int = 64
    workers: int = 2


@dataclass(frozen=True)
class Scenario:
    seed: int = 0
    world: WorldSpec = field(default_factory=WorldSpec)
    camera: CameraModel = field(default_factory=CameraModel)
    mapping: PassSpec = field(default_factory=lambda: PassSpec(frame_hz=2.5, keyframe_every=1))
    query: PassSpec = field(default_factory=PassSpec)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    service: ServiceSpec = field(default_factory=ServiceSpec)
    output_dir: str = "run"

    # per-stage seeds, all derived from the single scenario seed
    def stage_seed(self, stage: str) -> int:
        return {"world": 1, "path": 2, "map_render": 3, "query_render": 4,
                "vio": 5, "vls": 6}[stage] * 1000 + self.seed

    def with_seed(self, seed: int) -> "Scenario":
        return replace(self, seed=int(seed), fusion=replace(self.fusion, seed=int(seed)))


def _coerce(value: str, default: Any):
    if isinstance(default, bool):
        return value.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float) or default is None:
        return float(value)
    if isinstance(default, tuple):
        return tuple(float(v) for v in value.split(","))
    return value.strip()


def _section(cp: configparser.ConfigParser, name: str, obj, degrees: tuple[str, ...] = ()):
    if not cp.has_section(name):
        return obj
    known = {f.name: getattr(obj, f.name) for f in fields(obj)}
    kw = {}
    for key, raw in cp.items(name):
        base = key[: -len("_deg")] if key.endswith("_deg") and key[: -len("_deg")] in degrees else key
        if base not in known:
            raise ValueError(f"unknown key [{name}] {key}")
        val = _coerce(raw, known[base])
        kw[base] = math.radians(val) if base != key else val
    return replace(obj, **kw)


def load_scenario(path: str | Path | None = None, seed: int | None = None) -> Scenario:
    """Read an INI scenario; missing sections keep their defaults.

    ``path`` may also name a bundled scenario (``nominal``, ``small``).
    """
    sc = Scenario()
    if path is not None:
        if not Path(path).exists() and bundled_scenario(str(path)).exists():
            path = bundled_scenario(str(path))
        cp = configparser.ConfigParser()
        cp.optionxform = str  # keys are case sensitive (D_v)
        if not cp.read(path):
            raise FileNotFoundError(f"scenario file not found: {path}")
        run = cp["run"] if cp.has_section("run") else {}
        sc = replace(
            sc,
            seed=int(run.get("seed", sc.seed)),
            output_dir=run.get("output_dir", sc.output_dir),
            world=_section(cp, "world", sc.world),
            camera=_section(cp, "camera", sc.camera),
            mapping=_section(cp, "mapping", sc.mapping),
            query=_section(cp, "query", sc.query),
            noise=_section(cp, "noise", sc.noise, degrees=("vio_rot_sigma", "vls_rot_sigma")),
            fusion=replace(
                _section(cp, "fusion", sc.fusion, degrees=("sigma_r_floor",)),
                pgo=_section(cp, "pgo", sc.fusion.pgo),
            ),
            service=_section(cp, "service", sc.service),
        )
        sc = sc.with_seed(sc.seed)
    if seed is not None:
        sc = sc.with_seed(seed)
    if sc.service.mode not in VLS_MODES:
        raise ValueError(f"service mode must be one of {VLS_MODES}")
    return sc


def bundled_scenario(name: str) -> Path:
    return Path(__file__).with_name("scenarios") / f"{name}.ini"


def _pass_trajectory(spec: PassSpec, seed: int) -> SimTrajectory:
    return generate_trajectory(
        spec.shape, spec.length, spec.frame_hz, spec.keyframe_every, seed=seed,
        speed=spec.speed, start=spec.start, radius_offset=spec.radius_offset,
    )


def scenario_world(sc: Scenario):
    w = sc.world
    return generate_world(w.n_landmarks, w.extent, sc.stage_seed("world"),
                          descriptor_dim=w.descriptor_dim, global_dim=w.global_dim)


def query_trajectory(sc: Scenario) -> SimTrajectory:
    # both passes follow the same path family; offsets come from start/radius_offset
    return _pass_trajectory(sc.query, sc.stage_seed("path"))


def mapping_trajectory(sc: Scenario) -> SimTrajectory:
    return _pass_trajectory(sc.mapping, sc.stage_seed("path"))


# ---------------------------------------------------------------------------
# build-map


@dataclass
class MapBuildResult:
    map_dir: Path
    n_images: int
    n_landmarks: int
    n_covisible: int
    seconds: float

    @property
    def retained_fraction(self) -> float:
        return self.n_landmarks / self.n_covisible if self.n_covisible else 0.0


def cmd_build_map(sc: Scenario, map_dir: str | Path) -> MapBuildResult:
    t0 = time.perf_counter()
    world = scenario_world(sc)
    traj = mapping_trajectory(sc)
    noise = NoiseSpec(pixel_sigma=sc.mapping.pixel_sigma, descriptor_sigma=sc.mapping.descriptor_sigma)
    frames = render_trajectory(world, sc.camera, traj, noise, sc.stage_seed("map_render"))
    counts: dict[int, int] = {}
    for f in frames:
        for lid in f.landmark_ids.tolist():
            counts[lid] = counts.get(lid, 0) + 1
    covisible = sum(1 for c in counts.values() if c >= 2)
    index, shards = build_map(frames, sc.camera)
    write_map(index, shards, map_dir)
    n_lm = len({int(i) for sh in shards for i in sh.ids})
    return MapBuildResult(Path(map_dir), len(index), n_lm, covisible, time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# run-client


@dataclass
class RunResult:
    fused: Trajectory
    vio: Trajectory  # raw odometry in its own frame
    vio_anchored: Trajectory  # odometry placed at the true first pose
    vls: Trajectory | None
    truth: Trajectory
    diagnostics: list[dict]
    engine: FusionEngine

    def write(self, out_dir: str | Path) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_tum(self.fused, out / "fused.tum")
        write_tum(self.vio, out / "vio.tum")
        write_tum(self.vio_anchored, out / "vio_anchored.tum")
        write_tum(self.truth, out / "groundtruth.tum")
        if self.vls is not None:
            write_tum(self.vls, out / "vls.tum")
        with open(out / "diagnostics.jsonl", "w") as fh:
            for rec in self.diagnostics:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        return out


class _SimulatedVls:
    """Ground truth plus Gaussian pose noise; no map involved."""

    def __init__(self, noise: NoiseSpec, seed: int):
        self.noise = noise
        self.rng = np.random.default_rng(seed)

    def __call__(self, truth: Pose) -> Pose:
        n = self.noise
        dq = quat_from_rotvec(self.rng.normal(0.0, n.vls_rot_sigma, 3))
        return Pose(quat_mul(truth.q, dq), truth.t + self.rng.normal(0.0, n.vls_trans_sigma, 3))


def _outlier(truth: Pose, rng: np.random.Generator) -> Pose:
    """A wrong absolute pose a few meters and degrees off."""
    d = rng.normal(size=3)
    d *= rng.uniform(3.0, 10.0) / np.linalg.norm(d)
    return Pose(quat_mul(truth.q, quat_from_rotvec(rng.normal(0.0, math.radians(10.0), 3))), truth.t + d)


def cmd_run_client(
    sc: Scenario,
    map_dir: str | Path | None = None,
    endpoint: str | None = None,
    mode: str | None = None,
    request_timeout: float = 60.0,
) -> RunResult:
    """Drive the fusion engine along the query pass.

    ``mode`` is ``inprocess`` (service state in this process, no socket),
    ``wire`` (TCP client against ``endpoint``) or ``simulated`` (noisy truth).
    Requests are answered before the next frame is fed, so runs are
    reproducible regardless of service timing.
    """
    mode = mode or sc.service.mode
    if mode not in VLS_MODES:
        raise ValueError(f"unknown VLS mode {mode!r}")
    st = query_trajectory(sc)
    truth = st.trajectory
    vio = simulate_vio(truth, sc.noise, sc.stage_seed("vio"))
    vio_anchored = vio.transformed(truth.poses[0])
    world = scenario_world(sc) if mode != "simulated" else None
    render_noise = NoiseSpec(pixel_sigma=sc.query.pixel_sigma, descriptor_sigma=sc.query.descriptor_sigma)
    outlier_rng = np.random.default_rng([sc.stage_seed("vls"), 1])
    simulated = _SimulatedVls(sc.noise, [sc.stage_seed("vls"), 2]) if mode == "simulated" else None

    state = client = None
    if mode == "inprocess":
        if map_dir is None:
            raise ValueError("in-process mode needs a map directory")
        state = init_service(map_dir, sc.camera, sc.service.cache, LocalizerParams(), sc.service.workers)
    elif mode == "wire":
        try:
            client = VlsClient(endpoint or sc.service.endpoint)
        except OSError as exc:
            raise ServiceUnavailable(f"cannot reach localization service at {endpoint}: {exc}") from exc

    diagnostics: list[dict] = []
    engine = FusionEngine(sc.fusion, diagnostics.append)
    vls_out: list[tuple[float, Pose]] = []
    try:
        for i, (ts, vpose) in enumerate(vio):
            frame = engine.add_frame(ts, vpose, bool(st.keyframe[i]))
            if not st.keyframe[i]:
                continue
            t_req = time.perf_counter()
            if simulated is not None:
                resp = LocalizationResponse(i, Status.OK, simulated(truth.poses[i]), 100)
            else:
                obs = render_observations(world, sc.camera, truth.poses[i], render_noise,
                                          sc.stage_seed("query_render") * 1_000_003 + i, ts, True)
                req = LocalizationRequest(i, ts, engine.prior(), obs.keypoints.astype(np.float32),
                                          obs.local_descriptors, obs.global_descriptor)
                if state is not None:
                    resp = handle_request(state, req)
                else:
                    try:
                        resp = client.localize(req, timeout=request_timeout)
                    except Exception as exc:  # noqa: BLE001
                        raise ServiceUnavailable(f"localization request {i} failed: {exc}") from exc
            vls_ms = 1e3 * (time.perf_counter() - t_req)
            pose = resp.pose if resp.ok else None
            injected = False
            if pose is not None and outlier_rng.random() < sc.noise.vls_outlier_rate:
                pose = _outlier(truth.poses[i], outlier_rng)
                injected = True
            if pose is not None:
                vls_out.append((ts, pose))
            rec = engine.add_vls_result(frame, pose, resp.inlier_count)
            rec["vls_ms"] = vls_ms
            rec["stage"] = int(resp.failure_stage)
            rec["outlier"] = injected
    finally:
        if state is not None:
            state.close()
        if client is not None:
            client.close()
    engine.finish()
    if engine.init_count == 0:
        raise InitializationFailed("fusion never initialized during the run")
    vls_traj = Trajectory.from_pairs(vls_out) if vls_out else None
    return RunResult(engine.fused_trajectory(), vio, vio_anchored, vls_traj, truth, diagnostics, engine)


# ---------------------------------------------------------------------------
# evaluate


def _stats(xs) -> dict[str, float]:
    xs = np.asarray([x for x in xs if x is not None], dtype=float)
    if len(xs) == 0:
        return {"mean": 0.0, "p50": 0.0, "p95": 0.0, "n": 0}
    return {"mean": float(xs.mean()), "p50": float(np.median(xs)), "p95": float(np.percentile(xs, 95)),
            "n": int(len(xs))}


@dataclass
class Report:
    ate_rmse_fused: float
    ate_rmse_fused_aligned: float
    ate_rmse_vio: float
    ate_rmse_vio_aligned: float
    buckets_fused: dict[str, float]
    buckets_vio: dict[str, float]
    vls_success_rate: float
    latency_ms: dict[str, dict[str, float]]
    n_fused: int
    n_truth: int

    def to_records(self) -> list[dict]:
        recs = [{"metric": k, "value": v} for k, v in asdict(self).items() if not isinstance(v, dict)]
        for name in ("buckets_fused", "buckets_vio"):
            recs += [{"metric": name, "threshold": k, "value": v} for k, v in getattr(self, name).items()]
        recs += [{"metric": "latency_ms", "stage": s, **v} for s, v in self.latency_ms.items()]
        return recs

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.to_records())

    def to_text(self) -> str:
        lines = [
            f"frames fused         {self.n_fused} / {self.n_truth}",
            f"ATE fused            {self.ate_rmse_fused:.4f} m (aligned {self.ate_rmse_fused_aligned:.4f} m)",
            f"ATE VIO              {self.ate_rmse_vio:.4f} m (aligned {self.ate_rmse_vio_aligned:.4f} m)",
            f"VLS success rate     {100 * self.vls_success_rate:.1f} %",
        ]
        for k in self.buckets_fused:
            lines.append(f"within {k:<13} fused {self.buckets_fused[k]:6.1f} %   vio {self.buckets_vio[k]:6.1f} %")
        for s, v in self.latency_ms.items():
            lines.append(f"latency {s:<12} mean {v['mean']:.1f} ms  p50 {v['p50']:.1f} ms  p95 {v['p95']:.1f} ms")
        return "\n".join(lines) + "\n"


def _bucket_key(m: float, d: float) -> str:
    return f"{m:g}m/{d:g}deg"


def cmd_evaluate(
    fused: Trajectory,
    truth: Trajectory,
    vio: Trajectory | None = None,
    diagnostics: list[dict] | None = None,
    thresholds=DEFAULT_THRESHOLDS,
) -> Report:
    """Unaligned and rigidly aligned ATE plus accuracy buckets; raises NoAssociations on disjoint input."""
    vio = vio if vio is not None else fused
    bf = pose_accuracy_buckets(fused, truth, thresholds)
    bv = pose_accuracy_buckets(vio, truth, thresholds)
    diagnostics = diagnostics or []
    vls = [r for r in diagnostics if "vls_ok" in r]
    success = sum(1 for r in vls if r["vls_ok"]) / len(vls) if vls else 0.0
    return Report(
        ate_rmse_fused=ate_rmse(fused, truth, "none"),
        ate_rmse_fused_aligned=ate_rmse(fused, truth, "rigid6dof"),
        ate_rmse_vio=ate_rmse(vio, truth, "none"),
        ate_rmse_vio_aligned=ate_rmse(vio, truth, "rigid6dof"),
        buckets_fused={_bucket_key(*t): float(p) for t, p in zip(thresholds, bf)},
        buckets_vio={_bucket_key(*t): float(p) for t, p in zip(thresholds, bv)},
        vls_success_rate=float(success),
        latency_ms={
            "vls_request": _stats(r.get("vls_ms") for r in vls),
            "fusion_tick": _stats(r.get("ms") for r in vls),
        },
        n_fused=len(fused),
        n_truth=len(truth),
    )


def evaluate_run_dir(run_dir: str | Path, thresholds=DEFAULT_THRESHOLDS) -> Report:
    run_dir = Path(run_dir)
    diag_path = run_dir / "diagnostics.jsonl"
    diagnostics = [json.loads(line) for line in diag_path.read_text().splitlines()] if diag_path.exists() else []
    vio_path = run_dir / "vio_anchored.tum"
    return cmd_evaluate(
        read_tum(run_dir / "fused.tum"),
        read_tum(run_dir / "groundtruth.tum"),
        read_tum(vio_path) if vio_path.exists() else None,
        diagnostics,
        thresholds,
    )


# ---------------------------------------------------------------------------
# serve / end-to-end


def cmd_serve(map_dir: str | Path, bind: str, cam: CameraModel, cache: int = 64, workers: int = 4) -> VlsServer:
    """Start a TCP service in a background thread and return it."""
    state = init_service(map_dir, cam, cache, LocalizerParams(), 1)
    return VlsServer(state, bind, workers).start()


def cmd_end_to_end(sc: Scenario, out_dir: str | Path | None = None) -> tuple[Report, RunResult]:
    out = Path(out_dir or sc.output_dir)
    map_dir = out / "map"
    built = cmd_build_map(sc, map_dir)
    log.info("map: %d images, %d landmarks (%.1f s)", built.n_images, built.n_landmarks, built.seconds)
    if sc.service.mode == "wire":
        server = cmd_serve(map_dir, sc.service.endpoint, sc.camera, sc.service.cache, sc.service.workers)
        try:
            result = cmd_run_client(sc, endpoint=server.endpoint, mode="wire")
        finally:
            server.shutdown()
            server.state.close()
    else:
        result = cmd_run_client(sc, map_dir=map_dir)
    result.write(out)
    report = cmd_evaluate(result.fused, result.truth, result.vio_anchored, result.diagnostics)
    (out / "report.txt").write_text(report.to_text())
    (out / "report.jsonl").write_text(report.to_jsonl())
    return report, result


__all__ = [
    "DEFAULT_THRESHOLDS",
    "InitializationFailed",
    "MapBuildResult",
    "PassSpec",
    "PgoConfig",
    "Report",
    "RunResult",
    "Scenario",
    "ServiceSpec",
    "ServiceUnavailable",
    "WorldSpec",
    "bundled_scenario",
    "cmd_build_map",
    "cmd_end_to_end",
    "cmd_evaluate",
    "cmd_run_client",
    "cmd_serve",
    "evaluate_run_dir",
    "load_scenario",
]
