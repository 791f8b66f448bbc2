import filecmp
import json
import math
import socket
import subprocess
import sys
from dataclasses import replace

import numpy as np
import pytest

from vlsfusion import cli
from vlsfusion.geometry import NoAssociations, Pose, Trajectory, read_tum, write_tum
from vlsfusion.harness import (
    DEFAULT_THRESHOLDS,
    ServiceUnavailable,
    WorldSpec,
    bundled_scenario,
    cmd_build_map,
    cmd_evaluate,
    cmd_run_client,
    cmd_serve,
    evaluate_run_dir,
    load_scenario,
)
from vlsfusion.mapbuilder import EmptyMap

SMALL = bundled_scenario("small")
NOMINAL = bundled_scenario("nominal")


def free_port() -> int:
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    return port


@pytest.fixture(scope="module")
def small_map(tmp_path_factory):
    sc = load_scenario(SMALL)
    d = tmp_path_factory.mktemp("small") / "map"
    return sc, cmd_build_map(sc, d)


# -- scenario files ----------------------------------------------------------


def test_bundled_scenarios_parse():
    for path in (SMALL, NOMINAL):
        sc = load_scenario(path)
        assert sc.fusion.D_v == 1.0
        assert sc.fusion.pgo.w_q == 10.0 * sc.fusion.pgo.w_t
        assert sc.noise.vls_rot_sigma == pytest.approx(math.radians(0.1))
        assert sc.fusion.R_v_deg == 5.0
    assert load_scenario(NOMINAL).query.length == 500.0


def test_seed_override_reaches_every_stage():
    a, b = load_scenario(SMALL, seed=3), load_scenario(SMALL, seed=4)
    assert a.seed == 3 and a.fusion.seed == 3
    assert all(a.stage_seed(s) != b.stage_seed(s) for s in ("world", "path", "vio", "vls"))
    assert len({a.stage_seed(s) for s in ("world", "path", "map_render", "query_render", "vio", "vls")}) == 6


def test_unknown_key_rejected(tmp_path):
    p = tmp_path / "bad.ini"
    p.write_text("[fusion]\nD_v = 1\nbogus = 2\n")
    with pytest.raises(ValueError, match="bogus"):
        load_scenario(p)
    with pytest.raises(FileNotFoundError):
        load_scenario(tmp_path / "missing.ini")


def test_bundled_name_resolves():
    assert load_scenario("small") == load_scenario(SMALL)


# -- evaluate ----------------------------------------------------------------


def toy_traj(rng, n=50, t0=0.0):
    poses = [Pose(rng.normal(size=4), rng.normal(scale=5, size=3)) for _ in range(n)]
    return Trajectory(tuple(t0 + 0.1 * np.arange(n)), tuple(poses))


def test_evaluate_identical(rng):
    tr = toy_traj(rng)
    rep = cmd_evaluate(tr, tr, tr)
    assert rep.ate_rmse_fused == 0.0 and rep.ate_rmse_vio == 0.0
    assert rep.ate_rmse_fused_aligned < 1e-9
    assert all(v == 100.0 for v in rep.buckets_fused.values())


def test_evaluate_disjoint(rng):
    with pytest.raises(NoAssociations):
        cmd_evaluate(toy_traj(rng), toy_traj(rng, t0=1000.0))


def test_report_matches_bruteforce(rng, tmp_path):
    truth = toy_traj(rng, 80)
    est = Trajectory(truth.timestamps, tuple(
        Pose(p.q, p.t + rng.normal(0, 0.3, 3)) for p in truth.poses))
    write_tum(est, tmp_path / "fused.tum")
    write_tum(truth, tmp_path / "groundtruth.tum")
    rep = evaluate_run_dir(tmp_path)
    a, b = read_tum(tmp_path / "fused.tum"), read_tum(tmp_path / "groundtruth.tum")
    d = np.linalg.norm(a.positions() - b.positions(), axis=1)
    assert rep.ate_rmse_fused == pytest.approx(math.sqrt(np.mean(d**2)), rel=1e-12)
    for (m, _), v in zip(DEFAULT_THRESHOLDS, rep.buckets_fused.values()):
        # rotations are identical, so only the distance matters
        assert v == pytest.approx(100.0 * np.mean(d < m))
    recs = [json.loads(line) for line in rep.to_jsonl().splitlines()]
    assert any(r["metric"] == "ate_rmse_fused" and r["value"] == rep.ate_rmse_fused for r in recs)
    assert all(0.0 <= v <= 100.0 for v in rep.buckets_fused.values())


# -- build-map ---------------------------------------------------------------


def test_map_retention_and_determinism(small_map, tmp_path):
    sc, built = small_map
    assert built.retained_fraction > 0.9
    again = cmd_build_map(sc, tmp_path / "again")
    names = sorted(p.name for p in built.map_dir.iterdir())
    assert names == sorted(p.name for p in again.map_dir.iterdir())
    match, mismatch, errors = filecmp.cmpfiles(built.map_dir, again.map_dir, names, shallow=False)
    assert not mismatch and not errors


def test_zero_landmark_world(tmp_path):
    sc = replace(load_scenario(SMALL), world=WorldSpec(n_landmarks=0, extent=(40.0, 40.0, 5.0)))
    with pytest.raises(EmptyMap):
        cmd_build_map(sc, tmp_path / "m")


# -- run-client --------------------------------------------------------------


def test_simulated_run_deterministic_and_initializes_early():
    sc = load_scenario(NOMINAL, seed=7)
    a = cmd_run_client(sc, mode="simulated")
    b = cmd_run_client(sc, mode="simulated")
    assert np.array_equal(a.fused.positions(), b.fused.positions())
    assert np.array_equal(a.fused.quaternions(), b.fused.quaternions())
    first = next(i for i, r in enumerate(a.diagnostics) if r.get("event") == "initialized")
    assert first < 10
    assert len(a.fused) == len(a.truth)


def test_service_down_aborts_cleanly():
    sc = load_scenario(SMALL)
    with pytest.raises(ServiceUnavailable):
        cmd_run_client(sc, endpoint=f"127.0.0.1:{free_port()}", mode="wire")


def test_cli_service_down_exit_code(capsys):
    rc = cli.main(["run-client", "--config", str(SMALL), "--endpoint", f"127.0.0.1:{free_port()}",
                   "--out", "/nonexistent/never-written"])
    assert rc == 2
    assert capsys.readouterr().err.startswith("error:")


@pytest.mark.slow
def test_cli_pipeline_and_wire_equals_inprocess(small_map, tmp_path, capsys):
    sc, built = small_map
    out = tmp_path / "run"
    assert cli.main(["run-client", "--config", str(SMALL), "--map", str(built.map_dir), "--out", str(out)]) == 0
    assert cli.main(["evaluate", str(out), "--jsonl"]) == 0
    recs = [json.loads(line) for line in capsys.readouterr().out.splitlines() if line.startswith("{")]
    ate = next(r["value"] for r in recs if r["metric"] == "ate_rmse_fused")
    assert ate < 0.2

    server = cmd_serve(built.map_dir, "127.0.0.1:0", sc.camera, sc.service.cache, sc.service.workers)
    try:
        wire = cmd_run_client(sc, endpoint=server.endpoint, mode="wire")
    finally:
        server.shutdown()
        server.state.close()
    inproc = read_tum(out / "fused.tum")
    wire.write(tmp_path / "wire")
    assert filecmp.cmp(out / "fused.tum", tmp_path / "wire" / "fused.tum", shallow=False)
    assert len(inproc) == len(wire.fused)


def test_cli_module_help():
    res = subprocess.run([sys.executable, "-m", "vlsfusion", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("build-map", "serve", "run-client", "evaluate", "end-to-end"):
        assert cmd in res.stdout
