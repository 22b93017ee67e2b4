import json

import numpy as np
import pytest
import yaml

from ccdesign.cli import main
from ccdesign.ik import ee_q, random_q
from ccdesign.problems import builtin_problem, load_spec
from ccdesign.workspace import box_mesh, encode_stl, write_points_csv

MID = [17.0, 17.0, 17.0, 14.0, 17.0, 14.0, 48.0]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def small_problem(tmp_path):
    """Point-list length problem with a handful of targets and tiny budgets."""
    spec = builtin_problem("mobile_platform")
    d = spec.to_dict()
    design = spec.robot.design(np.array(MID))
    reachable = ee_q(design, random_q(design, np.random.default_rng(0), 3))
    write_points_csv(tmp_path / "pts.csv", np.vstack([reachable, [[0, 300, 0.0]]]))
    d["workspace"] = {"points": "pts.csv"}
    d["alpha"] = 0.75
    d["sampling"] = {"fk_samples": 2000, "refine_window": [0.0, None], "early_exit": False}
    d["optimizer"].update(population_size=6, max_iterations=3)
    path = tmp_path / "small.yaml"
    path.write_text(yaml.safe_dump(d, sort_keys=False))
    return path


def test_config_prints_yaml(capsys, tmp_path):
    code, out, _ = run(capsys, "config", "spot_welding")
    assert code == 0
    (tmp_path / "w.yaml").write_text(out)
    assert load_spec(tmp_path / "w.yaml").to_dict() == builtin_problem("spot_welding").to_dict()


def test_fk_straight(capsys):
    code, out, _ = run(capsys, "fk", "mobile_platform", "--design", *MID)
    assert code == 0
    tip = json.loads(out)["end_effector"]
    assert np.allclose(tip, [0, sum(MID), 0])


def test_ik_reachable_and_unreachable(capsys):
    code, out, _ = run(capsys, "ik", "mobile_platform", "--design", *MID, "--target", 20, 100, 10)
    r = json.loads(out)
    assert code == 0 and r["converged"] and r["residual"] <= 1.0
    code, out, _ = run(capsys, "ik", "mobile_platform", "--design", *MID, "--target", 0, 500, 0)
    r = json.loads(out)
    assert code == 0 and not r["converged"]


def test_ik_min_torque_zero_gravity(capsys):
    code, out, _ = run(capsys, "ik", "mobile_platform", "--design", *MID, "--target", 20, 100, 10,
                       "--min-torque", "--gravity", 0, 0, 0)
    r = json.loads(out)
    assert code == 0 and r["converged"] and r["objective"] == 0.0


def test_voxelize(capsys, tmp_path):
    stl = tmp_path / "cube.stl"
    stl.write_bytes(encode_stl(box_mesh([0, 0, 0], [9, 9, 9])))
    code, out, _ = run(capsys, "voxelize", stl, "--voxel-size", 3, "--out", tmp_path / "c.csv")
    assert code == 0 and out.startswith("27 occupied")
    assert len((tmp_path / "c.csv").read_text().splitlines()) == 28
    assert run(capsys, "voxelize", stl, "--voxel-size", 0)[0] == 2
    bad = tmp_path / "bad.stl"
    bad.write_bytes(b"\0" * 80 + b"\5\0\0\0")
    assert run(capsys, "voxelize", bad)[0] == 2


def test_reach_outputs(capsys, tmp_path, small_problem):
    out_dir = tmp_path / "reach"
    code, out, _ = run(capsys, "reach", small_problem, "--design", *MID, "--window", 0, 1, "--out-dir", out_dir)
    r = json.loads(out)
    assert code == 0 and r["theta"] == 0.75 and r["n_targets"] == 4
    assert (out_dir / "report.json").is_file()
    assert len((out_dir / "unreached.csv").read_text().splitlines()) == 2


def test_reach_too_short_is_zero(capsys, small_problem):
    # every target is farther than the longest possible reach
    lo = builtin_problem("mobile_platform").robot.lower
    code, out, _ = run(capsys, "reach", small_problem, "--design", *lo, "--window", 0, 1)
    assert code == 0 and json.loads(out)["theta"] == 0.0


def test_reach_seeds_share_ik_confirmations(capsys, small_problem):
    a = json.loads(run(capsys, "reach", small_problem, "--design", *MID, "--seed", 1, "--window", 0, 1)[1])
    b = json.loads(run(capsys, "reach", small_problem, "--design", *MID, "--seed", 2, "--window", 0, 1)[1])
    assert a["theta"] == b["theta"]


def test_optimize_repeats_deterministic(capsys, tmp_path, small_problem):
    for d in ("a", "b"):
        code, _, _ = run(capsys, "optimize", small_problem, "--repeats", 2, "--seed", 7, "--out-dir", tmp_path / d)
        assert code == 0
    for seed in (7, 8):
        name = f"mobile_platform_eda_seed{seed}"
        assert (tmp_path / "a" / f"{name}.csv").read_bytes() == (tmp_path / "b" / f"{name}.csv").read_bytes()
        res = json.loads((tmp_path / "a" / f"{name}.json").read_text())
        assert res["seed"] == seed and res["params"]["population_size"] == 6
        if res["feasible"]:
            x = np.array(list(res["x"].values()))
            spec = builtin_problem("mobile_platform")
            assert np.all(x >= spec.robot.lower) and np.all(x <= spec.robot.upper) and res["theta"] >= 0.75


def test_optimize_workers_do_not_change_log(capsys, tmp_path, small_problem):
    for w in (1, 2):
        run(capsys, "optimize", small_problem, "--algorithm", "ga", "--workers", w, "--out-dir", tmp_path / str(w))
    name = "mobile_platform_ga_seed0.csv"
    assert (tmp_path / "1" / name).read_bytes() == (tmp_path / "2" / name).read_bytes()


def test_select_generation_rejected_for_torque(capsys, tmp_path):
    code, _, err = run(capsys, "optimize", "spot_welding", "--algorithm", "ga", "--select-generation",
                       "--out-dir", tmp_path)
    assert code == 2 and "select generation" in err


def test_config_errors_exit_2(capsys, tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("name: x\nalpha: 3\n")
    code, _, err = run(capsys, "optimize", bad, "--out-dir", tmp_path)
    assert code == 2 and "error" in err
    assert run(capsys, "optimize", "no_such_problem")[0] == 2
    assert run(capsys, "fk", "mobile_platform", "--design", 1, 2)[0] == 2
