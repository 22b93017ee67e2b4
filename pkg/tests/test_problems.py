import numpy as np
import pytest
import yaml

from ccdesign.problems import (BUILTINS, PAPER_BOUNDS, ConfigError, builtin_problem, load_spec, spec_from_dict)
from ccdesign.workspace import box_mesh, encode_stl, write_points_csv


@pytest.mark.parametrize("name", BUILTINS)
def test_builtin_roundtrip(name, tmp_path):
    spec = builtin_problem(name)
    path = tmp_path / "p.yaml"
    path.write_text(spec.dump())
    again = load_spec(path)
    assert again.to_dict() == spec.to_dict()
    assert again.dump() == spec.dump()


def test_paper_defaults_preset():
    spec = builtin_problem("mobile_platform")
    p = spec.optimizer
    assert (p.population_size, p.truncation_rate, p.penalty, p.max_iterations) == (100, 0.5, 0.33, 20)
    assert (p.ga.crossover_rate, p.ga.mutation_rate, p.select_max_trials) == (0.9, 0.1, 10000)
    assert spec.alpha == 0.95 and spec.epsilon == 1.0 and spec.workspace.voxel_size == 3.0
    weld = builtin_problem("spot_welding")
    assert weld.alpha == 1.0 and weld.optimizer.max_iterations == 30 and weld.objective == "total_torque"
    assert np.allclose(weld.robot.base_position, [75, 45, -70]) and np.allclose(weld.robot.base_tangent, [-1, 0, 0])


def test_bounds_and_radii():
    spec = builtin_problem("deep_sea")
    assert dict(zip(spec.robot.names, zip(spec.robot.lower, spec.robot.upper))) == PAPER_BOUNDS
    d = spec.robot.design(spec.robot.lower)
    assert np.allclose([1 / j.max_curvature for j in d.joints], [10.22, 8.3, 8.3])
    assert d.joints[0].top_len == 0 and d.joints[1].top_len == 0


def test_scales():
    desk = builtin_problem("mobile_platform").with_scale("desk")
    paper = builtin_problem("mobile_platform").with_scale("paper")
    assert desk.sampling.fk_samples == 100_000 and paper.sampling.fk_samples == 3_000_000
    assert paper.sampling.refine_window == [0.9, None] and not paper.sampling.early_exit
    assert desk.optimizer.population_size == 100
    assert (desk.ik.torque_outer_iterations, desk.ik.torque_inner_iterations) == (4, 20)
    assert paper.ik_options(0).torque_outer_iterations == 12
    with pytest.raises(ConfigError):
        desk.with_scale("huge")


def base_dict():
    return builtin_problem("mobile_platform").to_dict()


def test_unknown_key_rejected():
    d = base_dict()
    d["colour"] = "red"
    with pytest.raises(ConfigError):
        spec_from_dict(d)


@pytest.mark.parametrize("key,value,field", [
    ("alpha", 1.5, "alpha"),
    ("epsilon", 0, "epsilon"),
    ("objective", "speed", "objective"),
])
def test_bad_scalars(key, value, field):
    d = base_dict()
    d[key] = value
    with pytest.raises(ConfigError) as e:
        spec_from_dict(d)
    assert e.value.field == field


def test_torque_needs_points():
    d = base_dict()
    d["objective"] = "total_torque"
    with pytest.raises(ConfigError):
        spec_from_dict(d)


def test_missing_file(tmp_path):
    d = base_dict()
    d["workspace"] = {"stl": "nope.stl"}
    with pytest.raises(ConfigError) as e:
        spec_from_dict(d, tmp_path)
    assert e.value.field == "workspace.stl"


def test_missing_length_variable():
    d = base_dict()
    d["robot"]["variables"] = d["robot"]["variables"][:-1]
    with pytest.raises(ConfigError):
        spec_from_dict(d)


def test_line_number_reported(tmp_path):
    d = base_dict()
    d["alpha"] = 2.0
    path = tmp_path / "bad.yaml"
    text = yaml.safe_dump(d, sort_keys=False)
    path.write_text(text)
    with pytest.raises(ConfigError) as e:
        load_spec(path)
    want = [i for i, line in enumerate(text.splitlines(), 1) if line.startswith("alpha:")][0]
    assert e.value.line == want and "line" in str(e.value)


def test_yaml_syntax_error(tmp_path):
    path = tmp_path / "broken.yaml"
    path.write_text("name: x\nrobot: [1, 2\n")
    with pytest.raises(ConfigError) as e:
        load_spec(path)
    assert e.value.line is not None


def test_stl_and_points_workspaces(tmp_path):
    (tmp_path / "box.stl").write_bytes(encode_stl(box_mesh([0, 30, 0], [9, 39, 9])))
    d = base_dict()
    d["workspace"] = {"stl": "box.stl", "voxel_size": 3.0}
    spec = spec_from_dict(d, tmp_path)
    t = spec.targets()
    assert len(t) == 27 and t.voxel_size == 3.0
    write_points_csv(tmp_path / "pts.csv", np.array([[0, 50, 0], [5, 60, 0.0]]))
    d["workspace"] = {"points": "pts.csv"}
    d["objective"] = "total_torque"
    spec = spec_from_dict(d, tmp_path)
    t = spec.targets()
    assert len(t) == 2 and t.voxel_size is None and t.tolerance == spec.epsilon


def test_design_problem_objective():
    spec = builtin_problem("mobile_platform")
    prob = spec.design_problem(0)
    x = spec.robot.lower.copy()
    assert prob.objective(x) == pytest.approx(x.sum())
    assert prob.cheap_objective
    assert not builtin_problem("spot_welding").design_problem(0).cheap_objective
