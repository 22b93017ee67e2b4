"""Problem specifications: YAML config, builtin application problems, evaluation."""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .ik import IkOptions
from .kinematics import JointDesign, LoadModel, RobotDesign
from .optimizer import OptimizerParams
from .reachability import (DESK_FK_SAMPLES, PAPER_FK_SAMPLES, SamplingBudget, TargetSet, hybrid_reachability,
                           min_torque_reachability)
from . import workspace as ws

OBJECTIVES = ("total_length", "total_torque")
BUILTINS = ("mobile_platform", "deep_sea", "spot_welding")
LENGTH_KINDS = ("b", "s", "t")

# design-variable bounds shared by all three applications (cm)
PAPER_BOUNDS = {
    "l_b1": (4.0, 30.0), "l_s1": (2.675, 32.1),
    "l_b2": (4.0, 30.0), "l_s2": (2.173, 26.076),
    "l_b3": (4.0, 30.0), "l_s3": (2.173, 26.076), "l_t3": (36.0, 60.0),
}
PAPER_MIN_RADII = (10.22, 8.3, 8.3)
PAPER_FIXED = {"l_t1": 0.0, "l_t2": 0.0}

SCALES = {
    # 1e5 FK samples badly undercount a voxel workspace, so desk scale refines
    # any design with IK and stops once it is certainly infeasible
    # and spends a smaller budget on torque refinement
    "desk": {"sampling": {"fk_samples": DESK_FK_SAMPLES, "refine_window": [0.0, None], "early_exit": True},
             "ik": {"torque_outer_iterations": 4, "torque_inner_iterations": 20},
             "optimizer": {"population_size": 100}},
    "paper": {"sampling": {"fk_samples": PAPER_FK_SAMPLES, "refine_window": [0.9, None], "early_exit": False},
              "ik": {"torque_outer_iterations": 12, "torque_inner_iterations": 60},
              "optimizer": {"population_size": 100}},
}


class ConfigError(ValueError):
    """Invalid problem config; ``field`` names the offending key path."""

    def __init__(self, message: str, field: str = "", line: int | None = None):
        where = field + (f" (line {line})" if line is not None else "")
        super().__init__(f"{where}: {message}" if where else message)
        self.field = field
        self.line = line


@dataclass
class Variable:
    name: str
    lower: float
    upper: float


@dataclass
class RobotTemplate:
    base_position: list
    base_tangent: list
    base_normal: list
    min_bend_radius: list
    variables: list  # of Variable
    fixed: dict = field(default_factory=dict)

    @property
    def n_joints(self) -> int:
        return len(self.min_bend_radius)

    @property
    def lower(self) -> np.ndarray:
        return np.array([v.lower for v in self.variables])

    @property
    def upper(self) -> np.ndarray:
        return np.array([v.upper for v in self.variables])

    @property
    def names(self) -> list[str]:
        return [v.name for v in self.variables]

    def design(self, x) -> RobotDesign:
        values = dict(self.fixed)
        values.update(zip(self.names, (float(v) for v in x)))
        joints = [JointDesign(values[f"l_b{i}"], values[f"l_s{i}"], values[f"l_t{i}"], self.min_bend_radius[i - 1])
                  for i in range(1, self.n_joints + 1)]
        return RobotDesign(self.base_position, self.base_tangent, self.base_normal, joints)


@dataclass
class WorkspaceSource:
    builtin: str | None = None
    stl: str | None = None
    points: str | None = None
    voxel_size: float = 3.0


@dataclass
class SamplingSpec:
    fk_samples: int = DESK_FK_SAMPLES
    refine_window: list = field(default_factory=lambda: [0.9, None])
    early_exit: bool = False


@dataclass
class IkSpec:
    damping: float = 0.1
    max_iterations: int = 200
    restarts: int = 10
    step_limit: float = 0.5
    stall_iterations: int = 15
    min_progress: float = 0.01
    torque_outer_iterations: int = 12
    torque_inner_iterations: int = 60


@dataclass
class LoadSpec:
    payload_mass: float = 1.0
    joint_masses: list = field(default_factory=lambda: [1.0, 1.0, 1.0])
    gravity: list = field(default_factory=lambda: [0.0, 0.0, -9.81])


@dataclass
class ProblemSpec:
    name: str
    robot: RobotTemplate
    workspace: WorkspaceSource
    alpha: float = 0.95
    epsilon: float = 1.0
    objective: str = "total_length"
    load: LoadSpec = field(default_factory=LoadSpec)
    sampling: SamplingSpec = field(default_factory=SamplingSpec)
    ik: IkSpec = field(default_factory=IkSpec)
    optimizer: OptimizerParams = field(default_factory=OptimizerParams)
    base_dir: str = "."

    def validate(self) -> "ProblemSpec":
        if not 0 < self.alpha <= 1:
            raise ConfigError("must be in (0, 1]", "alpha")
        if not self.epsilon > 0:
            raise ConfigError("must be > 0", "epsilon")
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"must be one of {OBJECTIVES}", "objective")
        w = self.workspace
        sources = [s for s in (w.builtin, w.stl, w.points) if s is not None]
        if len(sources) != 1:
            raise ConfigError("exactly one of builtin, stl, points is required", "workspace")
        if w.builtin is not None and w.builtin not in BUILTINS:
            raise ConfigError(f"unknown builtin {w.builtin!r}", "workspace.builtin")
        for key in ("stl", "points"):
            path = getattr(w, key)
            if path is not None and not self._path(path).is_file():
                raise ConfigError(f"file not found: {path}", f"workspace.{key}")
        if not w.voxel_size > 0:
            raise ConfigError("must be > 0", "workspace.voxel_size")
        if self.objective == "total_torque" and (w.stl is not None or w.builtin in ("mobile_platform", "deep_sea")):
            raise ConfigError("total_torque needs a point-list workspace", "objective")
        r = self.robot
        if not r.variables:
            raise ConfigError("no design variables", "robot.variables")
        for v in r.variables:
            if not v.lower <= v.upper:
                raise ConfigError(f"lower > upper for {v.name}", "robot.variables")
        needed = {f"l_{k}{i}" for i in range(1, r.n_joints + 1) for k in LENGTH_KINDS}
        given = set(r.names) | set(r.fixed)
        if set(r.names) & set(r.fixed):
            raise ConfigError(f"both variable and fixed: {sorted(set(r.names) & set(r.fixed))}", "robot")
        if needed != given:
            raise ConfigError(f"missing {sorted(needed - given)} unknown {sorted(given - needed)}", "robot")
        if len(self.load.joint_masses) != r.n_joints:
            raise ConfigError("need one mass per joint", "load.joint_masses")
        try:
            r.design(r.lower)
            self.sampling_budget(0)
            self.ik_options(0)
            self.load_model()
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(str(exc), "robot") from None
        return self

    def _path(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else Path(self.base_dir) / p

    # -- runtime objects ------------------------------------------------------

    def load_model(self) -> LoadModel:
        return LoadModel(self.load.payload_mass, list(self.load.joint_masses), tuple(self.load.gravity))

    def sampling_budget(self, seed: int) -> SamplingBudget:
        lo, hi = self.sampling.refine_window
        return SamplingBudget(int(self.sampling.fk_samples), (float(lo), None if hi is None else float(hi)), seed,
                              bool(self.sampling.early_exit))

    def ik_options(self, seed: int) -> IkOptions:
        return IkOptions(tolerance=self.epsilon, damping=self.ik.damping, max_iterations=self.ik.max_iterations,
                         restarts=self.ik.restarts, step_limit=self.ik.step_limit,
                         stall_iterations=self.ik.stall_iterations, min_progress=self.ik.min_progress,
                         torque_outer_iterations=self.ik.torque_outer_iterations,
                         torque_inner_iterations=self.ik.torque_inner_iterations, seed=seed)

    def targets(self) -> TargetSet:
        w = self.workspace
        if w.points is not None or w.builtin == "spot_welding":
            pts = ws.spot_welding_points() if w.points is None else ws.read_points_csv(self._path(w.points))
            return TargetSet(pts, self.epsilon, self.alpha)
        if w.builtin is not None:
            mesh = ws.mobile_platform_mesh() if w.builtin == "mobile_platform" else ws.deep_sea_mesh()
        else:
            mesh = ws.read_stl(self._path(w.stl))
        return ws.grid_to_targets(ws.voxelize_mesh(mesh, w.voxel_size), self.epsilon, self.alpha)

    def design_problem(self, seed: int = 0) -> "DesignProblem":
        return DesignProblem(self.robot, self.targets(), self.objective, self.alpha,
                             self.sampling_budget(seed), self.ik_options(seed), self.load_model())

    def with_scale(self, scale: str) -> "ProblemSpec":
        if scale not in SCALES:
            raise ConfigError(f"unknown scale {scale!r}", "scale")
        out = copy.deepcopy(self)
        for section, values in SCALES[scale].items():
            for key, value in values.items():
                setattr(getattr(out, section), key, copy.deepcopy(value))
        return out

    # -- serialization --------------------------------------------------------

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        return d

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


def _section(cls, data, path):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError("expected a mapping", path)
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(str(exc).split("__init__() ")[-1], path) from None


def spec_from_dict(data: dict, base_dir=".") -> ProblemSpec:
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping")
    data = copy.deepcopy(data)
    known = {"name", "robot", "workspace", "alpha", "epsilon", "objective", "load", "sampling", "ik", "optimizer"}
    extra = set(data) - known
    if extra:
        raise ConfigError(f"unknown keys {sorted(extra)}")
    if "name" not in data or "robot" not in data or "workspace" not in data:
        raise ConfigError("name, robot and workspace are required")
    robot = data["robot"]
    if not isinstance(robot, dict):
        raise ConfigError("expected a mapping", "robot")
    try:
        variables = [Variable(v["name"], float(v["lower"]), float(v["upper"])) for v in robot.get("variables", [])]
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"each variable needs name, lower, upper ({exc})", "robot.variables") from None
    robot = dict(robot, variables=variables)
    template = _section(RobotTemplate, robot, "robot")
    opt = data.get("optimizer") or {}
    try:
        optimizer = OptimizerParams(**opt)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc), "optimizer") from None
    try:
        spec = ProblemSpec(
            name=str(data["name"]), robot=template,
            workspace=_section(WorkspaceSource, data["workspace"], "workspace"),
            alpha=float(data.get("alpha", 0.95)), epsilon=float(data.get("epsilon", 1.0)),
            objective=data.get("objective", "total_length"),
            load=_section(LoadSpec, data.get("load"), "load"),
            sampling=_section(SamplingSpec, data.get("sampling"), "sampling"),
            ik=_section(IkSpec, data.get("ik"), "ik"),
            optimizer=optimizer, base_dir=str(base_dir))
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None
    return spec.validate()


def _key_line(text: str, field_path: str) -> int | None:
    """Best-effort source line of the first component of a key path."""
    key = field_path.split(".")[0].split(" ")[0]
    if not key:
        return None
    for i, line in enumerate(text.splitlines(), 1):
        if line.lstrip().startswith(key + ":"):
            return i
    return None


def load_spec(path) -> ProblemSpec:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"YAML syntax error: {getattr(exc, 'problem', exc)}",
                          line=None if mark is None else mark.line + 1) from None
    try:
        return spec_from_dict(data, base_dir=path.parent)
    except ConfigError as exc:
        if exc.line is None and exc.field:
            raise ConfigError(str(exc).split(": ", 1)[-1], exc.field, _key_line(text, exc.field)) from None
        raise


def builtin_problem(name: str) -> ProblemSpec:
    """Parametric stand-ins for the three application problems."""
    if name not in BUILTINS:
        raise ConfigError(f"unknown builtin problem {name!r}; choose from {BUILTINS}", "workspace.builtin")
    variables = [Variable(k, *v) for k, v in PAPER_BOUNDS.items()]
    pose = {
        "mobile_platform": ([0.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]),
        "deep_sea": ([0.0, 0.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]),
        "spot_welding": ([75.0, 45.0, -70.0], [-1.0, 0.0, 0.0], [0.0, 0.0, 1.0]),
    }[name]
    robot = RobotTemplate(*pose, list(PAPER_MIN_RADII), variables, dict(PAPER_FIXED))
    if name == "spot_welding":
        return ProblemSpec(name, robot, WorkspaceSource(builtin=name), alpha=1.0, objective="total_torque",
                           optimizer=OptimizerParams(max_iterations=30)).validate()
    return ProblemSpec(name, robot, WorkspaceSource(builtin=name)).validate()


@dataclass
class DesignProblem:
    """Optimizer-facing problem: x -> (objective, theta). Picklable for process pools."""
    robot: RobotTemplate
    targets: TargetSet
    objective_kind: str
    alpha: float
    budget: SamplingBudget
    ik: IkOptions
    load: LoadModel

    @property
    def lower(self):
        return self.robot.lower

    @property
    def upper(self):
        return self.robot.upper

    @property
    def cheap_objective(self) -> bool:
        return self.objective_kind == "total_length"

    def objective(self, x) -> float:
        if not self.cheap_objective:
            raise ValueError("torque objective needs a full evaluation")
        return float(np.sum(x))

    def report(self, x):
        design = self.robot.design(x)
        if self.objective_kind == "total_length":
            return hybrid_reachability(design, self.targets, self.budget, self.ik)
        return min_torque_reachability(design, self.targets, self.load, self.ik)

    def evaluate(self, x):
        rep = self.report(x)
        f = float(np.sum(x)) if self.cheap_objective else rep.total_torque
        return f, rep.theta
