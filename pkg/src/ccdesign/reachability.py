"""Workspace reachability: FK Monte-Carlo sampling refined by per-point IK."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .ik import IkOptions, solve_min_torque_batch, solve_position_batch
from .kinematics import Configuration, JointState, LoadModel, RobotDesign, base_stack, end_effector_batch
from .rng import rng_stream

FK_BATCH = 16384
PAPER_FK_SAMPLES = 3_000_000
DESK_FK_SAMPLES = 100_000
DEFAULT_WINDOW_LO = 0.9
REFINE_CHUNK = 256


@dataclass
class TargetSet:
    """Target points (cm) with reach tolerance and required reached fraction.

    When ``voxel_size`` is set the points are voxel centers on the lattice
    anchored at ``voxel_origin`` and the FK stage tests voxel containment;
    otherwise it tests the ``tolerance`` ball around each point.
    """
    points: np.ndarray
    tolerance: float = 1.0
    required_fraction: float = 0.95
    voxel_size: float | None = None
    voxel_origin: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        if self.points.size == 0:
            raise ValueError("target set is empty")
        if self.points.shape[1] != 3 or not np.all(np.isfinite(self.points)):
            raise ValueError("targets must be finite 3-vectors")
        if not self.tolerance > 0:
            raise ValueError("tolerance must be > 0")
        if not 0 < self.required_fraction <= 1:
            raise ValueError("required_fraction must be in (0, 1]")
        if self.voxel_size is not None:
            if not self.voxel_size > 0:
                raise ValueError("voxel_size must be > 0")
            self.voxel_origin = (np.zeros(3) if self.voxel_origin is None
                                 else np.asarray(self.voxel_origin, dtype=float))

    def __len__(self):
        return len(self.points)


@dataclass
class SamplingBudget:
    fk_samples: int = DESK_FK_SAMPLES
    # None for the upper bound means "the target set's required fraction"
    refine_window: tuple[float, float | None] = (DEFAULT_WINDOW_LO, None)
    seed: int = 0
    # stop the IK stage once theta can no longer reach the required fraction;
    # theta is then a lower bound (report.complete is False)
    early_exit: bool = False

    def __post_init__(self):
        if self.fk_samples <= 0:
            raise ValueError("fk_samples must be > 0")
        lo, hi = self.refine_window
        if not 0 <= lo <= (1 if hi is None else hi) <= 1:
            raise ValueError(f"invalid refine window {self.refine_window}")

    def window(self, alpha: float) -> tuple[float, float]:
        lo, hi = self.refine_window
        return float(lo), float(alpha if hi is None else hi)


@dataclass
class ReachabilityReport:
    theta: float
    reached_mask: np.ndarray
    fk_theta: float
    ik_checked: int
    per_point_torque: np.ndarray | None = None
    ik_confirmed: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    complete: bool = True

    @property
    def total_torque(self) -> float:
        if self.per_point_torque is None:
            return float("nan")
        return float(np.sum(self.per_point_torque))

    def to_dict(self) -> dict:
        out = {
            "theta": self.theta,
            "fk_theta": self.fk_theta,
            "n_targets": int(self.reached_mask.size),
            "n_reached": int(self.reached_mask.sum()),
            "ik_checked": self.ik_checked,
            "ik_confirmed": [int(i) for i in self.ik_confirmed],
            "complete": self.complete,
        }
        if self.per_point_torque is not None:
            out["per_point_torque"] = [float(v) for v in self.per_point_torque]
            out["total_torque"] = self.total_torque
        return out


def _theta(mask: np.ndarray) -> float:
    return int(mask.sum()) / mask.size


def sample_configuration(design: RobotDesign, rng: np.random.Generator) -> Configuration:
    """Uniform curvature in [0, 1/R_min] and rotation in [0, 2*pi] per joint."""
    kmax = design.arrays()[3]
    u = rng.random(2 * design.n_joints)
    return Configuration(tuple(JointState(float(u[2 * i] * kmax[i]), float(u[2 * i + 1] * 2 * np.pi))
                               for i in range(design.n_joints)))


def fk_uniforms(budget: SamplingBudget, n_joints: int):
    """Yield the uniform draws of the FK stage batch by batch.

    Batch ``b`` always comes from stream ``(seed, "fk", b)`` and a partial
    last batch is a prefix of the full one, so a larger budget extends the
    sample sequence rather than replacing it.
    """
    done = 0
    b = 0
    while done < budget.fk_samples:
        n = min(FK_BATCH, budget.fk_samples - done)
        yield rng_stream(budget.seed, "fk", b).random((n, 2 * n_joints))
        done += n
        b += 1


def _voxel_lookup(targets: TargetSet):
    cells = np.floor((targets.points - targets.voxel_origin) / targets.voxel_size).astype(np.int64)
    lo = cells.min(axis=0)
    dims = cells.max(axis=0) - lo + 1
    lookup = np.full(tuple(dims), -1, dtype=np.int64)
    lookup[tuple((cells - lo).T)] = np.arange(len(cells))
    origin = targets.voxel_origin + lo * targets.voxel_size
    return origin, lookup


def _ball_buckets(targets: TargetSet):
    size = targets.tolerance
    origin = targets.points.min(axis=0) - size
    cells = np.floor((targets.points - origin) / size).astype(np.int64)
    dims = cells.max(axis=0) + 2
    flat = np.ravel_multi_index(tuple(cells.T), tuple(dims))
    order = np.argsort(flat, kind="stable")
    counts = np.bincount(flat, minlength=int(np.prod(dims)))
    start = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    return origin, size, dims.astype(np.int64), start, order.astype(np.int64)


def estimate_reachability_fk(design: RobotDesign, targets: TargetSet, budget: SamplingBudget) -> np.ndarray:
    """Flag targets hit by at least one sampled end-effector position.

    Tips are hashed into the voxel lattice (grid targets) or into tolerance
    sized buckets (point targets); there is no all-pairs comparison.
    """
    hit = np.zeros(len(targets), dtype=np.bool_)
    lb, ls, lt, kmax = design.arrays()
    base = base_stack(design)
    if targets.voxel_size is not None:
        origin, lookup = _voxel_lookup(targets)
        for u in fk_uniforms(budget, design.n_joints):
            _kernels.mark_voxels(base, u, kmax, lb, ls, lt, origin, float(targets.voxel_size), lookup, hit)
            if hit.all():
                break
    else:
        origin, size, dims, start, items = _ball_buckets(targets)
        for u in fk_uniforms(budget, design.n_joints):
            _kernels.mark_balls(base, u, kmax, lb, ls, lt, origin, float(size), dims, start, items,
                                targets.points, float(targets.tolerance), hit)
            if hit.all():
                break
    return hit


def _cloud_centroid(design: RobotDesign, budget: SamplingBudget) -> np.ndarray:
    u = next(fk_uniforms(budget, design.n_joints))
    kmax = design.arrays()[3]
    tips = end_effector_batch(design, u[:, 0::2] * kmax, u[:, 1::2] * 2 * np.pi)
    return tips.mean(axis=0)


def refine_with_ik(design: RobotDesign, targets: TargetSet, reached_mask, opts: IkOptions | None = None,
                   budget: SamplingBudget | None = None, max_failures: int | None = None) -> np.ndarray:
    """Run position IK on every unreached target and flag the ones it reaches.

    Reached entries are never cleared. Each target's IK stream is keyed by
    its index, so a point's outcome does not depend on which points are
    refined together. With ``max_failures`` the pass stops after the chunk
    in which more than that many points have failed.
    """
    return _refine(design, targets, reached_mask, opts, budget, max_failures)[0]


def _refine(design, targets, reached_mask, opts, budget, max_failures):
    mask = np.array(reached_mask, dtype=bool, copy=True)
    if mask.shape != (len(targets),):
        raise ValueError("mask length does not match targets")
    todo = np.flatnonzero(~mask)
    if todo.size == 0:
        return mask, True
    opts = opts or IkOptions(tolerance=targets.tolerance)
    # the tip never leaves the ball of radius total_length around the base
    dist = np.linalg.norm(targets.points[todo] - design.base_position, axis=1)
    inside = dist <= design.total_length + opts.tolerance
    failures = int((~inside).sum())
    todo = todo[inside]
    if todo.size == 0:
        return mask, True
    if max_failures is not None and failures > max_failures:
        return mask, False
    # nearest-to-the-cloud first
    centroid = _cloud_centroid(design, budget or SamplingBudget())
    todo = todo[np.argsort(np.linalg.norm(targets.points[todo] - centroid, axis=1), kind="stable")]
    step = len(todo) if max_failures is None else REFINE_CHUNK
    for start in range(0, len(todo), step):
        part = todo[start:start + step]
        _, res = solve_position_batch(design, targets.points[part], opts, indices=part)
        ok = res <= opts.tolerance
        mask[part[ok]] = True
        failures += int((~ok).sum())
        if max_failures is not None and failures > max_failures and start + step < len(todo):
            return mask, False
    return mask, True


def allowed_failures(n: int, alpha: float) -> int:
    """Largest number of unreached targets that still gives theta >= alpha."""
    k = int(np.floor(n * (1.0 - alpha)))
    while (n - k - 1) / n >= alpha:
        k += 1
    while k > 0 and (n - k) / n < alpha:
        k -= 1
    return k


def hybrid_reachability(design: RobotDesign, targets: TargetSet, budget: SamplingBudget | None = None,
                        opts: IkOptions | None = None) -> ReachabilityReport:
    budget = budget or SamplingBudget()
    opts = opts or IkOptions(tolerance=targets.tolerance)
    fk_mask = estimate_reachability_fk(design, targets, budget)
    fk_theta = _theta(fk_mask)
    lo, hi = budget.window(targets.required_fraction)
    mask = fk_mask
    checked = 0
    complete = True
    if lo <= fk_theta < hi:
        checked = int((~fk_mask).sum())
        limit = allowed_failures(len(targets), targets.required_fraction) if budget.early_exit else None
        mask, complete = _refine(design, targets, fk_mask, opts, budget, limit)
    return ReachabilityReport(_theta(mask), mask, fk_theta, checked,
                              ik_confirmed=np.flatnonzero(mask & ~fk_mask), complete=complete)


def min_torque_reachability(design: RobotDesign, targets: TargetSet, load: LoadModel,
                            opts: IkOptions | None = None) -> ReachabilityReport:
    """Torque-minimizing IK at every target.

    ``per_point_torque`` holds ``sum_i ||tau_i||`` of each target's solution
    (of the best attempt for unreachable ones).
    """
    opts = opts or IkOptions(tolerance=targets.tolerance)
    _, _, _, torque_sum, converged = solve_min_torque_batch(design, targets.points, load, opts)
    return ReachabilityReport(_theta(converged), converged, float("nan"), len(targets),
                              per_point_torque=torque_sum, ik_confirmed=np.flatnonzero(converged))
