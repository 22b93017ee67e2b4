"""Position IK (damped least squares) and torque-minimizing IK.

Both solvers are batched: many targets are iterated in lockstep, each row
with its own random stream ``rng_stream(seed, "ik", target_index)`` so a
target's answer does not depend on which other targets share the batch.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .kinematics import Configuration, LoadModel, RobotDesign, base_stack, end_effector_batch, fk_torque_batch
from .rng import rng_stream

TWO_PI = 2.0 * np.pi
FD_STEP = 1e-7


class IkConfigError(ValueError):
    """Invalid solver options or state bounds."""


@dataclass
class IkOptions:
    tolerance: float = 1.0
    damping: float = 0.1
    max_iterations: int = 200
    restarts: int = 10
    step_limit: float = 0.5
    seed: int = 0
    # an attempt stops once its best residual has not dropped by
    # min_progress * (best - tolerance) for stall_iterations steps
    stall_iterations: int = 15
    min_progress: float = 1e-2
    # augmented-Lagrangian budget of the torque refinement
    torque_outer_iterations: int = 12
    torque_inner_iterations: int = 60

    def __post_init__(self):
        if not self.tolerance > 0:
            raise IkConfigError("tolerance must be > 0")
        if not self.damping > 0:
            raise IkConfigError("damping must be > 0")
        if self.restarts < 1:
            raise IkConfigError("restarts must be >= 1")
        if self.max_iterations < 1:
            raise IkConfigError("max_iterations must be >= 1")
        if not self.step_limit > 0:
            raise IkConfigError("step_limit must be > 0")
        if self.stall_iterations < 1 or not 0 <= self.min_progress < 1:
            raise IkConfigError("stall_iterations must be >= 1 and min_progress in [0, 1)")
        if self.torque_outer_iterations < 1 or self.torque_inner_iterations < 1:
            raise IkConfigError("torque iteration budgets must be >= 1")


@dataclass
class IkSolution:
    config: Configuration
    residual: float
    torque_total: float
    objective: float
    converged: bool

    def to_dict(self) -> dict:
        return {
            "q": [float(v) for v in self.config.to_vector()],
            "residual": float(self.residual),
            "torque_total": _json_float(self.torque_total),
            "objective": _json_float(self.objective),
            "converged": bool(self.converged),
        }


def _json_float(v):
    return None if not np.isfinite(v) else float(v)


def _kmax(design: RobotDesign) -> np.ndarray:
    kmax = design.arrays()[3]
    if not np.all(np.isfinite(kmax)) or np.any(kmax <= 0):
        raise IkConfigError("curvature bounds must be finite and positive")
    return kmax


def ee_q(design: RobotDesign, q: np.ndarray) -> np.ndarray:
    return end_effector_batch(design, q[:, 0::2], q[:, 1::2])


def jacobian_batch(design: RobotDesign, q: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central-difference position Jacobians, shape ``(N, 3, 2m)``; a check on the analytic one."""
    n, d = q.shape
    steps = np.eye(d) * h
    pert = np.concatenate([q[:, None, :] + steps[None], q[:, None, :] - steps[None]], axis=1)
    pos = ee_q(design, pert.reshape(-1, d)).reshape(n, 2 * d, 3)
    return np.transpose((pos[:, :d] - pos[:, d:]) / (2 * h), (0, 2, 1))


def analytic_jacobian_batch(design: RobotDesign, q: np.ndarray):
    """Tip positions ``(N, 3)`` and exact Jacobians ``(N, 3, 2m)``."""
    q = np.ascontiguousarray(np.atleast_2d(q), dtype=float)
    lb, ls, lt, _ = design.arrays()
    pos = np.empty((len(q), 3))
    jac = np.empty((len(q), 3, q.shape[1]))
    _kernels.tip_jacobians(base_stack(design), q, lb, ls, lt, pos, jac)
    return pos, jac


def position_jacobian(design: RobotDesign, config: Configuration) -> np.ndarray:
    """3 x 2m Jacobian of the end-effector w.r.t. ``(kappa_1, theta_1, ...)``."""
    if len(config) != design.n_joints:
        raise ValueError("configuration length does not match design")
    return analytic_jacobian_batch(design, config.to_vector())[1][0]


def normalize_q(q: np.ndarray, kmax: np.ndarray) -> np.ndarray:
    """Map states back into the box without moving the tip.

    A negative curvature bends the opposite way; it is mirrored by flipping
    the sign and adding pi to this joint's and the next joint's rotation,
    which leaves every frame distal to the next joint unchanged. Curvature is
    then clamped to its maximum and rotations wrapped into [0, 2*pi).
    """
    q = q.copy()
    m = kmax.shape[0]
    for i in range(m):
        neg = q[:, 2 * i] < 0
        if neg.any():
            q[neg, 2 * i] = -q[neg, 2 * i]
            q[neg, 2 * i + 1] += np.pi
            if i + 1 < m:
                q[neg, 2 * i + 3] += np.pi
    q[:, 0::2] = np.minimum(q[:, 0::2], kmax)
    q[:, 1::2] = np.mod(q[:, 1::2], TWO_PI)
    return q


def random_q(design: RobotDesign, rng: np.random.Generator, n: int = 1) -> np.ndarray:
    kmax = _kmax(design)
    u = rng.random((n, 2 * design.n_joints))
    q = np.empty_like(u)
    q[:, 0::2] = u[:, 0::2] * kmax
    q[:, 1::2] = u[:, 1::2] * TWO_PI
    return q


def _attempt_starts(design: RobotDesign, opts: IkOptions, indices) -> np.ndarray:
    """Start configurations ``(N, restarts, 2m)``; row k comes from target k's stream."""
    out = np.empty((len(indices), opts.restarts, 2 * design.n_joints))
    for row, idx in enumerate(indices):
        out[row] = random_q(design, rng_stream(opts.seed, "ik", int(idx)), opts.restarts)
    return out


def solve_position_batch(design: RobotDesign, targets, opts: IkOptions, indices=None,
                         all_attempts: bool = False):
    """Solve many position-IK problems.

    Returns ``(q, residual)`` of the best attempt per target. With
    ``all_attempts`` every restart is run to completion and the arrays are
    shaped ``(N, restarts, ...)`` instead.
    """
    targets = np.ascontiguousarray(np.atleast_2d(np.asarray(targets, dtype=float)))
    if not np.all(np.isfinite(targets)):
        raise ValueError("targets must be finite")
    n = len(targets)
    if indices is None:
        indices = np.arange(n)
    starts = _attempt_starts(design, opts, indices)
    d = starts.shape[2]
    kmax = _kmax(design)
    lb, ls, lt, _ = design.arrays()
    q = np.zeros_like(starts)
    res = np.full(starts.shape[:2], np.inf)
    _kernels.dls_solve(base_stack(design), lb, ls, lt, kmax, targets, starts, opts.tolerance,
                       opts.damping ** 2, opts.max_iterations, opts.step_limit, opts.stall_iterations,
                       opts.min_progress, all_attempts, q, res)
    if all_attempts:
        return q, res
    # first attempt with the lowest residual
    pick = np.argmin(res, axis=1)
    rows = np.arange(n)
    return q[rows, pick].reshape(n, d), res[rows, pick]


def _torque_values(design, q, load):
    if load is None:
        return np.nan, np.nan
    _, half_sq, norm_sum = fk_torque_batch(design, q[None, 0::2], q[None, 1::2], load)
    return float(norm_sum[0]), float(half_sq[0])


def solve_position_ik(design: RobotDesign, target, opts: IkOptions | None = None,
                      load: LoadModel | None = None, index: int = 0) -> IkSolution:
    """Damped least-squares position IK with random restarts.

    Unreachable targets come back with ``converged=False`` and the best
    residual found. Torque fields are filled only when ``load`` is given.
    """
    opts = opts or IkOptions()
    q, res = solve_position_batch(design, np.asarray(target, dtype=float)[None], opts, indices=[index])
    torque_total, objective = _torque_values(design, q[0], load)
    return IkSolution(Configuration.from_vector(q[0]), float(res[0]), torque_total, objective,
                      bool(res[0] <= opts.tolerance))


# ---------------------------------------------------------------------------
# torque-minimizing IK


def torque_objective(design: RobotDesign, q, load: LoadModel) -> np.ndarray:
    q = np.atleast_2d(q)
    return fk_torque_batch(design, q[:, 0::2], q[:, 1::2], load)[1]


def torque_objective_gradient(design: RobotDesign, q, load: LoadModel, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of ``0.5 * sum ||tau_i||^2`` w.r.t. ``q``."""
    q = np.asarray(q, dtype=float)
    d = q.size
    steps = np.eye(d) * h
    vals = torque_objective(design, np.concatenate([q + steps, q - steps]), load)
    return (vals[:d] - vals[d:]) / (2 * h)


def min_torque_refine(design: RobotDesign, targets: np.ndarray, q0: np.ndarray, load: LoadModel,
                      tolerance: float, outer_iterations: int = 12, inner_iterations: int = 60):
    """Augmented-Lagrangian torque minimization from feasible starts ``q0``.

    Minimizes ``0.5 * sum ||tau_i||^2`` subject to ``|tip - target| <= tol``
    and ``0 <= kappa <= kappa_max`` for each row. Returns ``(q, residual,
    objective, torque_total)``; a row falls back to its start whenever the
    start is feasible and no better.
    """
    kmax = _kmax(design)
    q0 = np.ascontiguousarray(q0, dtype=float)
    lb, ls, lt, _ = design.arrays()
    q = np.empty_like(q0)
    _kernels.min_torque_rows(base_stack(design), lb, ls, lt, kmax, np.asarray(load.joint_masses, dtype=float),
                             float(load.payload_mass), np.asarray(load.gravity, dtype=float),
                             np.ascontiguousarray(targets, dtype=float), q0, float(tolerance),
                             outer_iterations, inner_iterations, q)
    q = normalize_q(q, kmax)
    pos, half_sq, norm_sum = fk_torque_batch(design, q[:, 0::2], q[:, 1::2], load)
    res = np.linalg.norm(pos - targets, axis=1)
    qs = normalize_q(q0, kmax)
    pos0, half0, norm0 = fk_torque_batch(design, qs[:, 0::2], qs[:, 1::2], load)
    res0 = np.linalg.norm(pos0 - targets, axis=1)
    keep_start = (res0 <= tolerance) & ((res > tolerance) | (half0 <= half_sq))
    q[keep_start] = qs[keep_start]
    res = np.where(keep_start, res0, res)
    half_sq = np.where(keep_start, half0, half_sq)
    norm_sum = np.where(keep_start, norm0, norm_sum)
    return q, res, half_sq, norm_sum


def solve_min_torque_batch(design: RobotDesign, targets, load: LoadModel, opts: IkOptions,
                           indices=None):
    """Torque-minimizing IK for many targets.

    Each target's restarts seed one position-IK solve; every converged one is
    refined for torque and the feasible result with the lowest objective wins.
    Returns ``(q, residual, objective, torque_total, converged)``.
    """
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    n = len(targets)
    q_all, res_all = solve_position_batch(design, targets, opts, indices=indices, all_attempts=True)
    d = q_all.shape[2]
    best_q = np.zeros((n, d))
    best_res = np.full(n, np.inf)
    best_obj = np.full(n, np.inf)
    best_sum = np.full(n, np.inf)
    # unreachable targets report their best position-IK attempt
    for i in range(n):
        k = int(np.argmin(res_all[i]))
        best_q[i], best_res[i] = q_all[i, k], res_all[i, k]
    ok = res_all <= opts.tolerance
    ti, ai = np.nonzero(ok)
    if ti.size:
        q, res, obj, tsum = min_torque_refine(design, targets[ti], q_all[ti, ai], load, opts.tolerance,
                                                 opts.torque_outer_iterations, opts.torque_inner_iterations)
        feasible = res <= opts.tolerance
        for row in np.flatnonzero(feasible):
            t = ti[row]
            if obj[row] < best_obj[t] or best_res[t] > opts.tolerance:
                best_q[t], best_res[t], best_obj[t], best_sum[t] = q[row], res[row], obj[row], tsum[row]
    converged = best_res <= opts.tolerance
    if (~converged).any():
        pos, half_sq, norm_sum = fk_torque_batch(design, best_q[:, 0::2], best_q[:, 1::2], load)
        best_obj = np.where(converged, best_obj, half_sq)
        best_sum = np.where(converged, best_sum, norm_sum)
    return best_q, best_res, best_obj, best_sum, converged


def solve_min_torque_ik(design: RobotDesign, target, load: LoadModel, opts: IkOptions | None = None,
                        index: int = 0) -> IkSolution:
    opts = opts or IkOptions()
    q, res, obj, tsum, conv = solve_min_torque_batch(
        design, np.asarray(target, dtype=float)[None], load, opts, indices=[index])
    return IkSolution(Configuration.from_vector(q[0]), float(res[0]), float(tsum[0]), float(obj[0]),
                      bool(conv[0]))
