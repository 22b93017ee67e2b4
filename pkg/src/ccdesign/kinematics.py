"""Constant-curvature forward kinematics for multi-joint continuum robots.

Every joint is a rigid base link, a circular-arc spine and a rigid top link.
A joint's state is its curvature ``kappa`` (1/cm, ``kappa = 1/R``; zero means
straight) and the rotation ``theta`` of its bending plane about the incoming
tangent.

The numpy array helpers (``propagate_arrays``, ``chain_arrays``,
``torques_batch``) back the dataclass API. ``end_effector_batch`` and
``fk_torque_batch`` run the same recursion through compiled kernels and are
what the solvers call in their inner loops.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import _kernels

SMALL_ANGLE = 1e-6
ORTHO_TOL = 1e-9
CM_TO_M = 0.01
DEFAULT_GRAVITY = (0.0, 0.0, -9.81)


class InvalidFrameError(ValueError):
    """Raised when a frame is not orthonormal."""


@dataclass(frozen=True)
class JointDesign:
    base_len: float
    spine_len: float
    top_len: float
    min_bend_radius: float

    def __post_init__(self):
        if not self.spine_len > 0:
            raise ValueError(f"spine_len must be > 0, got {self.spine_len}")
        if not self.min_bend_radius > 0:
            raise ValueError(f"min_bend_radius must be > 0, got {self.min_bend_radius}")
        if self.base_len < 0 or self.top_len < 0:
            raise ValueError("base_len and top_len must be >= 0")

    @property
    def max_curvature(self) -> float:
        return 1.0 / self.min_bend_radius

    @property
    def total_len(self) -> float:
        return self.base_len + self.spine_len + self.top_len


@dataclass(frozen=True)
class JointState:
    kappa: float
    theta: float


@dataclass(frozen=True)
class Configuration:
    states: tuple[JointState, ...]

    @classmethod
    def from_vector(cls, q: Sequence[float]) -> "Configuration":
        q = np.asarray(q, dtype=float).ravel()
        if q.size % 2:
            raise ValueError("configuration vector must have even length")
        return cls(tuple(JointState(float(q[2 * i]), float(q[2 * i + 1]))
                         for i in range(q.size // 2)))

    @classmethod
    def straight(cls, n_joints: int) -> "Configuration":
        return cls(tuple(JointState(0.0, 0.0) for _ in range(n_joints)))

    def to_vector(self) -> np.ndarray:
        """Flat ``q = (kappa_1, theta_1, kappa_2, theta_2, ...)``."""
        return np.array([v for s in self.states for v in (s.kappa, s.theta)], dtype=float)

    def __len__(self):
        return len(self.states)


@dataclass(frozen=True)
class Frame:
    origin: np.ndarray
    tangent: np.ndarray
    normal: np.ndarray
    binormal: np.ndarray

    @classmethod
    def from_tn(cls, origin, tangent, normal) -> "Frame":
        t = np.asarray(tangent, dtype=float)
        n = np.asarray(normal, dtype=float)
        return cls(np.asarray(origin, dtype=float), t, n, np.cross(t, n))

    def check(self, tol: float = ORTHO_TOL) -> None:
        t, n, b = self.tangent, self.normal, self.binormal
        vals = np.array([t @ t - 1, n @ n - 1, b @ b - 1, t @ n, t @ b, n @ b])
        if not np.all(np.isfinite(vals)) or np.max(np.abs(vals)) > tol:
            raise InvalidFrameError(f"frame is not orthonormal (max defect {np.max(np.abs(vals)):.3g})")
        if np.max(np.abs(np.cross(t, n) - b)) > tol:
            raise InvalidFrameError("frame is not right-handed")


@dataclass(frozen=True)
class FrameChain:
    # frame at the base of each joint after its theta rotation (bending plane = t, n)
    joint_frames: tuple[Frame, ...]
    end_effector: Frame


@dataclass
class RobotDesign:
    base_position: np.ndarray
    base_tangent: np.ndarray
    base_normal: np.ndarray
    joints: tuple[JointDesign, ...]

    def __post_init__(self):
        self.base_position = np.asarray(self.base_position, dtype=float)
        self.base_tangent = np.asarray(self.base_tangent, dtype=float)
        self.base_normal = np.asarray(self.base_normal, dtype=float)
        self.joints = tuple(self.joints)
        if not self.joints:
            raise ValueError("a robot needs at least one joint")
        self.base_frame().check()

    @property
    def n_joints(self) -> int:
        return len(self.joints)

    @property
    def total_length(self) -> float:
        return float(sum(j.total_len for j in self.joints))

    def base_frame(self) -> Frame:
        return Frame.from_tn(self.base_position, self.base_tangent, self.base_normal)

    def arrays(self):
        """Per-joint ``(base_len, spine_len, top_len, max_curvature)`` arrays."""
        lb = np.array([j.base_len for j in self.joints])
        ls = np.array([j.spine_len for j in self.joints])
        lt = np.array([j.top_len for j in self.joints])
        kmax = np.array([j.max_curvature for j in self.joints])
        return lb, ls, lt, kmax

    def q_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        kmax = self.arrays()[3]
        lo = np.zeros(2 * self.n_joints)
        hi = np.empty(2 * self.n_joints)
        hi[0::2] = kmax
        hi[1::2] = 2 * np.pi
        return lo, hi


@dataclass
class LoadModel:
    payload_mass: float = 1.0
    joint_masses: Sequence[float] = field(default_factory=list)
    gravity: Sequence[float] = DEFAULT_GRAVITY

    def __post_init__(self):
        self.joint_masses = [float(m) for m in self.joint_masses]
        self.gravity = np.asarray(self.gravity, dtype=float)
        if self.payload_mass < 0 or any(m < 0 for m in self.joint_masses):
            raise ValueError("masses must be non-negative")
        if self.gravity.shape != (3,) or not np.all(np.isfinite(self.gravity)):
            raise ValueError("gravity must be a finite 3-vector")

    def masses_for(self, n_joints: int) -> np.ndarray:
        if not self.joint_masses:
            return np.zeros(n_joints)
        if len(self.joint_masses) != n_joints:
            raise ValueError(f"expected {n_joints} joint masses, got {len(self.joint_masses)}")
        return np.asarray(self.joint_masses, dtype=float)


# ---------------------------------------------------------------------------
# array core


def arc_terms(kappa, length):
    """Return ``(sin(phi)/kappa, (1 - cos(phi))/kappa, cos(phi), sin(phi))``.

    ``phi = kappa * length``. Below ``SMALL_ANGLE`` the quotients use their
    series, which also covers ``kappa == 0`` exactly.
    """
    kappa = np.asarray(kappa, dtype=float)
    phi = kappa * length
    c, s = np.cos(phi), np.sin(phi)
    small = np.abs(phi) < SMALL_ANGLE
    safe_k = np.where(small, 1.0, kappa)
    p2 = phi * phi
    sin_k = np.where(small, length * (1.0 - p2 / 6.0), s / safe_k)
    vers_k = np.where(small, length * phi * 0.5 * (1.0 - p2 / 12.0), 2.0 * np.sin(0.5 * phi) ** 2 / safe_k)
    return sin_k, vers_k, c, s


def propagate_arrays(r, t, nt, lb, ls, lt, kappa, theta):
    """Advance frames over one joint.

    ``r, t, nt`` are ``(..., 3)`` origin, tangent and incoming (unrotated)
    normal; the joint scalars broadcast against ``(...)``. Returns
    ``(r_next, t_next, nt_next, n_rot)`` where ``n_rot`` is this joint's
    normal after the theta rotation.
    """
    ct = np.cos(theta)[..., None]
    st = np.sin(theta)[..., None]
    n = nt * ct + np.cross(t, nt) * st
    sin_k, vers_k, cphi, sphi = arc_terms(kappa, ls)
    lt_a = np.asarray(lt, dtype=float)
    along_t = (lb + sin_k + lt_a * cphi)[..., None]
    along_n = (vers_k + lt_a * sphi)[..., None]
    r_next = r + along_t * t + along_n * n
    cphi = cphi[..., None]
    sphi = sphi[..., None]
    t_next = t * cphi + n * sphi
    nt_next = n * cphi - t * sphi
    return r_next, t_next, nt_next, n


def chain_arrays(design: RobotDesign, kappa, theta, lengths=None):
    """Batched FK keeping every joint's base frame.

    ``kappa`` and ``theta`` are ``(N, m)``. ``lengths`` optionally overrides
    ``(lb, ls, lt)`` of the design. Returns ``(bases_r, bases_t, bases_n,
    tip_r, tip_t, tip_nt)`` with per-joint arrays shaped ``(N, m, 3)``.
    """
    kappa = np.atleast_2d(np.asarray(kappa, dtype=float))
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    if lengths is None:
        lb, ls, lt, _ = design.arrays()
    else:
        lb, ls, lt = lengths
    n, m = kappa.shape
    r = np.broadcast_to(design.base_position, (n, 3))
    t = np.broadcast_to(design.base_tangent, (n, 3))
    nt = np.broadcast_to(design.base_normal, (n, 3))
    br = np.empty((n, m, 3))
    bt = np.empty((n, m, 3))
    bn = np.empty((n, m, 3))
    for i in range(m):
        br[:, i] = r
        bt[:, i] = t
        r, t, nt, bn[:, i] = propagate_arrays(r, t, nt, lb[i], ls[i], lt[i], kappa[:, i], theta[:, i])
    return br, bt, bn, r, t, nt


def base_stack(design: RobotDesign) -> np.ndarray:
    return np.ascontiguousarray(np.stack([design.base_position, design.base_tangent, design.base_normal]))


def end_effector_batch(design: RobotDesign, kappa, theta) -> np.ndarray:
    """End-effector positions ``(N, 3)`` for ``(N, m)`` curvature/rotation arrays."""
    kappa = np.ascontiguousarray(np.atleast_2d(kappa), dtype=float)
    theta = np.ascontiguousarray(np.atleast_2d(theta), dtype=float)
    lb, ls, lt, _ = design.arrays()
    out = np.empty((kappa.shape[0], 3))
    _kernels.end_effector(base_stack(design), kappa, theta, lb, ls, lt, out)
    return out


def end_effector_reference(design: RobotDesign, kappa, theta) -> np.ndarray:
    """Pure-numpy twin of ``end_effector_batch``."""
    return chain_arrays(design, kappa, theta)[3]


def end_effector_q(design: RobotDesign, q) -> np.ndarray:
    """Like ``end_effector_batch`` but for flat ``(..., 2m)`` state vectors."""
    q = np.asarray(q, dtype=float)
    shape = q.shape[:-1]
    flat = q.reshape(-1, q.shape[-1])
    out = end_effector_batch(design, flat[:, 0::2], flat[:, 1::2])
    return out.reshape(shape + (3,))


def centroid_arrays(r, t, n, lb, ls, lt, kappa):
    """Point at half the path length of a joint (base link + arc + top link)."""
    half = 0.5 * (lb + ls + lt)
    kappa = np.asarray(kappa, dtype=float)
    # on the base link
    s_base = np.minimum(half, lb)
    # on the arc
    s_arc = np.clip(half - lb, 0.0, ls)
    sin_k, vers_k, c, s = arc_terms(kappa, s_arc)
    # on the top link
    s_top = np.maximum(half - lb - ls, 0.0)
    t_end = t * c[..., None] + n * s[..., None]
    return (r + (s_base + sin_k)[..., None] * t + vers_k[..., None] * n
            + s_top[..., None] * t_end)


def torques_batch(design: RobotDesign, kappa, theta, load: LoadModel, lengths=None) -> np.ndarray:
    """Static gravity torques (N*m) at each joint base, shape ``(N, m, 3)``."""
    kappa = np.atleast_2d(np.asarray(kappa, dtype=float))
    if lengths is None:
        lb, ls, lt, _ = design.arrays()
    else:
        lb, ls, lt = lengths
    br, bt, bn, tip, _, _ = chain_arrays(design, kappa, theta, lengths=(lb, ls, lt))
    cents = centroid_arrays(br, bt, bn, lb, ls, lt, kappa)
    masses = load.masses_for(design.n_joints)
    # accumulate mass and first moment from the tip back to each joint
    weighted = cents * masses[:, None]
    moment = np.cumsum(weighted[:, ::-1], axis=1)[:, ::-1] + load.payload_mass * tip[:, None, :]
    mass_sum = np.cumsum(masses[::-1])[::-1] + load.payload_mass
    lever = (moment - mass_sum[:, None] * br) * CM_TO_M
    return np.cross(lever, load.gravity)


def torque_objective_reference(design, kappa, theta, load, lengths=None):
    """``(0.5 * sum ||tau_i||^2, sum ||tau_i||)`` per row, pure numpy."""
    tau = torques_batch(design, kappa, theta, load, lengths=lengths)
    sq = np.einsum("nmi,nmi->nm", tau, tau)
    return 0.5 * sq.sum(axis=1), np.sqrt(sq).sum(axis=1)


def fk_torque_batch(design: RobotDesign, kappa, theta, load: LoadModel):
    """Tip positions ``(N, 3)``, ``0.5 * sum ||tau_i||^2`` and ``sum ||tau_i||``."""
    kappa = np.ascontiguousarray(np.atleast_2d(kappa), dtype=float)
    theta = np.ascontiguousarray(np.atleast_2d(theta), dtype=float)
    lb, ls, lt, _ = design.arrays()
    n = kappa.shape[0]
    pos = np.empty((n, 3))
    half_sq = np.empty(n)
    norm_sum = np.empty(n)
    _kernels.end_effector_torque(base_stack(design), kappa, theta, lb, ls, lt,
                                 load.masses_for(design.n_joints), float(load.payload_mass),
                                 load.gravity, pos, half_sq, norm_sum)
    return pos, half_sq, norm_sum


# ---------------------------------------------------------------------------
# frame-level API


def _check_state(joint: JointDesign, state: JointState):
    if state.kappa < 0 or state.kappa > joint.max_curvature * (1 + 1e-12):
        raise ValueError(f"curvature {state.kappa} outside [0, {joint.max_curvature}]")


def propagate_joint(frame_in: Frame, joint: JointDesign, state: JointState) -> Frame:
    """Frame at the base of the next joint.

    ``frame_in.normal`` is the incoming normal, before this joint's theta
    rotation. The returned frame's normal is likewise unrotated.
    """
    frame_in.check()
    _check_state(joint, state)
    r, t, nt, _ = propagate_arrays(
        frame_in.origin[None], frame_in.tangent[None], frame_in.normal[None],
        joint.base_len, joint.spine_len, joint.top_len,
        np.array([state.kappa]), np.array([state.theta]))
    return Frame.from_tn(r[0], t[0], nt[0])


def forward_kinematics(design: RobotDesign, config: Configuration) -> FrameChain:
    if len(config) != design.n_joints:
        raise ValueError(f"configuration has {len(config)} joints, design has {design.n_joints}")
    frame = design.base_frame()
    frame.check()
    frames = []
    for joint, state in zip(design.joints, config.states):
        _check_state(joint, state)
        ct, st = np.cos(state.theta), np.sin(state.theta)
        n = frame.normal * ct + np.cross(frame.tangent, frame.normal) * st
        frames.append(Frame.from_tn(frame.origin, frame.tangent, n))
        frame = propagate_joint(frame, joint, state)
    return FrameChain(tuple(frames), frame)


def joint_centroid(chain: FrameChain, design: RobotDesign, config: Configuration, i: int) -> np.ndarray:
    if not 0 <= i < design.n_joints:
        raise IndexError(f"joint index {i} out of range")
    f = chain.joint_frames[i]
    j = design.joints[i]
    return centroid_arrays(f.origin, f.tangent, f.normal, j.base_len, j.spine_len,
                           j.top_len, np.float64(config.states[i].kappa))


def static_torques(design: RobotDesign, config: Configuration, load: LoadModel) -> list[np.ndarray]:
    """Gravity torque vector (N*m) at the base of each joint."""
    forward_kinematics(design, config)  # validates inputs
    q = config.to_vector()
    tau = torques_batch(design, q[None, 0::2], q[None, 1::2], load)
    return [tau[0, i].copy() for i in range(design.n_joints)]
