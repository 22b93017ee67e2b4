"""Compiled inner loops for the hot paths (FK sampling, FK + torque).

These mirror ``kinematics.propagate_arrays`` / ``centroid_arrays`` one row at
a time. ``base`` is always the stacked ``(origin, tangent, normal)`` of the
robot base, shape ``(3, 3)``.
"""
import math

import numba
import numpy as np

SMALL_ANGLE = 1e-6
TWO_PI = 2.0 * math.pi


@numba.njit(cache=True, inline="always")
def _arc(k, length):
    phi = k * length
    c = math.cos(phi)
    s = math.sin(phi)
    if abs(phi) < SMALL_ANGLE:
        p2 = phi * phi
        sin_k = length * (1.0 - p2 / 6.0)
        vers_k = length * phi * 0.5 * (1.0 - p2 / 12.0)
    else:
        sin_k = s / k
        # 2 sin^2(phi/2) avoids the cancellation in 1 - cos(phi)
        h = math.sin(0.5 * phi)
        vers_k = 2.0 * h * h / k
    return sin_k, vers_k, c, s


@numba.njit(cache=True)
def _tip(base, kappa_row, theta_row, lb, ls, lt):
    rx, ry, rz = base[0, 0], base[0, 1], base[0, 2]
    tx, ty, tz = base[1, 0], base[1, 1], base[1, 2]
    nx, ny, nz = base[2, 0], base[2, 1], base[2, 2]
    for i in range(kappa_row.shape[0]):
        ct = math.cos(theta_row[i])
        st = math.sin(theta_row[i])
        bx = ty * nz - tz * ny
        by = tz * nx - tx * nz
        bz = tx * ny - ty * nx
        mx = nx * ct + bx * st
        my = ny * ct + by * st
        mz = nz * ct + bz * st
        sin_k, vers_k, c, s = _arc(kappa_row[i], ls[i])
        a = lb[i] + sin_k + lt[i] * c
        b = vers_k + lt[i] * s
        rx += a * tx + b * mx
        ry += a * ty + b * my
        rz += a * tz + b * mz
        tx, ty, tz, nx, ny, nz = (tx * c + mx * s, ty * c + my * s, tz * c + mz * s,
                                  mx * c - tx * s, my * c - ty * s, mz * c - tz * s)
    return rx, ry, rz


@numba.njit(cache=True)
def end_effector(base, kappa, theta, lb, ls, lt, out):
    for j in range(kappa.shape[0]):
        rx, ry, rz = _tip(base, kappa[j], theta[j], lb, ls, lt)
        out[j, 0] = rx
        out[j, 1] = ry
        out[j, 2] = rz


@numba.njit(cache=True)
def _torque_row(base, k_row, th_row, lb, ls, lt, masses, payload, g, bases, cents):
    """Tip of one configuration plus 0.5*sum|tau|^2 and sum|tau| (torques in N*m)."""
    m = k_row.shape[0]
    rx, ry, rz = base[0, 0], base[0, 1], base[0, 2]
    tx, ty, tz = base[1, 0], base[1, 1], base[1, 2]
    nx, ny, nz = base[2, 0], base[2, 1], base[2, 2]
    for i in range(m):
        k = k_row[i]
        ct = math.cos(th_row[i])
        st = math.sin(th_row[i])
        bx = ty * nz - tz * ny
        by = tz * nx - tx * nz
        bz = tx * ny - ty * nx
        mx = nx * ct + bx * st
        my = ny * ct + by * st
        mz = nz * ct + bz * st
        bases[i, 0] = rx
        bases[i, 1] = ry
        bases[i, 2] = rz
        # centroid at half path length
        half = 0.5 * (lb[i] + ls[i] + lt[i])
        s_base = min(half, lb[i])
        s_arc = min(max(half - lb[i], 0.0), ls[i])
        s_top = max(half - lb[i] - ls[i], 0.0)
        hs, hv, hc, hsn = _arc(k, s_arc)
        ex = tx * hc + mx * hsn
        ey = ty * hc + my * hsn
        ez = tz * hc + mz * hsn
        cents[i, 0] = rx + (s_base + hs) * tx + hv * mx + s_top * ex
        cents[i, 1] = ry + (s_base + hs) * ty + hv * my + s_top * ey
        cents[i, 2] = rz + (s_base + hs) * tz + hv * mz + s_top * ez
        sin_k, vers_k, c, s = _arc(k, ls[i])
        a = lb[i] + sin_k + lt[i] * c
        b = vers_k + lt[i] * s
        rx += a * tx + b * mx
        ry += a * ty + b * my
        rz += a * tz + b * mz
        tx, ty, tz, nx, ny, nz = (tx * c + mx * s, ty * c + my * s, tz * c + mz * s,
                                  mx * c - tx * s, my * c - ty * s, mz * c - tz * s)
    # first moment and mass distal to each joint, accumulated from the tip
    sx = payload * rx
    sy = payload * ry
    sz = payload * rz
    msum = payload
    half_sq = 0.0
    norm_sum = 0.0
    for i in range(m - 1, -1, -1):
        sx += masses[i] * cents[i, 0]
        sy += masses[i] * cents[i, 1]
        sz += masses[i] * cents[i, 2]
        msum += masses[i]
        lx = (sx - msum * bases[i, 0]) * 0.01
        ly = (sy - msum * bases[i, 1]) * 0.01
        lz = (sz - msum * bases[i, 2]) * 0.01
        tau_x = ly * g[2] - lz * g[1]
        tau_y = lz * g[0] - lx * g[2]
        tau_z = lx * g[1] - ly * g[0]
        sq = tau_x * tau_x + tau_y * tau_y + tau_z * tau_z
        half_sq += 0.5 * sq
        norm_sum += math.sqrt(sq)
    return rx, ry, rz, half_sq, norm_sum


@numba.njit(cache=True)
def end_effector_torque(base, kappa, theta, lb, ls, lt, masses, payload, g,
                        out_pos, out_half_sq, out_norm_sum):
    """Tip position plus 0.5*sum|tau|^2 and sum|tau| per row (torques in N*m)."""
    m = kappa.shape[1]
    bases = np.empty((m, 3))
    cents = np.empty((m, 3))
    for j in range(kappa.shape[0]):
        rx, ry, rz, half_sq, norm_sum = _torque_row(base, kappa[j], theta[j], lb, ls, lt, masses, payload, g,
                                                    bases, cents)
        out_pos[j, 0] = rx
        out_pos[j, 1] = ry
        out_pos[j, 2] = rz
        out_half_sq[j] = half_sq
        out_norm_sum[j] = norm_sum


@numba.njit(cache=True)
def _sample_row(u_row, kmax, kappa_row, theta_row):
    m = kmax.shape[0]
    for i in range(m):
        kappa_row[i] = u_row[2 * i] * kmax[i]
        theta_row[i] = u_row[2 * i + 1] * TWO_PI


@numba.njit(cache=True)
def mark_voxels(base, u, kmax, lb, ls, lt, origin, size, cell_target, hit):
    """Sample configs from uniforms ``u`` and flag targets whose voxel holds a tip.

    ``cell_target`` is a dense ``(nx, ny, nz)`` lookup of target index or -1.
    Returns the number of newly flagged targets.
    """
    m = kmax.shape[0]
    nx, ny, nz = cell_target.shape
    kappa_row = np.empty(m)
    theta_row = np.empty(m)
    new = 0
    for j in range(u.shape[0]):
        _sample_row(u[j], kmax, kappa_row, theta_row)
        rx, ry, rz = _tip(base, kappa_row, theta_row, lb, ls, lt)
        fx = math.floor((rx - origin[0]) / size)
        fy = math.floor((ry - origin[1]) / size)
        fz = math.floor((rz - origin[2]) / size)
        if fx < 0 or fy < 0 or fz < 0 or fx >= nx or fy >= ny or fz >= nz:
            continue
        idx = cell_target[int(fx), int(fy), int(fz)]
        if idx >= 0 and not hit[idx]:
            hit[idx] = True
            new += 1
    return new


@numba.njit(cache=True)
def mark_balls(base, u, kmax, lb, ls, lt, origin, size, dims, cell_start, cell_items,
               points, eps, hit):
    """Like ``mark_voxels`` but a target counts as hit when a tip is within ``eps``.

    Targets are bucketed in a dense ``dims`` grid of cell size ``size >= eps``,
    stored CSR-style: bucket ``c`` (C-order flat index) holds
    ``cell_items[cell_start[c]:cell_start[c + 1]]``.
    """
    m = kmax.shape[0]
    nx, ny, nz = dims[0], dims[1], dims[2]
    kappa_row = np.empty(m)
    theta_row = np.empty(m)
    eps2 = eps * eps
    new = 0
    for j in range(u.shape[0]):
        _sample_row(u[j], kmax, kappa_row, theta_row)
        rx, ry, rz = _tip(base, kappa_row, theta_row, lb, ls, lt)
        fx = int(math.floor((rx - origin[0]) / size))
        fy = int(math.floor((ry - origin[1]) / size))
        fz = int(math.floor((rz - origin[2]) / size))
        for cx in range(fx - 1, fx + 2):
            if cx < 0 or cx >= nx:
                continue
            for cy in range(fy - 1, fy + 2):
                if cy < 0 or cy >= ny:
                    continue
                for cz in range(fz - 1, fz + 2):
                    if cz < 0 or cz >= nz:
                        continue
                    c = (cx * ny + cy) * nz + cz
                    for p in range(cell_start[c], cell_start[c + 1]):
                        t = cell_items[p]
                        if hit[t]:
                            continue
                        dx = points[t, 0] - rx
                        dy = points[t, 1] - ry
                        dz = points[t, 2] - rz
                        if dx * dx + dy * dy + dz * dz <= eps2:
                            hit[t] = True
                            new += 1
    return new


@numba.njit(cache=True)
def _tip_jacobian(base, q, lb, ls, lt, jac):
    """Tip position and analytic ``3 x 2m`` Jacobian for ``q = (k1, th1, ...)``.

    A rotation column is ``t_i x (tip - r_i)``: the whole distal chain turns
    about the joint's tangent axis. A curvature column is the arc-end velocity
    plus ``ls_i * b_i x (tip - e_i)``, the distal chain swinging about the
    bending axis ``b_i`` through the arc end ``e_i``.
    """
    m = lb.shape[0]
    starts = np.empty((m, 3))
    ends = np.empty((m, 3))
    tang = np.empty((m, 3))
    axis = np.empty((m, 3))
    dend = np.empty((m, 3))
    rx, ry, rz = base[0, 0], base[0, 1], base[0, 2]
    tx, ty, tz = base[1, 0], base[1, 1], base[1, 2]
    nx, ny, nz = base[2, 0], base[2, 1], base[2, 2]
    for i in range(m):
        k = q[2 * i]
        ct = math.cos(q[2 * i + 1])
        st = math.sin(q[2 * i + 1])
        bx = ty * nz - tz * ny
        by = tz * nx - tx * nz
        bz = tx * ny - ty * nx
        mx = nx * ct + bx * st
        my = ny * ct + by * st
        mz = nz * ct + bz * st
        starts[i, 0], starts[i, 1], starts[i, 2] = rx, ry, rz
        tang[i, 0], tang[i, 1], tang[i, 2] = tx, ty, tz
        # bending axis t x m
        axis[i, 0] = ty * mz - tz * my
        axis[i, 1] = tz * mx - tx * mz
        axis[i, 2] = tx * my - ty * mx
        l = ls[i]
        sin_k, vers_k, c, s = _arc(k, l)
        phi = k * l
        if abs(phi) < 1e-3:
            p2 = phi * phi
            dsin = -phi * l * l / 3.0 * (1.0 - p2 / 10.0 + p2 * p2 / 280.0)
            dvers = 0.5 * l * l * (1.0 - p2 / 4.0 + p2 * p2 / 72.0)
        else:
            dsin = (l * c - sin_k) / k
            dvers = (l * s - vers_k) / k
        dend[i, 0] = dsin * tx + dvers * mx
        dend[i, 1] = dsin * ty + dvers * my
        dend[i, 2] = dsin * tz + dvers * mz
        a = lb[i] + sin_k
        ends[i, 0] = rx + a * tx + vers_k * mx
        ends[i, 1] = ry + a * ty + vers_k * my
        ends[i, 2] = rz + a * tz + vers_k * mz
        tx, ty, tz, nx, ny, nz = (tx * c + mx * s, ty * c + my * s, tz * c + mz * s,
                                  mx * c - tx * s, my * c - ty * s, mz * c - tz * s)
        rx = ends[i, 0] + lt[i] * tx
        ry = ends[i, 1] + lt[i] * ty
        rz = ends[i, 2] + lt[i] * tz
    for i in range(m):
        dx = rx - ends[i, 0]
        dy = ry - ends[i, 1]
        dz = rz - ends[i, 2]
        l = ls[i]
        jac[0, 2 * i] = dend[i, 0] + l * (axis[i, 1] * dz - axis[i, 2] * dy)
        jac[1, 2 * i] = dend[i, 1] + l * (axis[i, 2] * dx - axis[i, 0] * dz)
        jac[2, 2 * i] = dend[i, 2] + l * (axis[i, 0] * dy - axis[i, 1] * dx)
        dx = rx - starts[i, 0]
        dy = ry - starts[i, 1]
        dz = rz - starts[i, 2]
        jac[0, 2 * i + 1] = tang[i, 1] * dz - tang[i, 2] * dy
        jac[1, 2 * i + 1] = tang[i, 2] * dx - tang[i, 0] * dz
        jac[2, 2 * i + 1] = tang[i, 0] * dy - tang[i, 1] * dx
    return rx, ry, rz


@numba.njit(cache=True)
def tip_jacobians(base, q, lb, ls, lt, pos, jac):
    for j in range(q.shape[0]):
        pos[j, 0], pos[j, 1], pos[j, 2] = _tip_jacobian(base, q[j], lb, ls, lt, jac[j])


@numba.njit(cache=True, inline="always")
def _normalize(q, kmax):
    m = kmax.shape[0]
    for i in range(m):
        if q[2 * i] < 0:
            # mirrored bend: flip curvature, turn this and the next plane by pi
            q[2 * i] = -q[2 * i]
            q[2 * i + 1] += math.pi
            if i + 1 < m:
                q[2 * i + 3] += math.pi
    for i in range(m):
        if q[2 * i] > kmax[i]:
            q[2 * i] = kmax[i]
        th = q[2 * i + 1] % TWO_PI
        q[2 * i + 1] = th if th < TWO_PI else 0.0


@numba.njit(cache=True, inline="always")
def _damped_step(jac, err, lam2, skip, dq):
    """``dq = J^T (J J^T + lam2 I)^-1 err`` with columns in ``skip`` zeroed."""
    d = jac.shape[1]
    a = np.zeros((3, 3))
    for r in range(3):
        for c in range(3):
            acc = 0.0
            for k in range(d):
                if not skip[k]:
                    acc += jac[r, k] * jac[c, k]
            a[r, c] = acc
        a[r, r] += lam2
    # symmetric positive definite 3x3: solve by the adjugate
    c00 = a[1, 1] * a[2, 2] - a[1, 2] * a[2, 1]
    c01 = a[1, 2] * a[2, 0] - a[1, 0] * a[2, 2]
    c02 = a[1, 0] * a[2, 1] - a[1, 1] * a[2, 0]
    det = a[0, 0] * c00 + a[0, 1] * c01 + a[0, 2] * c02
    c11 = a[0, 0] * a[2, 2] - a[0, 2] * a[2, 0]
    c12 = a[0, 1] * a[2, 0] - a[0, 0] * a[2, 1]
    c22 = a[0, 0] * a[1, 1] - a[0, 1] * a[1, 0]
    y0 = (c00 * err[0] + c01 * err[1] + c02 * err[2]) / det
    y1 = (c01 * err[0] + c11 * err[1] + c12 * err[2]) / det
    y2 = (c02 * err[0] + c12 * err[1] + c22 * err[2]) / det
    for k in range(d):
        dq[k] = 0.0 if skip[k] else jac[0, k] * y0 + jac[1, k] * y1 + jac[2, k] * y2


@numba.njit(cache=True)
def _dls_attempt(base, lb, ls, lt, kmax, target, q, tol, lam2, max_it, step_limit, stall, min_progress,
                 best_q):
    d = q.shape[0]
    jac = np.empty((3, d))
    err = np.empty(3)
    dq = np.empty(d)
    skip = np.zeros(d, dtype=np.bool_)
    rx, ry, rz = _tip_jacobian(base, q, lb, ls, lt, jac)
    best = math.sqrt((target[0] - rx) ** 2 + (target[1] - ry) ** 2 + (target[2] - rz) ** 2)
    best_q[:] = q
    since = 0
    it = 0
    while best > tol and since < stall and it < max_it:
        it += 1
        err[0] = target[0] - rx
        err[1] = target[1] - ry
        err[2] = target[2] - rz
        skip[:] = False
        _damped_step(jac, err, lam2, skip, dq)
        pinned = False
        for i in range(kmax.shape[0]):
            if q[2 * i] >= kmax[i] - 1e-12 and dq[2 * i] > 0:
                skip[2 * i] = True
                pinned = True
        if pinned:
            # curvatures pinned at their maximum drop out of the step
            _damped_step(jac, err, lam2, skip, dq)
        ratio = 0.0
        for k in range(d):
            v = abs(dq[k]) / (kmax[k // 2] if k % 2 == 0 else 1.0)
            if v > ratio:
                ratio = v
        ratio /= step_limit
        scale = 1.0 / ratio if ratio > 1.0 else 1.0
        for k in range(d):
            q[k] += dq[k] * scale
        _normalize(q, kmax)
        rx, ry, rz = _tip_jacobian(base, q, lb, ls, lt, jac)
        r = math.sqrt((target[0] - rx) ** 2 + (target[1] - ry) ** 2 + (target[2] - rz) ** 2)
        if r < best - max(min_progress * (best - tol), 1e-12):
            since = 0
        else:
            since += 1
        if r < best:
            best = r
            best_q[:] = q
    return best


@numba.njit(cache=True)
def dls_solve(base, lb, ls, lt, kmax, targets, starts, tol, lam2, max_it, step_limit, stall,
              min_progress, all_attempts, out_q, out_res):
    """Damped least-squares IK from ``starts[j, k]`` (restart k of target j).

    Restarts stop at the first converged attempt unless ``all_attempts``;
    ``out_q``/``out_res`` are ``(N, R, d)``/``(N, R)`` with unused attempts
    left at ``inf`` residual.
    """
    n, restarts, d = starts.shape
    q = np.empty(d)
    for j in range(n):
        for k in range(restarts):
            q[:] = starts[j, k]
            out_res[j, k] = _dls_attempt(base, lb, ls, lt, kmax, targets[j], q, tol, lam2, max_it,
                                         step_limit, stall, min_progress, out_q[j, k])
            if out_res[j, k] <= tol and not all_attempts:
                break


@numba.njit(cache=True)
def _lagrangian(z, kmax, base, lb, ls, lt, masses, payload, g, target, tight2, f_scale, lam, mu,
                k_row, th_row, bases, cents):
    """Augmented Lagrangian of the scaled torque objective; ``z`` holds ``kappa / kappa_max``."""
    for i in range(kmax.shape[0]):
        k_row[i] = z[2 * i] * kmax[i]
        th_row[i] = z[2 * i + 1]
    rx, ry, rz, half_sq, _ = _torque_row(base, k_row, th_row, lb, ls, lt, masses, payload, g, bases, cents)
    c = ((rx - target[0]) ** 2 + (ry - target[1]) ** 2 + (rz - target[2]) ** 2) / tight2 - 1.0
    shifted = max(0.0, c + lam / mu)
    return half_sq * f_scale + 0.5 * mu * shifted * shifted - lam * lam / (2.0 * mu), half_sq, c


@numba.njit(cache=True)
def min_torque_rows(base, lb, ls, lt, kmax, masses, payload, g, targets, q0, tolerance, outer_iterations,
                    inner_iterations, out_q):
    """Minimize 0.5*sum|tau|^2 subject to |tip - target| <= tolerance, one row at a time.

    Augmented Lagrangian outer loop around a projected BFGS on
    ``z = (kappa / kappa_max, theta)`` with ``0 <= kappa / kappa_max <= 1``
    and central-difference gradients.
    """
    n, d = q0.shape
    m = kmax.shape[0]
    h = 1e-7
    ftol = 1e-10
    max_step = 0.25
    tight2 = (0.995 * tolerance) ** 2
    k_row = np.empty(m)
    th_row = np.empty(m)
    bases = np.empty((m, 3))
    cents = np.empty((m, 3))
    lo = np.full(d, -np.inf)
    hi = np.full(d, np.inf)
    for i in range(m):
        lo[2 * i] = 0.0
        hi[2 * i] = 1.0
    z = np.empty(d)
    zp = np.empty(d)
    z_new = np.empty(d)
    grad = np.empty(d)
    g_new = np.empty(d)
    gf = np.empty(d)
    step = np.empty(d)
    s = np.empty(d)
    y = np.empty(d)
    fix = np.zeros(d, dtype=np.bool_)
    hess = np.empty((d, d))
    tmp = np.empty((d, d))
    for r in range(n):
        target = targets[r]
        for k in range(d):
            v = q0[r, k] / kmax[k // 2] if k % 2 == 0 else q0[r, k]
            z[k] = min(max(v, lo[k]), hi[k])
        lam = 0.0
        mu = 10.0
        _, obj0, _ = _lagrangian(z, kmax, base, lb, ls, lt, masses, payload, g, target, tight2, 1.0, lam, mu,
                                 k_row, th_row, bases, cents)
        f_scale = 1.0 / max(obj0, 1e-12)
        prev = obj0 * f_scale
        for _outer in range(outer_iterations):
            # ---- projected BFGS on the current Lagrangian
            f, _, _ = _lagrangian(z, kmax, base, lb, ls, lt, masses, payload, g, target, tight2, f_scale, lam, mu,
                                  k_row, th_row, bases, cents)
            for k in range(d):
                zp[:] = z
                zp[k] = z[k] + h
                fp, _, _ = _lagrangian(zp, kmax, base, lb, ls, lt, masses, payload, g, target, tight2, f_scale,
                                       lam, mu, k_row, th_row, bases, cents)
                zp[k] = z[k] - h
                fm, _, _ = _lagrangian(zp, kmax, base, lb, ls, lt, masses, payload, g, target, tight2, f_scale,
                                       lam, mu, k_row, th_row, bases, cents)
                grad[k] = (fp - fm) / (2.0 * h)
            hess[:, :] = 0.0
            for k in range(d):
                hess[k, k] = 1.0
            fresh = True
            for _inner in range(inner_iterations):
                for k in range(d):
                    fix[k] = (z[k] <= lo[k] + 1e-12 and grad[k] > 0) or (z[k] >= hi[k] - 1e-12 and grad[k] < 0)
                    gf[k] = 0.0 if fix[k] else grad[k]
                slope = 0.0
                for k in range(d):
                    acc = 0.0
                    for j in range(d):
                        acc -= hess[k, j] * gf[j]
                    step[k] = 0.0 if fix[k] else acc
                    slope += gf[k] * step[k]
                bad = not slope < 0
                if bad:
                    hess[:, :] = 0.0
                    for k in range(d):
                        hess[k, k] = 1.0
                    fresh = True
                    for k in range(d):
                        step[k] = -gf[k]
                big = 0.0
                for k in range(d):
                    big = max(big, abs(step[k]))
                limit = 0.05 if fresh else max_step
                scale = min(1.0, limit / max(big, 1e-300))
                for k in range(d):
                    step[k] *= scale
                alpha = 1.0
                f_new = 0.0
                for _ls in range(31):
                    for k in range(d):
                        z_new[k] = min(max(z[k] + alpha * step[k], lo[k]), hi[k])
                    f_new, _, _ = _lagrangian(z_new, kmax, base, lb, ls, lt, masses, payload, g, target, tight2,
                                              f_scale, lam, mu, k_row, th_row, bases, cents)
                    dec = 0.0
                    for k in range(d):
                        dec += grad[k] * (z_new[k] - z[k])
                    if f_new <= f + 1e-4 * dec:
                        break
                    alpha *= 0.5
                ok = f_new <= f
                for k in range(d):
                    s[k] = z_new[k] - z[k] if ok else 0.0
                    z[k] += s[k]
                for k in range(d):
                    zp[:] = z
                    zp[k] = z[k] + h
                    fp, _, _ = _lagrangian(zp, kmax, base, lb, ls, lt, masses, payload, g, target, tight2, f_scale,
                                           lam, mu, k_row, th_row, bases, cents)
                    zp[k] = z[k] - h
                    fm, _, _ = _lagrangian(zp, kmax, base, lb, ls, lt, masses, payload, g, target, tight2, f_scale,
                                           lam, mu, k_row, th_row, bases, cents)
                    g_new[k] = (fp - fm) / (2.0 * h)
                sy = 0.0
                yy = 0.0
                for k in range(d):
                    y[k] = g_new[k] - grad[k]
                    sy += s[k] * y[k]
                    yy += y[k] * y[k]
                if ok and sy > 1e-16:
                    if fresh:
                        hess[:, :] = 0.0
                        for k in range(d):
                            hess[k, k] = sy / yy
                        fresh = False
                    rho = 1.0 / sy
                    # H <- V H V^T + rho s s^T with V = I - rho s y^T
                    for a in range(d):
                        for b in range(d):
                            acc = hess[a, b]
                            for k in range(d):
                                acc -= rho * s[a] * y[k] * hess[k, b]
                            tmp[a, b] = acc
                    for a in range(d):
                        for b in range(d):
                            acc = tmp[a, b]
                            for k in range(d):
                                acc -= rho * tmp[a, k] * y[k] * s[b]
                            hess[a, b] = acc + rho * s[a] * s[b]
                df = f - f_new if ok else 0.0
                if ok:
                    f = f_new
                pg = 0.0
                for k in range(d):
                    grad[k] = g_new[k]
                    fixed = (z[k] <= lo[k] + 1e-12 and grad[k] > 0) or (z[k] >= hi[k] - 1e-12 and grad[k] < 0)
                    if not fixed:
                        pg = max(pg, abs(grad[k]))
                if (not ok and not bad) or (ok and df <= ftol * (1.0 + abs(f))) or pg < 1e-10:
                    break
            # ---- multiplier update
            _, obj, c = _lagrangian(z, kmax, base, lb, ls, lt, masses, payload, g, target, tight2, f_scale, lam, mu,
                                    k_row, th_row, bases, cents)
            lam = max(0.0, lam + mu * c)
            if c > 1e-3:
                mu *= 4.0
            cur = obj * f_scale
            if c <= 1e-6 and abs(prev - cur) <= 1e-7 * (1.0 + abs(cur)):
                break
            prev = cur
        for i in range(m):
            out_q[r, 2 * i] = z[2 * i] * kmax[i]
            out_q[r, 2 * i + 1] = z[2 * i + 1]
