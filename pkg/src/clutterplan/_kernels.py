"""Compiled inner loops for the push world.

Everything here works on plain arrays so it can run under ``nogil`` from a
thread pool.  A scene is described by four arrays that never change during a
search (``kinds``, ``radii``, ``verts``, ``nverts``) plus a ``(n, 3)`` pose
array ``(x, y, theta)`` that does.  Scalar settings travel in one float vector,
indexed by the ``P_*`` constants below.

Nothing in this module uses reductions whose order depends on the caller, so a
kernel evaluated on the same inputs always returns the same bits.
"""

import math

import numpy as np
from numba import njit

DISC = 0
POLYGON = 1

P_HALF = 0
P_MARGIN = 1
P_TIP_R = 2
P_CLEARANCE = 3
P_PUSH = 4
P_SUBSTEPS = 5
P_MAX_ITER = 6
P_EPS_PEN = 7
P_K_ROT = 8
P_CLAMP_EPS = 9
P_FINGER_WIDTH = 10
P_FINGER_THICK = 11
P_OPENING = 12
P_THRESHOLD = 13
P_K = 14
N_PARAMS = 15

RESOLVED = 0
STALLED = 1

ROLL_GRASPED = 0
ROLL_DEAD = 1
ROLL_HORIZON = 2

_TWO_PI = 2.0 * math.pi
_BIG_LEVEL = 1 << 30
# start points sit this far beyond the exact clearance distance
START_SLACK = 1e-9


@njit(cache=True, nogil=True)
def wrap_angle(theta):
    t = (theta + math.pi) % _TWO_PI
    return t - math.pi


@njit(cache=True, nogil=True)
def world_vertices(local, m, x, y, theta, out):
    c = math.cos(theta)
    s = math.sin(theta)
    for k in range(m):
        lx = local[k, 0]
        ly = local[k, 1]
        out[k, 0] = x + c * lx - s * ly
        out[k, 1] = y + s * lx + c * ly


@njit(cache=True, nogil=True)
def point_polygon(px, py, wv, m):
    """Signed distance from a point to a convex CCW polygon.

    Returns ``(sd, nx, ny, qx, qy)``: ``sd`` is negative inside, ``(nx, ny)``
    is the unit direction that moves the polygon away from the point, and
    ``(qx, qy)`` is the closest boundary point.
    """
    inside = True
    best_sd = -np.inf
    enx = 0.0
    eny = 0.0
    e_ax = 0.0
    e_ay = 0.0
    best_d2 = np.inf
    qx = 0.0
    qy = 0.0
    for k in range(m):
        ax = wv[k, 0]
        ay = wv[k, 1]
        k2 = k + 1
        if k2 == m:
            k2 = 0
        ex = wv[k2, 0] - ax
        ey = wv[k2, 1] - ay
        ll = ex * ex + ey * ey
        inv = 1.0 / math.sqrt(ll)
        onx = ey * inv
        ony = -ex * inv
        sd = (px - ax) * onx + (py - ay) * ony
        if sd > 0.0:
            inside = False
        if sd > best_sd:
            best_sd = sd
            enx = onx
            eny = ony
            e_ax = ax
            e_ay = ay
        t = ((px - ax) * ex + (py - ay) * ey) / ll
        if t < 0.0:
            t = 0.0
        elif t > 1.0:
            t = 1.0
        cx = ax + t * ex
        cy = ay + t * ey
        d2 = (px - cx) * (px - cx) + (py - cy) * (py - cy)
        if d2 < best_d2:
            best_d2 = d2
            qx = cx
            qy = cy
    if inside:
        # exit through the least-penetrated edge
        return best_sd, -enx, -eny, px - best_sd * enx, py - best_sd * eny
    d = math.sqrt(best_d2)
    return d, (qx - px) / d, (qy - py) / d, qx, qy


@njit(cache=True, nogil=True)
def sat_overlap(wa, ma, wb, mb, cax, cay, cbx, cby):
    """Minimum overlap of two convex polygons and its axis (pointing a -> b).

    A non-positive overlap means the polygons are separated.
    """
    best = np.inf
    bnx = 1.0
    bny = 0.0
    for which in range(2):
        if which == 0:
            w = wa
            m = ma
        else:
            w = wb
            m = mb
        for k in range(m):
            k2 = k + 1
            if k2 == m:
                k2 = 0
            ex = w[k2, 0] - w[k, 0]
            ey = w[k2, 1] - w[k, 1]
            inv = 1.0 / math.sqrt(ex * ex + ey * ey)
            nx = ey * inv
            ny = -ex * inv
            amin = np.inf
            amax = -np.inf
            for q in range(ma):
                p = wa[q, 0] * nx + wa[q, 1] * ny
                if p < amin:
                    amin = p
                if p > amax:
                    amax = p
            bmin = np.inf
            bmax = -np.inf
            for q in range(mb):
                p = wb[q, 0] * nx + wb[q, 1] * ny
                if p < bmin:
                    bmin = p
                if p > bmax:
                    bmax = p
            hi = amax if amax < bmax else bmax
            lo = amin if amin > bmin else bmin
            o = hi - lo
            if o <= 0.0:
                return o, nx, ny
            if o < best:
                best = o
                bnx = nx
                bny = ny
    if (cbx - cax) * bnx + (cby - cay) * bny < 0.0:
        bnx = -bnx
        bny = -bny
    return best, bnx, bny


@njit(cache=True, nogil=True)
def polygon_distance(wa, ma, wb, mb, cax, cay, cbx, cby):
    """Euclidean distance between convex polygons; minus the overlap if they intersect."""
    o, _, _ = sat_overlap(wa, ma, wb, mb, cax, cay, cbx, cby)
    if o > 0.0:
        return -o
    best = np.inf
    for q in range(ma):
        sd, _, _, _, _ = point_polygon(wa[q, 0], wa[q, 1], wb, mb)
        if sd < best:
            best = sd
    for q in range(mb):
        sd, _, _, _, _ = point_polygon(wb[q, 0], wb[q, 1], wa, ma)
        if sd < best:
            best = sd
    return best


@njit(cache=True, nogil=True)
def pair_penetration(i, j, poses, kinds, radii, wv, nverts):
    """Penetration depth between objects i and j and the unit normal from i to j."""
    dx = poses[j, 0] - poses[i, 0]
    dy = poses[j, 1] - poses[i, 1]
    rr = radii[i] + radii[j]
    d2 = dx * dx + dy * dy
    if d2 >= rr * rr:
        return 0.0, 1.0, 0.0
    if kinds[i] == DISC and kinds[j] == DISC:
        d = math.sqrt(d2)
        if d == 0.0:
            return rr, 1.0, 0.0
        return rr - d, dx / d, dy / d
    if kinds[i] == DISC:
        sd, nx, ny, _, _ = point_polygon(poses[i, 0], poses[i, 1], wv[j], nverts[j])
        return radii[i] - sd, nx, ny
    if kinds[j] == DISC:
        sd, nx, ny, _, _ = point_polygon(poses[j, 0], poses[j, 1], wv[i], nverts[i])
        return radii[j] - sd, -nx, -ny
    return sat_overlap(wv[i], nverts[i], wv[j], nverts[j],
                       poses[i, 0], poses[i, 1], poses[j, 0], poses[j, 1])


@njit(cache=True, nogil=True)
def circle_collides(px, py, r, poses, kinds, radii, verts, nverts, wv_scratch):
    """True if the open disc (px, py, r) intersects any object."""
    n = poses.shape[0]
    for i in range(n):
        dx = poses[i, 0] - px
        dy = poses[i, 1] - py
        reach = r + radii[i]
        d2 = dx * dx + dy * dy
        if d2 >= reach * reach:
            continue
        if kinds[i] == DISC:
            return True
        world_vertices(verts[i], nverts[i], poses[i, 0], poses[i, 1], poses[i, 2], wv_scratch)
        sd, _, _, _, _ = point_polygon(px, py, wv_scratch, nverts[i])
        if sd < r:
            return True
    return False


@njit(cache=True, nogil=True)
def _clamp(poses, i, bound):
    changed = False
    for a in range(2):
        v = poses[i, a]
        if v > bound:
            poses[i, a] = bound
            changed = True
        elif v < -bound:
            poses[i, a] = -bound
            changed = True
    return changed


@njit(cache=True, nogil=True)
def _refresh(poses, i, kinds, verts, nverts, wv):
    if kinds[i] == POLYGON:
        world_vertices(verts[i], nverts[i], poses[i, 0], poses[i, 1], poses[i, 2], wv[i])


@njit(cache=True, nogil=True)
def _residual(cur, tx, ty, r, kinds, radii, wv, nverts, moved):
    n = cur.shape[0]
    worst = 0.0
    for i in range(n):
        if kinds[i] == DISC:
            pen = r + radii[i] - math.hypot(cur[i, 0] - tx, cur[i, 1] - ty)
        else:
            pen = r - point_polygon(tx, ty, wv[i], nverts[i])[0]
        if pen > worst:
            worst = pen
        for j in range(i + 1, n):
            if not (moved[i] or moved[j]):
                continue
            pen, _, _ = pair_penetration(i, j, cur, kinds, radii, wv, nverts)
            if pen > worst:
                worst = pen
    return worst


@njit(cache=True, nogil=True)
def resolve_push(poses, kinds, radii, verts, nverts, params, xs, ys, xe, ye):
    """Sweep the tip from (xs, ys) to (xe, ye) and return ``(poses, status)``.

    Each substep moves the tip, then runs Gauss-Seidel sweeps that project
    objects out of the tip (which never yields) and out of each other.  Objects
    closer to the tip in the contact chain yield less: a pair with unequal
    chain levels moves only the farther object, equal levels split the
    correction.  Centers are clamped to the workspace and a clamped object is
    immovable for the rest of the substep.  If a substep cannot be resolved
    below ``eps_pen`` the tip has jammed: the substep is undone and the push
    ends there (``STALLED``).
    """
    n = poses.shape[0]
    cur = poses.copy()
    prev = poses.copy()
    wv = np.zeros_like(verts)
    for i in range(n):
        _refresh(cur, i, kinds, verts, nverts, wv)

    substeps = int(params[P_SUBSTEPS])
    max_iter = int(params[P_MAX_ITER])
    eps = params[P_EPS_PEN]
    k_rot = params[P_K_ROT]
    r = params[P_TIP_R]
    bound = params[P_HALF] - params[P_MARGIN] - params[P_CLAMP_EPS]

    seg_x = xe - xs
    seg_y = ye - ys
    seg_l = math.sqrt(seg_x * seg_x + seg_y * seg_y)
    if seg_l > 0.0:
        dir_x = seg_x / seg_l
        dir_y = seg_y / seg_l
    else:
        dir_x = 1.0
        dir_y = 0.0

    level = np.empty(n, np.int64)
    immovable = np.empty(n, np.bool_)
    moved = np.empty(n, np.bool_)
    status = RESOLVED

    for step in range(1, substeps + 1):
        frac = step / substeps
        tx = xs + seg_x * frac
        ty = ys + seg_y * frac
        for i in range(n):
            for a in range(3):
                prev[i, a] = cur[i, a]
        for i in range(n):
            level[i] = _BIG_LEVEL
            immovable[i] = False
            moved[i] = False

        converged = False
        for _ in range(max_iter):
            max_pen = 0.0
            for i in range(n):
                dx = cur[i, 0] - tx
                dy = cur[i, 1] - ty
                reach = r + radii[i]
                d2 = dx * dx + dy * dy
                if d2 >= reach * reach:
                    continue
                if kinds[i] == DISC:
                    d = math.sqrt(d2)
                    pen = reach - d
                    if d > 0.0:
                        nx = dx / d
                        ny = dy / d
                    else:
                        nx = dir_x
                        ny = dir_y
                    qx = cur[i, 0]
                    qy = cur[i, 1]
                else:
                    sd, nx, ny, qx, qy = point_polygon(tx, ty, wv[i], nverts[i])
                    pen = r - sd
                if pen <= 0.0:
                    continue
                if pen > max_pen:
                    max_pen = pen
                level[i] = 0
                if immovable[i]:
                    continue
                mx = pen * nx
                my = pen * ny
                if kinds[i] == POLYGON and k_rot != 0.0:
                    rx = qx - cur[i, 0]
                    ry = qy - cur[i, 1]
                    rr = rx * rx + ry * ry
                    if rr > 0.0:
                        cur[i, 2] = wrap_angle(cur[i, 2] + k_rot * (rx * my - ry * mx) / rr)
                cur[i, 0] += mx
                cur[i, 1] += my
                if _clamp(cur, i, bound):
                    immovable[i] = True
                moved[i] = True
                _refresh(cur, i, kinds, verts, nverts, wv)

            for i in range(n):
                for j in range(i + 1, n):
                    if not (moved[i] or moved[j]):
                        continue
                    pen, nx, ny = pair_penetration(i, j, cur, kinds, radii, wv, nverts)
                    if pen <= 0.0:
                        continue
                    if pen > max_pen:
                        max_pen = pen
                    if immovable[i] and immovable[j]:
                        continue
                    if immovable[i]:
                        wi = 0.0
                        wj = 1.0
                    elif immovable[j]:
                        wi = 1.0
                        wj = 0.0
                    elif level[i] < level[j]:
                        wi = 0.0
                        wj = 1.0
                        level[j] = level[i] + 1
                    elif level[j] < level[i]:
                        wi = 1.0
                        wj = 0.0
                        level[i] = level[j] + 1
                    else:
                        wi = 0.5
                        wj = 0.5
                    if wi > 0.0:
                        cur[i, 0] -= wi * pen * nx
                        cur[i, 1] -= wi * pen * ny
                        if _clamp(cur, i, bound):
                            immovable[i] = True
                        moved[i] = True
                        _refresh(cur, i, kinds, verts, nverts, wv)
                    if wj > 0.0:
                        cur[j, 0] += wj * pen * nx
                        cur[j, 1] += wj * pen * ny
                        if _clamp(cur, j, bound):
                            immovable[j] = True
                        moved[j] = True
                        _refresh(cur, j, kinds, verts, nverts, wv)
            # corrections made during the sweep can reopen checked pairs
            if max_pen <= eps and _residual(cur, tx, ty, r, kinds, radii, wv, nverts, moved) <= eps:
                converged = True
                break

        if not converged:
            for i in range(n):
                for a in range(3):
                    cur[i, a] = prev[i, a]
            status = STALLED
            break
    return cur, status


@njit(cache=True, nogil=True)
def max_penetration(poses, kinds, radii, verts, nverts):
    n = poses.shape[0]
    wv = np.zeros_like(verts)
    for i in range(n):
        _refresh(poses, i, kinds, verts, nverts, wv)
    worst = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            pen, _, _ = pair_penetration(i, j, poses, kinds, radii, wv, nverts)
            if pen > worst:
                worst = pen
    return worst


@njit(cache=True, nogil=True)
def contour_offsets(kinds, radii, verts, nverts, n_angles, clearance_radius):
    """Distance from each object's center to its push start points.

    Start points lie on rays at evenly spaced angles in the object frame, at
    the first distance where a disc of ``clearance_radius`` clears the shape.
    """
    n = kinds.shape[0]
    out = np.empty((n, n_angles))
    for i in range(n):
        for j in range(n_angles):
            if kinds[i] == DISC:
                out[i, j] = radii[i] + clearance_radius + START_SLACK
                continue
            psi = _TWO_PI * j / n_angles
            ux = math.cos(psi)
            uy = math.sin(psi)
            lo = 0.0
            hi = radii[i] + clearance_radius
            for _ in range(60):
                mid = 0.5 * (lo + hi)
                sd, _, _, _, _ = point_polygon(mid * ux, mid * uy, verts[i], nverts[i])
                if sd >= clearance_radius:
                    hi = mid
                else:
                    lo = mid
            out[i, j] = hi + START_SLACK
    return out


@njit(cache=True, nogil=True)
def sample_pushes(poses, kinds, radii, verts, nverts, params, offsets, out):
    """Write candidate pushes into ``out`` (rows of xs, ys, xe, ye); return the count."""
    n = poses.shape[0]
    n_angles = offsets.shape[1]
    half = params[P_HALF]
    length = params[P_PUSH]
    clear_r = params[P_TIP_R] + params[P_CLEARANCE]
    scratch = np.empty((verts.shape[1], 2))
    count = 0
    for i in range(n):
        for j in range(n_angles):
            phi = poses[i, 2] + _TWO_PI * j / n_angles
            ux = math.cos(phi)
            uy = math.sin(phi)
            sx = poses[i, 0] + offsets[i, j] * ux
            sy = poses[i, 1] + offsets[i, j] * uy
            ex = sx - length * ux
            ey = sy - length * uy
            if not (abs(sx) < half and abs(sy) < half and abs(ex) < half and abs(ey) < half):
                continue
            if circle_collides(sx, sy, clear_r, poses, kinds, radii, verts, nverts, scratch):
                continue
            out[count, 0] = sx
            out[count, 1] = sy
            out[count, 2] = ex
            out[count, 3] = ey
            count += 1
    return count


@njit(cache=True, nogil=True)
def grasp_sweep(poses, kinds, radii, verts, nverts, params, target):
    """Best parallel-jaw grasp on the target.

    Returns ``(margin, angle_index, gx, gy)``; ``angle_index`` is -1 when no
    pose is feasible.  A pose is feasible when both fingers stay inside the
    workspace and clear every other object; its margin is the smallest
    finger-to-object distance (infinite with no other objects).  Angle k and
    k + K/2 place the same pair of fingers, so only the lower half is
    evaluated and ties keep the lowest index.
    """
    n = poses.shape[0]
    half = params[P_HALF]
    opening = params[P_OPENING]
    thick = params[P_FINGER_THICK]
    width = params[P_FINGER_WIDTH]
    n_k = int(params[P_K])
    wv = np.zeros_like(verts)
    for i in range(n):
        _refresh(poses, i, kinds, verts, nverts, wv)
    rect = np.empty((4, 2))
    half_diag = 0.5 * math.sqrt(thick * thick + width * width)
    tx = poses[target, 0]
    ty = poses[target, 1]

    best_margin = 0.0
    best_k = -1
    best_gx = 0.0
    best_gy = 0.0
    for k in range(n_k // 2):
        a = _TWO_PI * k / n_k
        ux = math.cos(a)
        uy = math.sin(a)
        vx = -uy
        vy = ux
        cu = tx * ux + ty * uy
        if kinds[target] == DISC:
            pmin = cu - radii[target]
            pmax = cu + radii[target]
        else:
            pmin = np.inf
            pmax = -np.inf
            for q in range(nverts[target]):
                p = wv[target, q, 0] * ux + wv[target, q, 1] * uy
                if p < pmin:
                    pmin = p
                if p > pmax:
                    pmax = p
        if pmax - pmin >= opening:
            continue
        shift = 0.5 * (pmin + pmax) - cu
        gx = tx + ux * shift
        gy = ty + uy * shift

        margin = np.inf
        for side in range(2):
            sgn = 1.0 if side == 0 else -1.0
            off = 0.5 * opening + 0.5 * thick
            fx = gx + sgn * ux * off
            fy = gy + sgn * uy * off
            au = 0.5 * thick
            av = 0.5 * width
            rect[0, 0] = fx - ux * au - vx * av
            rect[0, 1] = fy - uy * au - vy * av
            rect[1, 0] = fx + ux * au - vx * av
            rect[1, 1] = fy + uy * au - vy * av
            rect[2, 0] = fx + ux * au + vx * av
            rect[2, 1] = fy + uy * au + vy * av
            rect[3, 0] = fx - ux * au + vx * av
            rect[3, 1] = fy - uy * au + vy * av
            for q in range(4):
                if abs(rect[q, 0]) >= half or abs(rect[q, 1]) >= half:
                    margin = 0.0
            if margin <= 0.0:
                break
            for j in range(n):
                if j == target:
                    continue
                dx = poses[j, 0] - fx
                dy = poses[j, 1] - fy
                lower = math.sqrt(dx * dx + dy * dy) - radii[j] - half_diag
                if lower >= margin:
                    continue
                if kinds[j] == DISC:
                    sd, _, _, _, _ = point_polygon(poses[j, 0], poses[j, 1], rect, 4)
                    d = sd - radii[j]
                else:
                    d = polygon_distance(rect, 4, wv[j], nverts[j], fx, fy, poses[j, 0], poses[j, 1])
                if d < margin:
                    margin = d
                if margin <= 0.0:
                    break
            if margin <= 0.0:
                break
        if margin > 0.0 and margin > best_margin:
            best_margin = margin
            best_k = k
            best_gx = gx
            best_gy = gy
    return best_margin, best_k, best_gx, best_gy


@njit(cache=True, nogil=True)
def is_graspable(poses, kinds, radii, verts, nverts, params, target):
    margin, k, _, _ = grasp_sweep(poses, kinds, radii, verts, nverts, params, target)
    return k >= 0 and margin >= params[P_THRESHOLD]


_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


@njit(cache=True, nogil=True)
def next_u64(state):
    z = state[0] + _GOLDEN
    state[0] = z
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


@njit(cache=True, nogil=True)
def draw_index(state, count):
    z = next_u64(state)
    u = float(z >> np.uint64(11)) * (1.0 / 9007199254740992.0)
    idx = int(u * count)
    if idx >= count:
        idx = count - 1
    return idx


@njit(cache=True, nogil=True)
def rollout(poses, kinds, radii, verts, nverts, params, offsets, target,
            depth, max_depth, max_pushes, seed):
    """Random pushes from ``poses`` until the target is graspable.

    Returns ``(pushes, outcome)`` where outcome is one of ``ROLL_*``.  The
    caller has already checked graspability of the start state.
    """
    state = np.empty(1, np.uint64)
    state[0] = seed
    buf = np.empty((poses.shape[0] * offsets.shape[1], 4))
    cur = poses
    pushes = 0
    while True:
        if depth + pushes >= max_depth or pushes >= max_pushes:
            return pushes, ROLL_HORIZON
        count = sample_pushes(cur, kinds, radii, verts, nverts, params, offsets, buf)
        if count == 0:
            return pushes, ROLL_DEAD
        idx = draw_index(state, count)
        cur, _ = resolve_push(cur, kinds, radii, verts, nverts, params,
                              buf[idx, 0], buf[idx, 1], buf[idx, 2], buf[idx, 3])
        pushes += 1
        if is_graspable(cur, kinds, radii, verts, nverts, params, target):
            return pushes, ROLL_GRASPED
