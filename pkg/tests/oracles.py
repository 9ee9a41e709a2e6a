"""Independent reference implementations used as test oracles.

None of these call into the kernels; they are slow, direct transcriptions.
"""

import math

import numpy as np


def ucb_brute(q, n, n_parent, c, nv=0, nv_parent=0):
    """Exploration score written out term by term."""
    denom = n + nv
    if denom == 0:
        return math.inf
    exploit = q / denom
    total_parent = n_parent + nv_parent
    explore = c * math.sqrt(2.0 * math.log(total_parent) / denom)
    return exploit + explore


def fine_disc_push(centers, radii, tip_r, start, end, substeps=4096, iters=500):
    """Pure-python disc push with many substeps; the object farther from the
    tip yields in every disc-disc contact."""
    pos = [list(c) for c in centers]
    sx, sy = start
    ex, ey = end
    for s in range(1, substeps + 1):
        tx = sx + (ex - sx) * s / substeps
        ty = sy + (ey - sy) * s / substeps
        for _ in range(iters):
            moved = False
            for i, p in enumerate(pos):
                d = math.hypot(p[0] - tx, p[1] - ty)
                pen = tip_r + radii[i] - d
                if pen > 1e-13:
                    p[0] += pen * (p[0] - tx) / d
                    p[1] += pen * (p[1] - ty) / d
                    moved = True
            for i in range(len(pos)):
                for j in range(i + 1, len(pos)):
                    a, b = pos[i], pos[j]
                    d = math.hypot(a[0] - b[0], a[1] - b[1])
                    pen = radii[i] + radii[j] - d
                    if pen <= 1e-13:
                        continue
                    far, near = (b, a) if math.hypot(b[0] - tx, b[1] - ty) > math.hypot(a[0] - tx, a[1] - ty) else (a, b)
                    far[0] += pen * (far[0] - near[0]) / d
                    far[1] += pen * (far[1] - near[1]) / d
                    moved = True
            if not moved:
                break
    return pos


def _world_polygon(verts, pose):
    c, s = math.cos(pose[2]), math.sin(pose[2])
    return [(pose[0] + c * x - s * y, pose[1] + s * x + c * y) for x, y in verts]


def _inside_convex(px, py, poly):
    """Vectorized point-in-convex-polygon (CCW) for arrays of points."""
    inside = np.ones(px.shape, bool)
    m = len(poly)
    for k in range(m):
        ax, ay = poly[k]
        bx, by = poly[(k + 1) % m]
        inside &= (bx - ax) * (py - ay) - (by - ay) * (px - ax) >= 0
    return inside


def _object_mask(shape, pose, px, py):
    if shape.kind == "disc":
        return (px - pose[0]) ** 2 + (py - pose[1]) ** 2 <= shape.radius ** 2
    return _inside_convex(px, py, _world_polygon(shape.vertices, pose))


def raster_grasp(state, geom, res=144, n_angles=16):
    """Brute-force grasp check on a ``res`` x ``res`` grid of cell centers.

    Returns ``(verdict, marginal)`` where verdict is True/False, or None when
    the scene sits within one raster cell of the decision boundary.
    """
    half = state.workspace.half
    cell = 2 * half / res
    h = cell * math.sqrt(2)
    coords = -half + cell * (np.arange(res) + 0.5)
    px, py = np.meshgrid(coords, coords)
    obstacles = np.zeros(px.shape, bool)
    target = state.target_index
    for i, (shape, pose) in enumerate(state.objects):
        if i != target:
            obstacles |= _object_mask(shape, pose, px, py)
    ox, oy = px[obstacles], py[obstacles]
    t_shape, t_pose = state.objects[target]
    if t_shape.kind == "disc":
        t_pts = None
    else:
        t_pts = np.array(_world_polygon(t_shape.vertices, t_pose))

    any_clear = False
    any_marginal = False
    for k in range(n_angles):
        a = 2 * math.pi * k / n_angles
        u = np.array([math.cos(a), math.sin(a)])
        v = np.array([-u[1], u[0]])
        if t_pts is None:
            lo = t_pose[0] * u[0] + t_pose[1] * u[1] - t_shape.radius
            hi = lo + 2 * t_shape.radius
        else:
            proj = t_pts @ u
            lo, hi = proj.min(), proj.max()
        if hi - lo >= geom.opening:
            continue
        center = np.array(t_pose[:2]) + u * (0.5 * (lo + hi) - (t_pose[0] * u[0] + t_pose[1] * u[1]))
        blocked = False
        near = False
        for sgn in (1.0, -1.0):
            fc = center + sgn * u * (0.5 * geom.opening + 0.5 * geom.finger_thickness)
            corners = [fc + su * u * geom.finger_thickness / 2 + sv * v * geom.finger_width / 2
                       for su in (-1, 1) for sv in (-1, 1)]
            reach = max(max(abs(c[0]), abs(c[1])) for c in corners)
            if reach >= half:
                blocked = True
            elif reach >= half - h:
                near = True
            du = np.abs((ox - fc[0]) * u[0] + (oy - fc[1]) * u[1]) - geom.finger_thickness / 2
            dv = np.abs((ox - fc[0]) * v[0] + (oy - fc[1]) * v[1]) - geom.finger_width / 2
            if np.any((du <= 0) & (dv <= 0)):
                blocked = True
            elif np.any((du <= h) & (dv <= h)):
                near = True
        if blocked:
            continue
        if near:
            any_marginal = True
        else:
            any_clear = True
    if any_clear:
        return True, False
    if any_marginal:
        return None, True
    return False, False


def game_tree(state, depth, tip, physics, geom, threshold, n_per_object=16):
    """Map each root push to the fewest pushes (<= depth) that make the target graspable."""
    from clutterplan.actions import graspable, sample_pushes
    from clutterplan.pushworld import resolve_push

    def solve(s, left):
        if graspable(s, geom, threshold).graspable:
            return 0
        if left == 0:
            return None
        best = None
        for p in sample_pushes(s, n_per_object, tip, physics):
            sub = solve(resolve_push(s, p, tip, physics), left - 1)
            if sub is not None and (best is None or sub + 1 < best):
                best = sub + 1
                if best == 1:
                    break
        return best

    out = {}
    for p in sample_pushes(state, n_per_object, tip, physics):
        sub = solve(resolve_push(state, p, tip, physics), depth - 1)
        out[p] = None if sub is None else sub + 1
    return out
