"""Triangle bounding-volume hierarchy with JIT-compiled query kernels.

One structure serves every geometric query in the package: per-pixel ray
casting for rendering, exact closest-point-on-triangle distances for
registration scoring, oriented-box overlap for gripper collision checks,
and triangle/cell overlap for voxelization.

Nodes are stored flat; leaves reference a contiguous range of pre-permuted
triangles so the kernels never chase pointers.
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange

from .errors import DegenerateGeometryError

_LEAF_SIZE = 4
_STACK = 128
_MAX_RAY_HITS = 64


class TriangleBvh:
    """Median-split BVH over a triangle soup."""

    def __init__(self, vertices: np.ndarray, faces: np.ndarray):
        vertices = np.ascontiguousarray(vertices, dtype=np.float64)
        faces = np.ascontiguousarray(faces, dtype=np.int64)
        if len(faces) == 0:
            raise DegenerateGeometryError("cannot build a BVH over zero triangles")
        tri = vertices[faces]
        centroids = tri.mean(axis=1)
        tri_min = tri.min(axis=1)
        tri_max = tri.max(axis=1)

        order = np.arange(len(faces))
        nmin, nmax, na, nb, nleaf = [], [], [], [], []

        def build(lo: int, hi: int) -> int:
            idx = len(nmin)
            sel = order[lo:hi]
            nmin.append(tri_min[sel].min(axis=0))
            nmax.append(tri_max[sel].max(axis=0))
            na.append(0)
            nb.append(0)
            nleaf.append(False)
            if hi - lo <= _LEAF_SIZE:
                na[idx] = lo
                nb[idx] = hi - lo
                nleaf[idx] = True
                return idx
            c = centroids[sel]
            axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
            order[lo:hi] = sel[np.argsort(c[:, axis], kind="stable")]
            mid = lo + (hi - lo) // 2
            na[idx] = build(lo, mid)
            nb[idx] = build(mid, hi)
            return idx

        import sys
        limit = sys.getrecursionlimit()
        sys.setrecursionlimit(max(limit, 10000))
        try:
            build(0, len(faces))
        finally:
            sys.setrecursionlimit(limit)

        self.node_min = np.ascontiguousarray(nmin, dtype=np.float64)
        self.node_max = np.ascontiguousarray(nmax, dtype=np.float64)
        self.node_a = np.asarray(na, dtype=np.int64)
        self.node_b = np.asarray(nb, dtype=np.int64)
        self.node_leaf = np.asarray(nleaf, dtype=np.bool_)
        self.tri_index = np.ascontiguousarray(order, dtype=np.int64)
        self.v0 = np.ascontiguousarray(tri[order, 0])
        self.v1 = np.ascontiguousarray(tri[order, 1])
        self.v2 = np.ascontiguousarray(tri[order, 2])

    def _arrays(self):
        return (self.node_min, self.node_max, self.node_a, self.node_b,
                self.node_leaf, self.v0, self.v1, self.v2)

    def raycast(self, origins: np.ndarray, directions: np.ndarray,
                t_min: float = 1e-9, t_max: float = np.inf):
        """Nearest hit per ray.

        Returns (t, tri, u, v): ray parameter, original triangle index
        (-1 on miss) and barycentric coordinates of the hit.
        """
        origins = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
        directions = np.ascontiguousarray(directions, dtype=np.float64).reshape(-1, 3)
        t, tri, u, v = _raycast_batch(origins, directions, float(t_min), float(t_max),
                                      *self._arrays())
        hit = tri >= 0
        out_tri = np.where(hit, self.tri_index[np.where(hit, tri, 0)], -1)
        return t, out_tri, u, v

    def raycast_all(self, origin: np.ndarray, direction: np.ndarray,
                    t_min: float = 1e-9):
        """Every hit along one ray, sorted by t. Returns (t array, tri array)."""
        o = np.asarray(origin, dtype=np.float64).reshape(3)
        d = np.asarray(direction, dtype=np.float64).reshape(3)
        n, ts, tris = _raycast_collect(o, d, float(t_min), *self._arrays())
        ts, tris = ts[:n], self.tri_index[tris[:n]]
        order = np.argsort(ts, kind="stable")
        return ts[order], tris[order]

    def closest_points(self, points: np.ndarray):
        """Exact closest point on the surface for each query point.

        Returns (distance, closest point, original triangle index).
        """
        pts = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
        d, cp, tri = _closest_batch(pts, *self._arrays())
        return d, cp, self.tri_index[tri]

    def box_overlaps(self, center: np.ndarray, half: np.ndarray,
                     axes: np.ndarray) -> bool:
        """True if the oriented box {center, half extents, unit axis rows} hits any triangle."""
        return bool(_box_overlap(np.asarray(center, dtype=np.float64).reshape(3),
                                 np.asarray(half, dtype=np.float64).reshape(3),
                                 np.ascontiguousarray(axes, dtype=np.float64).reshape(3, 3),
                                 *self._arrays()))


# ------------------------------------------------------------- kernels ----

@njit(cache=True, inline="always")
def _safe_inv(x):
    if x > 1e-300 or x < -1e-300:
        return 1.0 / x
    return 1e300 if x >= 0.0 else -1e300


@njit(cache=True, inline="always")
def _ray_aabb(ox, oy, oz, ix, iy, iz, bmin, bmax, t_lo, t_hi):
    """Slab test; returns entry t (or t_hi + 1 when the box is missed)."""
    tx1 = (bmin[0] - ox) * ix
    tx2 = (bmax[0] - ox) * ix
    tmin = min(tx1, tx2)
    tmax = max(tx1, tx2)
    ty1 = (bmin[1] - oy) * iy
    ty2 = (bmax[1] - oy) * iy
    tmin = max(tmin, min(ty1, ty2))
    tmax = min(tmax, max(ty1, ty2))
    tz1 = (bmin[2] - oz) * iz
    tz2 = (bmax[2] - oz) * iz
    tmin = max(tmin, min(tz1, tz2))
    tmax = min(tmax, max(tz1, tz2))
    if tmax >= tmin and tmax >= t_lo and tmin <= t_hi:
        return max(tmin, t_lo)
    return t_hi + 1.0


@njit(cache=True, inline="always")
def _ray_tri(ox, oy, oz, dx, dy, dz, a, b, c):
    """Moller-Trumbore; returns (t, u, v) with t < 0 on miss."""
    e1x = b[0] - a[0]
    e1y = b[1] - a[1]
    e1z = b[2] - a[2]
    e2x = c[0] - a[0]
    e2y = c[1] - a[1]
    e2z = c[2] - a[2]
    px = dy * e2z - dz * e2y
    py = dz * e2x - dx * e2z
    pz = dx * e2y - dy * e2x
    det = e1x * px + e1y * py + e1z * pz
    if -1e-14 < det < 1e-14:
        return -1.0, 0.0, 0.0
    inv = 1.0 / det
    tx = ox - a[0]
    ty = oy - a[1]
    tz = oz - a[2]
    u = (tx * px + ty * py + tz * pz) * inv
    if u < -1e-12 or u > 1.0 + 1e-12:
        return -1.0, 0.0, 0.0
    qx = ty * e1z - tz * e1y
    qy = tz * e1x - tx * e1z
    qz = tx * e1y - ty * e1x
    v = (dx * qx + dy * qy + dz * qz) * inv
    if v < -1e-12 or u + v > 1.0 + 1e-12:
        return -1.0, 0.0, 0.0
    t = (e2x * qx + e2y * qy + e2z * qz) * inv
    return t, u, v


@njit(cache=True, parallel=True)
def _raycast_batch(origins, directions, t_min, t_max,
                   node_min, node_max, node_a, node_b, node_leaf, v0, v1, v2):
    n = origins.shape[0]
    t_out = np.full(n, np.inf)
    tri_out = np.full(n, -1, dtype=np.int64)
    u_out = np.zeros(n)
    v_out = np.zeros(n)
    for i in prange(n):
        ox, oy, oz = origins[i, 0], origins[i, 1], origins[i, 2]
        dx, dy, dz = directions[i, 0], directions[i, 1], directions[i, 2]
        ix = _safe_inv(dx)
        iy = _safe_inv(dy)
        iz = _safe_inv(dz)
        best = min(t_max, 1e300)
        best_tri = -1
        best_u = 0.0
        best_v = 0.0
        stack = np.empty(_STACK, dtype=np.int64)
        top = 0
        stack[top] = 0
        top += 1
        while top > 0:
            top -= 1
            node = stack[top]
            if _ray_aabb(ox, oy, oz, ix, iy, iz,
                         node_min[node], node_max[node], t_min, best) > best:
                continue
            if node_leaf[node]:
                start = node_a[node]
                for k in range(start, start + node_b[node]):
                    t, u, v = _ray_tri(ox, oy, oz, dx, dy, dz, v0[k], v1[k], v2[k])
                    if t_min <= t < best:
                        best = t
                        best_tri = k
                        best_u = u
                        best_v = v
            else:
                stack[top] = node_a[node]
                top += 1
                stack[top] = node_b[node]
                top += 1
        t_out[i] = best if best_tri >= 0 else np.inf
        tri_out[i] = best_tri
        u_out[i] = best_u
        v_out[i] = best_v
    return t_out, tri_out, u_out, v_out


@njit(cache=True)
def _raycast_collect(origin, direction, t_min,
                     node_min, node_max, node_a, node_b, node_leaf, v0, v1, v2):
    ox, oy, oz = origin[0], origin[1], origin[2]
    dx, dy, dz = direction[0], direction[1], direction[2]
    ix = _safe_inv(dx)
    iy = _safe_inv(dy)
    iz = _safe_inv(dz)
    ts = np.empty(_MAX_RAY_HITS)
    tris = np.empty(_MAX_RAY_HITS, dtype=np.int64)
    count = 0
    stack = np.empty(_STACK, dtype=np.int64)
    top = 0
    stack[top] = 0
    top += 1
    while top > 0:
        top -= 1
        node = stack[top]
        if _ray_aabb(ox, oy, oz, ix, iy, iz,
                     node_min[node], node_max[node], t_min, 1e300) > 1e300:
            continue
        if node_leaf[node]:
            start = node_a[node]
            for k in range(start, start + node_b[node]):
                t, u, v = _ray_tri(ox, oy, oz, dx, dy, dz, v0[k], v1[k], v2[k])
                if t >= t_min and count < _MAX_RAY_HITS:
                    ts[count] = t
                    tris[count] = k
                    count += 1
        else:
            stack[top] = node_a[node]
            top += 1
            stack[top] = node_b[node]
            top += 1
    return count, ts, tris


@njit(cache=True, inline="always")
def _closest_on_tri(px, py, pz, a, b, c):
    """Closest point on triangle abc to p (Ericson, Real-Time Collision Detection)."""
    abx = b[0] - a[0]
    aby = b[1] - a[1]
    abz = b[2] - a[2]
    acx = c[0] - a[0]
    acy = c[1] - a[1]
    acz = c[2] - a[2]
    apx = px - a[0]
    apy = py - a[1]
    apz = pz - a[2]
    d1 = abx * apx + aby * apy + abz * apz
    d2 = acx * apx + acy * apy + acz * apz
    if d1 <= 0.0 and d2 <= 0.0:
        return a[0], a[1], a[2]
    bpx = px - b[0]
    bpy = py - b[1]
    bpz = pz - b[2]
    d3 = abx * bpx + aby * bpy + abz * bpz
    d4 = acx * bpx + acy * bpy + acz * bpz
    if d3 >= 0.0 and d4 <= d3:
        return b[0], b[1], b[2]
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        w = d1 / (d1 - d3)
        return a[0] + w * abx, a[1] + w * aby, a[2] + w * abz
    cpx = px - c[0]
    cpy = py - c[1]
    cpz = pz - c[2]
    d5 = abx * cpx + aby * cpy + abz * cpz
    d6 = acx * cpx + acy * cpy + acz * cpz
    if d6 >= 0.0 and d5 <= d6:
        return c[0], c[1], c[2]
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        w = d2 / (d2 - d6)
        return a[0] + w * acx, a[1] + w * acy, a[2] + w * acz
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return (b[0] + w * (c[0] - b[0]), b[1] + w * (c[1] - b[1]),
                b[2] + w * (c[2] - b[2]))
    denom = 1.0 / (va + vb + vc)
    s = vb * denom
    t = vc * denom
    return (a[0] + abx * s + acx * t, a[1] + aby * s + acy * t,
            a[2] + abz * s + acz * t)


@njit(cache=True, inline="always")
def _aabb_dist2(px, py, pz, bmin, bmax):
    d = 0.0
    if px < bmin[0]:
        d += (bmin[0] - px) ** 2
    elif px > bmax[0]:
        d += (px - bmax[0]) ** 2
    if py < bmin[1]:
        d += (bmin[1] - py) ** 2
    elif py > bmax[1]:
        d += (py - bmax[1]) ** 2
    if pz < bmin[2]:
        d += (bmin[2] - pz) ** 2
    elif pz > bmax[2]:
        d += (pz - bmax[2]) ** 2
    return d


@njit(cache=True, parallel=True)
def _closest_batch(points, node_min, node_max, node_a, node_b, node_leaf, v0, v1, v2):
    n = points.shape[0]
    dist = np.empty(n)
    closest = np.empty((n, 3))
    tri_out = np.empty(n, dtype=np.int64)
    for i in prange(n):
        px, py, pz = points[i, 0], points[i, 1], points[i, 2]
        best = np.inf
        bx = by = bz = 0.0
        bt = -1
        stack = np.empty(_STACK, dtype=np.int64)
        top = 0
        stack[top] = 0
        top += 1
        while top > 0:
            top -= 1
            node = stack[top]
            if _aabb_dist2(px, py, pz, node_min[node], node_max[node]) >= best:
                continue
            if node_leaf[node]:
                start = node_a[node]
                for k in range(start, start + node_b[node]):
                    qx, qy, qz = _closest_on_tri(px, py, pz, v0[k], v1[k], v2[k])
                    d2 = (qx - px) ** 2 + (qy - py) ** 2 + (qz - pz) ** 2
                    if d2 < best:
                        best = d2
                        bx, by, bz = qx, qy, qz
                        bt = k
            else:
                left = node_a[node]
                right = node_b[node]
                dl = _aabb_dist2(px, py, pz, node_min[left], node_max[left])
                dr = _aabb_dist2(px, py, pz, node_min[right], node_max[right])
                if dl <= dr:
                    stack[top] = right
                    top += 1
                    stack[top] = left
                    top += 1
                else:
                    stack[top] = left
                    top += 1
                    stack[top] = right
                    top += 1
        dist[i] = np.sqrt(best)
        closest[i, 0] = bx
        closest[i, 1] = by
        closest[i, 2] = bz
        tri_out[i] = bt
    return dist, closest, tri_out


@njit(cache=True, inline="always")
def _tri_aabb(cx, cy, cz, hx, hy, hz, va, vb, vc):
    """Separating-axis triangle / axis-aligned box overlap (Akenine-Moller)."""
    v0x = va[0] - cx
    v0y = va[1] - cy
    v0z = va[2] - cz
    v1x = vb[0] - cx
    v1y = vb[1] - cy
    v1z = vb[2] - cz
    v2x = vc[0] - cx
    v2y = vc[1] - cy
    v2z = vc[2] - cz

    # box axes
    if max(v0x, max(v1x, v2x)) < -hx or min(v0x, min(v1x, v2x)) > hx:
        return False
    if max(v0y, max(v1y, v2y)) < -hy or min(v0y, min(v1y, v2y)) > hy:
        return False
    if max(v0z, max(v1z, v2z)) < -hz or min(v0z, min(v1z, v2z)) > hz:
        return False

    e0x = v1x - v0x
    e0y = v1y - v0y
    e0z = v1z - v0z
    e1x = v2x - v1x
    e1y = v2y - v1y
    e1z = v2z - v1z
    e2x = v0x - v2x
    e2y = v0y - v2y
    e2z = v0z - v2z

    # nine edge cross-product axes
    for k in range(3):
        if k == 0:
            ex, ey, ez = e0x, e0y, e0z
            ax0, ay0, az0 = v0x, v0y, v0z
            ax1, ay1, az1 = v2x, v2y, v2z
        elif k == 1:
            ex, ey, ez = e1x, e1y, e1z
            ax0, ay0, az0 = v0x, v0y, v0z
            ax1, ay1, az1 = v1x, v1y, v1z
        else:
            ex, ey, ez = e2x, e2y, e2z
            ax0, ay0, az0 = v1x, v1y, v1z
            ax1, ay1, az1 = v2x, v2y, v2z
        # L = X x e
        p0 = ez * ay0 - ey * az0
        p1 = ez * ay1 - ey * az1
        r = hy * abs(ez) + hz * abs(ey)
        if min(p0, p1) > r or max(p0, p1) < -r:
            return False
        # L = Y x e
        p0 = ex * az0 - ez * ax0
        p1 = ex * az1 - ez * ax1
        r = hx * abs(ez) + hz * abs(ex)
        if min(p0, p1) > r or max(p0, p1) < -r:
            return False
        # L = Z x e
        p0 = ey * ax0 - ex * ay0
        p1 = ey * ax1 - ex * ay1
        r = hx * abs(ey) + hy * abs(ex)
        if min(p0, p1) > r or max(p0, p1) < -r:
            return False

    # triangle plane
    nx = e0y * e1z - e0z * e1y
    ny = e0z * e1x - e0x * e1z
    nz = e0x * e1y - e0y * e1x
    d = nx * v0x + ny * v0y + nz * v0z
    r = hx * abs(nx) + hy * abs(ny) + hz * abs(nz)
    return abs(d) <= r


@njit(cache=True)
def _box_overlap(center, half, axes,
                 node_min, node_max, node_a, node_b, node_leaf, v0, v1, v2):
    # world-space AABB of the oriented box for tree pruning
    rx = (abs(axes[0, 0]) * half[0] + abs(axes[1, 0]) * half[1]
          + abs(axes[2, 0]) * half[2])
    ry = (abs(axes[0, 1]) * half[0] + abs(axes[1, 1]) * half[1]
          + abs(axes[2, 1]) * half[2])
    rz = (abs(axes[0, 2]) * half[0] + abs(axes[1, 2]) * half[1]
          + abs(axes[2, 2]) * half[2])
    qmin = np.array([center[0] - rx, center[1] - ry, center[2] - rz])
    qmax = np.array([center[0] + rx, center[1] + ry, center[2] + rz])

    local = np.empty((3, 3))
    stack = np.empty(_STACK, dtype=np.int64)
    top = 0
    stack[top] = 0
    top += 1
    while top > 0:
        top -= 1
        node = stack[top]
        miss = False
        for d in range(3):
            if node_min[node][d] > qmax[d] or node_max[node][d] < qmin[d]:
                miss = True
                break
        if miss:
            continue
        if node_leaf[node]:
            start = node_a[node]
            for k in range(start, start + node_b[node]):
                for j in range(3):
                    if j == 0:
                        w = v0[k]
                    elif j == 1:
                        w = v1[k]
                    else:
                        w = v2[k]
                    tx = w[0] - center[0]
                    ty = w[1] - center[1]
                    tz = w[2] - center[2]
                    local[j, 0] = axes[0, 0] * tx + axes[0, 1] * ty + axes[0, 2] * tz
                    local[j, 1] = axes[1, 0] * tx + axes[1, 1] * ty + axes[1, 2] * tz
                    local[j, 2] = axes[2, 0] * tx + axes[2, 1] * ty + axes[2, 2] * tz
                if _tri_aabb(0.0, 0.0, 0.0, half[0], half[1], half[2],
                             local[0], local[1], local[2]):
                    return True
        else:
            stack[top] = node_a[node]
            top += 1
            stack[top] = node_b[node]
            top += 1
    return False


@njit(cache=True)
def _mark_surface_cells(v0, v1, v2, origin, cell, nx, ny, nz, occ):
    """Set occ[x, y, z] for every cell whose box overlaps a triangle."""
    for k in range(v0.shape[0]):
        lox = min(v0[k, 0], min(v1[k, 0], v2[k, 0]))
        hix = max(v0[k, 0], max(v1[k, 0], v2[k, 0]))
        loy = min(v0[k, 1], min(v1[k, 1], v2[k, 1]))
        hiy = max(v0[k, 1], max(v1[k, 1], v2[k, 1]))
        loz = min(v0[k, 2], min(v1[k, 2], v2[k, 2]))
        hiz = max(v0[k, 2], max(v1[k, 2], v2[k, 2]))
        x0 = max(int(np.floor((lox - origin[0]) / cell - 1e-9)), 0)
        x1 = min(int(np.floor((hix - origin[0]) / cell + 1e-9)), nx - 1)
        y0 = max(int(np.floor((loy - origin[1]) / cell - 1e-9)), 0)
        y1 = min(int(np.floor((hiy - origin[1]) / cell + 1e-9)), ny - 1)
        z0 = max(int(np.floor((loz - origin[2]) / cell - 1e-9)), 0)
        z1 = min(int(np.floor((hiz - origin[2]) / cell + 1e-9)), nz - 1)
        # each cell is treated as half-open [lo, hi): shifting the test box
        # down by a hair keeps triangles lying exactly on a lattice plane in
        # one cell instead of none (float knife-edge) or both (double shell)
        h = cell * 0.5
        shift = 1e-9
        for xi in range(x0, x1 + 1):
            cx = origin[0] + (xi + 0.5) * cell - shift
            for yi in range(y0, y1 + 1):
                cy = origin[1] + (yi + 0.5) * cell - shift
                for zi in range(z0, z1 + 1):
                    if occ[xi, yi, zi]:
                        continue
                    cz = origin[2] + (zi + 0.5) * cell - shift
                    if _tri_aabb(cx, cy, cz, h, h, h, v0[k], v1[k], v2[k]):
                        occ[xi, yi, zi] = True


def mark_surface_cells(vertices, faces, origin, cell, dims, occ=None):
    """Rasterize the mesh surface into a boolean grid (cells touched by triangles)."""
    tri = np.ascontiguousarray(vertices, dtype=np.float64)[np.asarray(faces, dtype=np.int64)]
    if occ is None:
        occ = np.zeros(tuple(int(d) for d in dims), dtype=np.bool_)
    _mark_surface_cells(np.ascontiguousarray(tri[:, 0]),
                        np.ascontiguousarray(tri[:, 1]),
                        np.ascontiguousarray(tri[:, 2]),
                        np.asarray(origin, dtype=np.float64), float(cell),
                        occ.shape[0], occ.shape[1], occ.shape[2], occ)
    return occ
