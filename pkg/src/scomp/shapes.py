"""Parametric mesh primitives and procedural vertex coloring.

Every factory returns a closed mesh with outward CCW winding, centered
so the canonical frame origin sits at the bounding-box center. Composite
shapes (mug) are unions of individually closed parts, which keeps ray
parity tests valid on them.
"""

from __future__ import annotations

import numpy as np

from .scene import TexturedMesh


def _signed_volume(verts: np.ndarray, faces: np.ndarray) -> float:
    t = verts[faces]
    return float(np.einsum("ij,ij->i", t[:, 0], np.cross(t[:, 1], t[:, 2])).sum() / 6.0)


def _finish(verts, faces, recenter=True) -> tuple[np.ndarray, np.ndarray]:
    verts = np.asarray(verts, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    if _signed_volume(verts, faces) < 0:
        faces = faces[:, ::-1]
    if recenter:
        verts = verts - (verts.min(axis=0) + verts.max(axis=0)) / 2.0
    return verts, faces


def box(extents) -> TexturedMesh:
    """Axis-aligned box with the given (x, y, z) edge lengths."""
    hx, hy, hz = np.asarray(extents, dtype=np.float64) / 2.0
    v = np.array([
        [-hx, -hy, -hz], [hx, -hy, -hz], [hx, hy, -hz], [-hx, hy, -hz],
        [-hx, -hy, hz], [hx, -hy, hz], [hx, hy, hz], [-hx, hy, hz],
    ])
    f = np.array([
        [0, 2, 1], [0, 3, 2],          # bottom, -z
        [4, 5, 6], [4, 6, 7],          # top, +z
        [0, 1, 5], [0, 5, 4],          # -y
        [2, 3, 7], [2, 7, 6],          # +y
        [0, 4, 7], [0, 7, 3],          # -x
        [1, 2, 6], [1, 6, 5],          # +x
    ])
    return TexturedMesh(*_finish(v, f, recenter=False))


def icosphere(radius: float, subdivisions: int = 2) -> TexturedMesh:
    """Geodesic sphere; subdivisions=2 gives 320 faces."""
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    v = np.array([
        [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
        [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
        [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
    ], dtype=np.float64)
    f = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ])
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}
        verts = list(v)

        def midpoint(a: int, b: int) -> int:
            key = (a, b) if a < b else (b, a)
            if key not in cache:
                cache[key] = len(verts)
                verts.append((verts[a] + verts[b]) / 2.0)
            return cache[key]

        out = []
        for a, b, c in f:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            out += [[a, ab, ca], [ab, b, bc], [ca, bc, c], [ab, bc, ca]]
        v = np.asarray(verts)
        f = np.asarray(out)
    v = v / np.linalg.norm(v, axis=1, keepdims=True) * radius
    return TexturedMesh(*_finish(v, f, recenter=False))


def _revolve(profile, segments: int) -> tuple[np.ndarray, np.ndarray]:
    """Surface of revolution about +Z from an (r, z) polyline.

    Zero-radius endpoints become poles; repeated z values give flat caps.
    """
    profile = np.asarray(profile, dtype=np.float64)
    theta = np.linspace(0.0, 2 * np.pi, segments, endpoint=False)
    cos, sin = np.cos(theta), np.sin(theta)

    verts = []
    ring_index = []       # per profile row: None for pole, else start index
    for r, z in profile:
        if r <= 1e-12:
            ring_index.append(len(verts))
            verts.append([0.0, 0.0, z])
        else:
            ring_index.append(len(verts))
            for k in range(segments):
                verts.append([r * cos[k], r * sin[k], z])

    faces = []
    for i in range(len(profile) - 1):
        r0, z0 = profile[i]
        r1, z1 = profile[i + 1]
        a, b = ring_index[i], ring_index[i + 1]
        if r0 <= 1e-12 and r1 <= 1e-12:
            continue
        if r0 <= 1e-12:        # lower pole fan
            for k in range(segments):
                nk = (k + 1) % segments
                faces.append([a, b + nk, b + k])
        elif r1 <= 1e-12:      # upper pole fan
            for k in range(segments):
                nk = (k + 1) % segments
                faces.append([b, a + k, a + nk])
        else:
            for k in range(segments):
                nk = (k + 1) % segments
                faces.append([a + k, a + nk, b + nk])
                faces.append([a + k, b + nk, b + k])
    return np.asarray(verts), np.asarray(faces)


def cylinder(radius: float, height: float, segments: int = 24) -> TexturedMesh:
    h = height / 2.0
    profile = [(0.0, -h), (radius, -h), (radius, h), (0.0, h)]
    return TexturedMesh(*_finish(*_revolve(profile, segments)))


def capsule(radius: float, cylinder_height: float, segments: int = 20,
            rings: int = 5) -> TexturedMesh:
    h = cylinder_height / 2.0
    prof = [(0.0, -h - radius)]
    for phi in np.linspace(np.pi / (2 * rings), np.pi / 2, rings):
        prof.append((radius * np.sin(phi), -h - radius * np.cos(phi)))
    for phi in np.linspace(np.pi / 2, np.pi / (2 * rings), rings):
        prof.append((radius * np.sin(phi), h + radius * np.cos(phi)))
    prof.append((0.0, h + radius))
    return TexturedMesh(*_finish(*_revolve(prof, segments)))


def l_block(leg_x: float, leg_y: float, thickness: float, height: float) -> TexturedMesh:
    """L-shaped prism: two legs of the given lengths, square corner, extruded in z."""
    t = thickness
    outline = np.array([
        [0.0, 0.0], [leg_x, 0.0], [leg_x, t], [t, t], [t, leg_y], [0.0, leg_y],
    ])
    bottom_tris = np.array([[0, 1, 2], [0, 2, 3], [0, 3, 4], [0, 4, 5]])
    n = len(outline)
    verts = np.concatenate([
        np.column_stack([outline, np.zeros(n)]),
        np.column_stack([outline, np.full(n, height)]),
    ])
    faces = []
    for a, b, c in bottom_tris:
        faces.append([a, c, b])                   # bottom, -z
        faces.append([a + n, b + n, c + n])       # top, +z
    for i in range(n):
        j = (i + 1) % n
        faces.append([i, j, j + n])
        faces.append([i, j + n, i + n])
    return TexturedMesh(*_finish(verts, np.asarray(faces)))


def _tube(path: np.ndarray, tube_radius: float, sides: int = 10
          ) -> tuple[np.ndarray, np.ndarray]:
    """Closed tube swept along a polyline, with fan caps at both ends."""
    path = np.asarray(path, dtype=np.float64)
    n = len(path)
    tangents = np.gradient(path, axis=0)
    tangents /= np.linalg.norm(tangents, axis=1, keepdims=True)
    # parallel-transport a frame along the path
    ref = np.array([0.0, 1.0, 0.0])
    if abs(tangents[0] @ ref) > 0.9:
        ref = np.array([1.0, 0.0, 0.0])
    u = np.cross(tangents[0], ref)
    u /= np.linalg.norm(u)
    theta = np.linspace(0, 2 * np.pi, sides, endpoint=False)
    verts, rings = [], []
    for i in range(n):
        tangent = tangents[i]
        u = u - tangent * (u @ tangent)
        u /= np.linalg.norm(u)
        w = np.cross(tangent, u)
        rings.append(len(verts))
        for th in theta:
            verts.append(path[i] + tube_radius * (np.cos(th) * u + np.sin(th) * w))
    faces = []
    for i in range(n - 1):
        a, b = rings[i], rings[i + 1]
        for k in range(sides):
            nk = (k + 1) % sides
            faces.append([a + k, a + nk, b + nk])
            faces.append([a + k, b + nk, b + k])
    # end caps
    start_center = len(verts)
    verts.append(path[0])
    end_center = len(verts)
    verts.append(path[-1])
    for k in range(sides):
        nk = (k + 1) % sides
        faces.append([start_center, rings[0] + nk, rings[0] + k])
        faces.append([end_center, rings[-1] + k, rings[-1] + nk])
    return np.asarray(verts), np.asarray(faces)


def mug(radius: float, height: float, handle_radius: float | None = None,
        segments: int = 24) -> TexturedMesh:
    """Cylindrical body plus a handle tube; union of two closed parts."""
    if handle_radius is None:
        handle_radius = 0.45 * radius
    h = height / 2.0
    body_v, body_f = _revolve(
        [(0.0, -h), (radius, -h), (radius, h), (0.0, h)], segments)
    # handle: circular arc in the xz-plane centered just inside the wall,
    # swept past vertical so both tube ends are buried in the body
    cx = radius * 0.85
    arc = np.linspace(-0.72 * np.pi, 0.72 * np.pi, 12)
    path = np.column_stack([
        cx + handle_radius * np.cos(arc),
        np.zeros(len(arc)),
        handle_radius * np.sin(arc),
    ])
    hand_v, hand_f = _tube(path, tube_radius=0.22 * radius, sides=10)
    verts = np.concatenate([body_v, hand_v])
    faces = np.concatenate([body_f, hand_f + len(body_v)])
    return TexturedMesh(*_finish(verts, faces))


_SHAPE_BUILDERS = {
    "box": lambda rng: box(rng.uniform(0.05, 0.09, size=3)),
    "cylinder": lambda rng: cylinder(rng.uniform(0.022, 0.038), rng.uniform(0.07, 0.12)),
    "sphere": lambda rng: icosphere(rng.uniform(0.028, 0.038)),
    "capsule": lambda rng: capsule(rng.uniform(0.02, 0.03), rng.uniform(0.04, 0.07)),
    "l_block": lambda rng: l_block(rng.uniform(0.07, 0.1), rng.uniform(0.07, 0.1),
                                   rng.uniform(0.025, 0.035), rng.uniform(0.04, 0.06)),
    "mug": lambda rng: mug(rng.uniform(0.03, 0.039), rng.uniform(0.075, 0.11)),
}

SHAPE_NAMES = tuple(_SHAPE_BUILDERS)


def make_shape(name: str, rng: np.random.Generator) -> TexturedMesh:
    """Build one of the named primitives with dimensions drawn from `rng`."""
    try:
        builder = _SHAPE_BUILDERS[name]
    except KeyError:
        raise ValueError(f"unknown shape {name!r}, have {sorted(_SHAPE_BUILDERS)}") from None
    return builder(rng)


# -------------------------------------------------------- colorization ----

def _lattice_hash(ix, iy, iz, seed):
    h = (ix * 374761393 + iy * 668265263 + iz * 2246822519
         + (seed & 0xFFFFF) * 3266489917)
    h &= 0xFFFFFFFF
    h ^= h >> 13
    h = (h * 1274126177) & 0xFFFFFFFF
    h ^= h >> 16
    return h.astype(np.float64) / 4294967296.0


def _value_noise(p: np.ndarray, seed: int) -> np.ndarray:
    """Trilinear value noise over an integer lattice, output in [0, 1)."""
    base = np.floor(p).astype(np.int64)
    f = p - base
    f = f * f * (3.0 - 2.0 * f)      # smoothstep
    acc = np.zeros(len(p))
    for dx in (0, 1):
        wx = f[:, 0] if dx else 1.0 - f[:, 0]
        for dy in (0, 1):
            wy = f[:, 1] if dy else 1.0 - f[:, 1]
            for dz in (0, 1):
                wz = f[:, 2] if dz else 1.0 - f[:, 2]
                corner = _lattice_hash(base[:, 0] + dx, base[:, 1] + dy,
                                       base[:, 2] + dz, seed)
                acc += corner * wx * wy * wz
    return acc


def noise_colors(points: np.ndarray, seed: int, frequency: float = 70.0) -> np.ndarray:
    """Smooth two-tone noise texture evaluated at 3D points, as uint8 RGB.

    The two anchor tones are drawn from the seed, so different objects get
    visibly different palettes while staying locally contrastive.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = _value_noise(pts * frequency, seed)
    n = 0.65 * n + 0.35 * _value_noise(pts * frequency * 2.3 + 17.0, seed + 1)
    rng = np.random.default_rng(seed)
    lo = rng.uniform(20, 120, size=3)
    hi = rng.uniform(135, 250, size=3)
    rgb = lo[None, :] + (hi - lo)[None, :] * n[:, None]
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


def colorize(mesh: TexturedMesh, seed: int, frequency: float = 70.0) -> TexturedMesh:
    return TexturedMesh(mesh.vertices, mesh.faces,
                        noise_colors(mesh.vertices, seed, frequency))


# descriptive color names used when labeling generated objects
_COLOR_NAMES = [
    ((200, 60, 60), "red"), ((60, 170, 60), "green"), ((70, 90, 200), "blue"),
    ((210, 200, 70), "yellow"), ((180, 90, 190), "purple"), ((230, 140, 60), "orange"),
    ((90, 190, 190), "teal"), ((140, 100, 70), "brown"), ((150, 150, 150), "gray"),
]


def dominant_color_name(colors: np.ndarray) -> str:
    mean = np.asarray(colors, dtype=np.float64).mean(axis=0)
    dists = [np.linalg.norm(mean - np.asarray(c)) for c, _ in _COLOR_NAMES]
    return _COLOR_NAMES[int(np.argmin(dists))][1]
