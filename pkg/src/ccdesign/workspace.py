"""Workspace geometry: STL meshes, voxelization, target sets, stand-in shapes."""
from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .reachability import TargetSet

BINARY_HEADER = 80
BINARY_RECORD = 50
_RECORD = np.dtype([("normal", "<f4", (3,)), ("v", "<f4", (3, 3)), ("attr", "<u2")])


class StlError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class MeshError(ValueError):
    """Mesh unsuitable for voxelization (e.g. not closed)."""


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (T, 3, 3) cm
    normals: np.ndarray  # (T, 3)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float).reshape(-1, 3, 3)
        if len(self.vertices) == 0:
            raise MeshError("mesh has no triangles")
        if not np.all(np.isfinite(self.vertices)):
            raise MeshError("mesh has non-finite vertices")
        if self.normals is None:
            self.normals = facet_normals(self.vertices)
        self.normals = np.asarray(self.normals, dtype=float).reshape(-1, 3)

    def __len__(self):
        return len(self.vertices)

    def bounds(self):
        flat = self.vertices.reshape(-1, 3)
        return flat.min(axis=0), flat.max(axis=0)

    def translated(self, offset) -> "TriangleMesh":
        return TriangleMesh(self.vertices + np.asarray(offset, dtype=float), self.normals.copy())

    def volume(self) -> float:
        """Signed volume (divergence theorem); positive for outward winding."""
        v = self.vertices
        return float(np.einsum("ti,ti->t", v[:, 0], np.cross(v[:, 1], v[:, 2])).sum() / 6.0)


def facet_normals(vertices: np.ndarray) -> np.ndarray:
    n = np.cross(vertices[:, 1] - vertices[:, 0], vertices[:, 2] - vertices[:, 0])
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    return np.divide(n, norm, out=np.zeros_like(n), where=norm > 0)


def _f32(values) -> np.ndarray:
    # STL stores float32; both parsers round to it so encodings agree
    return np.asarray(values, dtype=np.float32).astype(float)


# ---------------------------------------------------------------------------
# STL


def parse_stl(data: bytes) -> TriangleMesh:
    """Parse ASCII or binary STL.

    A file is binary when its 32-bit triangle count at byte 80 matches the
    file length exactly; otherwise it must be ASCII (``solid ...``).
    """
    count = None
    if len(data) >= BINARY_HEADER + 4:
        count = struct.unpack_from("<I", data, BINARY_HEADER)[0]
        if BINARY_HEADER + 4 + BINARY_RECORD * count == len(data):
            return _parse_binary(data, count)
    if data.lstrip()[:5].lower() == b"solid":
        return _parse_ascii(data)
    if count is None:
        raise StlError("truncated binary STL header", len(data))
    expected = BINARY_HEADER + 4 + BINARY_RECORD * count
    raise StlError(f"triangle count {count} needs {expected} bytes but file has {len(data)}",
                   min(len(data), expected))


def _parse_binary(data: bytes, count: int) -> TriangleMesh:
    if count == 0:
        raise StlError("binary STL declares zero triangles", BINARY_HEADER)
    rec = np.frombuffer(data, dtype=_RECORD, count=count, offset=BINARY_HEADER + 4)
    verts = rec["v"].astype(float)
    bad = ~np.isfinite(verts).all(axis=(1, 2))
    if bad.any():
        i = int(np.argmax(bad))
        raise StlError(f"non-finite vertex in facet {i}", BINARY_HEADER + 4 + BINARY_RECORD * i + 12)
    return TriangleMesh(verts, rec["normal"].astype(float))


def _parse_ascii(data: bytes) -> TriangleMesh:
    tokens = []  # (token, byte offset)
    pos = 0
    for line in data.splitlines(keepends=True):
        col = 0
        for tok in line.split():
            col = line.index(tok, col)
            tokens.append((tok, pos + col))
            col += len(tok)
        pos += len(line)
    it = iter(tokens)
    end = len(data)

    def take(expected=None):
        try:
            tok, off = next(it)
        except StopIteration:
            raise StlError("unexpected end of ASCII STL", end) from None
        if expected is not None and tok.lower() != expected:
            raise StlError(f"expected '{expected.decode()}', found '{tok.decode(errors='replace')}'", off)
        return tok, off

    def number():
        tok, off = take()
        try:
            val = float(tok)
        except ValueError:
            raise StlError(f"bad number '{tok.decode(errors='replace')}'", off) from None
        if not np.isfinite(val):
            raise StlError("non-finite value", off)
        return val

    take(b"solid")
    normals, verts = [], []
    tok, off = take()
    # skip the optional solid name
    while tok.lower() not in (b"facet", b"endsolid"):
        tok, off = take()
    while tok.lower() == b"facet":
        take(b"normal")
        normals.append([number() for _ in range(3)])
        take(b"outer")
        take(b"loop")
        tri = []
        for _ in range(3):
            take(b"vertex")
            tri.append([number() for _ in range(3)])
        verts.append(tri)
        take(b"endloop")
        take(b"endfacet")
        tok, off = take()
    if tok.lower() != b"endsolid":
        raise StlError(f"expected 'facet' or 'endsolid', found '{tok.decode(errors='replace')}'", off)
    if not verts:
        raise StlError("ASCII STL has no facets", off)
    return TriangleMesh(_f32(verts), _f32(normals))


def encode_stl(mesh: TriangleMesh, binary: bool = True, name: str = "ccdesign") -> bytes:
    if binary:
        rec = np.zeros(len(mesh), dtype=_RECORD)
        rec["normal"] = mesh.normals
        rec["v"] = mesh.vertices
        header = f"binary STL {name}".encode()[:BINARY_HEADER].ljust(BINARY_HEADER, b" ")
        return header + struct.pack("<I", len(mesh)) + rec.tobytes()
    out = io.StringIO()
    out.write(f"solid {name}\n")
    for n, tri in zip(_f32(mesh.normals), _f32(mesh.vertices)):
        out.write("  facet normal {} {} {}\n    outer loop\n".format(*(_fmt(v) for v in n)))
        for v in tri:
            out.write("      vertex {} {} {}\n".format(*(_fmt(c) for c in v)))
        out.write("    endloop\n  endfacet\n")
    out.write(f"endsolid {name}\n")
    return out.getvalue().encode()


def _fmt(v: float) -> str:
    return repr(float(np.float32(v)))


def read_stl(path) -> TriangleMesh:
    return parse_stl(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# voxelization


@dataclass
class VoxelGrid:
    origin: np.ndarray
    voxel_size: float
    dims: tuple[int, int, int]
    occupied: np.ndarray  # bool, shape dims

    @property
    def count(self) -> int:
        return int(self.occupied.sum())

    def axis_centers(self, axis: int) -> np.ndarray:
        return self.origin[axis] + (np.arange(self.dims[axis]) + 0.5) * self.voxel_size

    def centers(self) -> np.ndarray:
        """Centers of the occupied cells, C order."""
        idx = np.argwhere(self.occupied)
        return self.origin + (idx + 0.5) * self.voxel_size

    def volume(self) -> float:
        return self.count * self.voxel_size ** 3

    def components(self) -> int:
        """Number of 6-connected occupied regions."""
        return int(ndimage.label(self.occupied)[1])


def _lattice_extent(lo, hi, size):
    start = np.floor(lo / size + 1e-9)
    stop = np.ceil(hi / size - 1e-9)
    dims = np.maximum(stop - start, 1).astype(int)
    return start * size, tuple(int(d) for d in dims)


def _edge(a_u, a_v, b_u, b_v, p_u, p_v):
    """Edge function of a->b at p, bit-identical for a->b and -(b->a)."""
    swap = (a_u > b_u) | ((a_u == b_u) & (a_v > b_v))
    lo_u = np.where(swap, b_u, a_u)
    lo_v = np.where(swap, b_v, a_v)
    hi_u = np.where(swap, a_u, b_u)
    hi_v = np.where(swap, a_v, b_v)
    e = (hi_u - lo_u) * (p_v - lo_v) - (hi_v - lo_v) * (p_u - lo_u)
    return np.where(swap, -e, e)


def _crossings(vertices, axis, u_vals, v_vals):
    """Intersections of axis-parallel lines with the mesh.

    Lines pass through every ``(u, v)`` pair of the two other coordinates.
    Returns ``(line_index, coordinate, owned)``; line index is
    ``iu * len(v_vals) + iv``. Points on triangle boundaries are reported by
    every triangle touching them, but ``owned`` is set for exactly one of
    them (half-open top-left rule), so counting owned crossings gives exact
    parity on a watertight mesh.
    """
    ua, va = [a for a in range(3) if a != axis]
    lines, coords, owned = [], [], []
    nv = len(v_vals)
    for tri in vertices:
        pu, pv, pa = tri[:, ua], tri[:, va], tri[:, axis]
        iu = np.flatnonzero((u_vals >= pu.min()) & (u_vals <= pu.max()))
        iv = np.flatnonzero((v_vals >= pv.min()) & (v_vals <= pv.max()))
        if iu.size == 0 or iv.size == 0:
            continue
        area = float(_edge(pu[0], pv[0], pu[1], pv[1], pu[2], pv[2]))
        if area == 0.0:
            continue
        sign = 1.0 if area > 0 else -1.0
        gu, gv = np.meshgrid(u_vals[iu], v_vals[iv], indexing="ij")
        gu, gv = gu.ravel(), gv.ravel()
        e = np.stack([_edge(pu[i], pv[i], pu[(i + 1) % 3], pv[(i + 1) % 3], gu, gv)
                      for i in range(3)]) * sign
        closed = (e >= 0).all(axis=0)
        if not closed.any():
            continue
        own = closed.copy()
        for i in range(3):
            j = (i + 1) % 3
            du, dv = (pu[j] - pu[i]) * sign, (pv[j] - pv[i]) * sign
            if not (dv < 0 or (dv == 0 and du > 0)):
                own &= e[i] > 0
        w = e[:, closed] / (area * sign)
        # edge i's function weights the vertex opposite to it
        coords.append(w[0] * pa[2] + w[1] * pa[0] + w[2] * pa[1])
        ii = np.repeat(iu, len(iv))[closed]
        jj = np.tile(iv, len(iu))[closed]
        lines.append(ii * nv + jj)
        owned.append(own[closed])
    if not lines:
        return np.zeros(0, dtype=int), np.zeros(0), np.zeros(0, dtype=bool)
    return np.concatenate(lines), np.concatenate(coords), np.concatenate(owned)


def _parity(vertices, grid_origin, size, dims, axis, tol):
    """Crossing parity toward +axis and on-surface flags for all cell centers.

    Also returns the number of lines with an odd crossing count (a closed
    mesh has none).
    """
    centers = [grid_origin[a] + (np.arange(dims[a]) + 0.5) * size for a in range(3)]
    ua, va = [a for a in range(3) if a != axis]
    lines, coords, owned = _crossings(vertices, axis, centers[ua], centers[va])
    n_lines = dims[ua] * dims[va]
    na = dims[axis]
    # each owned crossing at c adds one to every center on its line below c
    k = np.searchsorted(centers[axis], coords[owned], side="left")
    diff = np.zeros((n_lines, na + 1), dtype=np.int64)
    np.add.at(diff, (lines[owned], np.zeros_like(k)), 1)
    np.add.at(diff, (lines[owned], k), -1)
    counts = np.cumsum(diff[:, :na], axis=1)
    odd = int((np.bincount(lines[owned], minlength=n_lines) % 2).sum())
    near = np.clip(np.rint((coords - centers[axis][0]) / size).astype(int), 0, na - 1)
    hit = np.abs(centers[axis][near] - coords) <= tol
    surf = np.zeros((n_lines, na), dtype=bool)
    surf[lines[hit], near[hit]] = True
    inside = (counts % 2 == 1).reshape(dims[ua], dims[va], na)
    surf = surf.reshape(dims[ua], dims[va], na)
    return np.moveaxis(inside, 2, axis), np.moveaxis(surf, 2, axis), odd


def _cells_near(tri, grid_origin, size, dims, pad):
    lo = np.floor((tri.min(axis=0) - pad - grid_origin) / size - 0.5).astype(int)
    hi = np.ceil((tri.max(axis=0) + pad - grid_origin) / size - 0.5).astype(int)
    lo = np.clip(lo, 0, np.array(dims) - 1)
    hi = np.clip(hi, 0, np.array(dims) - 1)
    if np.any(hi < lo):
        return np.zeros((0, 3), dtype=int)
    axes = [np.arange(lo[a], hi[a] + 1) for a in range(3)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, 3)


def _tri_box_overlap(tri, centers, half, tol):
    """Separating-axis test of one triangle against axis-aligned cubes.

    Touching counts as separated; only overlaps deeper than ``tol`` count.
    """
    v = tri[None] - centers[:, None, :]  # (K, 3, 3)
    edges = [tri[1] - tri[0], tri[2] - tri[1], tri[0] - tri[2]]
    axes = [np.eye(3)[i] for i in range(3)]
    normal = np.cross(edges[0], edges[1])
    cand = list(axes)
    if np.linalg.norm(normal) > 0:
        cand.append(normal)
    for e in edges:
        for a in axes:
            ax = np.cross(a, e)
            if np.linalg.norm(ax) > 1e-12:
                cand.append(ax)
    overlap = np.ones(len(centers), dtype=bool)
    for ax in cand:
        proj = v @ ax
        r = half * np.abs(ax).sum()
        overlap &= (proj.min(axis=1) < r - tol * np.linalg.norm(ax)) & (proj.max(axis=1) > -r + tol * np.linalg.norm(ax))
    return overlap


def _surface_cells(vertices, grid_origin, size, dims, tol):
    out = np.zeros(dims, dtype=bool)
    for tri in vertices:
        cells = _cells_near(tri, grid_origin, size, dims, 0.0)
        if len(cells) == 0:
            continue
        centers = grid_origin + (cells + 0.5) * size
        hit = _tri_box_overlap(tri, centers, 0.5 * size, tol)
        out[tuple(cells[hit].T)] = True
    return out


def voxelize_mesh(mesh: TriangleMesh, voxel_size: float, surface: str = "center",
                  max_inconsistent: float = 0.01) -> VoxelGrid:
    """Voxelize the interior of a closed mesh.

    The grid is the smallest block of the world lattice (spacing
    ``voxel_size``, anchored at the origin) that covers the mesh's bounding
    box. Cell centers are classified by crossing parity along +x; centers on
    the surface count as inside. With ``surface="overlap"`` every cell the
    surface passes through is also occupied (conservative shell).

    Parity is cross-checked along +y and +z. Odd crossing counts or
    disagreement on ``max_inconsistent`` or more of the probe lines/cells
    raise ``MeshError`` (mesh not closed).
    """
    if not voxel_size > 0 or not np.isfinite(voxel_size):
        raise ValueError(f"voxel_size must be a positive number, got {voxel_size}")
    if surface not in ("center", "overlap"):
        raise ValueError(f"unknown surface mode {surface!r}")
    lo, hi = mesh.bounds()
    origin, dims = _lattice_extent(lo, hi, voxel_size)
    tol = 1e-9 * voxel_size
    verts = mesh.vertices
    inside, surf, odd = zip(*(_parity(verts, origin, voxel_size, dims, axis, tol) for axis in range(3)))
    on_surf = surf[0] | surf[1] | surf[2]
    n_lines = sum(int(np.prod(dims)) // dims[a] for a in range(3))
    if sum(odd) / n_lines >= max_inconsistent:
        raise MeshError(f"{sum(odd)} of {n_lines} probe lines cross the surface an odd number of "
                        "times; mesh is not closed")
    disagree = ((inside[0] != inside[1]) | (inside[0] != inside[2])) & ~on_surf
    if disagree.mean() >= max_inconsistent:
        raise MeshError(f"inconsistent inside/outside parity on {disagree.mean():.1%} of cells; "
                        "mesh is probably not closed")
    occupied = inside[0] | on_surf
    if surface == "overlap":
        occupied |= _surface_cells(verts, origin, voxel_size, dims, tol)
    return VoxelGrid(origin, float(voxel_size), dims, occupied)


def grid_to_targets(grid: VoxelGrid, tolerance: float, required_fraction: float) -> TargetSet:
    if grid.count == 0:
        raise ValueError("voxel grid has no occupied cells")
    return TargetSet(grid.centers(), tolerance, required_fraction,
                     voxel_size=grid.voxel_size, voxel_origin=grid.origin)


# ---------------------------------------------------------------------------
# point lists


def read_points_csv(path) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames][:3] != ["x", "y", "z"]:
            raise ValueError(f"{path}: expected header 'x,y,z'")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            try:
                rows.append([float(row[k]) for k in ("x", "y", "z")])
            except (TypeError, ValueError):
                raise ValueError(f"{path}:{lineno}: bad point row {row}") from None
    pts = np.array(rows, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError(f"{path}: no points")
    if not np.all(np.isfinite(pts)):
        raise ValueError(f"{path}: non-finite coordinates")
    return pts


def write_points_csv(path, points) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "z"])
        for p in np.asarray(points, dtype=float).reshape(-1, 3):
            w.writerow([repr(float(c)) for c in p])


# ---------------------------------------------------------------------------
# mesh generators


def box_mesh(lo, hi) -> TriangleMesh:
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    c = np.array([[lo[0] if i & 1 == 0 else hi[0],
                   lo[1] if i & 2 == 0 else hi[1],
                   lo[2] if i & 4 == 0 else hi[2]] for i in range(8)])
    quads = [(0, 2, 3, 1), (4, 5, 7, 6), (0, 1, 5, 4), (2, 6, 7, 3), (0, 4, 6, 2), (1, 3, 7, 5)]
    tris = []
    for a, b, cc, d in quads:
        tris += [[c[a], c[b], c[cc]], [c[a], c[cc], c[d]]]
    tris = np.array(tris)
    return TriangleMesh(tris, facet_normals(tris))


def _orthonormal_pair(axis):
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    helper = np.array([1.0, 0.0, 0.0]) if abs(axis[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(axis, helper)
    e1 /= np.linalg.norm(e1)
    return axis, e1, np.cross(axis, e1)


def cylinder_mesh(start, end, radius: float, segments: int = 48) -> TriangleMesh:
    """Closed prism approximating a cylinder from ``start`` to ``end``."""
    start = np.asarray(start, dtype=float)
    end = np.asarray(end, dtype=float)
    axis, e1, e2 = _orthonormal_pair(end - start)
    ang = np.linspace(0, 2 * np.pi, segments, endpoint=False)
    ring = radius * (np.cos(ang)[:, None] * e1 + np.sin(ang)[:, None] * e2)
    bot, top = start + ring, end + ring
    tris = []
    for i in range(segments):
        j = (i + 1) % segments
        tris += [[bot[i], bot[j], top[j]], [bot[i], top[j], top[i]],
                 [start, bot[j], bot[i]], [end, top[i], top[j]]]
    tris = np.array(tris)
    return TriangleMesh(tris, facet_normals(tris))


def sphere_mesh(center, radius: float, subdivisions: int = 4) -> TriangleMesh:
    """Icosphere, vertices on the sphere."""
    t = (1 + 5 ** 0.5) / 2
    verts = [[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0], [0, -1, t], [0, 1, t],
             [0, -1, -t], [0, 1, -t], [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
             (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
             (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(v, dtype=float) / np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        cache = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    v = np.array(verts) * radius + np.asarray(center, dtype=float)
    tris = v[np.array(faces)]
    return TriangleMesh(tris, facet_normals(tris))


def merge_meshes(*meshes: TriangleMesh) -> TriangleMesh:
    return TriangleMesh(np.concatenate([m.vertices for m in meshes]),
                        np.concatenate([m.normals for m in meshes]))


# ---------------------------------------------------------------------------
# stand-ins for the three application workspaces (cm)

# one arm's box in front of the base; with the base at the origin the
# envelope is 80 x 32 x 51
MOBILE_BOX = ((-40.0, 8.0, -25.5), (40.0, 32.0, 25.5))
# wide short cylinder above the floor and a thin long collector, both below
# a downward-pointing base; envelope 51 x 86 x 61 including the base
DEEP_SEA_WIDE = dict(start=(0.0, 17.5, 46.0), end=(0.0, 17.5, 61.0), radius=25.5)
DEEP_SEA_THIN = dict(start=(0.0, -43.0, 25.0), end=(0.0, -13.0, 25.0), radius=5.0)
# panel boundary: rounded rectangle in y-z, x drifting linearly with z
WELD_X = (13.7, 37.7)
WELD_Y = (10.9, 70.3)
WELD_Z = (0.0, -120.8)
WELD_CORNER = 12.0
WELD_POINTS = 32


def mobile_platform_mesh() -> TriangleMesh:
    return box_mesh(*MOBILE_BOX)


def deep_sea_mesh() -> TriangleMesh:
    return merge_meshes(cylinder_mesh(**DEEP_SEA_WIDE), cylinder_mesh(**DEEP_SEA_THIN))


def spot_welding_points(n: int = WELD_POINTS) -> np.ndarray:
    """``n`` points evenly spaced by arc length on the rounded panel boundary."""
    y0, y1 = WELD_Y
    z0, z1 = min(WELD_Z), max(WELD_Z)
    r = WELD_CORNER
    # boundary as a dense polyline, then resampled by arc length
    corners = [((y1 - r, z1 - r), 0.0), ((y0 + r, z1 - r), 0.5 * np.pi),
               ((y0 + r, z0 + r), np.pi), ((y1 - r, z0 + r), 1.5 * np.pi)]
    pts = []
    for (cy, cz), a0 in corners:
        a = np.linspace(a0, a0 + 0.5 * np.pi, 200)
        pts.append(np.stack([cy + r * np.cos(a), cz + r * np.sin(a)], axis=1))
    poly = np.concatenate(pts + [pts[0][:1]])
    seg = np.linalg.norm(np.diff(poly, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    want = np.arange(n) * s[-1] / n
    y = np.interp(want, s, poly[:, 0])
    z = np.interp(want, s, poly[:, 1])
    x0, x1 = WELD_X
    x = x0 + (x1 - x0) * (z - WELD_Z[0]) / (WELD_Z[1] - WELD_Z[0])
    return np.stack([x, y, z], axis=1)
