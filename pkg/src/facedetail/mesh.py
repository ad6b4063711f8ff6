"""Mesh-side detail processing.

Converts between triangle meshes and displacement maps: Laplacian smoothing
to build the detail-free base, baking the scan-minus-base difference into UV
space, and applying a displacement map back onto a mesh along its normals.
All functions are pure; meshes are immutable value objects.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError, TopologyError
from .raster import DisplacementMap

SMOOTH_ITERATIONS = 30
SMOOTH_STEP = 0.5
SEAM_DILATION_PASSES = 2
_UV_EPS = 1e-9


def _area_weighted_normals(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Per-vertex unit normals, weighted by incident triangle areas.

    Cross products of edge pairs carry twice the triangle area, so plain
    accumulation gives the area weighting for free. Vertices without any
    incident triangle get +z.
    """
    normals = np.zeros_like(vertices)
    a = vertices[triangles[:, 0]]
    b = vertices[triangles[:, 1]]
    c = vertices[triangles[:, 2]]
    face = np.cross(b - a, c - a)
    for k in range(3):
        np.add.at(normals, triangles[:, k], face)
    norms = np.linalg.norm(normals, axis=1)
    lonely = norms < 1e-20
    normals[lonely] = (0.0, 0.0, 1.0)
    norms[lonely] = 1.0
    return normals / norms[:, None]


@dataclass(frozen=True, eq=False)
class DetailMesh:
    """Triangle mesh with per-vertex UVs and recomputed area-weighted normals.

    Seam vertices are stored split (one vertex per position/UV pair), which
    keeps UVs a plain per-vertex attribute.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    uvs: np.ndarray
    normals: np.ndarray = None

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        t = np.asarray(self.triangles, dtype=np.int64)
        uv = np.asarray(self.uvs, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != 3 or len(v) == 0:
            raise InvalidInputError("vertices must be a non-empty (n, 3) array")
        if not np.all(np.isfinite(v)):
            raise InvalidInputError("vertices must be finite")
        if t.ndim != 2 or t.shape[1] != 3:
            raise TopologyError("triangles must be an (m, 3) index array")
        if len(t) and (t.min() < 0 or t.max() >= len(v)):
            raise TopologyError("triangle index out of range")
        if uv.shape != (len(v), 2):
            raise InvalidInputError("uvs must be (n, 2), one per vertex")
        if not np.all(np.isfinite(uv)):
            raise InvalidInputError("uvs must be finite")
        if uv.size and (uv.min() < -_UV_EPS or uv.max() > 1.0 + _UV_EPS):
            raise InvalidInputError("uvs must lie in [0, 1]^2")
        if len(t):
            e1 = uv[t[:, 1]] - uv[t[:, 0]]
            e2 = uv[t[:, 2]] - uv[t[:, 0]]
            area2 = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
            if np.any(np.abs(area2) <= 2e-12):
                raise TopologyError("degenerate UV triangle (area <= 1e-12)")
        n = _area_weighted_normals(v, t)
        for name, arr in (("vertices", v), ("triangles", t), ("uvs", uv), ("normals", n)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    def with_vertices(self, vertices: np.ndarray) -> "DetailMesh":
        return DetailMesh(vertices, self.triangles, self.uvs)

    def edges(self) -> np.ndarray:
        """Unique undirected edges as an (e, 2) index array."""
        t = self.triangles
        pairs = np.concatenate([t[:, (0, 1)], t[:, (1, 2)], t[:, (2, 0)]])
        pairs = np.sort(pairs, axis=1)
        return np.unique(pairs, axis=0)


def laplacian_smooth(mesh: DetailMesh, iterations: int = SMOOTH_ITERATIONS, step: float = SMOOTH_STEP) -> DetailMesh:
    """Uniform-weight umbrella smoothing: v <- v + step (mean(nbrs) - v).

    step = 0 is accepted as the identity; vertices without neighbors are
    left unmoved. Connectivity and UVs are untouched.
    """
    if iterations < 1:
        raise InvalidInputError("iterations must be >= 1")
    if not 0.0 <= step <= 1.0:
        raise InvalidInputError("step must lie in [0, 1]")
    edges = mesh.edges()
    v = np.array(mesh.vertices)
    deg = np.zeros(len(v))
    np.add.at(deg, edges[:, 0], 1.0)
    np.add.at(deg, edges[:, 1], 1.0)
    connected = deg > 0
    safe_deg = np.where(connected, deg, 1.0)[:, None]
    for _ in range(iterations):
        acc = np.zeros_like(v)
        np.add.at(acc, edges[:, 0], v[edges[:, 1]])
        np.add.at(acc, edges[:, 1], v[edges[:, 0]])
        mean = acc / safe_deg
        v = np.where(connected[:, None], v + step * (mean - v), v)
    return mesh.with_vertices(v)


def umbrella_energy(mesh: DetailMesh) -> float:
    """Sum of squared distances from each vertex to its neighbor mean."""
    edges = mesh.edges()
    v = mesh.vertices
    deg = np.zeros(len(v))
    np.add.at(deg, edges[:, 0], 1.0)
    np.add.at(deg, edges[:, 1], 1.0)
    acc = np.zeros_like(v)
    np.add.at(acc, edges[:, 0], v[edges[:, 1]])
    np.add.at(acc, edges[:, 1], v[edges[:, 0]])
    connected = deg > 0
    mean = acc / np.where(connected, deg, 1.0)[:, None]
    diff = np.where(connected[:, None], v - mean, 0.0)
    return float(np.sum(diff * diff))


# -- baking -------------------------------------------------------------------


def _check_shared_layout(orig: DetailMesh, smooth: DetailMesh) -> None:
    if orig.n_vertices != smooth.n_vertices or not np.array_equal(orig.triangles, smooth.triangles):
        raise TopologyError("meshes must share connectivity")
    if not np.allclose(orig.uvs, smooth.uvs, atol=1e-12):
        raise TopologyError("meshes must share UVs")


def bake_displacement(orig: DetailMesh, smooth: DetailMesh, resolution: int) -> DisplacementMap:
    """Rasterize (orig - smooth) differences into UV space.

    Each UV triangle of the smooth mesh is scan-converted at pixel centers
    (texel (i, j) samples UV ((i+0.5)/res, (j+0.5)/res) with i the column);
    covered texels store (P_orig - P_smooth) . n_smooth with barycentric
    interpolation for positions and normals. Triangles are processed in
    ascending index order so the higher index deterministically wins ties
    on shared edges. Uncovered texels are filled by two passes of
    4-neighbor dilation (seam padding), remaining ones stay 0.
    """
    _check_shared_layout(orig, smooth)
    res = int(resolution)
    out = np.zeros((res, res))
    covered = np.zeros((res, res), dtype=bool)
    uv_px = smooth.uvs * res - 0.5
    for tri in smooth.triangles:
        pa, pb, pc = uv_px[tri]
        lo = np.maximum(np.ceil(np.minimum(np.minimum(pa, pb), pc)).astype(int), 0)
        hi = np.minimum(np.floor(np.maximum(np.maximum(pa, pb), pc)).astype(int), res - 1)
        if np.any(hi < lo):
            continue
        xs = np.arange(lo[0], hi[0] + 1)
        ys = np.arange(lo[1], hi[1] + 1)
        gx, gy = np.meshgrid(xs, ys)
        det = (pb[0] - pa[0]) * (pc[1] - pa[1]) - (pb[1] - pa[1]) * (pc[0] - pa[0])
        dx = gx - pa[0]
        dy = gy - pa[1]
        wb = (dx * (pc[1] - pa[1]) - dy * (pc[0] - pa[0])) / det
        wc = (dy * (pb[0] - pa[0]) - dx * (pb[1] - pa[1])) / det
        wa = 1.0 - wb - wc
        tol = 1e-12
        inside = (wa >= -tol) & (wb >= -tol) & (wc >= -tol)
        if not inside.any():
            continue
        w = np.stack([wa[inside], wb[inside], wc[inside]])
        p_s = np.tensordot(w, smooth.vertices[tri], axes=(0, 0))
        p_o = np.tensordot(w, orig.vertices[tri], axes=(0, 0))
        n_s = np.tensordot(w, smooth.normals[tri], axes=(0, 0))
        n_s /= np.maximum(np.linalg.norm(n_s, axis=1, keepdims=True), 1e-20)
        d = np.sum((p_o - p_s) * n_s, axis=1)
        rows = gy[inside]
        cols = gx[inside]
        out[rows, cols] = d
        covered[rows, cols] = True
    for _ in range(SEAM_DILATION_PASSES):
        if covered.all():
            break
        acc = np.zeros_like(out)
        cnt = np.zeros_like(out)
        for shift, axis in ((1, 0), (-1, 0), (1, 1), (-1, 1)):
            acc_n = np.roll(np.where(covered, out, 0.0), shift, axis=axis)
            cnt_n = np.roll(covered.astype(float), shift, axis=axis)
            if axis == 0:
                edge = 0 if shift == 1 else -1
                acc_n[edge] = 0.0
                cnt_n[edge] = 0.0
            else:
                edge = 0 if shift == 1 else -1
                acc_n[:, edge] = 0.0
                cnt_n[:, edge] = 0.0
            acc += acc_n
            cnt += cnt_n
        grow = (~covered) & (cnt > 0)
        out[grow] = acc[grow] / cnt[grow]
        covered |= grow
    return DisplacementMap(out.astype(np.float32))


# -- applying -----------------------------------------------------------------


def midpoint_subdivide(mesh: DetailMesh) -> DetailMesh:
    """Split every triangle into four via shared edge midpoints.

    Midpoints average both positions and UVs; seam edges have distinct
    vertex indices per side, so each side keeps its own chart coordinates.
    """
    verts = [mesh.vertices]
    uvs = [mesh.uvs]
    next_idx = mesh.n_vertices
    midpoint: dict[tuple[int, int], int] = {}
    new_pos: list[np.ndarray] = []
    new_uv: list[np.ndarray] = []

    def mid(i: int, j: int) -> int:
        nonlocal next_idx
        key = (i, j) if i < j else (j, i)
        found = midpoint.get(key)
        if found is None:
            found = next_idx
            midpoint[key] = found
            next_idx += 1
            new_pos.append(0.5 * (mesh.vertices[i] + mesh.vertices[j]))
            new_uv.append(0.5 * (mesh.uvs[i] + mesh.uvs[j]))
        return found

    tris = []
    for a, b, c in mesh.triangles:
        ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
        tris.extend([(a, ab, ca), (ab, b, bc), (ca, bc, c), (ab, bc, ca)])
    if new_pos:
        verts.append(np.array(new_pos))
        uvs.append(np.array(new_uv))
    return DetailMesh(np.concatenate(verts), np.array(tris, dtype=np.int64), np.concatenate(uvs))


def sample_map_bilinear(disp: DisplacementMap, uvs: np.ndarray) -> np.ndarray:
    """Bilinear map lookup at UV points, pixel-center convention."""
    res = disp.width
    values = np.asarray(disp.values, dtype=np.float64)
    pts = np.asarray(uvs, dtype=np.float64)
    x = np.clip(pts[:, 0] * res - 0.5, 0.0, res - 1.0)
    y = np.clip(pts[:, 1] * res - 0.5, 0.0, res - 1.0)
    x0 = np.minimum(np.floor(x).astype(int), res - 2) if res > 1 else np.zeros(len(x), int)
    y0 = np.minimum(np.floor(y).astype(int), res - 2) if res > 1 else np.zeros(len(y), int)
    fx = x - x0
    fy = y - y0
    v00 = values[y0, x0]
    v01 = values[y0, x0 + 1]
    v10 = values[y0 + 1, x0]
    v11 = values[y0 + 1, x0 + 1]
    return (
        v00 * (1 - fx) * (1 - fy)
        + v01 * fx * (1 - fy)
        + v10 * (1 - fx) * fy
        + v11 * fx * fy
    )


def apply_displacement(mesh: DetailMesh, disp: DisplacementMap, subdiv: int = 0) -> DetailMesh:
    """Displace vertices along their normals by the sampled map value.

    ``subdiv`` rounds of uniform midpoint subdivision run first so the map
    can express detail finer than the base triangulation.
    """
    if subdiv < 0:
        raise InvalidInputError("subdiv must be >= 0")
    out = mesh
    for _ in range(subdiv):
        out = midpoint_subdivide(out)
    d = sample_map_bilinear(disp, out.uvs)
    return out.with_vertices(out.vertices + d[:, None] * out.normals)


# -- OBJ I/O ------------------------------------------------------------------


def load_obj(path) -> DetailMesh:
    """Read a Wavefront OBJ with vt coordinates.

    Vertices are split per (position, UV) pair; quads are fan-triangulated;
    faces with more than four corners or without vt references are
    rejected.
    """
    positions: list[list[float]] = []
    texcoords: list[list[float]] = []
    face_corners: list[list[tuple[int, int]]] = []

    def parse_corner(token: str, line_no: int) -> tuple[int, int]:
        parts = token.split("/")
        if len(parts) < 2 or not parts[1]:
            raise TopologyError(f"face without vt reference at line {line_no}")
        try:
            vi, ti = int(parts[0]), int(parts[1])
        except ValueError as exc:
            raise InvalidInputError(f"bad face index at line {line_no}") from exc
        if vi < 1 or ti < 1:
            raise InvalidInputError(f"only positive OBJ indices supported (line {line_no})")
        if vi > len(positions) or ti > len(texcoords):
            raise InvalidInputError(f"face index out of range at line {line_no}")
        return vi - 1, ti - 1

    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if parts[0] == "v" and len(parts) >= 4:
                positions.append([float(parts[1]), float(parts[2]), float(parts[3])])
            elif parts[0] == "vt" and len(parts) >= 3:
                texcoords.append([float(parts[1]), float(parts[2])])
            elif parts[0] == "f":
                corners = [parse_corner(tok, line_no) for tok in parts[1:]]
                if len(corners) not in (3, 4):
                    raise TopologyError(f"face with {len(corners)} corners at line {line_no}")
                face_corners.append(corners)
    if not face_corners:
        raise TopologyError("OBJ contains no faces")

    aligned = len(positions) == len(texcoords) and all(
        vi == ti for corners in face_corners for vi, ti in corners
    )
    if aligned:
        # v/vt come pre-paired one-to-one: keep the file's vertex order
        out_pos, out_uv = positions, texcoords
        index = {(i, i): i for i in range(len(positions))}
    else:
        # split vertices per (position, uv) pair, first-use order
        out_pos, out_uv = [], []
        index = {}
        for corners in face_corners:
            for key in corners:
                if key not in index:
                    index[key] = len(out_pos)
                    out_pos.append(positions[key[0]])
                    out_uv.append(texcoords[key[1]])
    faces: list[tuple[int, int, int]] = []
    for corners in face_corners:
        ids = [index[key] for key in corners]
        faces.append((ids[0], ids[1], ids[2]))
        if len(ids) == 4:
            faces.append((ids[0], ids[2], ids[3]))
    return DetailMesh(np.array(out_pos), np.array(faces, dtype=np.int64), np.array(out_uv))


def save_obj(path, mesh: DetailMesh) -> None:
    """Write mesh as OBJ with per-vertex vt, shared v/vt indexing."""
    with open(path, "w", encoding="utf-8") as fh:
        for x, y, z in mesh.vertices:
            fh.write(f"v {x:.9g} {y:.9g} {z:.9g}\n")
        for u, v in mesh.uvs:
            fh.write(f"vt {u:.9g} {v:.9g}\n")
        for a, b, c in mesh.triangles + 1:
            fh.write(f"f {a}/{a} {b}/{b} {c}/{c}\n")


# -- test geometry ------------------------------------------------------------


def build_zone_sphere(
    n_theta: int = 33,
    n_phi: int = 64,
    radius: float = 1.0,
    theta_range_deg: tuple[float, float] = (20.0, 160.0),
) -> DetailMesh:
    """Sphere zone (poles excluded) with a rectangular UV chart.

    The polar range keeps UV triangles non-degenerate; the phi seam column
    is duplicated so u runs the full [0, 1] without wraparound faces.
    """
    if n_theta < 2 or n_phi < 3:
        raise InvalidInputError("zone sphere needs n_theta >= 2 and n_phi >= 3")
    t0, t1 = np.deg2rad(theta_range_deg[0]), np.deg2rad(theta_range_deg[1])
    thetas = np.linspace(t0, t1, n_theta)
    phis = np.linspace(0.0, 2.0 * np.pi, n_phi + 1)
    tt, pp = np.meshgrid(thetas, phis, indexing="ij")
    x = radius * np.sin(tt) * np.cos(pp)
    y = radius * np.sin(tt) * np.sin(pp)
    z = radius * np.cos(tt)
    verts = np.stack([x.ravel(), y.ravel(), z.ravel()], axis=1)
    u = (pp / (2.0 * np.pi)).ravel()
    v = ((tt - t0) / (t1 - t0)).ravel()
    uvs = np.stack([u, v], axis=1)
    cols = n_phi + 1
    tris = []
    for i in range(n_theta - 1):
        for j in range(n_phi):
            a = i * cols + j
            b = i * cols + j + 1
            c = (i + 1) * cols + j
            d = (i + 1) * cols + j + 1
            tris.append((a, c, b))
            tris.append((b, c, d))
    return DetailMesh(verts, np.array(tris, dtype=np.int64), uvs)
