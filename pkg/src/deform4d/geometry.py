"""Triangle meshes, SDF / correspondence sampling and Chamfer primitives.

Everything here is plain numpy. All operations are pure functions of their
inputs plus an explicit seed, so they are safe to call concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree


class GeometryError(Exception):
    pass


class WatertightError(GeometryError):
    pass


class EmptyMeshError(GeometryError):
    pass


class TopologyError(GeometryError):
    pass


# ---------------------------------------------------------------------------
# mesh type


@dataclass
class TriMesh:
    """Triangle mesh with vertices in box coordinates.

    vertices:  (V, 3) float array
    triangles: (T, 3) int array, indices into vertices
    """

    vertices: np.ndarray
    triangles: np.ndarray
    name: str = "mesh"

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.triangles = np.asarray(self.triangles, dtype=np.int64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise GeometryError(f"{self.name}: vertices must be (V, 3)")
        if self.triangles.ndim != 2 or self.triangles.shape[1] != 3:
            raise GeometryError(f"{self.name}: triangles must be (T, 3)")
        if not np.isfinite(self.vertices).all():
            raise GeometryError(f"{self.name}: non-finite vertices")
        if len(self.triangles) and (
            self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)
        ):
            raise GeometryError(f"{self.name}: triangle index out of range")

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_triangles(self):
        return len(self.triangles)

    def corners(self):
        """Triangle corner positions as three (T, 3) arrays."""
        v = self.vertices
        t = self.triangles
        return v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]

    def triangle_areas(self):
        a, b, c = self.corners()
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def triangle_normals(self):
        """Unit normals; zero-area triangles get a zero normal."""
        a, b, c = self.corners()
        n = np.cross(b - a, c - a)
        length = np.linalg.norm(n, axis=1, keepdims=True)
        return n / np.maximum(length, 1e-30)

    def signed_volume(self):
        a, b, c = self.corners()
        return np.einsum("ij,ij->", a, np.cross(b, c)) / 6.0

    def is_watertight(self):
        """Every undirected edge must belong to exactly two triangles."""
        t = self.triangles
        edges = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        edges = np.sort(edges, axis=1)
        _, counts = np.unique(edges, axis=0, return_counts=True)
        return bool(len(edges)) and bool((counts == 2).all())

    def with_vertices(self, vertices, name=None):
        return TriMesh(vertices, self.triangles.copy(), name or self.name)


def normalize_to_unit_box(mesh: TriMesh, margin: float = 0.05):
    """Center and scale a mesh to fit [-1, 1]^3 with the given margin.

    Returns (normalized mesh, center, scale) where
    normalized = (vertices - center) * scale.
    """
    lo = mesh.vertices.min(axis=0)
    hi = mesh.vertices.max(axis=0)
    center = (lo + hi) / 2.0
    half = float((hi - lo).max()) / 2.0
    if half <= 0:
        raise GeometryError(f"{mesh.name}: degenerate bounding box")
    scale = (1.0 - margin) / half
    return mesh.with_vertices((mesh.vertices - center) * scale), center, scale


# ---------------------------------------------------------------------------
# OBJ I/O (vertices + triangle faces only, 1-based)


def save_obj(mesh: TriMesh, path):
    lines = []
    for v in mesh.vertices:
        # %.17g round-trips float64 exactly, keeping frames bit-reproducible
        lines.append(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}")
    for t in mesh.triangles:
        lines.append(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_obj(path, name=None):
    vertices = []
    faces = []
    with open(path) as fh:
        for ln, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                if len(parts) < 4:
                    raise GeometryError(f"{path}:{ln}: malformed vertex line")
                vertices.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                if len(parts) != 4:
                    raise GeometryError(f"{path}:{ln}: only triangle faces supported")
                try:
                    idx = [int(p) for p in parts[1:4]]
                except ValueError:
                    raise GeometryError(
                        f"{path}:{ln}: face indices must be plain integers"
                    ) from None
                faces.append([i - 1 for i in idx])
    return TriMesh(np.array(vertices), np.array(faces, dtype=np.int64), name or str(path))


# ---------------------------------------------------------------------------
# surface sampling


def sample_surface(mesh: TriMesh, n: int, rng: np.random.Generator):
    """Area-weighted surface samples.

    Returns (points, triangle_index, barycentric_weights). Degenerate
    triangles carry zero probability; if all are degenerate this errors.
    """
    areas = mesh.triangle_areas()
    total = areas.sum()
    if total <= 0:
        raise GeometryError(f"{mesh.name}: all triangles degenerate")
    probs = areas / total
    tri_idx = rng.choice(len(areas), size=n, p=probs)
    # uniform barycentric via the sqrt trick
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    w = np.stack([1.0 - r1, r1 * (1.0 - r2), r1 * r2], axis=1)
    a, b, c = mesh.corners()
    pts = (
        w[:, 0:1] * a[tri_idx] + w[:, 1:2] * b[tri_idx] + w[:, 2:3] * c[tri_idx]
    )
    return pts, tri_idx, w


# ---------------------------------------------------------------------------
# exact point / triangle distance

_JITTER = np.array([1.3e-7, -0.7e-7, 0.9e-7])


def _closest_point_on_triangles(p, a, b, c):
    """Closest point on triangle (a, b, c) to p, all arrays broadcastable (..., 3).

    Region-based classification (Ericson, Real-Time Collision Detection).
    """
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = np.einsum("...i,...i->...", ab, ap)
    d2 = np.einsum("...i,...i->...", ac, ap)
    bp = p - b
    d3 = np.einsum("...i,...i->...", ab, bp)
    d4 = np.einsum("...i,...i->...", ac, bp)
    cp = p - c
    d5 = np.einsum("...i,...i->...", ab, cp)
    d6 = np.einsum("...i,...i->...", ac, cp)

    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    eps = 1e-300  # guard exact-zero denominators on degenerate triangles
    t_ab = d1 / np.maximum(d1 - d3, eps)
    t_ac = d2 / np.maximum(d2 - d6, eps)
    t_bc = (d4 - d3) / np.maximum((d4 - d3) + (d5 - d6), eps)
    denom = np.maximum(va + vb + vc, eps)
    v = vb / denom
    w = vc / denom

    out = a + v[..., None] * ab + w[..., None] * ac  # interior fallback
    on_bc = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
    out = np.where(on_bc[..., None], b + t_bc[..., None] * (c - b), out)
    on_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    out = np.where(on_ac[..., None], a + t_ac[..., None] * ac, out)
    on_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    out = np.where(on_ab[..., None], a + t_ab[..., None] * ab, out)
    at_c = (d6 >= 0) & (d5 <= d6)
    out = np.where(at_c[..., None], c, out)
    at_b = (d3 >= 0) & (d4 <= d3)
    out = np.where(at_b[..., None], b, out)
    at_a = (d1 <= 0) & (d2 <= 0)
    out = np.where(at_a[..., None], a, out)
    return out


def unsigned_distance(mesh: TriMesh, points, method="kdtree", chunk=2048):
    """Exact unsigned distance from each point to the triangle soup.

    method="kdtree" prunes candidate triangles via a centroid tree with a
    provably sufficient radius; method="brute" scans every triangle and is
    kept as the oracle path.
    """
    points = np.asarray(points, dtype=np.float64)
    a, b, c = mesh.corners()
    if method == "brute":
        out = np.empty(len(points))
        for s in range(0, len(points), chunk):
            p = points[s : s + chunk, None, :]
            cp = _closest_point_on_triangles(p, a[None], b[None], c[None])
            out[s : s + chunk] = np.sqrt(((p - cp) ** 2).sum(-1).min(axis=1))
        return out
    if method != "kdtree":
        raise ValueError(f"unknown method {method!r}")

    centroids = (a + b + c) / 3.0
    # max distance from a centroid to its own triangle's far corner
    reach = np.sqrt(
        np.maximum.reduce(
            [((x - centroids) ** 2).sum(1) for x in (a, b, c)]
        )
    ).max()
    vert_tree = cKDTree(mesh.vertices)
    cent_tree = cKDTree(centroids)
    upper, _ = vert_tree.query(points)  # nearest vertex bounds the true distance
    out = np.empty(len(points))
    for s in range(0, len(points), chunk):
        pts = points[s : s + chunk]
        radii = upper[s : s + chunk] + reach + 1e-12
        cand = cent_tree.query_ball_point(pts, radii)
        width = max(len(cc) for cc in cand)
        idx = np.zeros((len(pts), width), dtype=np.int64)
        mask = np.zeros((len(pts), width), dtype=bool)
        for i, cc in enumerate(cand):
            idx[i, : len(cc)] = cc
            mask[i, : len(cc)] = True
        cp = _closest_point_on_triangles(
            pts[:, None, :], a[idx], b[idx], c[idx]
        )
        d2 = ((pts[:, None, :] - cp) ** 2).sum(-1)
        d2[~mask] = np.inf
        out[s : s + chunk] = np.sqrt(d2.min(axis=1))
    return out


def ray_parity_sign(mesh: TriMesh, points, chunk=512):
    """Inside/outside sign by axis-ray crossing parity, majority over 3 axes.

    Returns +1 outside, -1 inside. Ray origins get a fixed tiny jitter so
    rays through axis-aligned faces, edges or vertices stay generic.
    """
    points = np.asarray(points, dtype=np.float64) + _JITTER
    a, b, c = mesh.corners()
    votes = np.zeros(len(points), dtype=np.int64)
    for axis in range(3):
        i, j = (axis + 1) % 3, (axis + 2) % 3
        ai, aj, ak = a[:, i], a[:, j], a[:, axis]
        bi, bj, bk = b[:, i], b[:, j], b[:, axis]
        ci, cj, ck = c[:, i], c[:, j], c[:, axis]
        det = (bi - ai) * (cj - aj) - (ci - ai) * (bj - aj)
        ok = np.abs(det) > 1e-14
        det_safe = np.where(ok, det, 1.0)
        counts = np.zeros(len(points), dtype=np.int64)
        for s in range(0, len(points), chunk):
            pi = points[s : s + chunk, i][:, None]
            pj = points[s : s + chunk, j][:, None]
            pk = points[s : s + chunk, axis][:, None]
            u = ((pi - ai) * (cj - aj) - (ci - ai) * (pj - aj)) / det_safe
            v = ((bi - ai) * (pj - aj) - (pi - ai) * (bj - aj)) / det_safe
            hit = ok & (u >= 0) & (v >= 0) & (u + v <= 1)
            kk = ak + u * (bk - ak) + v * (ck - ak)
            counts[s : s + chunk] = (hit & (kk > pk)).sum(axis=1)
        votes += np.where(counts % 2 == 1, -1, 1)
    return np.where(votes < 0, -1.0, 1.0)


# ---------------------------------------------------------------------------
# SDF sampling


@dataclass
class SdfSampleSet:
    """Query points with signed distances; split_tag is 0 uniform, 1 near-surface."""

    points: np.ndarray
    distances: np.ndarray
    split_tag: np.ndarray

    def __post_init__(self):
        if len(self.points) != len(self.distances) or len(self.points) != len(
            self.split_tag
        ):
            raise GeometryError("points / distances / split_tag length mismatch")


TAG_UNIFORM = 0
TAG_NEAR_SURFACE = 1


def sample_sdf(
    mesh: TriMesh,
    n_uniform: int = 50_000,
    n_near: int = 150_000,
    band: float = 0.02,
    seed: int = 0,
    method: str = "kdtree",
) -> SdfSampleSet:
    """Signed distance samples: uniform in [-1,1]^3 plus a near-surface band.

    Near-surface points are surface samples offset along the triangle normal
    by at most `band`, so their unsigned distance is guaranteed <= band.
    Signs come from 3-axis ray parity with a majority vote.
    """
    if band <= 0:
        raise GeometryError("band must be positive")
    if not mesh.is_watertight():
        raise WatertightError(f"mesh {mesh.name!r} is not watertight; sign undefined")
    rng = np.random.default_rng(seed)
    uniform = rng.uniform(-1.0, 1.0, size=(n_uniform, 3))
    surf, tri_idx, _ = sample_surface(mesh, n_near, rng)
    offsets = rng.uniform(-band, band, size=n_near)
    near = surf + offsets[:, None] * mesh.triangle_normals()[tri_idx]
    points = np.concatenate([uniform, near])
    dist = unsigned_distance(mesh, points, method=method)
    sign = ray_parity_sign(mesh, points)
    tags = np.concatenate(
        [
            np.full(n_uniform, TAG_UNIFORM, dtype=np.int64),
            np.full(n_near, TAG_NEAR_SURFACE, dtype=np.int64),
        ]
    )
    return SdfSampleSet(points, sign * dist, tags)


# ---------------------------------------------------------------------------
# barycentric correspondences


@dataclass
class CorrespondenceSet:
    """Surface correspondences pinned to triangles of a canonical mesh.

    Evaluating the same (triangle, barycentric, normal offset) triple on any
    topologically identical mesh yields corresponding points.
    """

    triangle_index: np.ndarray
    barycentric_weights: np.ndarray
    normal_noise: np.ndarray
    canonical_positions: np.ndarray
    n_triangles: int = 0

    def __post_init__(self):
        s = np.abs(self.barycentric_weights.sum(axis=1) - 1.0)
        if s.max() > 1e-6:
            raise GeometryError("barycentric weights must sum to 1")


def sample_correspondences(
    canonical: TriMesh,
    n: int,
    noise_sigma: float = 0.002,
    noise_fraction: float = 0.5,
    seed: int = 0,
) -> CorrespondenceSet:
    """Sample surface correspondences; a fraction carries normal-direction noise."""
    if n <= 0:
        raise GeometryError("n must be positive")
    if not 0.0 <= noise_fraction <= 1.0:
        raise GeometryError("noise_fraction must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    pts, tri_idx, bary = sample_surface(canonical, n, rng)
    n_noisy = int(round(noise_fraction * n))
    noise = np.zeros(n)
    noise[:n_noisy] = rng.normal(0.0, noise_sigma, size=n_noisy)
    normals = canonical.triangle_normals()[tri_idx]
    positions = pts + noise[:, None] * normals
    return CorrespondenceSet(tri_idx, bary, noise, positions, canonical.n_triangles)


def evaluate_correspondences(corr: CorrespondenceSet, deformed: TriMesh):
    """Positions of the stored correspondences on a deformed (same-topology) mesh."""
    if deformed.n_triangles != corr.n_triangles:
        raise TopologyError(
            f"mesh {deformed.name!r} has {deformed.n_triangles} triangles, "
            f"correspondences expect {corr.n_triangles}"
        )
    a, b, c = deformed.corners()
    t = corr.triangle_index
    w = corr.barycentric_weights
    pts = w[:, 0:1] * a[t] + w[:, 1:2] * b[t] + w[:, 2:3] * c[t]
    return pts + corr.normal_noise[:, None] * deformed.triangle_normals()[t]


# ---------------------------------------------------------------------------
# marching cubes


def marching_cubes(field, resolution: int = 128, bounds=(-1.0, 1.0)) -> TriMesh:
    """Zero level-set mesh of a scalar field callable over (N, 3) points.

    `resolution` counts samples per axis. Orientation is fixed so outward
    normals agree with the negative-inside SDF convention.
    """
    if resolution < 8:
        raise GeometryError("resolution must be >= 8")
    from skimage import measure

    lo, hi = bounds
    axis = np.linspace(lo, hi, resolution)
    gx, gy, gz = np.meshgrid(axis, axis, axis, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    values = np.asarray(field(pts), dtype=np.float64).reshape(
        resolution, resolution, resolution
    )
    if values.min() > 0 or values.max() < 0:
        raise EmptyMeshError("field has no zero crossing inside the grid")
    spacing = (hi - lo) / (resolution - 1)
    verts, faces, _, _ = measure.marching_cubes(
        values, level=0.0, spacing=(spacing,) * 3
    )
    mesh = TriMesh(verts + lo, faces.astype(np.int64), "marching_cubes")
    if mesh.signed_volume() < 0:
        mesh = TriMesh(mesh.vertices, mesh.triangles[:, ::-1], mesh.name)
    return mesh


def warp_mesh(mesh: TriMesh, flow) -> TriMesh:
    """Displace every vertex by flow(vertices); topology is preserved."""
    disp = np.asarray(flow(mesh.vertices), dtype=np.float64)
    if disp.shape != mesh.vertices.shape:
        raise GeometryError("flow must return one 3-vector per vertex")
    if not np.isfinite(disp).all():
        raise GeometryError("flow produced non-finite displacements")
    return mesh.with_vertices(mesh.vertices + disp)


# ---------------------------------------------------------------------------
# Chamfer distance (two-sided, squared, mean-reduced; fixed for the artifact)


def chamfer_distance(a, b, method="kdtree"):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        raise GeometryError("chamfer_distance requires non-empty point sets")
    if method == "kdtree":
        d_ab, _ = cKDTree(b).query(a)
        d_ba, _ = cKDTree(a).query(b)
        return float((d_ab**2).mean() + (d_ba**2).mean())
    if method == "brute":
        d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)
        return float(d2.min(axis=1).mean() + d2.min(axis=0).mean())
    raise ValueError(f"unknown method {method!r}")


def sequence_chamfer(seq_a, seq_b, method="kdtree"):
    """Mean per-frame Chamfer distance between two equally long sequences."""
    if len(seq_a) != len(seq_b):
        raise GeometryError(
            f"frame count mismatch: {len(seq_a)} vs {len(seq_b)}"
        )
    if len(seq_a) == 0:
        raise GeometryError("sequences must have at least one frame")
    return float(
        np.mean([chamfer_distance(x, y, method=method) for x, y in zip(seq_a, seq_b)])
    )
