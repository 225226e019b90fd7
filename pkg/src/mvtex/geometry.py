"""Pinhole cameras and a deterministic software rasterizer.

Conventions, stated once: right-handed world, camera looks along -z in its
own frame, depth = -z_cam > 0, pixel centers at integer + 0.5, continuous
pixel coords p = (fx * x / -z + cx, fy * y / -z + cy). Front faces project
to positive signed area; coverage uses the top-left fill rule so shared
edges rasterize deterministically. No antialiasing anywhere.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .meshio import Mesh


@dataclass
class Camera:
    """Intrinsics (zero skew) plus a world-to-camera rigid transform."""

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray     # (3, 3) world -> camera
    translation: np.ndarray  # (3,)
    width: int
    height: int

    def validate(self) -> None:
        r = self.rotation
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-6) or abs(np.linalg.det(r) - 1) > 1e-6:
            raise ValueError("rotation is not a proper orthonormal matrix")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ValueError("principal point outside image bounds")

    @property
    def k_matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def center(self) -> np.ndarray:
        """Camera origin in world coordinates."""
        return -self.rotation.T @ self.translation

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    def scaled(self, factor: float) -> "Camera":
        """Camera for a resolution scaled by `factor` (same field of view)."""
        return Camera(
            self.fx * factor, self.fy * factor, self.cx * factor, self.cy * factor,
            self.rotation.copy(), self.translation.copy(),
            int(round(self.width * factor)), int(round(self.height * factor)),
        )


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> tuple[np.ndarray, np.ndarray]:
    """World-to-camera (R, t) for a camera at `eye` looking at `target`."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    z_axis = eye - target
    z_axis = z_axis / np.linalg.norm(z_axis)
    x_axis = np.cross(z_axis, up)
    if np.linalg.norm(x_axis) < 1e-8:
        x_axis = np.cross(z_axis, np.array([0.0, 1.0, 0.0]))
    x_axis = x_axis / np.linalg.norm(x_axis)
    y_axis = np.cross(z_axis, x_axis)
    rotation = np.stack([x_axis, y_axis, z_axis])
    return rotation, -rotation @ eye


def make_camera(eye, target, fov_deg: float, resolution: int,
                up=(0.0, 0.0, 1.0)) -> Camera:
    """Square pinhole camera with the given horizontal field of view."""
    rotation, translation = look_at(eye, target, up)
    focal = (resolution / 2.0) / np.tan(np.radians(fov_deg) / 2.0)
    cam = Camera(focal, focal, resolution / 2.0, resolution / 2.0,
                 rotation, translation, resolution, resolution)
    cam.validate()
    return cam


def orbit_cameras(
    n_views: int,
    radius: float,
    fov_deg: float,
    resolution: int,
    elevations_deg=(20.0, -10.0, 40.0, 5.0),
    target=(0.0, 0.0, 0.0),
) -> list[Camera]:
    """Ring of viewpoints: equally spaced azimuths, cycling elevations."""
    target = np.asarray(target, dtype=np.float64)
    cams = []
    for i in range(n_views):
        azimuth = 2.0 * np.pi * i / n_views
        elev = np.radians(elevations_deg[i % len(elevations_deg)])
        eye = target + radius * np.array(
            [np.cos(elev) * np.cos(azimuth), np.cos(elev) * np.sin(azimuth), np.sin(elev)]
        )
        cams.append(make_camera(eye, target, fov_deg, resolution))
    return cams


def project(camera: Camera, points: np.ndarray):
    """Project world points -> (pixel (..., 2), depth (...,), in_front (...,)).

    Behind-camera points are flagged, not raised; their pixel values are
    computed with the (meaningless) sign-flipped depth and should be ignored.
    """
    pts = np.asarray(points, dtype=np.float64)
    cam_pts = camera.to_camera(pts)
    depth = -cam_pts[..., 2]
    in_front = depth > 0.0
    safe = np.where(depth == 0.0, 1e-30, depth)
    px = camera.fx * cam_pts[..., 0] / safe + camera.cx
    py = camera.fy * cam_pts[..., 1] / safe + camera.cy
    return np.stack([px, py], axis=-1), depth, in_front


@dataclass
class GBuffer:
    """Per-pixel rasterization output in world space."""

    width: int
    height: int
    coverage: np.ndarray   # (H, W) bool
    world_pos: np.ndarray  # (H, W, 3) float32
    normal: np.ndarray     # (H, W, 3) float32, unit where covered
    depth: np.ndarray      # (H, W) float32, camera-space depth
    texcoord: np.ndarray   # (H, W, 2) float32


def _edge(ax, ay, bx, by, px, py):
    return (bx - ax) * (py - ay) - (by - ay) * (px - ax)


def _top_left(ax, ay, bx, by) -> bool:
    dx, dy = bx - ax, by - ay
    return (dy == 0.0 and dx > 0.0) or dy < 0.0


def _raster_triangles(
    screen: np.ndarray,     # (F, 3, 2) continuous pixel coords
    keep: np.ndarray,       # (F,) triangles to consider
    width: int,
    height: int,
    write_fn,
) -> None:
    """Shared scanline-free core: per kept triangle, call write_fn with
    (tri_index, rows, cols, barycentrics (3, n)) for covered pixel centers."""
    for f in np.nonzero(keep)[0]:
        v = screen[f]
        area = _edge(v[0, 0], v[0, 1], v[1, 0], v[1, 1], v[2, 0], v[2, 1])
        if area <= 0.0:  # back-facing or degenerate
            continue
        min_x = max(int(np.floor(v[:, 0].min() - 0.5)), 0)
        max_x = min(int(np.ceil(v[:, 0].max() - 0.5)), width - 1)
        min_y = max(int(np.floor(v[:, 1].min() - 0.5)), 0)
        max_y = min(int(np.ceil(v[:, 1].max() - 0.5)), height - 1)
        if min_x > max_x or min_y > max_y:
            continue
        xs = np.arange(min_x, max_x + 1) + 0.5
        ys = np.arange(min_y, max_y + 1) + 0.5
        px, py = np.meshgrid(xs, ys, indexing="xy")
        inside = np.ones(px.shape, dtype=bool)
        bary = np.empty((3, *px.shape))
        for k in range(3):
            a, b = v[(k + 1) % 3], v[(k + 2) % 3]
            e = _edge(a[0], a[1], b[0], b[1], px, py)
            if _top_left(a[0], a[1], b[0], b[1]):
                inside &= e >= 0.0
            else:
                inside &= e > 0.0
            bary[k] = e / area
        if not inside.any():
            continue
        rows, cols = np.nonzero(inside)
        write_fn(f, rows + min_y, cols + min_x, bary[:, rows, cols])


def rasterize_gbuffer(mesh: Mesh, camera: Camera, near: float = 1e-6) -> GBuffer:
    """Z-buffered, perspective-correct G-buffer at pixel centers.

    Triangles with any vertex at depth <= near are dropped whole (no
    clipping); orbit-style scenes never trigger this.
    """
    h, w = camera.height, camera.width
    coverage = np.zeros((h, w), dtype=bool)
    zbuf = np.full((h, w), np.inf)
    world_pos = np.zeros((h, w, 3))
    normal = np.zeros((h, w, 3))
    texcoord = np.zeros((h, w, 2))

    if len(mesh.triangles) == 0:
        return GBuffer(w, h, coverage, world_pos.astype(np.float32),
                       normal.astype(np.float32),
                       np.zeros((h, w), dtype=np.float32),
                       texcoord.astype(np.float32))

    tri_pos = mesh.vertices[mesh.triangles]        # (F, 3, 3)
    tri_nrm = mesh.normals[mesh.triangles]
    tri_uv = mesh.uvs[mesh.triangles]
    pix, depth, in_front = project(camera, tri_pos)
    keep = np.all(depth > near, axis=1) & np.all(in_front, axis=1)
    inv_d = 1.0 / depth                            # (F, 3)

    def write(f, rows, cols, bary):
        inv = (bary * inv_d[f][:, None]).sum(axis=0)
        d = 1.0 / inv
        closer = d < zbuf[rows, cols]
        if not closer.any():
            return
        rows, cols, bary, d, inv = rows[closer], cols[closer], bary[:, closer], d[closer], inv[closer]
        wgt = bary * inv_d[f][:, None] / inv       # perspective-correct weights
        zbuf[rows, cols] = d
        coverage[rows, cols] = True
        world_pos[rows, cols] = np.einsum("kn,kc->nc", wgt, tri_pos[f])
        n = np.einsum("kn,kc->nc", wgt, tri_nrm[f])
        n /= np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-12)
        normal[rows, cols] = n
        texcoord[rows, cols] = np.einsum("kn,kc->nc", wgt, tri_uv[f])

    _raster_triangles(pix, keep, w, h, write)
    depth_map = np.where(coverage, zbuf, 0.0)
    return GBuffer(w, h, coverage, world_pos.astype(np.float32),
                   normal.astype(np.float32), depth_map.astype(np.float32),
                   texcoord.astype(np.float32))


@dataclass
class UVGBuffer:
    """Per-texel surface samples for baking; requires a bijective atlas."""

    resolution: int
    validity: np.ndarray   # (R, R) bool
    world_pos: np.ndarray  # (R, R, 3) float32
    normal: np.ndarray     # (R, R, 3) float32
    tangent: np.ndarray    # (R, R, 3) float32
    bitangent: np.ndarray  # (R, R, 3) float32
    conflicts: int = 0


def rasterize_uv(mesh: Mesh, resolution: int, max_conflict_frac: float = 0.01) -> UVGBuffer:
    """Rasterize the mesh in UV space, interpolating world position/normal.

    Texels claimed by more than one UV triangle count as conflicts; above
    `max_conflict_frac` of covered texels the atlas is rejected.
    """
    from .shading import tangent_frames

    res = resolution
    hits = np.zeros((res, res), dtype=np.int32)
    world_pos = np.zeros((res, res, 3))
    normal = np.zeros((res, res, 3))

    tri_pos = mesh.vertices[mesh.triangles]
    tri_nrm = mesh.normals[mesh.triangles]
    uv_screen = mesh.uvs[mesh.triangles] * res  # continuous texel coords

    # UV-space orientation is arbitrary per triangle; flip to positive area
    # so the shared raster core sees a consistent winding.
    a, b, c = uv_screen[:, 0], uv_screen[:, 1], uv_screen[:, 2]
    area = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
    flip = area < 0.0
    uv_screen[flip] = uv_screen[flip][:, [0, 2, 1]]
    tri_pos = tri_pos.copy()
    tri_nrm = tri_nrm.copy()
    tri_pos[flip] = tri_pos[flip][:, [0, 2, 1]]
    tri_nrm[flip] = tri_nrm[flip][:, [0, 2, 1]]
    keep = np.abs(area) > 0.0

    def write(f, rows, cols, bary):
        first = hits[rows, cols] == 0
        hits[rows, cols] += 1
        rows, cols, bary = rows[first], cols[first], bary[:, first]
        world_pos[rows, cols] = np.einsum("kn,kc->nc", bary, tri_pos[f])
        n = np.einsum("kn,kc->nc", bary, tri_nrm[f])
        n /= np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-12)
        normal[rows, cols] = n

    _raster_triangles(uv_screen, keep, res, res, write)

    validity = hits > 0
    conflicts = int((hits > 1).sum())
    covered = int(validity.sum())
    if covered and conflicts > max_conflict_frac * covered:
        raise ValueError(
            f"UV atlas is not bijective: {conflicts}/{covered} texels have overlapping charts"
        )
    tangent, bitangent = tangent_frames(normal.reshape(-1, 3))
    return UVGBuffer(
        res, validity, world_pos.astype(np.float32), normal.astype(np.float32),
        tangent.reshape(res, res, 3).astype(np.float32),
        bitangent.reshape(res, res, 3).astype(np.float32),
        conflicts,
    )


# ---------------------------------------------------------------------------
# Brute-force ray-cast oracle (kept free of the rasterizer's math)
# ---------------------------------------------------------------------------

def camera_rays(camera: Camera, pixels: np.ndarray | None = None):
    """World-space (origins, unit directions) through pixel centers."""
    if pixels is None:
        xs = np.arange(camera.width) + 0.5
        ys = np.arange(camera.height) + 0.5
        px, py = np.meshgrid(xs, ys, indexing="xy")
        pixels = np.stack([px, py], axis=-1).reshape(-1, 2)
    d_cam = np.stack(
        [
            (pixels[:, 0] - camera.cx) / camera.fx,
            (pixels[:, 1] - camera.cy) / camera.fy,
            -np.ones(len(pixels)),
        ],
        axis=-1,
    )
    d_world = d_cam @ camera.rotation
    d_world /= np.linalg.norm(d_world, axis=-1, keepdims=True)
    origin = camera.center()
    return np.broadcast_to(origin, d_world.shape), d_world


def raycast_depth(mesh: Mesh, camera: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-hit coverage and depth maps via Moller-Trumbore against all
    triangles; quadratic and slow, used only to check the rasterizer."""
    origins, dirs = camera_rays(camera)
    t_hit = _nearest_hit(mesh, origins, dirs)
    hit = np.isfinite(t_hit)
    # camera-space depth of the hit point
    forward = -camera.rotation[2]
    depth = np.where(hit, t_hit * (dirs @ forward), 0.0)
    h, w = camera.height, camera.width
    return hit.reshape(h, w), depth.reshape(h, w)


def _nearest_hit(mesh: Mesh, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    v0 = mesh.vertices[mesh.triangles[:, 0]]
    e1 = mesh.vertices[mesh.triangles[:, 1]] - v0
    e2 = mesh.vertices[mesh.triangles[:, 2]] - v0
    best = np.full(len(origins), np.inf)
    # loop over triangles, vectorized over rays: memory stays O(rays)
    for f in range(len(v0)):
        pvec = np.cross(dirs, e2[f])
        det = pvec @ e1[f]
        ok = np.abs(det) > 1e-12
        inv_det = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        tvec = origins - v0[f]
        u = np.einsum("ij,ij->i", tvec, pvec) * inv_det
        qvec = np.cross(tvec, e1[f])
        v = np.einsum("ij,ij->i", dirs, qvec) * inv_det
        t = (qvec @ e2[f]) * inv_det
        ok &= (u >= 0.0) & (v >= 0.0) & (u + v <= 1.0) & (t > 1e-9)
        best = np.where(ok & (t < best), t, best)
    return best


def segment_occluded(mesh: Mesh, points: np.ndarray, camera: Camera,
                     t_slack: float = 1e-4) -> np.ndarray:
    """True where a triangle blocks the segment from `points` to the camera
    center, excluding hits at the point itself."""
    origin = camera.center()
    seg = points - origin
    dist = np.linalg.norm(seg, axis=-1, keepdims=True)
    dirs = seg / np.maximum(dist, 1e-30)
    t_hit = _nearest_hit(mesh, np.broadcast_to(origin, points.shape).copy(), dirs)
    return t_hit < dist[:, 0] * (1.0 - t_slack)
