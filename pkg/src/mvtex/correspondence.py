"""Cross-view correspondence fields, occlusion tests, and ray embeddings.

Correspondence coordinates are continuous texel indices (texel centers at
integers, valid range [0, W-1] x [0, H-1]); invisible pixels carry (-1, -1).
Visibility requires the reprojection to stay in bounds, pass a relative +
absolute depth-consistency test against the bilinearly interpolated target
depth, and land where interpolated target coverage >= 0.5.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Camera, GBuffer, project

DEPTH_EPS_REL = 5e-3
DEPTH_EPS_ABS = 1e-4
MASK_THRESHOLD = 0.2
COVERAGE_THRESHOLD = 0.5


@dataclass
class PluckerMap:
    """Per-pixel oriented rays as (direction, moment = origin x direction)."""

    direction: np.ndarray  # (H, W, 3) unit, world frame
    moment: np.ndarray     # (H, W, 3)

    def stacked(self) -> np.ndarray:
        """(6, H, W) float32 plane stack for serialization and conditioning."""
        return np.concatenate(
            [self.direction.transpose(2, 0, 1), self.moment.transpose(2, 0, 1)]
        ).astype(np.float32)


def plucker_map(camera: Camera) -> PluckerMap:
    """Ray through every pixel center, encoded origin-independently."""
    from .geometry import camera_rays

    origins, dirs = camera_rays(camera)
    moments = np.cross(origins, dirs)
    h, w = camera.height, camera.width
    return PluckerMap(dirs.reshape(h, w, 3), moments.reshape(h, w, 3))


@dataclass
class CorrespondenceField:
    """Continuous target coordinates per source pixel, with visibility bits."""

    src_view: int
    dst_view: int
    coords: np.ndarray   # (H, W, 2) float32, (x, y) texel indices; (-1,-1) if invisible
    visible: np.ndarray  # (H, W) bool


def _bilinear(plane: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Sample (H, W) or (H, W, C) at texel-index coords with border clamping."""
    h, w = plane.shape[:2]
    x0 = np.clip(np.floor(x).astype(np.int64), 0, w - 2)
    y0 = np.clip(np.floor(y).astype(np.int64), 0, h - 2)
    fx = np.clip(x - x0, 0.0, 1.0)
    fy = np.clip(y - y0, 0.0, 1.0)
    if plane.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
    top = plane[y0, x0] * (1 - fx) + plane[y0, x0 + 1] * fx
    bot = plane[y0 + 1, x0] * (1 - fx) + plane[y0 + 1, x0 + 1] * fx
    return top * (1 - fy) + bot * fy


def correspondences(
    src: GBuffer,
    dst: GBuffer,
    dst_camera: Camera,
    src_view: int = 0,
    dst_view: int = 1,
    eps_rel: float = DEPTH_EPS_REL,
    eps_abs: float = DEPTH_EPS_ABS,
    ignore_occlusion: bool = False,
) -> CorrespondenceField:
    """Reproject source surface points into the target view.

    `ignore_occlusion` skips the depth-consistency test (used by the
    occlusion-awareness ablation); bounds and coverage checks remain.
    """
    h, w = src.coverage.shape
    coords = np.full((h, w, 2), -1.0, dtype=np.float64)
    visible = np.zeros((h, w), dtype=bool)
    mask = src.coverage
    if not mask.any():
        return CorrespondenceField(src_view, dst_view, coords.astype(np.float32), visible)

    points = src.world_pos[mask].astype(np.float64)
    pix, depth, in_front = project(dst_camera, points)
    x = pix[:, 0] - 0.5  # continuous pixel -> texel-index coords
    y = pix[:, 1] - 0.5
    dw, dh = dst.coverage.shape[1], dst.coverage.shape[0]
    ok = in_front & (x >= 0.0) & (x <= dw - 1.0) & (y >= 0.0) & (y <= dh - 1.0)

    xs = np.where(ok, x, 0.0)
    ys = np.where(ok, y, 0.0)
    cov = _bilinear(dst.coverage.astype(np.float64), xs, ys)
    ok &= cov >= COVERAGE_THRESHOLD
    if not ignore_occlusion:
        # depth is undefined (stored 0) off-coverage; interpolate over the
        # covered footprint only so silhouettes do not drag the depth down
        interp_depth = _bilinear(dst.depth.astype(np.float64) * dst.coverage, xs, ys)
        interp_depth = np.where(cov > 0.0, interp_depth / np.maximum(cov, 1e-9), 0.0)
        ok &= depth <= (1.0 + eps_rel) * interp_depth + eps_abs

    flat_coords = np.full((len(points), 2), -1.0)
    flat_coords[ok, 0] = x[ok]
    flat_coords[ok, 1] = y[ok]
    coords[mask] = flat_coords
    visible[mask] = ok
    return CorrespondenceField(src_view, dst_view, coords.astype(np.float32), visible)


def gather(features: np.ndarray, fld: CorrespondenceField):
    """Bilinearly pull target-view features (C, Ht, Wt) to source pixels.

    Visible coordinates must already be scaled to the feature map's
    resolution. Returns (C, Hs, Ws) features (zero where invisible) plus the
    (Hs, Ws) mask.
    """
    c, h, w = features.shape
    vis = fld.visible
    if vis.any():
        xy = fld.coords[vis]
        if xy.max() > max(w, h) - 1 + 1e-3:
            raise ValueError("field coordinates exceed the feature map")
    out = np.zeros((c, *vis.shape), dtype=features.dtype)
    if vis.any():
        sampled = _bilinear(features.transpose(1, 2, 0), xy[:, 0], xy[:, 1])
        out[:, vis] = sampled.T
    return out, vis.copy()


@dataclass
class MaskPyramid:
    """Binary masks at R, R/2, ...; every level pooled from level 0."""

    levels: list[np.ndarray]
    threshold: float = MASK_THRESHOLD


def mask_pyramid(mask: np.ndarray, num_levels: int,
                 threshold: float = MASK_THRESHOLD) -> MaskPyramid:
    """Mean-pool the full-resolution mask by 2^k and binarize at `threshold`.

    Pooling always starts from level 0 (never cascaded), which dilates:
    any window containing enough visible pixels turns fully visible.
    """
    h, w = mask.shape
    factor = 1 << (num_levels - 1)
    if h % factor or w % factor:
        raise ValueError(f"mask {h}x{w} not divisible by 2^{num_levels - 1}")
    base = mask.astype(np.float64)
    levels = [mask.astype(bool).copy()]
    for k in range(1, num_levels):
        f = 1 << k
        pooled = base.reshape(h // f, f, w // f, f).mean(axis=(1, 3))
        levels.append(pooled >= threshold)
    return MaskPyramid(levels, threshold)


# ---------------------------------------------------------------------------
# Per-scene bundle consumed by the multi-view attention
# ---------------------------------------------------------------------------

@dataclass
class ViewPairMaps:
    coords: np.ndarray   # (h, w, 2) float32 at the requested resolution
    visible: np.ndarray  # (h, w) bool


@dataclass
class CorrespondenceBundle:
    """All pairwise fields plus their reductions to lower resolutions.

    Reduction rule: the visibility of a low-res cell comes from the mask
    pyramid; its coordinates are the visible-pixel mean of the full-res
    coordinates inside the pooling window, scaled by the resolution ratio.
    """

    resolution: tuple[int, int]
    fields: dict[tuple[int, int], CorrespondenceField]
    pluckers: dict[int, PluckerMap] = field(default_factory=dict)
    _cache: dict = field(default_factory=dict)

    @property
    def n_views(self) -> int:
        return max(max(i, j) for i, j in self.fields) + 1 if self.fields else 0

    def pair_at(self, src: int, dst: int, res: tuple[int, int]) -> ViewPairMaps:
        key = (src, dst, res)
        if key not in self._cache:
            self._cache[key] = self._reduce(self.fields[(src, dst)], res)
        return self._cache[key]

    def _reduce(self, fld: CorrespondenceField, res: tuple[int, int]) -> ViewPairMaps:
        h, w = fld.visible.shape
        th, tw = res
        if (h, w) == (th, tw):
            return ViewPairMaps(fld.coords.copy(), fld.visible.copy())
        if h % th or w % tw or (h // th) != (w // tw):
            raise ValueError(f"cannot reduce {h}x{w} field to {th}x{tw}")
        f = h // th
        num_levels = int(np.log2(f)) + 1
        if (1 << (num_levels - 1)) != f:
            raise ValueError("reduction factor must be a power of two")
        visible = mask_pyramid(fld.visible, num_levels).levels[-1]
        vis = fld.visible.astype(np.float64).reshape(th, f, tw, f)
        counts = vis.sum(axis=(1, 3))
        sums = (fld.coords.astype(np.float64) * fld.visible[..., None]).reshape(
            th, f, tw, f, 2).sum(axis=(1, 3))
        coords = np.full((th, tw, 2), -1.0)
        has = counts > 0
        coords[has] = sums[has] / counts[has][..., None] / f
        coords[~visible] = -1.0
        visible = visible & has
        return ViewPairMaps(coords.astype(np.float32), visible)


def build_bundle(
    gbuffers: list[GBuffer],
    cameras: list[Camera],
    ignore_occlusion: bool = False,
) -> CorrespondenceBundle:
    """Precompute all ordered pairwise fields and per-view Plucker maps."""
    n = len(gbuffers)
    fields = {}
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            fields[(i, j)] = correspondences(
                gbuffers[i], gbuffers[j], cameras[j], i, j,
                ignore_occlusion=ignore_occlusion,
            )
    pluckers = {i: plucker_map(cameras[i]) for i in range(n)}
    h, w = gbuffers[0].coverage.shape
    return CorrespondenceBundle((h, w), fields, pluckers)
