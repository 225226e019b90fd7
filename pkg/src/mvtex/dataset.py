"""Synthetic multi-view scenes: procedural mesh + material, rendered from an
azimuth ring of cameras, with all conditioning precomputed.

Latents are images affinely mapped to [-1, 1]; backgrounds sit at -1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry, meshio, shading
from .correspondence import CorrespondenceBundle, build_bundle, plucker_map
from .mvnet import ViewBatch, tokens_from_bundle


def encode_image(img: np.ndarray) -> np.ndarray:
    """[0, 1] image -> [-1, 1] latent."""
    return (2.0 * img - 1.0).astype(np.float32)


def decode_image(lat: np.ndarray) -> np.ndarray:
    return np.clip((lat + 1.0) / 2.0, 0.0, 1.0).astype(np.float32)


@dataclass
class Scene:
    mesh: meshio.Mesh
    texture: meshio.PBRTexture
    cameras: list[geometry.Camera]
    gbuffers: list[geometry.GBuffer]
    pbr_images: np.ndarray     # (V, 8, H, W) float32 in [0, 1], background 0
    rgb_images: np.ndarray     # (V, 3, H, W) float32 in [0, 1]
    normal_cond: np.ndarray    # (V, 3, H, W) float32, (n+1)/2, background 0
    bundle: CorrespondenceBundle

    @property
    def n_views(self) -> int:
        return len(self.cameras)

    @property
    def resolution(self) -> int:
        return self.cameras[0].height

    def plucker_tokens(self, view_ids, patch_size: int) -> np.ndarray:
        """(n, T, 6) ray embeddings at token resolution."""
        toks = []
        for i in view_ids:
            cam = self.cameras[i].scaled(1.0 / patch_size)
            pm = plucker_map(cam)
            toks.append(
                np.concatenate([pm.direction, pm.moment], axis=-1).reshape(-1, 6)
            )
        return np.stack(toks).astype(np.float32)

    def make_batch(self, view_ids, patch_size: int,
                   prompt: list[int] | None = None) -> ViewBatch:
        """Clean-image batch for the given views (first id is the reference)."""
        ids = list(view_ids)
        sub = _sub_bundle(self.bundle, ids)
        coords, vis, order = tokens_from_bundle(sub, patch_size, n_views=len(ids))
        return ViewBatch(
            rgb_latents=encode_image(self.rgb_images[ids]),
            pbr_latents=encode_image(self.pbr_images[ids]),
            timesteps=np.zeros(len(ids), dtype=np.int64),
            normal_cond=self.normal_cond[ids].copy(),
            plucker_tokens=self.plucker_tokens(ids, patch_size),
            pw_coords=coords,
            pw_vis=vis,
            neighbor_order=order,
            prompt=list(prompt) if prompt else [0],
        )


def _sub_bundle(bundle: CorrespondenceBundle, ids: list[int]) -> CorrespondenceBundle:
    fields = {}
    for a, i in enumerate(ids):
        for b, j in enumerate(ids):
            if a != b:
                fields[(a, b)] = bundle.fields[(i, j)]
    return CorrespondenceBundle(bundle.resolution, fields)


MESH_KINDS = ("sphere", "torus", "cube")


def make_scene(
    mesh_kind: str = "sphere",
    recipe: str = "checker",
    seed: int = 0,
    n_views: int = 8,
    resolution: int = 32,
    texture_resolution: int = 64,
    fov_deg: float = 45.0,
    radius: float = 3.2,
    light_scale: float = 1.0,
    ignore_occlusion: bool = False,
) -> Scene:
    """Render a procedural object from a camera ring and precompute all
    cross-view machinery."""
    rng = np.random.default_rng(seed)
    if mesh_kind == "sphere":
        mesh = meshio.gen_primitive("sphere", radius=1.0, seg_u=24, seg_v=12)
    elif mesh_kind == "torus":
        mesh = meshio.gen_primitive("torus", radius_major=0.85, radius_minor=0.35,
                                    seg_u=24, seg_v=12)
    elif mesh_kind == "cube":
        mesh = meshio.gen_primitive("cube", edge=1.4, seg=2)
    else:
        raise ValueError(f"unknown mesh kind '{mesh_kind}'")

    # randomized two-material palette keeps appearance unpredictable from shape
    mat_a = (tuple(rng.uniform(0.05, 0.95, 3)), float(rng.uniform(0.1, 0.9)),
             float(rng.integers(0, 2)))
    mat_b = (tuple(rng.uniform(0.05, 0.95, 3)), float(rng.uniform(0.1, 0.9)),
             float(1 - mat_a[2]))
    texture = meshio.gen_procedural_pbr(
        texture_resolution, recipe, seed=int(rng.integers(0, 2 ** 31)),
        material_a=mat_a, material_b=mat_b,
        cells=int(rng.integers(4, 9)),
    )

    cameras = geometry.orbit_cameras(n_views, radius, fov_deg, resolution)
    gbuffers = [geometry.rasterize_gbuffer(mesh, cam) for cam in cameras]

    h = w = resolution
    pbr_images = np.zeros((n_views, 8, h, w), dtype=np.float32)
    rgb_images = np.zeros((n_views, 3, h, w), dtype=np.float32)
    normal_cond = np.zeros((n_views, 3, h, w), dtype=np.float32)
    for i, (cam, gb) in enumerate(zip(cameras, gbuffers)):
        mask = gb.coverage
        if mask.any():
            pbr = meshio.sample_texture(texture, gb.texcoord[mask].astype(np.float64))
            pbr_images[i][:, mask] = pbr.T.astype(np.float32)
            normal_cond[i][:, mask] = ((gb.normal[mask] + 1.0) / 2.0).T.astype(np.float32)
        lights = shading.corotated_lights(cam, scale=light_scale)
        rgb = shading.render(gb, _view_texture(pbr_images[i]), lights, cam)
        rgb_images[i] = np.clip(rgb, 0.0, 1.0).transpose(2, 0, 1).astype(np.float32)

    bundle = build_bundle(gbuffers, cameras, ignore_occlusion=ignore_occlusion)
    return Scene(mesh, texture, cameras, gbuffers, pbr_images, rgb_images,
                 normal_cond, bundle)


def _view_texture(pbr_image: np.ndarray) -> np.ndarray:
    return pbr_image


@dataclass
class SceneSet:
    """Pool of pregenerated scenes for the toy trainer."""

    scenes: list[Scene]
    patch_size: int
    views_per_batch: int = 5  # 1 reference + 4 neighbors

    def draw_batch(self, rng: np.random.Generator,
                   prompt: list[int] | None = None) -> ViewBatch:
        scene = self.scenes[int(rng.integers(len(self.scenes)))]
        ids = rng.permutation(scene.n_views)[: self.views_per_batch]
        return scene.make_batch(list(int(i) for i in ids), self.patch_size, prompt)


def make_scene_set(
    n_scenes: int,
    seed: int,
    patch_size: int = 4,
    views_per_batch: int = 5,
    resolution: int = 32,
    n_views: int = 8,
    recipes=("checker", "noise", "radial"),
    mesh_kinds=("sphere", "torus", "cube"),
    ignore_occlusion: bool = False,
) -> SceneSet:
    scenes = []
    for k in range(n_scenes):
        scenes.append(
            make_scene(
                mesh_kind=mesh_kinds[k % len(mesh_kinds)],
                recipe=recipes[k % len(recipes)],
                seed=seed * 1000 + k,
                n_views=n_views,
                resolution=resolution,
                ignore_occlusion=ignore_occlusion,
            )
        )
    return SceneSet(scenes, patch_size, views_per_batch)


# ---------------------------------------------------------------------------
# Scene persistence (raw tensor files + OBJ)
# ---------------------------------------------------------------------------

def _cameras_to_array(cameras: list[geometry.Camera]) -> np.ndarray:
    rows = []
    for c in cameras:
        rows.append(np.concatenate([
            [c.fx, c.fy, c.cx, c.cy, c.width, c.height],
            c.rotation.reshape(-1), c.translation,
        ]))
    return np.asarray(rows, dtype=np.float32)


def _cameras_from_array(arr: np.ndarray) -> list[geometry.Camera]:
    cams = []
    for row in arr.astype(np.float64):
        cams.append(geometry.Camera(
            fx=row[0], fy=row[1], cx=row[2], cy=row[3],
            rotation=row[6:15].reshape(3, 3), translation=row[15:18],
            width=int(row[4]), height=int(row[5]),
        ))
    return cams


def save_scene(scene: Scene, directory) -> None:
    from pathlib import Path

    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    meshio.save_obj(out / "mesh.obj", scene.mesh)
    meshio.write_tensor(out / "texture.rt", scene.texture.channels)
    meshio.write_tensor(out / "cameras.rt", _cameras_to_array(scene.cameras))
    meshio.write_tensor(out / "pbr.rt", scene.pbr_images)
    meshio.write_tensor(out / "rgb.rt", scene.rgb_images)
    meshio.write_tensor(out / "normal_cond.rt", scene.normal_cond)
    gb = scene.gbuffers
    meshio.write_tensor(out / "coverage.rt", np.stack([g.coverage for g in gb]).astype(np.uint8))
    meshio.write_tensor(out / "world_pos.rt", np.stack([g.world_pos for g in gb]))
    meshio.write_tensor(out / "depth.rt", np.stack([g.depth for g in gb]))
    meshio.write_tensor(out / "normal.rt", np.stack([g.normal for g in gb]))
    meshio.write_tensor(out / "texcoord.rt", np.stack([g.texcoord for g in gb]))


def load_scene(directory, ignore_occlusion: bool = False) -> Scene:
    from pathlib import Path

    root = Path(directory)
    mesh = meshio.load_obj(root / "mesh.obj")
    channels = meshio.read_tensor(root / "texture.rt")
    texture = meshio.PBRTexture(channels.shape[-1], channels)
    cameras = _cameras_from_array(meshio.read_tensor(root / "cameras.rt"))
    coverage = meshio.read_tensor(root / "coverage.rt").astype(bool)
    world_pos = meshio.read_tensor(root / "world_pos.rt")
    depth = meshio.read_tensor(root / "depth.rt")
    normal = meshio.read_tensor(root / "normal.rt")
    texcoord = meshio.read_tensor(root / "texcoord.rt")
    gbuffers = [
        geometry.GBuffer(cam.width, cam.height, coverage[i], world_pos[i],
                         normal[i], depth[i], texcoord[i])
        for i, cam in enumerate(cameras)
    ]
    bundle = build_bundle(gbuffers, cameras, ignore_occlusion=ignore_occlusion)
    return Scene(
        mesh, texture, cameras, gbuffers,
        meshio.read_tensor(root / "pbr.rt"),
        meshio.read_tensor(root / "rgb.rt"),
        meshio.read_tensor(root / "normal_cond.rt"),
        bundle,
    )
