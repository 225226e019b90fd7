"""Pilot for the fusion round-trip gate: sphere + checker material, 5 views
at 128^2, full-schedule fit with the 1/8 desk factor, baked at 256^2.

Prints the numbers the acceptance fixture freezes: albedo PSNR and
roughness/metallic MAE over observed texels, plus single-threaded runtime.
"""

import json
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from mvtex import fusion, geometry, meshio, shading
from mvtex.geometry import rasterize_gbuffer, rasterize_uv, segment_occluded


def build_inputs(resolution=128, texture_resolution=256):
    mesh = meshio.gen_primitive("sphere", radius=1.0, seg_u=24, seg_v=12)
    texture = meshio.gen_procedural_pbr(
        texture_resolution, "checker",
        material_a=((0.85, 0.25, 0.2), 0.3, 0.0),
        material_b=((0.1, 0.45, 0.85), 0.75, 1.0),
    )
    cameras = geometry.orbit_cameras(5, 3.0, 45.0, resolution,
                                     elevations_deg=(25.0, -15.0, 40.0, 0.0, 55.0))
    apps, poss, covs = [], [], []
    for cam in cameras:
        gb = rasterize_gbuffer(mesh, cam)
        app = np.zeros((8, resolution, resolution), np.float32)
        mask = gb.coverage
        app[:, mask] = meshio.sample_texture(
            texture, gb.texcoord[mask].astype(np.float64)).T.astype(np.float32)
        apps.append(app)
        poss.append(gb.world_pos.transpose(2, 0, 1))
        covs.append(mask.astype(np.float32))
    return mesh, texture, cameras, np.stack(apps), np.stack(poss), np.stack(covs)


def observed_texels(mesh, cameras, uvg):
    pts = uvg.world_pos[uvg.validity].astype(np.float64)
    nrm = uvg.normal[uvg.validity].astype(np.float64)
    seen = np.zeros(len(pts), dtype=bool)
    for cam in cameras:
        front = ((cam.center() - pts) * nrm).sum(1) > 0.0
        seen |= front & ~segment_occluded(mesh, pts, cam)
    mask = np.zeros_like(uvg.validity)
    mask[uvg.validity] = seen
    return mask


def main(out_path=None):
    t_setup = time.perf_counter()
    mesh, texture, cameras, apps, poss, covs = build_inputs()
    uvg = rasterize_uv(mesh, 256)
    observed = observed_texels(mesh, cameras, uvg)
    setup_s = time.perf_counter() - t_setup

    center, half = fusion.compute_bounds(poss, covs)
    normalized = ((poss - center.reshape(1, 3, 1, 1)) / half).astype(np.float32)
    cfg = fusion.FusionConfig(downsample_factor=1.0 / 8.0, seed=0)

    with threadpool_limits(1):
        t0 = time.perf_counter()
        model = fusion.fuse(apps, normalized, covs, cfg)
        model.center, model.half_extent = center, half
        fuse_s = time.perf_counter() - t0
        t0 = time.perf_counter()
        baked = fusion.bake(model, uvg)
        bake_s = time.perf_counter() - t0

    diff = baked.channels - texture.channels
    alb_mse = float(np.mean(diff[0:3, observed] ** 2))
    psnr = 10.0 * np.log10(1.0 / max(alb_mse, 1e-12))
    rough_mae = float(np.abs(diff[3, observed]).mean())
    metal_mae = float(np.abs(diff[4, observed]).mean())
    report = {
        "albedo_psnr_db": round(psnr, 3),
        "roughness_mae": round(rough_mae, 5),
        "metallic_mae": round(metal_mae, 5),
        "fuse_seconds": round(fuse_s, 1),
        "bake_seconds": round(bake_s, 1),
        "setup_seconds": round(setup_s, 1),
        "observed_texels": int(observed.sum()),
        "valid_texels": int(uvg.validity.sum()),
    }
    print(json.dumps(report, indent=2))
    if out_path:
        Path(out_path).write_text(json.dumps(report, indent=2) + "\n")
    return report


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else None)
