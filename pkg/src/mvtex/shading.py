"""Direct-light Cook-Torrance shading over basecolor/metallic materials.

Microfacet terms: GGX normal distribution, separable Smith visibility,
Schlick Fresnel with F0 = lerp(0.04, albedo, metallic), Lambert diffuse
scaled by (1 - metallic). Everything works in linear RGB; gamma happens
only at PNG export.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Camera, GBuffer
from .meshio import PBRTexture, sample_texture


@dataclass
class DirectionalLight:
    direction: np.ndarray  # (3,) unit, direction the light travels
    intensity: np.ndarray  # (3,) linear RGB

    def __post_init__(self):
        self.direction = np.asarray(self.direction, dtype=np.float64)
        self.direction = self.direction / np.linalg.norm(self.direction)
        self.intensity = np.asarray(self.intensity, dtype=np.float64)


def corotated_lights(camera: Camera, scale: float = 1.0) -> list[DirectionalLight]:
    """Three-point rig locked to the camera frame (rotates with the view)."""
    cam_dirs = [(0.25, -0.35, -1.0), (-0.9, 0.2, -0.45), (0.55, 0.75, -0.35)]
    powers = [(1.0, 1.0, 1.0), (0.45, 0.45, 0.5), (0.3, 0.28, 0.25)]
    lights = []
    for d, p in zip(cam_dirs, powers):
        world_dir = np.asarray(d, dtype=np.float64) @ camera.rotation
        lights.append(DirectionalLight(world_dir, np.asarray(p) * scale))
    return lights


def tangent_frames(normals: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """UV-independent orthonormal frame per normal.

    tangent = normalize(axis x n) with axis the world axis least aligned
    with n (ties broken in x, y, z order); bitangent = n x tangent.
    """
    n = np.asarray(normals, dtype=np.float64)
    flat = n.reshape(-1, 3)
    axis_idx = np.argmin(np.abs(flat), axis=1)
    axes = np.eye(3)[axis_idx]
    tangent = np.cross(axes, flat)
    lengths = np.linalg.norm(tangent, axis=1, keepdims=True)
    lengths[lengths == 0.0] = 1.0
    tangent = tangent / lengths
    bitangent = np.cross(flat, tangent)
    return tangent.reshape(n.shape), bitangent.reshape(n.shape)


def apply_bump(tangent: np.ndarray, bitangent: np.ndarray, normal: np.ndarray,
               bump: np.ndarray) -> np.ndarray:
    """Rotate tangent-space bump normals into world space and renormalize."""
    world = (
        bump[..., 0:1] * tangent + bump[..., 1:2] * bitangent + bump[..., 2:3] * normal
    )
    lengths = np.linalg.norm(world, axis=-1, keepdims=True)
    if np.any(lengths < 1e-12):
        raise ValueError("zero-length bump normal")
    return world / lengths


def cook_torrance(
    albedo: np.ndarray,     # (..., 3)
    roughness: np.ndarray,  # (...)
    metallic: np.ndarray,   # (...)
    n: np.ndarray,          # (..., 3) unit shading normal
    v: np.ndarray,          # (..., 3) unit, surface -> eye
    l: np.ndarray,          # (..., 3) unit, surface -> light
    intensity: np.ndarray,  # (3,)
) -> np.ndarray:
    """Outgoing radiance for one directional light; black when n.l <= 0."""
    rough = np.clip(roughness, 0.01, 1.0)
    alpha = rough * rough
    alpha2 = (alpha * alpha)[..., None]

    n_dot_l = np.einsum("...i,...i->...", n, l)[..., None]
    n_dot_v = np.abs(np.einsum("...i,...i->...", n, v))[..., None]
    h = l + v
    h = h / np.maximum(np.linalg.norm(h, axis=-1, keepdims=True), 1e-12)
    n_dot_h = np.clip(np.einsum("...i,...i->...", n, h), 0.0, 1.0)[..., None]
    v_dot_h = np.clip(np.einsum("...i,...i->...", v, h), 0.0, 1.0)[..., None]

    denom = n_dot_h * n_dot_h * (alpha2 - 1.0) + 1.0
    dist = alpha2 / (np.pi * denom * denom)

    def g1(cosine):
        c = np.maximum(cosine, 1e-6)
        return 2.0 * c / (c + np.sqrt(alpha2 + (1.0 - alpha2) * c * c))

    geom = g1(np.maximum(n_dot_l, 0.0)) * g1(n_dot_v)

    f0 = 0.04 + (albedo - 0.04) * metallic[..., None]
    fresnel = f0 + (1.0 - f0) * (1.0 - v_dot_h) ** 5

    specular = dist * geom * fresnel / np.maximum(4.0 * n_dot_v * np.maximum(n_dot_l, 0.0), 1e-6)
    diffuse = (1.0 - metallic[..., None]) * albedo / np.pi
    lit = np.maximum(n_dot_l, 0.0)
    return (diffuse + specular) * lit * intensity


def render(
    gbuffer: GBuffer,
    appearance: PBRTexture | np.ndarray,
    lights: list[DirectionalLight],
    camera: Camera,
    use_bump: bool = True,
) -> np.ndarray:
    """Shade covered pixels; background stays black.

    `appearance` is either a UV texture (sampled through the G-buffer's
    texcoords) or a view-space 8-channel image aligned with the G-buffer.
    """
    h, w = gbuffer.coverage.shape
    out = np.zeros((h, w, 3))
    mask = gbuffer.coverage
    if not mask.any() or not lights:
        return out

    if isinstance(appearance, PBRTexture):
        pbr = sample_texture(appearance, gbuffer.texcoord[mask].astype(np.float64))
    else:
        if appearance.shape != (8, h, w):
            raise ValueError("view-space appearance must be (8, H, W)")
        pbr = appearance.transpose(1, 2, 0)[mask].astype(np.float64)

    albedo = pbr[:, 0:3]
    roughness = pbr[:, 3]
    metallic = pbr[:, 4]
    geo_n = gbuffer.normal[mask].astype(np.float64)
    if use_bump:
        bump = pbr[:, 5:8] * 2.0 - 1.0
        bump /= np.maximum(np.linalg.norm(bump, axis=-1, keepdims=True), 1e-12)
        tangent, bitangent = tangent_frames(geo_n)
        n = apply_bump(tangent, bitangent, geo_n, bump)
    else:
        # same normalization expression as apply_bump, so the identity bump
        # (0, 0, 1) reproduces this path bit for bit
        n = geo_n / np.linalg.norm(geo_n, axis=-1, keepdims=True)

    to_eye = camera.center() - gbuffer.world_pos[mask].astype(np.float64)
    to_eye /= np.maximum(np.linalg.norm(to_eye, axis=-1, keepdims=True), 1e-12)

    radiance = np.zeros_like(albedo)
    for light in lights:
        radiance += cook_torrance(
            albedo, roughness, metallic, n, to_eye, -light.direction, light.intensity
        )
    out[mask] = radiance
    return out
