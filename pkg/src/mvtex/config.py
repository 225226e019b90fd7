"""Run configuration: one flat key=value file drives every subcommand.

Unknown keys are rejected so ablation configs cannot silently typo; the
sha256 of the canonical serialization is stamped into every output
directory and checked when resuming.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path

from .fusion import FusionConfig, TriplaneConfig
from .guidance import DiffusionSchedule, DropoutSpec, GuidanceSpec
from .mvnet import DenoiserConfig


@dataclass
class RunConfig:
    seed: int = 0
    # assets and rig
    mesh: str = "sphere"
    recipe: str = "checker"
    n_scenes: int = 6
    rig_views: int = 8
    rig_radius: float = 3.2
    rig_fov_deg: float = 45.0
    image_size: int = 32
    texture_resolution: int = 64
    # denoiser
    patch_size: int = 4
    width: int = 64
    heads: int = 4
    blocks: int = 4
    views: int = 5  # 1 reference + 4 neighbors
    freeze_rgb: bool = False
    # ablations
    no_pointwise: bool = False
    no_occlusion: bool = False
    no_ref_attention: bool = False
    no_dino: bool = False
    # training
    train_steps: int = 2000
    train_lr: float = 3e-5
    schedule_steps: int = 100
    p_revert_uncond: float = 0.05
    p_revert_partial: float = 0.05
    p_single_view: float = 0.05
    # sampling
    sample_steps: int = 50
    guidance_mode: str = "multiple"
    w_context: float = 7.5
    w_reference: float = 3.5
    w_single: float = 1.5
    prompt: str = "1"
    # fusion
    fusion_phase1_iters: int = 300
    fusion_downsample_factor: float = 1.0 / 32.0
    fusion_phase2_iters: int = 1000
    fusion_patches_per_iter: int = 64
    fusion_patch_size: int = 32
    fusion_lpips_weight: float = 0.1
    fusion_lr: float = 1e-2
    triplane_feature_dim: int = 32
    triplane_log_base_resolution: int = 6
    triplane_num_lods: int = 4
    bake_resolution: int = 256

    # -- derived component configs ------------------------------------------
    def denoiser_config(self) -> DenoiserConfig:
        return DenoiserConfig(
            image_size=self.image_size, patch_size=self.patch_size, width=self.width,
            heads=self.heads, blocks=self.blocks,
            enable_pointwise=not self.no_pointwise,
            enable_ref_state=not self.no_ref_attention,
            enable_dino=not self.no_dino,
            freeze_rgb=self.freeze_rgb,
        )

    def schedule(self) -> DiffusionSchedule:
        return DiffusionSchedule(steps=self.schedule_steps)

    def guidance_spec(self) -> GuidanceSpec:
        return GuidanceSpec(mode=self.guidance_mode, w_context=self.w_context,
                            w_reference=self.w_reference, w_single=self.w_single)

    def dropout_spec(self) -> DropoutSpec:
        return DropoutSpec(self.p_revert_uncond, self.p_revert_partial,
                           self.p_single_view)

    def fusion_config(self, seed: int | None = None) -> FusionConfig:
        return FusionConfig(
            phase1_iters=self.fusion_phase1_iters,
            downsample_factor=self.fusion_downsample_factor,
            phase2_iters=self.fusion_phase2_iters,
            patches_per_iter=self.fusion_patches_per_iter,
            patch_size=self.fusion_patch_size,
            lpips_weight=self.fusion_lpips_weight,
            lr=self.fusion_lr,
            seed=self.seed if seed is None else seed,
        )

    def triplane_config(self) -> TriplaneConfig:
        return TriplaneConfig(
            feature_dim=self.triplane_feature_dim,
            log_base_resolution=self.triplane_log_base_resolution,
            num_lods=self.triplane_num_lods,
        )

    def prompt_ids(self) -> list[int]:
        if not self.prompt.strip():
            return [0]
        return [int(x) for x in self.prompt.split(",")]

    # -- serialization --------------------------------------------------------
    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()[:16]

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")


class ConfigError(ValueError):
    pass


def _parse_value(raw: str, kind: type):
    if kind is bool:
        low = raw.strip().lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"bad boolean '{raw}'")
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    return raw


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> RunConfig:
    """Config file plus 'key=value' overrides; unknown keys are errors."""
    known = {f.name: f.type for f in fields(RunConfig)}
    kinds = {f.name: type(getattr(RunConfig(), f.name)) for f in fields(RunConfig)}
    cfg = RunConfig()
    entries: list[tuple[str, str]] = []
    if path is not None:
        for line_no, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{line_no}: expected key=value, got '{raw}'")
            k, v = line.split("=", 1)
            entries.append((k.strip(), v.strip()))
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override '{item}' is not key=value")
        k, v = item.split("=", 1)
        entries.append((k.strip(), v.strip()))
    for k, v in entries:
        if k not in known:
            raise ConfigError(f"unknown config key '{k}'")
        setattr(cfg, k, _parse_value(v, kinds[k]))
    return cfg
