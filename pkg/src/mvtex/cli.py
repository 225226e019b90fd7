"""Pipeline driver: dataset generation, training, sampling, fusion, baking,
rendering, ablation comparison, and a self-test suite.

One binary, subcommand style. Every subcommand takes a config file (plus
key=value overrides) and writes only under --out. Progress and metrics
stream as key=value lines on stderr; final metrics also land in
<out>/metrics.txt. Exit codes: 0 success, 1 validation error, 2 numerical
failure.

`--threads N` caps BLAS threads; `--strict` pins them to one, which is the
documented bit-exact mode (all other compute is already sequential).
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_NUMERICAL = 2


class ValidationFailure(ValueError):
    pass


def emit(stream_or_dict, key: str, value) -> None:
    line = f"{key}={value}"
    print(line, file=sys.stderr)
    if isinstance(stream_or_dict, dict):
        stream_or_dict[key] = value


def _write_metrics(out: Path, metrics: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.txt").write_text(
        "\n".join(f"{k}={v}" for k, v in metrics.items()) + "\n", encoding="utf-8"
    )


def _write_run_manifest(out: Path, cfg, extra: dict | None = None) -> None:
    from .guidance import DiffusionSchedule

    out.mkdir(parents=True, exist_ok=True)
    sched = cfg.schedule()
    lines = {
        "seed": cfg.seed,
        "config_hash": cfg.config_hash(),
        "schedule_steps": sched.steps,
        "schedule_beta_start": repr(float(sched.betas[0])),
        "schedule_beta_end": repr(float(sched.betas[-1])),
    }
    lines.update(extra or {})
    (out / "run.txt").write_text(
        "\n".join(f"{k}={v}" for k, v in lines.items()) + "\n", encoding="utf-8"
    )
    cfg.save(out / "config.txt")


def _scene_dirs(data: Path) -> list[Path]:
    dirs = sorted(p for p in data.iterdir() if p.is_dir() and p.name.startswith("scene"))
    if not dirs:
        raise ValidationFailure(f"no scene directories under {data}")
    return dirs


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(cfg, args) -> int:
    from . import dataset

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scene_set = dataset.make_scene_set(
        cfg.n_scenes, cfg.seed, patch_size=cfg.patch_size, views_per_batch=cfg.views,
        resolution=cfg.image_size, n_views=cfg.rig_views,
    )
    metrics: dict = {}
    for i, scene in enumerate(scene_set.scenes):
        dataset.save_scene(scene, out / f"scene{i:03d}")
        emit(metrics, f"scene{i:03d}_coverage",
             repr(float(np.mean([g.coverage.mean() for g in scene.gbuffers]))))
    _write_run_manifest(out, cfg, {"n_scenes": cfg.n_scenes})
    _write_metrics(out, metrics)
    return EXIT_OK


def cmd_corr(cfg, args) -> int:
    from . import dataset, meshio

    data = Path(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scene = dataset.load_scene(_scene_dirs(data)[args.scene],
                               ignore_occlusion=cfg.no_occlusion)
    metrics: dict = {}
    for (i, j), fld in sorted(scene.bundle.fields.items()):
        meshio.write_tensor(out / f"coords_{i}_{j}.rt", fld.coords)
        meshio.write_tensor(out / f"visible_{i}_{j}.rt", fld.visible.astype(np.uint8))
        meshio.write_png(out / f"visible_{i}_{j}.png", fld.visible.astype(np.float64))
    for i, pm in sorted(scene.bundle.pluckers.items()):
        meshio.write_tensor(out / f"plucker_{i}.rt", pm.stacked())
    vis_frac = np.mean([f.visible.mean() for f in scene.bundle.fields.values()])
    emit(metrics, "mean_visible_fraction", repr(float(vis_frac)))
    _write_run_manifest(out, cfg)
    _write_metrics(out, metrics)
    return EXIT_OK


def cmd_train(cfg, args) -> int:
    from . import dataset, guidance
    from .mvnet import Denoiser

    data = Path(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scenes = [dataset.load_scene(d, ignore_occlusion=cfg.no_occlusion)
              for d in _scene_dirs(data)]
    scene_set = dataset.SceneSet(scenes, cfg.patch_size, cfg.views)
    model = Denoiser(cfg.denoiser_config(), seed=cfg.seed)
    ckpt = out / "checkpoint"
    if args.resume:
        prev = Path(args.resume)
        run = dict(l.split("=", 1) for l in (prev / "run.txt").read_text().strip().splitlines())
        if run.get("config_hash") != cfg.config_hash():
            raise ValidationFailure(
                f"config hash mismatch: checkpoint {run.get('config_hash')} vs current "
                f"{cfg.config_hash()}"
            )
        model.load(prev / "checkpoint")

    metrics: dict = {}
    t0 = time.perf_counter()

    def on_metric(step, loss):
        emit(metrics, f"loss_step{step:05d}", repr(loss))

    losses = guidance.train(
        model, scene_set, cfg.schedule(),
        guidance.TrainConfig(steps=cfg.train_steps, lr=cfg.train_lr, seed=cfg.seed,
                             dropout=cfg.dropout_spec()),
        on_metric=on_metric,
    )
    emit(metrics, "train_seconds", repr(time.perf_counter() - t0))
    emit(metrics, "final_loss", repr(float(np.mean(losses[-50:]))))
    model.save(ckpt)
    _write_run_manifest(out, cfg, {"train_steps": cfg.train_steps})
    _write_metrics(out, metrics)
    return EXIT_OK


def _sample_scene(cfg, model, scene, seed: int):
    from . import guidance

    ids = list(range(min(cfg.views, scene.n_views)))
    batch = scene.make_batch(ids, cfg.patch_size, prompt=cfg.prompt_ids())
    result = guidance.sample(model, batch, cfg.schedule(), cfg.guidance_spec(),
                             seed=seed, num_steps=cfg.sample_steps)
    return ids, batch, result


def cmd_sample(cfg, args) -> int:
    from . import dataset, guidance, meshio
    from .mvnet import Denoiser

    data = Path(args.data)
    ckpt = Path(args.checkpoint)
    if not (ckpt / "manifest.txt").exists():
        raise ValidationFailure(f"missing checkpoint at {ckpt}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scene = dataset.load_scene(_scene_dirs(data)[args.scene],
                               ignore_occlusion=cfg.no_occlusion)
    model = Denoiser(cfg.denoiser_config(), seed=cfg.seed)
    model.load(ckpt)

    ids, _, result = _sample_scene(cfg, model, scene, cfg.seed)
    metrics: dict = {}
    meshio.write_tensor(out / "appearance.rt", result.pbr)
    meshio.write_tensor(out / "rgb.rt", result.rgb)
    gb = [scene.gbuffers[i] for i in ids]
    meshio.write_tensor(out / "world_pos.rt",
                        np.stack([g.world_pos for g in gb]).transpose(0, 3, 1, 2))
    meshio.write_tensor(out / "coverage.rt",
                        np.stack([g.coverage for g in gb]).astype(np.uint8))
    for v in range(result.pbr.shape[0]):
        meshio.write_png(out / f"albedo_{v}.png", result.pbr[v, 0:3].transpose(1, 2, 0))
        meshio.write_png(out / f"rgb_{v}.png", result.rgb[v].transpose(1, 2, 0))
    from .dataset import _sub_bundle

    disagreement = guidance.cross_view_disagreement(result.pbr, _sub_bundle(scene.bundle, ids))
    emit(metrics, "cross_view_disagreement", repr(float(disagreement)))
    _write_run_manifest(out, cfg)
    _write_metrics(out, metrics)
    return EXIT_OK


def cmd_fuse(cfg, args) -> int:
    from . import fusion, meshio

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    appearance = meshio.read_tensor(Path(args.appearance))
    world_pos = meshio.read_tensor(Path(args.worldpos))
    coverage = meshio.read_tensor(Path(args.coverage)).astype(np.float32)
    center, half = fusion.compute_bounds(world_pos, coverage)
    normalized = (world_pos - center.reshape(1, 3, 1, 1)) / half
    report = fusion.FitReport()
    t0 = time.perf_counter()
    model = fusion.fuse(appearance, normalized.astype(np.float32), coverage,
                        cfg.fusion_config(), cfg.triplane_config(), report=report)
    model.center = center
    model.half_extent = half
    model.save(out / "triplane")
    metrics: dict = {}
    emit(metrics, "fuse_seconds", repr(time.perf_counter() - t0))
    emit(metrics, "phase1_final_mse", repr(report.phase1_losses[-1]))
    emit(metrics, "phase2_final_loss", repr(report.phase2_losses[-1] if report.phase2_losses else 0.0))
    _write_run_manifest(out, cfg)
    _write_metrics(out, metrics)
    return EXIT_OK


def cmd_bake(cfg, args) -> int:
    from . import fusion, geometry, meshio

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mesh = meshio.load_obj(Path(args.mesh))
    model = fusion.TriplaneModel.load(Path(args.model) / "triplane")
    uvg = geometry.rasterize_uv(mesh, cfg.bake_resolution)
    texture = fusion.bake(model, uvg)
    meshio.write_tensor(out / "texture.rt", texture.channels)
    meshio.write_tensor(out / "texture_validity.rt", texture.validity.astype(np.uint8))
    names = ("albedo", "roughness", "metallic", "bump")
    planes = (texture.channels[0:3].transpose(1, 2, 0), texture.channels[3],
              texture.channels[4], texture.channels[5:8].transpose(1, 2, 0))
    for name, plane in zip(names, planes):
        meshio.write_png(out / f"{name}.png", plane)
    metrics: dict = {}
    emit(metrics, "valid_texels", int(texture.validity.sum()))
    emit(metrics, "uv_conflicts", uvg.conflicts)
    _write_run_manifest(out, cfg)
    _write_metrics(out, metrics)
    return EXIT_OK


def cmd_render(cfg, args) -> int:
    from . import geometry, meshio, shading

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mesh = meshio.load_obj(Path(args.mesh))
    channels = meshio.read_tensor(Path(args.texture))
    texture = meshio.PBRTexture(channels.shape[-1], channels)
    azimuth = np.radians(args.azimuth)
    elevation = np.radians(args.elevation)
    eye = cfg.rig_radius * np.array([
        np.cos(elevation) * np.cos(azimuth),
        np.cos(elevation) * np.sin(azimuth),
        np.sin(elevation),
    ])
    camera = geometry.make_camera(eye, (0, 0, 0), cfg.rig_fov_deg, args.resolution)
    gb = geometry.rasterize_gbuffer(mesh, camera)
    lights = shading.corotated_lights(camera)
    image = shading.render(gb, texture, lights, camera, use_bump=not args.no_bump)
    meshio.write_tensor(out / "render.rt", image.transpose(2, 0, 1).astype(np.float32))
    meshio.write_png(out / "render.png", image, gamma=True)
    if args.dump_normals:
        meshio.write_png(out / "normals.png", (gb.normal + 1.0) / 2.0)
    _write_run_manifest(out, cfg)
    _write_metrics(out, {"covered": int(gb.coverage.sum())})
    return EXIT_OK


def _fusion_psnr(appearance, coverage, model) -> float:
    from . import fusion
    from . import tensor as T

    mask = coverage.astype(bool)
    pts = model.normalize_points(
        appearance["world_pos"].transpose(0, 2, 3, 1)[mask].astype(np.float64)
    )
    with T.no_grad():
        pred = np.clip(fusion.decode(model, pts).data, 0.0, 1.0)
    target = appearance["pbr"].transpose(0, 2, 3, 1)[mask]
    err = float(np.mean((pred - target) ** 2))
    return float(10.0 * np.log10(1.0 / max(err, 1e-12)))


def cmd_ablate(cfg, args) -> int:
    from . import dataset, fusion, guidance
    from .dataset import _sub_bundle
    from .mvnet import Denoiser

    flag = args.flag
    valid_flags = ("no_pointwise", "no_occlusion", "no_ref_attention", "no_dino")
    if flag not in valid_flags:
        raise ValidationFailure(f"--flag must be one of {valid_flags}")
    data = Path(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics: dict = {}

    results = {}
    for label, ablated in (("baseline", False), ("ablated", True)):
        acfg = cfg
        if ablated:
            from dataclasses import replace

            acfg = replace(cfg, **{flag: True})
        scene = dataset.load_scene(_scene_dirs(data)[args.scene],
                                   ignore_occlusion=acfg.no_occlusion)
        model = Denoiser(acfg.denoiser_config(), seed=acfg.seed)
        model.load(Path(args.checkpoint))
        ids, _, result = _sample_scene(acfg, model, scene, acfg.seed)
        disagreement = guidance.cross_view_disagreement(
            result.pbr, _sub_bundle(scene.bundle, ids))
        gb = [scene.gbuffers[i] for i in ids]
        world_pos = np.stack([g.world_pos for g in gb]).transpose(0, 3, 1, 2)
        coverage = np.stack([g.coverage for g in gb]).astype(np.float32)
        center, half = fusion.compute_bounds(world_pos, coverage)
        normalized = ((world_pos - center.reshape(1, 3, 1, 1)) / half).astype(np.float32)
        fcfg = cfg.fusion_config()
        model3d = fusion.fuse(result.pbr, normalized, coverage, fcfg, cfg.triplane_config())
        model3d.center, model3d.half_extent = center, half
        psnr = _fusion_psnr(
            {"world_pos": world_pos, "pbr": result.pbr}, coverage, model3d)
        results[label] = (disagreement, psnr)
        emit(metrics, f"{label}_consistency_error", repr(float(disagreement)))
        emit(metrics, f"{label}_fusion_psnr", repr(float(psnr)))

    emit(metrics, "flag", flag)
    emit(metrics, "ablated_worse",
         str(results["ablated"][0] >= results["baseline"][0]).lower())
    _write_run_manifest(out, cfg, {"ablation_flag": flag})
    _write_metrics(out, metrics)
    return EXIT_OK


def cmd_selftest(cfg, args) -> int:
    """Gradient checks and geometry oracles on small fixtures."""
    from . import dataset, geometry, meshio
    from . import tensor as T

    failures = []

    def check(name, ok):
        emit(None, f"selftest_{name}", "pass" if ok else "FAIL")
        if not ok:
            failures.append(name)

    rng = np.random.default_rng(0)
    err = T.grad_check(
        lambda ps: T.sum_(T.mul(T.softmax(T.matmul(ps[0], ps[1])), ps[2])),
        [rng.standard_normal((3, 4)), rng.standard_normal((4, 5)),
         rng.standard_normal((3, 5))],
    )
    check("softmax_matmul_grad", err <= 1e-6)

    err = T.grad_check(
        lambda ps: T.sum_(T.mul(T.silu(T.grid_sample(ps[0], ps[1])), 0.7)),
        [rng.standard_normal((2, 5, 6, 3)), rng.uniform(0.5, 4.0, (2, 6, 2))],
    )
    check("grid_sample_grad", err <= 1e-6)

    mesh = meshio.gen_primitive("sphere", radius=1.0, seg_u=16, seg_v=8)
    cam = geometry.make_camera((2.5, 0.4, 0.6), (0, 0, 0), 45, 48)
    gb = geometry.rasterize_gbuffer(mesh, cam)
    hit, depth = geometry.raycast_depth(mesh, cam)
    agree = np.mean(hit == gb.coverage)
    check("raster_vs_raycast", agree >= 0.995)

    pix, d, _ = geometry.project(cam, gb.world_pos[gb.coverage].astype(np.float64))
    centers = np.stack(np.nonzero(gb.coverage), -1)[:, ::-1] + 0.5
    check("reprojection_closure", float(np.abs(pix - centers).max()) <= 0.5)

    if failures:
        raise ValidationFailure(f"selftest failures: {failures}")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mvtex", description=__doc__)
    parser.add_argument("--config", type=str, default=None, help="key=value config file")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="config override (repeatable)")
    parser.add_argument("--threads", type=int, default=0,
                        help="BLAS thread cap (0 = library default)")
    parser.add_argument("--strict", action="store_true",
                        help="bit-exact mode: pin all computation to one thread")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the procedural training scenes")
    p.add_argument("--out", required=True)

    p = sub.add_parser("corr", help="dump correspondence fields and ray maps")
    p.add_argument("--data", required=True)
    p.add_argument("--scene", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train the toy denoiser")
    p.add_argument("--data", required=True)
    p.add_argument("--resume", default=None, help="previous run directory")
    p.add_argument("--out", required=True)

    p = sub.add_parser("sample", help="guided multi-view sampling")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("fuse", help="fit the tri-plane field to view images")
    p.add_argument("--appearance", required=True)
    p.add_argument("--worldpos", required=True)
    p.add_argument("--coverage", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("bake", help="bake the fitted field into a UV texture")
    p.add_argument("--model", required=True, help="directory from `fuse`")
    p.add_argument("--mesh", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("render", help="render a textured mesh")
    p.add_argument("--mesh", required=True)
    p.add_argument("--texture", required=True)
    p.add_argument("--azimuth", type=float, default=30.0)
    p.add_argument("--elevation", type=float, default=20.0)
    p.add_argument("--resolution", type=int, default=256)
    p.add_argument("--no-bump", action="store_true")
    p.add_argument("--dump-normals", action="store_true")
    p.add_argument("--out", required=True)

    p = sub.add_parser("ablate", help="baseline vs single-flag ablation report")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--flag", required=True)
    p.add_argument("--scene", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("selftest", help="run gradient and oracle checks")

    return parser


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "corr": cmd_corr,
    "train": cmd_train,
    "sample": cmd_sample,
    "fuse": cmd_fuse,
    "bake": cmd_bake,
    "render": cmd_render,
    "ablate": cmd_ablate,
    "selftest": cmd_selftest,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        from .config import ConfigError, load_config

        try:
            cfg = load_config(args.config, args.set)
        except (ConfigError, FileNotFoundError, ValueError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_VALIDATION

        n_threads = 1 if args.strict else (args.threads or None)
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=n_threads):
            return _COMMANDS[args.command](cfg, args)
    except ValidationFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except FileNotFoundError as exc:
        print(f"error: missing input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # numerical and unexpected failures
        from .guidance import NumericalError

        if isinstance(exc, (NumericalError, FloatingPointError)):
            print(f"numerical failure: {exc}", file=sys.stderr)
            return EXIT_NUMERICAL
        raise


if __name__ == "__main__":
    sys.exit(main())
