"""Tri-plane appearance field fit to multi-view images, then baked to UV.

The field is three axis-aligned feature grids per level of detail (summed
over planes, concatenated over levels) plus a sin/cos positional embedding,
decoded by a one-hidden-layer SiLU MLP into the 8 material channels.
Fitting runs in two phases: full-image MSE on a downsampled copy, then
random 32x32 patches with an added perceptual term on a random channel
triplet. All randomness comes from one seeded generator, and every
reduction is sequential, so a seed pins the result bitwise.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .geometry import UVGBuffer
from .meshio import PBRTexture, read_tensor, write_tensor
from .tensor import Tensor


@dataclass
class TriplaneConfig:
    feature_dim: int = 32
    log_base_resolution: int = 6
    num_lods: int = 4          # resolutions double per level: 64..512
    num_freq: int = 8
    pos_input_dim: int = 3
    max_freq_log2: int = 8     # exclusive bound; bands are 2^0 .. 2^7
    decoder_hidden: int = 128
    decoder_layers: int = 1
    output_dim: int = 8

    @property
    def lod_resolutions(self) -> list[int]:
        base = 1 << self.log_base_resolution
        return [base << i for i in range(self.num_lods)]

    @property
    def plane_feature_dim(self) -> int:
        return self.feature_dim * self.num_lods

    @property
    def posembed_dim(self) -> int:
        return self.pos_input_dim * (1 + 2 * self.num_freq)

    @property
    def decoder_in_dim(self) -> int:
        return self.plane_feature_dim + self.posembed_dim


@dataclass
class FusionConfig:
    phase1_iters: int = 300
    downsample_factor: float = 1.0 / 32.0
    phase2_iters: int = 1000
    patches_per_iter: int = 64
    patch_size: int = 32
    lpips_weight: float = 0.1
    lr: float = 1e-2
    seed: int = 0


# axis pairs sampled by the three planes
_PLANE_AXES = ((0, 1), (0, 2), (1, 2))


def _retain_heap() -> None:
    """Keep large freed blocks inside the allocator.

    The fit loop recreates the same tens-of-MB intermediates every
    iteration; without this, glibc returns them to the kernel each time and
    every iteration pays the page faults again."""
    try:
        import ctypes

        libc = ctypes.CDLL("libc.so.6", use_errno=True)
        libc.mallopt(-3, 1 << 30)  # M_MMAP_THRESHOLD
        libc.mallopt(-1, 1 << 30)  # M_TRIM_THRESHOLD
    except (OSError, AttributeError):
        pass


class TriplaneModel:
    """Feature grids + positional embedder + decoder, with world bounds."""

    def __init__(self, config: TriplaneConfig | None = None, seed: int = 0,
                 dtype=np.float32):
        self.config = config or TriplaneConfig()
        cfg = self.config
        rng = np.random.default_rng(seed)
        self.planes: list[Tensor] = []
        for lod, res in enumerate(cfg.lod_resolutions):
            # the xy, xz, yz grids ride one batch axis so a level samples
            # (and back-propagates) through a single batched gather
            data = rng.standard_normal((3, res, res, cfg.feature_dim)) * 1e-2
            self.planes.append(Tensor(data.astype(dtype), requires_grad=True,
                                      name=f"planes_lod{lod}"))
        h, w_in = cfg.decoder_hidden, cfg.decoder_in_dim
        scale1 = (2.0 / w_in) ** 0.5
        scale2 = (2.0 / h) ** 0.5
        self.w1 = Tensor((rng.standard_normal((w_in, h)) * scale1).astype(dtype),
                         requires_grad=True, name="dec_w1")
        self.b1 = Tensor(np.zeros(h, dtype=dtype), requires_grad=True, name="dec_b1")
        self.w2 = Tensor((rng.standard_normal((h, cfg.output_dim)) * scale2).astype(dtype),
                         requires_grad=True, name="dec_w2")
        self.b2 = Tensor(np.zeros(cfg.output_dim, dtype=dtype), requires_grad=True,
                         name="dec_b2")
        # world-cube normalization, set by the fit driver
        self.center = np.zeros(3, dtype=np.float64)
        self.half_extent = 1.0

    def parameters(self) -> list[Tensor]:
        return list(self.planes) + [self.w1, self.b1, self.w2, self.b2]

    def normalize_points(self, world_points: np.ndarray) -> np.ndarray:
        return ((world_points - self.center) / self.half_extent).astype(np.float64)

    def save(self, directory) -> None:
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        cx, cy, cz = (float(v) for v in self.center)
        lines = [
            f"feature_dim={self.config.feature_dim}",
            f"log_base_resolution={self.config.log_base_resolution}",
            f"num_lods={self.config.num_lods}",
            f"center={cx!r},{cy!r},{cz!r}",
            f"half_extent={float(self.half_extent)!r}",
        ]
        for i, p in enumerate(self.parameters()):
            write_tensor(out / f"t{i:03d}.rt", p.data)
        (out / "model.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, directory) -> "TriplaneModel":
        root = Path(directory)
        meta = dict(
            line.split("=", 1)
            for line in (root / "model.txt").read_text(encoding="utf-8").strip().splitlines()
        )
        cfg = TriplaneConfig(
            feature_dim=int(meta["feature_dim"]),
            log_base_resolution=int(meta["log_base_resolution"]),
            num_lods=int(meta["num_lods"]),
        )
        model = cls(cfg)
        model.center = np.array([float(x) for x in meta["center"].split(",")])
        model.half_extent = float(meta["half_extent"])
        for i, p in enumerate(model.parameters()):
            p.data = read_tensor(root / f"t{i:03d}.rt").reshape(p.shape)
        return model


def posembed(points: np.ndarray, config: TriplaneConfig | None = None,
             dtype=np.float64) -> np.ndarray:
    """concat(xyz, sin(2^k x_d), cos(2^k x_d)) for k < num_freq -> (B, 51)."""
    cfg = config or TriplaneConfig()
    pts = np.asarray(points, dtype=dtype)
    freqs = (2.0 ** np.arange(cfg.num_freq)).astype(dtype)
    ang = pts[:, :, None] * freqs[None, None, :]          # (B, 3, F)
    flat = ang.reshape(len(pts), -1)
    return np.concatenate([pts, np.sin(flat), np.cos(flat)], axis=1)


def triplane_sample(model: TriplaneModel, points) -> Tensor:
    """(B, 3) points in [-1, 1]^3 -> (B, feature_dim * num_lods).

    Per level: bilinear sample of each plane at the point's two axes
    (grid vertices sit at the cube corners), summed over the three planes;
    levels concatenate. Differentiable w.r.t. grids and points.
    """
    pts = T.as_tensor(points)
    b = pts.shape[0]
    differentiable_pts = isinstance(points, Tensor) and points.requires_grad
    if differentiable_pts:
        # (3, B, 2) plane coordinates assembled on the tape
        cols = [T.slice_(pts, (slice(None), [ax, ay])) for ax, ay in _PLANE_AXES]
        unit = T.reshape(T.concat(cols, axis=0), (3, b, 2))
    else:
        flat = np.clip(pts.data, -1.0, 1.0)
        unit = Tensor(np.stack([flat[:, [ax, ay]] for ax, ay in _PLANE_AXES]))
    outs = []
    for lod, plane in enumerate(model.planes):
        res = plane.shape[1]
        grid_xy = T.smul(T.add(unit, 1.0), (res - 1) / 2.0)  # [-1,1] -> [0, res-1]
        sampled = T.grid_sample(plane, grid_xy)              # (3, B, C)
        outs.append(T.sum_(sampled, axis=0))
    return T.concat(outs, axis=1)


def decode(model: TriplaneModel, points, emb: Tensor | None = None) -> Tensor:
    """Raw (unclamped) material prediction at normalized points (B, 3)."""
    pts_np = points.data if isinstance(points, Tensor) else np.asarray(points)
    feats = triplane_sample(model, points)
    if emb is None:
        emb = Tensor(posembed(pts_np, model.config, dtype=model.w1.dtype))
    # first layer as two partial matmuls: the constant embedding side never
    # needs an input gradient, so the wide concat buffer is avoided
    n_feat = feats.shape[-1]
    w_feat = T.slice_(model.w1, (slice(0, n_feat),))
    w_emb = T.slice_(model.w1, (slice(n_feat, None),))
    pre = T.add(T.add(T.matmul(feats, w_feat), T.matmul(emb, w_emb)), model.b1)
    h = T.silu(pre)
    return T.add(T.matmul(h, model.w2), model.b2)


# ---------------------------------------------------------------------------
# Perceptual proxy
# ---------------------------------------------------------------------------

class RandomFeaturePerceptual:
    """Fixed-random strided feature pyramid standing in for a learned
    perceptual metric: three stride-2 linear patch embeddings with SiLU,
    unit-normalized along channels; distance = mean squared difference of
    normalized features, averaged over layers. Symmetric, zero iff equal."""

    def __init__(self, seed: int = 1234, channels=(16, 32, 64)):
        rng = np.random.default_rng(seed)
        self.weights = []
        c_in = 3
        for c_out in channels:
            w = rng.standard_normal((c_in * 4, c_out)) * (2.0 / (c_in * 4)) ** 0.5
            b = rng.standard_normal(c_out) * 0.1
            self.weights.append((w.astype(np.float32), b.astype(np.float32)))
            c_in = c_out

    def _features(self, x: Tensor) -> list[Tensor]:
        outs = []
        cur = x  # (B, C, H, W)
        for w, b in self.weights:
            bsz, c, h, w_sp = cur.shape
            p = T.reshape(cur, (bsz, c, h // 2, 2, w_sp // 2, 2))
            p = T.permute(p, (0, 2, 4, 1, 3, 5))
            p = T.reshape(p, (bsz, (h // 2) * (w_sp // 2), c * 4))
            f = T.silu(T.add(T.matmul(p, Tensor(w.astype(cur.dtype))),
                             Tensor(b.astype(cur.dtype))))
            outs.append(f)  # (B, positions, C_out)
            side = h // 2
            cur = T.permute(T.reshape(f, (bsz, side, side, f.shape[-1])), (0, 3, 1, 2))
        return outs

    def _normalize(self, f: Tensor) -> Tensor:
        sumsq = T.sum_(T.mul(f, f), axis=-1, keepdims=True)
        inv = T.exp(T.smul(T.log(T.add(sumsq, 1e-8)), -0.5))
        return T.mul(f, inv)

    def __call__(self, a: Tensor, b: Tensor) -> Tensor:
        """Mean perceptual distance over a batch of (B, 3, h, w) pairs."""
        if a.shape != b.shape:
            raise ValueError("perceptual inputs must share a shape")
        fa = self._features(a)
        fb = self._features(b)
        total = None
        for xa, xb in zip(fa, fb):
            d = T.sub(self._normalize(xa), self._normalize(xb))
            term = T.mean(T.sum_(T.mul(d, d), axis=-1))
            total = term if total is None else T.add(total, term)
        return T.smul(total, 1.0 / len(fa))


def perceptual_loss(a, b, metric: RandomFeaturePerceptual | None = None) -> float:
    """Scalar distance between two (3, h, w) images (pluggable backend)."""
    metric = metric or _default_metric()
    ta = Tensor(np.asarray(a)[None])
    tb = Tensor(np.asarray(b)[None])
    return float(metric(ta, tb).data)


_METRIC_CACHE: dict[int, RandomFeaturePerceptual] = {}


def _default_metric() -> RandomFeaturePerceptual:
    if 0 not in _METRIC_CACHE:
        _METRIC_CACHE[0] = RandomFeaturePerceptual()
    return _METRIC_CACHE[0]


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------

def bilinear_downsample(images: np.ndarray, factor: float) -> np.ndarray:
    """(..., H, W) -> (..., H*f, W*f) by plain bilinear sampling at output
    pixel centers (no antialiasing prefilter)."""
    *lead, h, w = images.shape
    oh, ow = int(round(h * factor)), int(round(w * factor))
    if oh < 1 or ow < 1:
        raise ValueError("downsample factor collapses the image")
    ys = (np.arange(oh) + 0.5) / factor - 0.5
    xs = (np.arange(ow) + 0.5) / factor - 0.5
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, w - 2)
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, h - 2)
    fx = np.clip(xs - x0, 0.0, 1.0)
    fy = np.clip(ys - y0, 0.0, 1.0)
    flat = images.reshape(-1, h, w).astype(np.float64)
    top = flat[:, y0[:, None], x0] * (1 - fx) + flat[:, y0[:, None], x0 + 1] * fx
    bot = flat[:, y0[:, None] + 1, x0] * (1 - fx) + flat[:, y0[:, None] + 1, x0 + 1] * fx
    out = top * (1 - fy)[:, None] + bot * fy[:, None]
    return out.reshape(*lead, oh, ow).astype(images.dtype)


@dataclass
class FitReport:
    phase1_losses: list[float] = field(default_factory=list)
    phase2_losses: list[float] = field(default_factory=list)


def fuse(
    appearances: np.ndarray,   # (N, 8, R, R) in [0, 1] on covered pixels
    world_pos: np.ndarray,     # (N, 3, R, R) normalized to [-1, 1]^3
    coverage: np.ndarray,      # (N, R, R) bool / {0,1}
    config: FusionConfig | None = None,
    tri_config: TriplaneConfig | None = None,
    metric: RandomFeaturePerceptual | None = None,
    report: FitReport | None = None,
) -> TriplaneModel:
    """Fit the global appearance field to per-view images.

    Phase 1: full-image MSE on a bilinearly downsampled copy (only texels
    whose footprint is fully covered). Phase 2: per iteration, 64 random
    in-bounds patches, covered-pixel MSE summed over patches plus the
    weighted perceptual distance on one random channel triplet (drawn
    without replacement, fresh each iteration).
    """
    cfg = config or FusionConfig()
    n, ch, res, _ = appearances.shape
    cov = coverage.astype(np.float32)
    if cov.sum() == 0:
        raise ValueError("no covered pixels to fit")
    if cfg.patch_size > res:
        raise ValueError("patch size exceeds image resolution")
    metric = metric or _default_metric()
    _retain_heap()
    rng = np.random.default_rng(cfg.seed)
    model = TriplaneModel(tri_config, seed=cfg.seed)
    opt = T.Adam(model.parameters(), lr=cfg.lr)
    rep = report if report is not None else FitReport()

    # ---- phase 1: downsampled full-image MSE
    a_lo = bilinear_downsample(appearances, cfg.downsample_factor)
    w_lo = bilinear_downsample(world_pos, cfg.downsample_factor)
    c_lo = bilinear_downsample(cov, cfg.downsample_factor)
    keep = c_lo > 1.0 - 1e-6  # footprint fully covered -> positions untainted
    pts = w_lo.transpose(0, 2, 3, 1)[keep].astype(np.float32)
    targets = a_lo.transpose(0, 2, 3, 1)[keep].astype(np.float32)
    if len(pts) == 0:
        raise ValueError("downsampled coverage is empty; lower the factor")
    tgt = Tensor(targets)
    emb1 = Tensor(posembed(pts, model.config, dtype=np.float32))
    for _ in range(cfg.phase1_iters):
        pred = decode(model, pts, emb=emb1)
        diff = T.sub(pred, tgt)
        loss = T.mean(T.mul(diff, diff))
        rep.phase1_losses.append(loss.item())
        T.backward(loss)
        opt.step()
        opt.zero_grad()

    # ---- phase 2: random patches, MSE + perceptual on a channel triplet
    ps = cfg.patch_size
    app_hw = appearances.transpose(0, 2, 3, 1)  # (N, R, R, 8)
    pos_hw = world_pos.transpose(0, 2, 3, 1)
    pos_flat = np.ascontiguousarray(pos_hw.reshape(-1, 3), dtype=np.float32)
    seen = np.zeros(n * res * res, dtype=bool)
    for _ in range(cfg.phase2_iters):
        views = np.empty(cfg.patches_per_iter, dtype=np.int64)
        tops = np.empty((cfg.patches_per_iter, 2), dtype=np.int64)
        for k in range(cfg.patches_per_iter):
            for _attempt in range(10):  # avoid all-background patches
                v = int(rng.integers(n))
                y = int(rng.integers(res - ps + 1))
                x = int(rng.integers(res - ps + 1))
                if cov[v, y:y + ps, x:x + ps].any():
                    break
            views[k] = v
            tops[k] = (y, x)
        triplet = rng.choice(ch, size=3, replace=False)

        pts_list = np.empty((cfg.patches_per_iter, ps, ps, 3), dtype=np.float32)
        tgt_list = np.empty((cfg.patches_per_iter, ps, ps, ch), dtype=np.float32)
        cov_list = np.empty((cfg.patches_per_iter, ps, ps), dtype=np.float32)
        for k in range(cfg.patches_per_iter):
            v, (y, x) = views[k], tops[k]
            pts_list[k] = pos_hw[v, y:y + ps, x:x + ps]
            tgt_list[k] = app_hw[v, y:y + ps, x:x + ps]
            cov_list[k] = cov[v, y:y + ps, x:x + ps]

        flat_pts = pts_list.reshape(-1, 3)
        n_pts = len(flat_pts)
        flat_cov = cov_list.reshape(-1) > 0
        cov_idx = np.nonzero(flat_cov)[0]
        # uncovered pixels carry zero loss weight, and overlapping patches
        # revisit pixels: decode each covered source pixel exactly once
        gy, gx = np.mgrid[0:ps, 0:ps]
        ids = (
            views[:, None, None] * res * res
            + (tops[:, 0, None, None] + gy) * res
            + (tops[:, 1, None, None] + gx)
        ).reshape(-1)[cov_idx]
        seen[:] = False
        seen[ids] = True
        uniq_ids = np.nonzero(seen)[0]
        inverse = np.searchsorted(uniq_ids, ids)
        pts_u = pos_flat[uniq_ids]
        pred_u = decode(model, pts_u)                      # (U, 8)

        counts = cov_list.reshape(cfg.patches_per_iter, -1).sum(axis=1)
        weights = np.repeat(
            np.where(counts > 0, 1.0 / (np.maximum(counts, 1.0) * ch), 0.0), ps * ps
        ).astype(np.float32)
        diff = T.sub(T.index_select(pred_u, inverse),
                     Tensor(tgt_list.reshape(-1, ch)[cov_idx]))
        mse = T.sum_(T.mul(T.mul(diff, diff), Tensor(weights[cov_idx][:, None])))

        # scatter predictions onto a zero canvas for the perceptual term
        # (background stays exactly zero on both sides)
        mapping = np.full(n_pts, len(pts_u), dtype=np.int64)
        mapping[cov_idx] = inverse
        zero_row = Tensor(np.zeros((1, ch), dtype=np.float32))
        canvas = T.index_select(T.concat([pred_u, zero_row], axis=0), mapping)
        pred_img = T.permute(
            T.reshape(canvas, (cfg.patches_per_iter, ps, ps, ch)), (0, 3, 1, 2)
        )
        pred_tri = T.slice_(pred_img, (slice(None), list(triplet)))
        tgt_tri = tgt_list.transpose(0, 3, 1, 2)[:, triplet]
        lp = metric(pred_tri, Tensor(tgt_tri * cov_list[:, None]))
        lp = T.smul(lp, float(cfg.patches_per_iter))       # sum over patches
        loss = T.add(mse, T.smul(lp, cfg.lpips_weight))
        rep.phase2_losses.append(loss.item())
        T.backward(loss)
        opt.step()
        opt.zero_grad()
    return model


# ---------------------------------------------------------------------------
# Baking
# ---------------------------------------------------------------------------

def bake(model: TriplaneModel, uvg: UVGBuffer, resolution: int | None = None) -> PBRTexture:
    """Evaluate the field at each valid texel's surface point.

    Values are clamped to the material ranges here (and only here). Invalid
    texels keep validity 0 and receive a nearest-valid dilation fill for
    display purposes (4 passes of valid-neighbor averaging).
    """
    res = resolution or uvg.resolution
    if res != uvg.resolution:
        raise ValueError("bake resolution must match the UV G-buffer")
    channels = np.zeros((8, res, res), dtype=np.float32)
    valid = uvg.validity.copy()
    if valid.any():
        pts = model.normalize_points(uvg.world_pos[valid].astype(np.float64))
        with T.no_grad():
            vals = decode(model, pts).data
        channels[:, valid] = np.clip(vals, 0.0, 1.0).T.astype(np.float32)
    filled = valid.copy()
    for _ in range(4):
        filled, channels = _dilate_once(filled, channels)
    return PBRTexture(res, channels, validity=uvg.validity.copy())


def _dilate_once(valid: np.ndarray, channels: np.ndarray):
    if valid.all():
        return valid, channels
    padded_v = np.pad(valid.astype(np.float32), 1)
    padded_c = np.pad(channels, ((0, 0), (1, 1), (1, 1)))
    acc = np.zeros_like(channels)
    cnt = np.zeros(valid.shape, dtype=np.float32)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy == 0 and dx == 0:
                continue
            sl = (slice(1 + dy, 1 + dy + valid.shape[0]), slice(1 + dx, 1 + dx + valid.shape[1]))
            acc += padded_c[:, sl[0], sl[1]] * padded_v[sl]
            cnt += padded_v[sl]
    newly = (~valid) & (cnt > 0)
    out = channels.copy()
    out[:, newly] = acc[:, newly] / cnt[newly]
    return valid | newly, out


def compute_bounds(world_pos: np.ndarray, coverage: np.ndarray,
                   margin: float = 1.05):
    """Center and half-extent of the covered points' bounding cube."""
    pts = world_pos.transpose(0, 2, 3, 1)[coverage.astype(bool)]
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    center = (lo + hi) / 2.0
    half = float(np.max(hi - lo) / 2.0 * margin)
    return center.astype(np.float64), max(half, 1e-9)
