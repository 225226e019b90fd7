"""Toy dual-branch denoiser with multi-view communication.

Two pixel-space branches (RGB and 8-channel material) run in lockstep over
patch tokens. Each block applies self-attention, the multi-view
communication stage, bidirectional cross-domain attention between the
branches, and (RGB branch only) prompt cross-attention. The multi-view
stage adds a projected ray embedding before each of its three sub-layers:
occlusion-masked point-wise attention over cross-view correspondences,
cross-attention to the reference view's hidden state at the same layer, and
cross-attention to reference feature tokens from a deterministic patch-
statistics stub standing in for a pretrained image encoder.

View 0 is always the reference: it is fed clean at timestep 0 and, by
default, its own pass attends only to itself in the point-wise stage.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .correspondence import CorrespondenceBundle
from .tensor import Tensor

RGB_CHANNELS = 3
PBR_CHANNELS = 8
COND_CHANNELS = 3  # encoded normal map, concatenated onto each branch input


@dataclass
class DenoiserConfig:
    image_size: int = 32
    patch_size: int = 4
    width: int = 64
    heads: int = 4
    blocks: int = 4
    vocab_size: int = 64
    stub_grid: int = 8
    enable_pointwise: bool = True
    enable_ref_state: bool = True
    enable_dino: bool = True
    freeze_rgb: bool = False
    ref_attends_views: bool = False  # reference pass joins point-wise attention

    def __post_init__(self):
        if self.width % self.heads:
            raise ValueError("width must be divisible by heads")
        if self.image_size % self.patch_size:
            raise ValueError("image size must be divisible by patch size")

    @property
    def tokens_per_side(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_tokens(self) -> int:
        return self.tokens_per_side ** 2


@dataclass(frozen=True)
class ConditionSet:
    """Which conditions the current forward pass sees."""

    prompt: bool = True
    geometry: bool = True
    reference: bool = True
    neighbors: bool = True

    def __post_init__(self):
        if not self.geometry:
            raise ValueError("the geometry condition is always present")


FULL_CONDITIONS = ConditionSet()
PARTIAL_CONDITIONS = ConditionSet(reference=False)
UNCOND_CONDITIONS = ConditionSet(prompt=False, reference=False, neighbors=False)
SINGLE_VIEW_CONDITIONS = ConditionSet(reference=False, neighbors=False)


@dataclass
class ViewBatch:
    """Reference view (index 0) plus neighbors, ready for the denoiser."""

    rgb_latents: np.ndarray     # (N, 3, H, W) float32
    pbr_latents: np.ndarray     # (N, 8, H, W) float32
    timesteps: np.ndarray       # (N,) int64; reference pinned to 0
    normal_cond: np.ndarray     # (N, 3, H, W) float32, (n+1)/2, background 0
    plucker_tokens: np.ndarray  # (N, T, 6) float32 at token resolution
    pw_coords: np.ndarray       # (N, N-1, T, 2) float32 token coords into neighbors
    pw_vis: np.ndarray          # (N, N-1, T) float32 in {0, 1}
    neighbor_order: np.ndarray  # (N, N-1) int64, target view per slot
    prompt: list[int] = field(default_factory=lambda: [0])
    stub_dropped: bool = False
    noise_scales: np.ndarray = None  # (N, 2): sqrt(abar_t), sqrt(1 - abar_t)

    def __post_init__(self):
        if self.noise_scales is None:
            n = self.rgb_latents.shape[0]
            self.noise_scales = np.tile(
                np.array([1.0, 0.0], dtype=np.float32), (n, 1))

    @property
    def n_views(self) -> int:
        return self.rgb_latents.shape[0]

    def copy(self) -> "ViewBatch":
        return ViewBatch(
            self.rgb_latents.copy(), self.pbr_latents.copy(), self.timesteps.copy(),
            self.normal_cond.copy(), self.plucker_tokens.copy(), self.pw_coords.copy(),
            self.pw_vis.copy(), self.neighbor_order.copy(), list(self.prompt),
            self.stub_dropped, self.noise_scales.copy(),
        )


def tokens_from_bundle(bundle: CorrespondenceBundle, patch_size: int,
                       n_views: int | None = None):
    """Token-resolution correspondence maps (coords, visibility, order)."""
    n = bundle.n_views if n_views is None else n_views
    h, w = bundle.resolution
    th, tw = h // patch_size, w // patch_size
    t = th * tw
    coords = np.zeros((n, n - 1, t, 2), dtype=np.float32)
    vis = np.zeros((n, n - 1, t), dtype=np.float32)
    order = np.zeros((n, n - 1), dtype=np.int64)
    for i in range(n):
        for slot, j in enumerate(jj for jj in range(n) if jj != i):
            pair = bundle.pair_at(i, j, (th, tw))
            coords[i, slot] = pair.coords.reshape(t, 2)
            vis[i, slot] = pair.visible.reshape(t).astype(np.float32)
            order[i, slot] = j
    return coords, vis, order


# ---------------------------------------------------------------------------
# Deterministic reference-feature stub
# ---------------------------------------------------------------------------

def stub_statistics(image: np.ndarray, grid: int = 8) -> np.ndarray:
    """Per-cell (mean, std, x-gradient mean, y-gradient mean) for each channel.

    (3, H, W) -> (grid^2, 12); deterministic in the image, no parameters.
    """
    c, h, w = image.shape
    gh, gw = max(1, h // grid), max(1, w // grid)
    rows = grid if h >= grid else h
    cols = grid if w >= grid else w
    stats = np.zeros((rows * cols, 4 * c), dtype=np.float64)
    for r in range(rows):
        for cc in range(cols):
            cell = image[:, r * gh:(r + 1) * gh, cc * gw:(cc + 1) * gw].astype(np.float64)
            gx = np.diff(cell, axis=2)
            gy = np.diff(cell, axis=1)
            k = r * cols + cc
            stats[k, 0:c] = cell.mean(axis=(1, 2))
            stats[k, c:2 * c] = cell.std(axis=(1, 2))
            stats[k, 2 * c:3 * c] = gx.mean(axis=(1, 2)) if gx.size else 0.0
            stats[k, 3 * c:4 * c] = gy.mean(axis=(1, 2)) if gy.size else 0.0
    return stats.astype(np.float32)


# ---------------------------------------------------------------------------
# Attention operations
# ---------------------------------------------------------------------------

def cross_attention(queries: Tensor, keyvalues: Tensor, wq: Tensor, wk: Tensor,
                    wv: Tensor, wo: Tensor, heads: int) -> Tensor:
    """Multi-head attention of (B, Tq, C) queries over (B, Tk, C) key/values."""
    if keyvalues.shape[-2] == 0:
        raise ValueError("cross attention needs at least one key/value token")
    b, tq, c = queries.shape
    tk = keyvalues.shape[-2]
    d = c // heads
    q = T.matmul(queries, wq)
    k = T.matmul(keyvalues, wk)
    v = T.matmul(keyvalues, wv)
    if heads == 1:
        logits = T.smul(T.matmul(q, T.transpose(k)), 1.0 / np.sqrt(d))
        out = T.matmul(T.softmax(logits), v)
        return T.matmul(out, wo)
    q = T.permute(T.reshape(q, (b, tq, heads, d)), (0, 2, 1, 3))
    kv_batch = keyvalues.shape[0] if len(keyvalues.shape) == 3 else 1
    k = T.permute(T.reshape(k, (kv_batch, tk, heads, d)), (0, 2, 3, 1))
    v = T.permute(T.reshape(v, (kv_batch, tk, heads, d)), (0, 2, 1, 3))
    logits = T.smul(T.matmul(q, k), 1.0 / np.sqrt(d))
    attn = T.softmax(logits)
    out = T.matmul(attn, v)
    out = T.reshape(T.permute(out, (0, 2, 1, 3)), (b, tq, c))
    return T.matmul(out, wo)


def pointwise_attention(self_feat: Tensor, neighbor_feats: Tensor, vis_mask: np.ndarray,
                        wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor) -> Tensor:
    """Single-head attention of each pixel over itself and its gathered
    correspondences.

    self_feat (V, T, C); neighbor_feats (V, T, K, C) already gathered and
    zeroed where invisible; vis_mask (V, T, K) in {0, 1}. The self key is
    never masked, so the softmax always has one live slot.
    """
    v_views, t_tokens, c = self_feat.shape
    k_slots = neighbor_feats.shape[2]
    masked_nb = T.mul(neighbor_feats, Tensor(vis_mask[..., None].astype(self_feat.dtype)))
    slots = T.concat([T.reshape(self_feat, (v_views, t_tokens, 1, c)), masked_nb], axis=2)
    bias = np.zeros((v_views, t_tokens, 1, 1 + k_slots), dtype=np.float64)
    bias[..., 0, 1:] = (1.0 - vis_mask) * T.MASK_FILL  # 0 visible, MASK_FILL hidden
    q = T.reshape(T.matmul(self_feat, wq), (v_views, t_tokens, 1, c))
    k = T.matmul(slots, wk)
    vv = T.matmul(slots, wv)
    logits = T.smul(T.matmul(q, T.permute(k, (0, 1, 3, 2))), 1.0 / np.sqrt(c))
    attn = T.softmax(logits, mask=bias)
    out = T.reshape(T.matmul(attn, vv), (v_views, t_tokens, c))
    return T.matmul(out, wo)


# ---------------------------------------------------------------------------
# Parameter bookkeeping
# ---------------------------------------------------------------------------

class ParamStore:
    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.params: dict[str, Tensor] = {}

    def make(self, name: str, shape, scale: float | None = None) -> Tensor:
        if scale is None:
            scale = 1.0 / np.sqrt(shape[0])  # fan-in
        data = (self.rng.standard_normal(shape) * scale).astype(np.float32)
        p = Tensor(data, requires_grad=True, name=name)
        self.params[name] = p
        return p

    def zeros(self, name: str, shape) -> Tensor:
        p = Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True, name=name)
        self.params[name] = p
        return p


def _attn_params(store: ParamStore, prefix: str, c: int):
    # fan-in init for projections; damped output keeps residual branches
    # near-identity at the start
    return (
        store.make(f"{prefix}.wq", (c, c)),
        store.make(f"{prefix}.wk", (c, c)),
        store.make(f"{prefix}.wv", (c, c)),
        store.make(f"{prefix}.wo", (c, c), scale=0.1 / np.sqrt(c)),
    )


class MultiViewBlock:
    """Ray-conditioned communication stage shared by both branches.

    Order: +ray embedding -> point-wise correspondence attention (+res) ->
    +ray embedding -> cross-attention to the reference hidden state (+res) ->
    +ray embedding -> cross-attention to reference feature tokens (+res).
    Disabled sub-layers collapse to the residual identity.
    """

    def __init__(self, store: ParamStore, prefix: str, cfg: DenoiserConfig):
        c = cfg.width
        self.cfg = cfg
        self.ray_pw = store.make(f"{prefix}.ray_pw", (6, c))
        self.ray_ref = store.make(f"{prefix}.ray_ref", (6, c))
        self.ray_stub = store.make(f"{prefix}.ray_stub", (6, c))
        self.pw = _attn_params(store, f"{prefix}.pw", c)
        self.ref = _attn_params(store, f"{prefix}.ref", c)
        self.stub = _attn_params(store, f"{prefix}.stub", c)

    def __call__(self, states: Tensor, plucker: Tensor, stub_tokens: Tensor | None,
                 batch: ViewBatch, enable_pw: bool, enable_ref: bool,
                 enable_stub: bool) -> Tensor:
        cfg = self.cfg
        n, t, c = states.shape
        side = cfg.tokens_per_side

        if enable_pw and n > 1:
            aug = T.add(states, T.matmul(plucker, self.ray_pw))
            maps = T.reshape(aug, (n, side, side, c))
            flat_order = batch.neighbor_order.reshape(-1)
            neighbor_maps = T.index_select(maps, flat_order)       # (N*(N-1), s, s, C)
            coords = Tensor(batch.pw_coords.reshape(n * (n - 1), t, 2))
            gathered = T.grid_sample(neighbor_maps, coords)        # (N*(N-1), T, C)
            gathered = T.permute(
                T.reshape(gathered, (n, n - 1, t, c)), (0, 2, 1, 3)
            )                                                      # (N, T, K, C)
            vis = batch.pw_vis.transpose(0, 2, 1).copy()           # (N, T, K)
            if not cfg.ref_attends_views:
                vis[0] = 0.0
            delta = pointwise_attention(aug, gathered, vis, *self.pw)
            states = T.add(states, delta)

        if enable_ref:
            aug = T.add(states, T.matmul(plucker, self.ray_ref))
            ref_state = T.slice_(states, (slice(0, 1),))           # (1, T, C)
            delta = cross_attention(aug, ref_state, *self.ref, heads=1)
            states = T.add(states, delta)

        if enable_stub and stub_tokens is not None:
            aug = T.add(states, T.matmul(plucker, self.ray_stub))
            delta = cross_attention(aug, stub_tokens, *self.stub, heads=1)
            states = T.add(states, delta)

        return states


class Denoiser:
    """Epsilon-prediction network over RGB and material branches."""

    def __init__(self, config: DenoiserConfig, seed: int = 0):
        self.config = config
        store = ParamStore(np.random.default_rng(seed))
        self.store = store
        c = config.width
        p = config.patch_size
        t = config.n_tokens

        self.vocab = store.make("vocab", (config.vocab_size, c), scale=0.02)
        self.branch_in = {
            "rgb": (RGB_CHANNELS + COND_CHANNELS) * p * p,
            "pbr": (PBR_CHANNELS + COND_CHANNELS) * p * p,
        }
        self.branch_out = {"rgb": RGB_CHANNELS * p * p, "pbr": PBR_CHANNELS * p * p}
        self.embed = {}
        self.pos = {}
        self.head = {}
        self.skip = {}
        for br in ("rgb", "pbr"):
            out_c = RGB_CHANNELS if br == "rgb" else PBR_CHANNELS
            self.embed[br] = (
                store.make(f"{br}.embed.w", (self.branch_in[br], c)),
                store.zeros(f"{br}.embed.b", (c,)),
            )
            self.pos[br] = store.make(f"{br}.pos", (t, c), scale=0.02)
            self.head[br] = (
                store.make(f"{br}.head.w", (c, self.branch_out[br])),
                store.zeros(f"{br}.head.b", (self.branch_out[br],)),
            )
            # per-pixel linear path around the token bottleneck: epsilon
            # prediction leans on per-timestep scaled copies of the input,
            # so the skip sees the latents premultiplied by the schedule
            # coefficients (plus the geometry conditioning)
            self.skip[br] = (
                store.zeros(f"{br}.skip.w", (2 * out_c + COND_CHANNELS, out_c)),
                store.zeros(f"{br}.skip.b", (out_c,)),
            )
        self.stub_proj = store.make("stub.proj", (4 * RGB_CHANNELS, c))

        self.self_attn = {}
        self.cross_domain = {}
        self.prompt_attn = []
        self.mv = {}
        for br in ("rgb", "pbr"):
            self.self_attn[br] = [
                _attn_params(store, f"{br}.block{i}.self", c) for i in range(config.blocks)
            ]
            self.cross_domain[br] = [
                _attn_params(store, f"{br}.block{i}.xdom", c) for i in range(config.blocks)
            ]
            self.mv[br] = [
                MultiViewBlock(store, f"{br}.block{i}.mv", config)
                for i in range(config.blocks)
            ]
        self.prompt_attn = [
            _attn_params(store, f"rgb.block{i}.prompt", c) for i in range(config.blocks)
        ]

    # -- parameter groups ---------------------------------------------------
    def parameters(self) -> list[Tensor]:
        return list(self.store.params.values())

    def is_rgb_base(self, name: str) -> bool:
        if name == "vocab":
            return True
        if not name.startswith("rgb."):
            return False
        return ".mv." not in name and ".xdom" not in name

    def trainable_parameters(self) -> list[Tensor]:
        if not self.config.freeze_rgb:
            return self.parameters()
        return [p for n, p in self.store.params.items() if not self.is_rgb_base(n)]

    def rgb_base_parameters(self) -> list[Tensor]:
        return [p for n, p in self.store.params.items() if self.is_rgb_base(n)]

    def save(self, directory) -> None:
        from pathlib import Path

        from .meshio import write_tensor

        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        lines = []
        for i, (name, p) in enumerate(sorted(self.store.params.items())):
            fname = f"p{i:04d}.rt"
            write_tensor(out / fname, p.data)
            lines.append(f"{name} {fname} {','.join(str(s) for s in p.shape)}")
        (out / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")

    def load(self, directory) -> None:
        from pathlib import Path

        from .meshio import read_tensor

        root = Path(directory)
        manifest = (root / "manifest.txt").read_text(encoding="utf-8").strip().splitlines()
        for line in manifest:
            name, fname, shape_s = line.split()
            if name not in self.store.params:
                raise ValueError(f"checkpoint has unknown parameter '{name}'")
            data = read_tensor(root / fname)
            p = self.store.params[name]
            if tuple(data.shape) != tuple(p.shape):
                raise ValueError(f"shape mismatch for '{name}'")
            p.data = data.astype(np.float32)

    # -- forward ------------------------------------------------------------
    def ref_stub_tokens(self, batch: ViewBatch) -> Tensor | None:
        """Feature tokens of the reference RGB image; zeros when dropped."""
        if batch.stub_dropped:
            return Tensor(
                np.zeros((self.config.stub_grid ** 2, self.config.width), dtype=np.float32)
            )
        stats = stub_statistics(batch.rgb_latents[0], self.config.stub_grid)
        return T.matmul(Tensor(stats), self.stub_proj)

    def _patchify(self, images: np.ndarray) -> np.ndarray:
        n, c, h, w = images.shape
        p = self.config.patch_size
        x = images.reshape(n, c, h // p, p, w // p, p)
        x = x.transpose(0, 2, 4, 1, 3, 5)
        return np.ascontiguousarray(x.reshape(n, (h // p) * (w // p), c * p * p))

    def _unpatchify(self, tokens: Tensor, out_channels: int) -> Tensor:
        n, t, _ = tokens.shape
        p = self.config.patch_size
        side = self.config.tokens_per_side
        x = T.reshape(tokens, (n, side, side, out_channels, p, p))
        x = T.permute(x, (0, 3, 1, 4, 2, 5))
        return T.reshape(x, (n, out_channels, side * p, side * p))

    def _time_embedding(self, timesteps: np.ndarray) -> np.ndarray:
        c = self.config.width
        half = c // 2
        freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
        ang = timesteps[:, None].astype(np.float64) * freqs[None, :]
        emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
        return emb[:, None, :].astype(np.float32)  # (N, 1, C)

    def forward(self, batch: ViewBatch) -> tuple[Tensor, Tensor]:
        """Predict per-view noise for both branches (reference included)."""
        cfg = self.config
        n = batch.n_views
        h = batch.rgb_latents.shape[2]
        if h % cfg.patch_size:
            raise ValueError("resolution not divisible by patch size")
        if h != cfg.image_size:
            raise ValueError(
                f"model was built for {cfg.image_size}^2 inputs, got {h}^2"
            )

        time_emb = self._time_embedding(batch.timesteps)
        plucker = Tensor(batch.plucker_tokens)
        stub_tokens = self.ref_stub_tokens(batch)
        prompt_ids = np.asarray(batch.prompt if batch.prompt else [0], dtype=np.int64)
        prompt_tokens = T.reshape(
            T.index_select(self.vocab, prompt_ids), (1, len(prompt_ids), cfg.width)
        )

        states = {}
        pixel_inputs = {}
        scales = batch.noise_scales.astype(np.float32)
        for br, latents in (("rgb", batch.rgb_latents), ("pbr", batch.pbr_latents)):
            stacked = np.concatenate([latents, batch.normal_cond], axis=1)
            scaled = np.concatenate([
                latents * scales[:, 0, None, None, None],
                latents * scales[:, 1, None, None, None],
                batch.normal_cond,
            ], axis=1)
            pixel_inputs[br] = np.ascontiguousarray(
                scaled.transpose(0, 2, 3, 1).astype(np.float32)
            )
            tokens = Tensor(self._patchify(stacked.astype(np.float32)))
            w, b = self.embed[br]
            x = T.add(T.matmul(tokens, w), b)
            x = T.add(x, T.reshape(self.pos[br], (1, cfg.n_tokens, cfg.width)))
            states[br] = T.add(x, Tensor(time_emb))

        for i in range(cfg.blocks):
            for br in ("rgb", "pbr"):
                x = states[br]
                delta = cross_attention(
                    T.layer_norm(x), T.layer_norm(x), *self.self_attn[br][i], heads=cfg.heads
                )
                states[br] = T.add(x, delta)

            for br in ("rgb", "pbr"):
                states[br] = self.mv[br][i](
                    states[br], plucker, stub_tokens, batch,
                    cfg.enable_pointwise, cfg.enable_ref_state, cfg.enable_dino,
                )

            rgb_n = T.layer_norm(states["rgb"])
            pbr_n = T.layer_norm(states["pbr"])
            rgb_delta = cross_attention(rgb_n, pbr_n, *self.cross_domain["rgb"][i], heads=cfg.heads)
            pbr_delta = cross_attention(pbr_n, rgb_n, *self.cross_domain["pbr"][i], heads=cfg.heads)
            states["rgb"] = T.add(states["rgb"], rgb_delta)
            states["pbr"] = T.add(states["pbr"], pbr_delta)

            x = states["rgb"]
            delta = cross_attention(
                T.layer_norm(x), prompt_tokens, *self.prompt_attn[i], heads=cfg.heads
            )
            states["rgb"] = T.add(x, delta)

        eps = {}
        for br in ("rgb", "pbr"):
            w, b = self.head[br]
            tokens = T.add(T.matmul(T.layer_norm(states[br]), w), b)
            out_c = RGB_CHANNELS if br == "rgb" else PBR_CHANNELS
            token_path = self._unpatchify(tokens, out_c)
            sw, sb = self.skip[br]
            flat = Tensor(pixel_inputs[br].reshape(-1, pixel_inputs[br].shape[-1]))
            per_pixel = T.add(T.matmul(flat, sw), sb)
            hw = pixel_inputs[br].shape[1]
            skip_path = T.permute(
                T.reshape(per_pixel, (n, hw, hw, out_c)), (0, 3, 1, 2))
            eps[br] = T.add(token_path, skip_path)
        return eps["rgb"], eps["pbr"]

    def denoise(self, batch: ViewBatch) -> tuple[np.ndarray, np.ndarray]:
        """Forward pass detached from the tape (sampling path)."""
        with T.no_grad():
            eps_rgb, eps_pbr = self.forward(batch)
        return eps_rgb.data, eps_pbr.data
