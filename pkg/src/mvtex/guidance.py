"""Noise schedule, guidance composition, condition dropout, sampling, training.

Sampling is deterministic DDIM (eta = 0) over a timestep subsequence. Every
denoiser call sees the reference view reset to its clean latents at timestep
0 (or, when the reference condition is dropped, to fresh unit Gaussian noise
at the terminal timestep). Neighbor views are the only ones updated.
"""

from __future__ import annotations

import queue
import threading
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .correspondence import CorrespondenceBundle, gather
from .mvnet import (
    FULL_CONDITIONS,
    PARTIAL_CONDITIONS,
    SINGLE_VIEW_CONDITIONS,
    UNCOND_CONDITIONS,
    ConditionSet,
    Denoiser,
    ViewBatch,
)


class NumericalError(RuntimeError):
    """Non-finite values encountered mid-run."""


# ---------------------------------------------------------------------------
# Schedule
# ---------------------------------------------------------------------------

@dataclass
class DiffusionSchedule:
    """Linear beta schedule rescaled from the 1000-step convention.

    alpha_bar[0] == 1 exactly; alpha_bar decreases monotonically to near 0
    at the terminal step.
    """

    steps: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def __post_init__(self):
        scale = 1000.0 / self.steps
        betas = np.linspace(self.beta_start * scale, self.beta_end * scale, self.steps)
        self.betas = np.clip(betas, 0.0, 0.999)
        self.alphas = 1.0 - self.betas
        bar = np.concatenate([[1.0], np.cumprod(self.alphas)])
        self.alpha_bar = bar  # index t in [0, steps]

    def noise_scales(self, t: int) -> tuple[float, float]:
        ab = self.alpha_bar[t]
        return float(np.sqrt(ab)), float(np.sqrt(1.0 - ab))

    def add_noise(self, x0: np.ndarray, t: int, eps: np.ndarray) -> np.ndarray:
        """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
        if not 0 <= t <= self.steps:
            raise ValueError(f"timestep {t} outside [0, {self.steps}]")
        if eps.shape != x0.shape:
            raise ValueError("noise shape mismatch")
        ab = self.alpha_bar[t]
        return (np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps).astype(x0.dtype)


# ---------------------------------------------------------------------------
# Guidance composition
# ---------------------------------------------------------------------------

@dataclass
class GuidanceSpec:
    mode: str = "multiple"       # "multiple" | "single"
    w_context: float = 7.5       # weight on (partial - uncond)
    w_reference: float = 3.5     # weight on (full - partial)
    w_single: float = 1.5        # single-mode weight on (full - uncond)

    def __post_init__(self):
        if self.mode not in ("multiple", "single"):
            raise ValueError(f"unknown guidance mode '{self.mode}'")
        if min(self.w_context, self.w_reference, self.w_single) < 0:
            raise ValueError("guidance weights must be non-negative")


def cfg_multiple(pred_uncond, pred_partial, pred_full, w_context, w_reference):
    """u + w_context * (p - u) + w_reference * (f - p)."""
    if pred_uncond.shape != pred_partial.shape or pred_partial.shape != pred_full.shape:
        raise ValueError("prediction shape mismatch")
    return (
        pred_uncond
        + w_context * (pred_partial - pred_uncond)
        + w_reference * (pred_full - pred_partial)
    )


def cfg_single(pred_uncond, pred_full, w):
    """u + w * (f - u)."""
    if pred_uncond.shape != pred_full.shape:
        raise ValueError("prediction shape mismatch")
    return pred_uncond + w * (pred_full - pred_uncond)


# ---------------------------------------------------------------------------
# Condition dropout
# ---------------------------------------------------------------------------

@dataclass
class DropoutSpec:
    """Training-time reversion to less-conditioned prediction targets."""

    p_revert_uncond: float = 0.05   # revert to the fully unconditioned term
    p_revert_partial: float = 0.05  # revert to the no-reference term
    p_single_view: float = 0.05     # drop all multi-view conditioning

    def __post_init__(self):
        ps = (self.p_revert_uncond, self.p_revert_partial, self.p_single_view)
        if any(p < 0 or p > 1 for p in ps) or sum(ps) > 1:
            raise ValueError("dropout probabilities must form a partial distribution")

    def draw(self, rng: np.random.Generator) -> ConditionSet:
        u = rng.random()
        if u < self.p_revert_uncond:
            return UNCOND_CONDITIONS
        if u < self.p_revert_uncond + self.p_revert_partial:
            return PARTIAL_CONDITIONS
        if u < self.p_revert_uncond + self.p_revert_partial + self.p_single_view:
            return SINGLE_VIEW_CONDITIONS
        return FULL_CONDITIONS


def apply_condition_dropout(
    batch: ViewBatch,
    cond: ConditionSet,
    rng: np.random.Generator,
    terminal_t: int,
    terminal_scales: tuple[float, float] = (0.0, 1.0),
) -> ViewBatch:
    """Rewrite a batch so the denoiser sees exactly the given condition set.

    Dropping neighbors empties the visibility masks and zeroes the ray
    embeddings (correspondence coordinates stay untouched). Dropping the
    reference resamples its latents as unit Gaussians at the terminal
    timestep and zeroes the reference feature tokens. Dropping the prompt
    replaces it with the null token.
    """
    out = batch.copy()
    if not cond.prompt:
        out.prompt = [0]
    if not cond.neighbors:
        out.pw_vis[:] = 0.0
        out.plucker_tokens[:] = 0.0
    if not cond.reference:
        out.rgb_latents[0] = rng.standard_normal(out.rgb_latents[0].shape).astype(np.float32)
        out.pbr_latents[0] = rng.standard_normal(out.pbr_latents[0].shape).astype(np.float32)
        out.timesteps[0] = terminal_t
        out.noise_scales[0] = terminal_scales
        out.stub_dropped = True
    return out


# ---------------------------------------------------------------------------
# Sampler
# ---------------------------------------------------------------------------

def _ddim_times(schedule: DiffusionSchedule, num_steps: int) -> list[int]:
    ts = np.unique(np.linspace(0, schedule.steps, num_steps + 1).round().astype(int))
    return list(ts[::-1])  # descending, ends at 0


@dataclass
class SampleResult:
    pbr: np.ndarray        # (N, 8, H, W) in [0, 1], view 0 = reference copy
    rgb: np.ndarray        # (N, 3, H, W) in [0, 1]
    pbr_latents: np.ndarray
    rgb_latents: np.ndarray


def sample(
    model: Denoiser,
    batch_template: ViewBatch,
    schedule: DiffusionSchedule,
    spec: GuidanceSpec,
    seed: int,
    num_steps: int = 50,
    clip_denoised: bool = True,
) -> SampleResult:
    """Deterministic multi-view DDIM sampling with a pinned reference view.

    `batch_template` carries the clean reference in slot 0 and the full
    conditioning (rays, correspondences, prompt); neighbor latents are
    initialized from the seed and denoised jointly. `clip_denoised` clamps
    the predicted clean image to the latent range inside each update (the
    guided extrapolation diverges at toy scale without it); the material
    range clamp still happens only once, on the final output.
    """
    from .dataset import decode_image

    rng = np.random.default_rng(seed)
    batch = batch_template.copy()
    n = batch.n_views
    ref_rgb = batch_template.rgb_latents[0].copy()
    ref_pbr = batch_template.pbr_latents[0].copy()

    batch.rgb_latents[1:] = rng.standard_normal(batch.rgb_latents[1:].shape).astype(np.float32)
    batch.pbr_latents[1:] = rng.standard_normal(batch.pbr_latents[1:].shape).astype(np.float32)

    passes = (
        [UNCOND_CONDITIONS, PARTIAL_CONDITIONS, FULL_CONDITIONS]
        if spec.mode == "multiple"
        else [UNCOND_CONDITIONS, FULL_CONDITIONS]
    )

    times = _ddim_times(schedule, num_steps)
    for t_cur, t_next in zip(times[:-1], times[1:]):
        preds = {}
        for cond in passes:
            # the reference is pinned: clean latents, timestep 0, every pass
            batch.rgb_latents[0] = ref_rgb
            batch.pbr_latents[0] = ref_pbr
            batch.timesteps[:] = t_cur
            batch.timesteps[0] = 0
            batch.noise_scales[:] = schedule.noise_scales(t_cur)
            batch.noise_scales[0] = (1.0, 0.0)
            cbatch = apply_condition_dropout(batch, cond, rng, schedule.steps,
                                             schedule.noise_scales(schedule.steps))
            eps_rgb, eps_pbr = model.denoise(cbatch)
            preds[cond] = (eps_rgb[1:], eps_pbr[1:])  # reference predictions discarded

        if spec.mode == "multiple":
            eps = tuple(
                cfg_multiple(preds[UNCOND_CONDITIONS][k], preds[PARTIAL_CONDITIONS][k],
                             preds[FULL_CONDITIONS][k], spec.w_context, spec.w_reference)
                for k in (0, 1)
            )
        else:
            eps = tuple(
                cfg_single(preds[UNCOND_CONDITIONS][k], preds[FULL_CONDITIONS][k],
                           spec.w_single)
                for k in (0, 1)
            )

        ab_cur = schedule.alpha_bar[t_cur]
        ab_next = schedule.alpha_bar[t_next]
        for latents, e in ((batch.rgb_latents, eps[0]), (batch.pbr_latents, eps[1])):
            x = latents[1:]
            x0 = (x - np.sqrt(1.0 - ab_cur) * e) / np.sqrt(ab_cur)
            if clip_denoised:
                x0 = np.clip(x0, -1.0, 1.0)
            latents[1:] = (np.sqrt(ab_next) * x0 + np.sqrt(1.0 - ab_next) * e).astype(np.float32)
        if not (np.all(np.isfinite(batch.rgb_latents)) and np.all(np.isfinite(batch.pbr_latents))):
            raise NumericalError(f"non-finite latents at t={t_cur} (seed {seed})")

    batch.rgb_latents[0] = ref_rgb
    batch.pbr_latents[0] = ref_pbr
    return SampleResult(
        pbr=decode_image(batch.pbr_latents),
        rgb=decode_image(batch.rgb_latents),
        pbr_latents=batch.pbr_latents.copy(),
        rgb_latents=batch.rgb_latents.copy(),
    )


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    steps: int = 2000
    lr: float = 3e-5
    seed: int = 0
    dropout: DropoutSpec = field(default_factory=DropoutSpec)
    log_every: int = 100
    # full-scale reference values, recorded for documentation, not defaults:
    # single-view pretrain 200_000 steps @ batch 192; multi-view 100_000 @ 24.


def train_step(
    model: Denoiser,
    optimizer: T.Adam,
    batch: ViewBatch,
    schedule: DiffusionSchedule,
    dropout: DropoutSpec,
    rng: np.random.Generator,
) -> float:
    """One denoising-MSE step on the neighbor views of a clean batch."""
    cond = dropout.draw(rng)
    noised = batch.copy()
    t = int(rng.integers(1, schedule.steps + 1))
    eps_rgb = rng.standard_normal(noised.rgb_latents[1:].shape).astype(np.float32)
    eps_pbr = rng.standard_normal(noised.pbr_latents[1:].shape).astype(np.float32)
    noised.rgb_latents[1:] = schedule.add_noise(batch.rgb_latents[1:], t, eps_rgb)
    noised.pbr_latents[1:] = schedule.add_noise(batch.pbr_latents[1:], t, eps_pbr)
    noised.timesteps[1:] = t
    noised.timesteps[0] = 0
    noised.noise_scales[1:] = schedule.noise_scales(t)
    noised.noise_scales[0] = (1.0, 0.0)
    noised = apply_condition_dropout(noised, cond, rng, schedule.steps,
                                     schedule.noise_scales(schedule.steps))

    pred_rgb, pred_pbr = model.forward(noised)
    d_rgb = T.sub(T.slice_(pred_rgb, (slice(1, None),)), T.Tensor(eps_rgb))
    d_pbr = T.sub(T.slice_(pred_pbr, (slice(1, None),)), T.Tensor(eps_pbr))
    loss = T.add(T.mean(T.mul(d_rgb, d_rgb)), T.mean(T.mul(d_pbr, d_pbr)))
    value = loss.item()
    if not np.isfinite(value):
        raise NumericalError("non-finite training loss")
    optimizer.zero_grad()
    T.backward(loss)
    optimizer.step()
    optimizer.zero_grad()
    return value


def train(
    model: Denoiser,
    scene_set,
    schedule: DiffusionSchedule,
    config: TrainConfig,
    on_metric=None,
) -> list[float]:
    """Toy training loop over a pregenerated scene pool."""
    rng = np.random.default_rng(config.seed)
    optimizer = T.Adam(model.trainable_parameters(), lr=config.lr)
    losses = []
    for step in range(config.steps):
        batch = scene_set.draw_batch(rng)
        losses.append(train_step(model, optimizer, batch, schedule, config.dropout, rng))
        if on_metric and (step % config.log_every == 0 or step == config.steps - 1):
            recent = losses[-config.log_every:]
            on_metric(step, float(np.mean(recent)))
    return losses


class BatchQueue:
    """Producer thread keeping at most `capacity` prepared batches in flight."""

    def __init__(self, make_batch, capacity: int = 2):
        self._queue: queue.Queue = queue.Queue(maxsize=capacity)
        self._stop = threading.Event()

        def run():
            while not self._stop.is_set():
                item = make_batch()
                while not self._stop.is_set():
                    try:
                        self._queue.put(item, timeout=0.05)
                        break
                    except queue.Full:
                        continue

        self._thread = threading.Thread(target=run, daemon=True)
        self._thread.start()

    def get(self) -> ViewBatch:
        return self._queue.get()

    def close(self) -> None:
        self._stop.set()
        try:
            while True:
                self._queue.get_nowait()
        except queue.Empty:
            pass
        self._thread.join(timeout=2.0)


# ---------------------------------------------------------------------------
# Cross-view agreement metric
# ---------------------------------------------------------------------------

def cross_view_disagreement(pbr_images: np.ndarray,
                            bundle: CorrespondenceBundle) -> float:
    """Mean |difference| of 8-channel values at mutually visible
    correspondences, averaged over all ordered view pairs."""
    n = pbr_images.shape[0]
    total, count = 0.0, 0
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            fld = bundle.fields[(i, j)]
            sampled, mask = gather(pbr_images[j], fld)
            if not mask.any():
                continue
            diff = np.abs(pbr_images[i][:, mask] - sampled[:, mask])
            total += float(diff.mean())
            count += 1
    return total / max(count, 1)
