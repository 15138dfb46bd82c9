"""Optimization loop for the stain translators.

One iteration = generator update (adversarial + cycle + identity +
optional guidance) followed by a discriminator update on replay-pool
fakes. RAdam throughout, constant learning rate for the first half of
the budget and a linear ramp to zero afterwards.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import losses
from .imaging import Image, LabelMap, augment_pair, load_png
from .losses import LossBreakdown, LossWeights
from .nets import (
    DiscriminatorSpec,
    ECWrapper,
    PatchDiscriminator,
    SegmentorHandle,
    UNetGenerator,
    make_generator,
    parameter_digest,
    save_checkpoint,
)
from .radam import RAdam
from .synthcorpus import CorpusManifest


class ScheduleError(ValueError):
    pass


class NonFiniteLossError(RuntimeError):
    def __init__(self, breakdown: LossBreakdown):
        self.breakdown = breakdown
        super().__init__(f"non-finite loss encountered: {breakdown}")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    total_iterations: int = 300_000
    batch_size: int = 3
    lr0: float = 1e-4
    decay_start: int = 150_000
    weights: LossWeights = field(default_factory=LossWeights)
    segnet: bool = False
    ec: bool = False
    betas: tuple[float, float] = (0.9, 0.999)
    pool_size: int = 50
    seed: int = 0
    checkpoint_every: int = 50_000
    # desk-scale knobs (the full-size recipe is not the test target)
    image_px: int = 128
    gen_depth: int = 7
    gen_width: int = 32
    disc_depth: int = 4
    disc_width: int = 32
    least_squares: bool = False
    non_saturating: bool = False
    use_pool: bool = True
    augment: bool = True

    def __post_init__(self):
        if not (0 < self.decay_start <= self.total_iterations):
            raise ConfigError("decay_start must lie in (0, total_iterations]")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")


def lr_at(cfg: TrainConfig, iteration: int) -> float:
    """Piecewise-linear schedule: flat at lr0, then linear to zero."""
    if not (0 <= iteration <= cfg.total_iterations):
        raise ScheduleError(f"iteration {iteration} outside [0, {cfg.total_iterations}]")
    if iteration <= cfg.decay_start:
        return cfg.lr0
    span = cfg.total_iterations - cfg.decay_start
    return cfg.lr0 * (cfg.total_iterations - iteration) / span


class ReplayPool:
    """Buffer of past fakes; once full, returns fresh-or-stored at coin-flip odds."""

    def __init__(self, capacity: int, rng: np.random.Generator):
        self.capacity = capacity
        self.rng = rng
        self.items: list[torch.Tensor] = []

    def query(self, fake: torch.Tensor) -> torch.Tensor:
        if self.capacity <= 0:
            return fake
        out = []
        for sample in fake.detach():
            if len(self.items) < self.capacity:
                self.items.append(sample.clone())
                out.append(sample)
            elif self.rng.random() < 0.5:
                idx = int(self.rng.integers(0, self.capacity))
                out.append(self.items[idx].clone())
                self.items[idx] = sample.clone()
            else:
                out.append(sample)
        return torch.stack(out)


class TrainState:
    """Networks, optimizers, pools and the data sampler for one run."""

    def __init__(self, cfg: TrainConfig, segmentor: Optional[SegmentorHandle] = None):
        if cfg.segnet and segmentor is None:
            raise ConfigError("segnet variant requires a frozen segmentor")
        self.cfg = cfg
        self.segmentor = segmentor
        torch.manual_seed(cfg.seed)
        self.g_pa = make_generator(cfg.ec, depth=cfg.gen_depth, base_width=cfg.gen_width)
        self.g_ap = make_generator(cfg.ec, depth=cfg.gen_depth, base_width=cfg.gen_width)
        dspec = DiscriminatorSpec(depth=cfg.disc_depth, base_width=cfg.disc_width)
        self.d_p = PatchDiscriminator(dspec)
        self.d_a = PatchDiscriminator(dspec)
        self.opt_g = RAdam(
            list(self.g_pa.parameters()) + list(self.g_ap.parameters()),
            lr=cfg.lr0, betas=cfg.betas,
        )
        self.opt_d = RAdam(
            list(self.d_p.parameters()) + list(self.d_a.parameters()),
            lr=cfg.lr0, betas=cfg.betas,
        )
        self.rng = np.random.default_rng(cfg.seed)
        pool_cap = cfg.pool_size if cfg.use_pool else 0
        self.pool_p = ReplayPool(pool_cap, self.rng)
        self.pool_a = ReplayPool(pool_cap, self.rng)
        self.iteration = 0

    def generator_modules(self) -> dict:
        unwrap = lambda g: g.inner if isinstance(g, ECWrapper) else g
        return {"g_pa": unwrap(self.g_pa), "g_ap": unwrap(self.g_ap)}

    def all_modules(self) -> dict:
        return {**self.generator_modules(), "d_p": self.d_p, "d_a": self.d_a}

    def set_lr(self, lr: float) -> None:
        for opt in (self.opt_g, self.opt_d):
            for group in opt.param_groups:
                group["lr"] = lr


def _translate(gen, x: torch.Tensor, meta=None):
    """One generator hop; plain nets ignore meta and return (out, None)."""
    if isinstance(gen, ECWrapper):
        return gen.forward(x, meta)
    return gen(x), None


def train_step(state: TrainState, batch_p: torch.Tensor, batch_a: torch.Tensor) -> LossBreakdown:
    """One optimization step: generators first, then discriminators."""
    cfg = state.cfg
    w = cfg.weights

    # -- generator update
    state.opt_g.zero_grad()
    fake_a, meta_pa = _translate(state.g_pa, batch_p)
    x_rec, _ = _translate(state.g_ap, fake_a, meta_pa)
    fake_p, meta_ap = _translate(state.g_ap, batch_a)
    y_rec, _ = _translate(state.g_pa, fake_p, meta_ap)
    idt_p, _ = _translate(state.g_ap, batch_p)
    idt_a, _ = _translate(state.g_pa, batch_a)

    adv_g = losses.loss_adv_g(
        state.d_p(fake_p), state.d_a(fake_a),
        least_squares=cfg.least_squares, non_saturating=cfg.non_saturating,
    )
    cyc = losses.loss_cyc(batch_p, x_rec, batch_a, y_rec)
    idt = losses.loss_idt(batch_p, idt_p, batch_a, idt_a)
    if cfg.segnet:
        seg_cyc, seg_idt = losses.loss_seg(state.segmentor, batch_p, x_rec, idt_p)
        seg = seg_cyc + seg_idt
    else:
        seg_cyc = seg_idt = torch.zeros(())
        seg = seg_cyc
    g_total = losses.loss_total(adv_g, cyc, idt, seg, w)
    g_total.backward()
    state.opt_g.step()

    # -- discriminator update on pool-sampled, detached fakes
    state.opt_d.zero_grad()
    pooled_p = state.pool_p.query(fake_p)
    pooled_a = state.pool_a.query(fake_a)
    adv_d = losses.loss_adv_d(
        state.d_p(batch_p), state.d_a(batch_a),
        state.d_p(pooled_p), state.d_a(pooled_a),
        least_squares=cfg.least_squares,
    )
    (w.adv * adv_d).backward()
    state.opt_d.step()

    breakdown = LossBreakdown(
        adv_d=float(adv_d.detach()), adv_g=float(adv_g.detach()),
        cyc=float(cyc.detach()), idt=float(idt.detach()),
        seg_cyc=float(seg_cyc.detach()), seg_idt=float(seg_idt.detach()),
        total=float(g_total.detach()),
    )
    if not all(np.isfinite(breakdown.as_row())):
        raise NonFiniteLossError(breakdown)
    state.iteration += 1
    return breakdown


def reference_plain_step(state: TrainState, batch_p: torch.Tensor, batch_a: torch.Tensor) -> LossBreakdown:
    """Straight-line unmodified CycleGAN step, no variant branches.

    Kept as an independent code path so that variant-flag-off runs of
    train_step can be checked against it numerically, step for step.
    """
    cfg = state.cfg
    w = cfg.weights

    state.opt_g.zero_grad()
    fake_a = state.g_pa(batch_p)
    x_rec = state.g_ap(fake_a)
    fake_p = state.g_ap(batch_a)
    y_rec = state.g_pa(fake_p)
    idt_p = state.g_ap(batch_p)
    idt_a = state.g_pa(batch_a)

    adv_g = losses.loss_adv_g(
        state.d_p(fake_p), state.d_a(fake_a),
        least_squares=cfg.least_squares, non_saturating=cfg.non_saturating,
    )
    cyc = losses.loss_cyc(batch_p, x_rec, batch_a, y_rec)
    idt = losses.loss_idt(batch_p, idt_p, batch_a, idt_a)
    zero = torch.zeros(())
    g_total = losses.loss_total(adv_g, cyc, idt, zero, w)
    g_total.backward()
    state.opt_g.step()

    state.opt_d.zero_grad()
    pooled_p = state.pool_p.query(fake_p)
    pooled_a = state.pool_a.query(fake_a)
    adv_d = losses.loss_adv_d(
        state.d_p(batch_p), state.d_a(batch_a),
        state.d_p(pooled_p), state.d_a(pooled_a),
        least_squares=cfg.least_squares,
    )
    (w.adv * adv_d).backward()
    state.opt_d.step()

    breakdown = LossBreakdown(
        adv_d=float(adv_d.detach()), adv_g=float(adv_g.detach()),
        cyc=float(cyc.detach()), idt=float(idt.detach()),
        seg_cyc=0.0, seg_idt=0.0, total=float(g_total.detach()),
    )
    if not all(np.isfinite(breakdown.as_row())):
        raise NonFiniteLossError(breakdown)
    state.iteration += 1
    return breakdown


class CorpusSampler:
    """Loads a manifest's images into memory and serves augmented batches."""

    def __init__(self, manifest: CorpusManifest, image_px: int):
        self.images: list[Image] = []
        for img_path, _, _ in manifest.entries:
            img = load_png(img_path)
            if img.height != image_px:
                raise ConfigError(
                    f"corpus image is {img.height}px but the run expects {image_px}px"
                )
            self.images.append(img)
        if not self.images:
            raise ConfigError("empty corpus manifest")

    def batch(self, n: int, rng: np.random.Generator, augment: bool) -> torch.Tensor:
        out = []
        for idx in rng.integers(0, len(self.images), size=n):
            img = self.images[int(idx)]
            if augment:
                img, _ = augment_pair(img, None, rng)
            out.append(torch.from_numpy(img.values.copy()).float())
        batch = torch.stack(out).permute(0, 3, 1, 2)
        return batch * 2.0 - 1.0


LOG_FIELDS = ("iteration", "lr") + LossBreakdown.FIELDS


def fit(
    cfg: TrainConfig,
    manifest_p: CorpusManifest,
    manifest_a: CorpusManifest,
    run_dir: Path | str,
    segmentor: Optional[SegmentorHandle] = None,
    step_fn=train_step,
) -> TrainState:
    """Full training run: iterate, log per-step losses, checkpoint, return state."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    state = TrainState(cfg, segmentor)
    sampler_p = CorpusSampler(manifest_p, cfg.image_px)
    sampler_a = CorpusSampler(manifest_a, cfg.image_px)

    seg_digest_before = segmentor.digest if segmentor is not None else None

    with open(run_dir / "log.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_FIELDS)
        for it in range(cfg.total_iterations):
            lr = lr_at(cfg, it)
            state.set_lr(lr)
            batch_p = sampler_p.batch(cfg.batch_size, state.rng, cfg.augment)
            batch_a = sampler_a.batch(cfg.batch_size, state.rng, cfg.augment)
            breakdown = step_fn(state, batch_p, batch_a)
            writer.writerow([it, f"{lr:.10g}"] + [f"{v:.10g}" for v in breakdown.as_row()])
            if cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
                _save(state, run_dir / f"ckpt_{it + 1:07d}.pt")
    _save(state, run_dir / "ckpt_final.pt")

    if segmentor is not None and not verify_frozen(segmentor, seg_digest_before):
        raise RuntimeError("segmentor parameters changed during translation training")
    return state


def _save(state: TrainState, path: Path) -> None:
    save_checkpoint(
        path,
        state.all_modules(),
        state.cfg,
        iteration=state.iteration,
        rng_state=state.rng.bit_generator.state,
    )


def load_translator(cfg: TrainConfig, ckpt_blob: dict):
    """Rebuild the A->P generator from a checkpoint blob."""
    gen = make_generator(cfg.ec, depth=cfg.gen_depth, base_width=cfg.gen_width)
    target = gen.inner if isinstance(gen, ECWrapper) else gen
    target.load_state_dict(ckpt_blob["state"]["g_ap"])
    target.eval()
    return gen


def verify_frozen(segmentor: SegmentorHandle, before_digest: str) -> bool:
    return parameter_digest(segmentor.model) == before_digest
