"""Training objectives for cycle-consistent stain translation.

Adversarial terms use the log-likelihood minimax form by default (a
least-squares alternative sits behind a flag), cycle/identity/guidance
terms are mean-l1 reductions so that unit weights stay scale-balanced
across image sizes.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch

EPS = 1e-7  # probability clamp keeping logs finite


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    adv: float = 1.0
    cyc: float = 1.0
    idt: float = 1.0
    seg: float = 1.0

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if value < 0:
                raise LossError(f"weight {name} must be non-negative, got {value}")


@dataclass
class LossBreakdown:
    adv_d: float = 0.0
    adv_g: float = 0.0
    cyc: float = 0.0
    idt: float = 0.0
    seg_cyc: float = 0.0
    seg_idt: float = 0.0
    total: float = 0.0

    FIELDS = ("adv_d", "adv_g", "cyc", "idt", "seg_cyc", "seg_idt", "total")

    def as_row(self) -> list[float]:
        return [getattr(self, f) for f in self.FIELDS]


def _log(p: torch.Tensor) -> torch.Tensor:
    return torch.log(p.clamp(EPS, 1.0 - EPS))


def _l1(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise LossError(f"l1 shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).abs().mean()


def loss_adv_d(
    d_real_p: torch.Tensor,
    d_real_a: torch.Tensor,
    d_fake_p: torch.Tensor,
    d_fake_a: torch.Tensor,
    least_squares: bool = False,
) -> torch.Tensor:
    """Discriminator objective on pre-computed score maps, as a minimized value.

    Log form: the negated minimax value
    -[E log D(real_p) + E log(1-D(fake_p)) + E log D(real_a) + E log(1-D(fake_a))].
    Fake scores must come from detached generator outputs.
    """
    if least_squares:
        return (
            ((d_real_p - 1.0) ** 2).mean()
            + (d_fake_p**2).mean()
            + ((d_real_a - 1.0) ** 2).mean()
            + (d_fake_a**2).mean()
        )
    return -(
        _log(d_real_p).mean()
        + _log(1.0 - d_fake_p).mean()
        + _log(d_real_a).mean()
        + _log(1.0 - d_fake_a).mean()
    )


def loss_adv_g(
    d_fake_p: torch.Tensor,
    d_fake_a: torch.Tensor,
    least_squares: bool = False,
    non_saturating: bool = False,
) -> torch.Tensor:
    """Generator-side adversarial term, minimized.

    Saturating default: E log(1-D(fake)) summed over both directions, as the
    minimax objective is written. non_saturating swaps in -E log D(fake),
    which gives stronger early gradients.
    """
    if least_squares:
        return ((d_fake_p - 1.0) ** 2).mean() + ((d_fake_a - 1.0) ** 2).mean()
    if non_saturating:
        return -(_log(d_fake_p).mean() + _log(d_fake_a).mean())
    return _log(1.0 - d_fake_p).mean() + _log(1.0 - d_fake_a).mean()


def loss_cyc(
    x: torch.Tensor, x_rec: torch.Tensor, y: torch.Tensor, y_rec: torch.Tensor
) -> torch.Tensor:
    """Two-direction reconstruction penalty, mean l1 per direction, summed."""
    return _l1(x_rec, x) + _l1(y_rec, y)


def loss_idt(
    x: torch.Tensor, x_idt: torch.Tensor, y: torch.Tensor, y_idt: torch.Tensor
) -> torch.Tensor:
    """Pass-through penalty: each generator applied to its own target domain."""
    return _l1(x_idt, x) + _l1(y_idt, y)


def loss_seg(
    segmentor,
    x: torch.Tensor,
    x_rec: torch.Tensor,
    x_idt: torch.Tensor,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Guidance terms from a frozen per-pixel classifier, first domain only.

    The prediction on the real image is detached and acts as the
    self-supervision target; gradients reach the generators through the
    reconstruction and identity branches only.
    """
    target = segmentor.predict(x, source="p_real").detach()
    seg_cyc = _l1(segmentor.predict(x_rec, source="p_rec"), target)
    seg_idt = _l1(segmentor.predict(x_idt, source="p_idt"), target)
    return seg_cyc, seg_idt


def loss_total(adv, cyc, idt, seg, weights: LossWeights):
    """Weighted sum of the four objective groups."""
    return weights.adv * adv + weights.cyc * cyc + weights.idt * idt + weights.seg * seg
