"""Network architectures and forward contracts.

U-Net translators with tanh outputs, PatchGAN discriminators with sigmoid
patch scores, the extra-channel wrapper that splits a 6-channel generator
into (translation, meta) halves, and the frozen segmentor handle used for
self-supervised guidance.
"""
from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .imaging import ClassSchema

CHECKPOINT_FORMAT_VERSION = 1


class ContractError(ValueError):
    """Shape / channel / schema contract violation at a network boundary."""


class TrainingFailureError(RuntimeError):
    """A training routine failed to reach its required quality gate."""


@dataclass(frozen=True)
class GeneratorSpec:
    depth: int = 7
    base_width: int = 32
    in_channels: int = 3
    out_channels: int = 3

    def __post_init__(self):
        if not (2 <= self.depth <= 7):
            raise ContractError(f"generator depth {self.depth} outside supported range")


@dataclass(frozen=True)
class DiscriminatorSpec:
    depth: int = 4
    base_width: int = 32

    def __post_init__(self):
        if not (1 <= self.depth <= 6):
            raise ContractError(f"discriminator depth {self.depth} outside supported range")


def _norm(channels: int) -> nn.Module:
    return nn.InstanceNorm2d(channels, affine=True)


class _DownBlock(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(cin, cout, 4, stride=2, padding=1),
            _norm(cout),
            nn.LeakyReLU(0.2, inplace=True),
        )

    def forward(self, x):
        return self.body(x)


class _UpBlock(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.body = nn.Sequential(
            nn.ConvTranspose2d(cin, cout, 4, stride=2, padding=1),
            _norm(cout),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.body(x)


class UNetGenerator(nn.Module):
    """Encoder/decoder with skip connections and a tanh output head."""

    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.spec = spec
        w = spec.base_width
        widths = [min(w * 2**i, w * 8) for i in range(spec.depth)]
        self.inc = nn.Sequential(
            nn.Conv2d(spec.in_channels, widths[0], 3, padding=1),
            _norm(widths[0]),
            nn.LeakyReLU(0.2, inplace=True),
        )
        self.downs = nn.ModuleList(
            _DownBlock(widths[i], widths[i + 1]) for i in range(spec.depth - 1)
        )
        self.ups = nn.ModuleList(
            _UpBlock(widths[i + 1] + (widths[i + 1] if i < spec.depth - 2 else 0), widths[i])
            for i in reversed(range(spec.depth - 1))
        )
        self.outc = nn.Conv2d(widths[0] * 2 if spec.depth > 1 else widths[0],
                              spec.out_channels, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != self.spec.in_channels:
            raise ContractError(
                f"expected (N,{self.spec.in_channels},H,W) input, got {tuple(x.shape)}"
            )
        div = 2 ** (self.spec.depth - 1)
        if x.shape[2] % div or x.shape[3] % div:
            raise ContractError(f"spatial size must be divisible by {div}")
        skips = [self.inc(x)]
        for down in self.downs:
            skips.append(down(skips[-1]))
        h = skips[-1]
        for i, up in enumerate(self.ups):
            h = up(h)
            h = torch.cat([h, skips[-2 - i]], dim=1)
        return torch.tanh(self.outc(h))


class PatchDiscriminator(nn.Module):
    """Strided conv stack emitting a sigmoid patch-score map."""

    def __init__(self, spec: DiscriminatorSpec, in_channels: int = 3):
        super().__init__()
        self.spec = spec
        w = spec.base_width
        layers: list[nn.Module] = [
            nn.Conv2d(in_channels, w, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
        ]
        cin = w
        for i in range(1, spec.depth):
            cout = min(w * 2**i, w * 8)
            layers += [
                nn.Conv2d(cin, cout, 4, stride=2, padding=1),
                _norm(cout),
                nn.LeakyReLU(0.2, inplace=True),
            ]
            cin = cout
        layers.append(nn.Conv2d(cin, 1, 4, stride=1, padding=1))
        self.body = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        min_size = 2 ** (self.spec.depth + 1)
        if x.shape[2] <= min_size or x.shape[3] <= min_size:
            raise ContractError(
                f"input {tuple(x.shape[2:])} yields a scalar patch map at depth "
                f"{self.spec.depth}; needs > {min_size}px"
            )
        return torch.sigmoid(self.body(x))


def discriminator_receptive_field(spec: DiscriminatorSpec) -> int:
    """Receptive field of one output score, by conv arithmetic.

    All body convs are k=4; the first ``depth`` have stride 2, the head
    stride 1. RF_{i} = RF_{i+1} * s_i + (k - s_i) evaluated back to front.
    """
    rf = 1
    for stride in [1] + [2] * spec.depth:
        rf = rf * stride + (4 - stride)
    return rf


ZERO_META = None  # sentinel: feed zeros into the meta input channels


@dataclass
class ECWrapper:
    """Extra-channel generator: 6-in/6-out U-Net split into image and meta halves.

    The first hop of a cycle (and every inference call) feeds zeros into the
    meta input; the reconstruction hop feeds the meta output of the first
    hop. Only the translation half is ever shown to discriminators or the
    segmentor.
    """

    inner: UNetGenerator
    meta_channels: int = 3

    def __post_init__(self):
        if self.inner.spec.in_channels != 3 + self.meta_channels:
            raise ContractError("EC inner generator must take image + meta channels")
        if self.inner.spec.out_channels != 3 + self.meta_channels:
            raise ContractError("EC inner generator must emit image + meta channels")

    def forward(
        self, x: torch.Tensor, meta_in: Optional[torch.Tensor] = ZERO_META
    ) -> tuple[torch.Tensor, torch.Tensor]:
        if meta_in is ZERO_META:
            meta_in = torch.zeros(
                x.shape[0], self.meta_channels, x.shape[2], x.shape[3],
                dtype=x.dtype, device=x.device,
            )
        if meta_in.shape[1] != self.meta_channels:
            raise ContractError(f"meta input must have {self.meta_channels} channels")
        out = self.inner(torch.cat([x, meta_in], dim=1))
        return out[:, :3], out[:, 3:]

    def parameters(self):
        return self.inner.parameters()


def make_generator(ec: bool, depth: int = 7, base_width: int = 32):
    """Plain U-Net translator, or its extra-channel wrapped form."""
    if ec:
        spec = GeneratorSpec(depth=depth, base_width=base_width, in_channels=6, out_channels=6)
        return ECWrapper(UNetGenerator(spec))
    spec = GeneratorSpec(depth=depth, base_width=base_width)
    return UNetGenerator(spec)


def infer_translate(gen, x: torch.Tensor) -> torch.Tensor:
    """Deterministic inference path; EC variants get zeroed meta input."""
    with torch.no_grad():
        if isinstance(gen, ECWrapper):
            translation, _ = gen.forward(x, ZERO_META)
            return translation
        return gen(x)


# -- Segmentor ---------------------------------------------------------------


class SegUNet(nn.Module):
    """Small U-Net emitting per-class logits (softmaxed by the handle)."""

    def __init__(self, num_classes: int, depth: int = 4, base_width: int = 16):
        super().__init__()
        spec = GeneratorSpec(depth=depth, base_width=base_width,
                             in_channels=3, out_channels=num_classes)
        self.backbone = UNetGenerator(spec)
        # reuse the U-Net body but bypass its tanh head
        self.backbone_forward = self._logits

    def _logits(self, x: torch.Tensor) -> torch.Tensor:
        bb = self.backbone
        skips = [bb.inc(x)]
        for down in bb.downs:
            skips.append(down(skips[-1]))
        h = skips[-1]
        for i, up in enumerate(bb.ups):
            h = up(h)
            h = torch.cat([h, skips[-2 - i]], dim=1)
        return bb.outc(h)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self._logits(x)


def parameter_digest(module: nn.Module) -> str:
    """SHA-256 over all parameter and buffer bytes, in state-dict order."""
    h = hashlib.sha256()
    for key, tensor in sorted(module.state_dict().items()):
        h.update(key.encode())
        h.update(tensor.detach().cpu().numpy().tobytes())
    return h.hexdigest()


@dataclass
class SegmentorHandle:
    """Frozen per-pixel classifier with an instrumented call log.

    ``call_log`` records the caller-declared source tag of every batch the
    segmentor sees, which lets tests assert the one-sided integration rule
    (real second-domain images are never segmented during training).
    """

    model: SegUNet
    schema: ClassSchema
    frozen: bool = True
    call_log: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.frozen:
            for p in self.model.parameters():
                p.requires_grad_(False)
        self.model.eval()
        self._digest = parameter_digest(self.model)

    @property
    def digest(self) -> str:
        return self._digest

    def predict(self, x: torch.Tensor, source: str = "unspecified") -> torch.Tensor:
        """Probability maps (N, classes, H, W); gradients flow through x only."""
        if x.shape[1] != 3:
            raise ContractError("segmentor expects 3-channel input")
        self.call_log.append(source)
        logits = self.model(x)
        if logits.shape[1] != self.schema.num_classes:
            raise ContractError("segmentor output does not match schema size")
        return F.softmax(logits, dim=1)

    def predict_labels(self, x: torch.Tensor, source: str = "unspecified") -> torch.Tensor:
        return self.predict(x, source=source).argmax(dim=1)


def seg_predict(handle: SegmentorHandle, x: torch.Tensor, source: str = "unspecified"):
    probs = handle.predict(x, source=source)
    return probs, probs.argmax(dim=1)


def train_toy_segmentor(
    images: np.ndarray,
    labels: np.ndarray,
    schema: ClassSchema,
    seed: int = 0,
    iterations: int = 400,
    batch_size: int = 4,
    lr: float = 2e-3,
    holdout_fraction: float = 0.25,
    accuracy_gate: float = 0.90,
    depth: int = 4,
    base_width: int = 16,
) -> SegmentorHandle:
    """Supervised training of the toy segmentor on labelled first-domain data.

    ``images`` is (N, H, W, 3) in [0,1]; ``labels`` is (N, H, W) class
    indices. Trains with cross-entropy until the held-out mean pixel
    accuracy clears the gate, then returns a frozen handle. Raises
    TrainingFailureError if the gate is missed within the budget.
    """
    if len(images) < 2:
        raise TrainingFailureError("need at least 2 labelled images for a holdout split")
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)

    n_hold = max(1, int(round(holdout_fraction * len(images))))
    order = rng.permutation(len(images))
    hold_idx, train_idx = order[:n_hold], order[n_hold:]

    x_all = torch.from_numpy(images).float().permute(0, 3, 1, 2) * 2.0 - 1.0
    y_all = torch.from_numpy(labels).long()

    model = SegUNet(schema.num_classes, depth=depth, base_width=base_width)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    model.train()
    for _ in range(iterations):
        batch = rng.choice(train_idx, size=min(batch_size, len(train_idx)), replace=False)
        bx, by = x_all[batch], y_all[batch]
        opt.zero_grad()
        loss = F.cross_entropy(model(bx), by)
        loss.backward()
        opt.step()

    model.eval()
    with torch.no_grad():
        pred = model(x_all[hold_idx]).argmax(dim=1)
        accuracy = float((pred == y_all[hold_idx]).float().mean())
    if accuracy < accuracy_gate:
        raise TrainingFailureError(
            f"toy segmentor reached {accuracy:.3f} pixel accuracy, below the {accuracy_gate} gate"
        )
    return SegmentorHandle(model=model, schema=schema)


# -- Checkpoints -------------------------------------------------------------


def spec_fingerprint(spec) -> str:
    return hashlib.sha256(repr(asdict(spec)).encode()).hexdigest()[:16]


def save_checkpoint(path, modules: dict[str, nn.Module], spec, iteration: int, rng_state) -> None:
    """Versioned binary blob: header plus state dicts for every module."""
    blob = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "spec_fingerprint": spec_fingerprint(spec),
        "spec": asdict(spec),
        "iteration": iteration,
        "rng_state": rng_state,
        "state": {name: m.state_dict() for name, m in modules.items()},
    }
    torch.save(blob, path)


def load_checkpoint(path) -> dict:
    blob = torch.load(path, weights_only=False)
    if blob.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ContractError(f"unsupported checkpoint version {blob.get('format_version')}")
    return blob
