"""Training objectives for the defrontalization model and the embedding model."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import LabelOutOfRange, ShapeMismatch
from .nets import IDENTITY_TAPS, PERCEPTUAL_TAPS, MultiScaleOutput, feature_net_taps

EPS = 1e-7
PERCEPTUAL_WEIGHTS = (1.0, 1 / 2, 1 / 4, 1 / 4, 1 / 8)
COMPONENTS = ("pixel", "perceptual", "adversarial", "illumination", "identity", "mask")


@dataclass
class LossWeights:
    """Weights of the six generator objectives.

    ``mask`` is fixed at 1 by default.  The other five are a tunable
    preset recorded in every checkpoint config.
    """

    pixel: float = 1.0
    perceptual: float = 1.0
    adversarial: float = 0.1
    illumination: float = 1.0
    identity: float = 0.1
    mask: float = 1.0
    perceptual_layers: tuple[float, ...] = PERCEPTUAL_WEIGHTS

    def __post_init__(self):
        self.perceptual_layers = tuple(float(w) for w in self.perceptual_layers)
        for name in COMPONENTS:
            v = float(getattr(self, name))
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {name} must be finite and non-negative")
            setattr(self, name, v)

    def as_tuple(self) -> tuple[float, ...]:
        return tuple(getattr(self, c) for c in COMPONENTS)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["perceptual_layers"] = list(self.perceptual_layers)
        return d


@dataclass
class MarginConfig:
    scale: float = 64.0
    margin: float = 0.5
    num_classes: int = 2

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        if not 0 <= self.margin < math.pi / 2:
            raise ValueError("margin must lie in [0, pi/2)")
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")


def _images(x) -> Mapping[int, Tensor]:
    return x.images if isinstance(x, MultiScaleOutput) else x


def _l1(a: Tensor, b: Tensor, reduction: str) -> Tensor:
    if a.shape != b.shape:
        raise ShapeMismatch(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    d = (a - b).abs()
    if reduction == "mean":
        return d.mean()
    if reduction == "sum":
        return d.sum()
    raise ValueError(f"unknown reduction {reduction!r}")


def _multiscale_l1(pred: Mapping[int, Tensor], target: Mapping[int, Tensor], reduction: str) -> Tensor:
    if set(pred) != set(target):
        raise ShapeMismatch(f"scale sets differ: {sorted(pred)} vs {sorted(target)}")
    return sum(_l1(pred[s], target[s], reduction) for s in sorted(pred))


def pixel_loss(synth, gt, reduction: str = "mean") -> Tensor:
    """Sum over scales of the L1 distance between synthesized and target images."""
    return _multiscale_l1(_images(synth), _images(gt), reduction)


def illumination_preserving_loss(warped_frontal: Mapping[int, Tensor], input_frontal: Mapping[int, Tensor], reduction: str = "mean") -> Tensor:
    """Sum over scales of L1 between the synthesis warped back to frontal and the input."""
    return _multiscale_l1(warped_frontal, input_frontal, reduction)


def perceptual_loss(feature_net, synth: Tensor, gt: Tensor, layer_weights: Sequence[float] = PERCEPTUAL_WEIGHTS, reduction: str = "mean") -> Tensor:
    names = getattr(feature_net, "tap_names", None) or PERCEPTUAL_TAPS
    if len(names) != len(layer_weights):
        raise ShapeMismatch(f"{len(layer_weights)} layer weights for {len(names)} taps")
    fs = feature_net_taps(feature_net, synth, names)
    fg = feature_net_taps(feature_net, gt, names)
    return sum(w * _l1(fs[n], fg[n], reduction) for w, n in zip(layer_weights, names))


def identity_preserving_loss(identity_net, synth: Tensor, gt: Tensor, reduction: str = "mean") -> Tensor:
    fs = feature_net_taps(identity_net, synth, IDENTITY_TAPS)
    fg = feature_net_taps(identity_net, gt, IDENTITY_TAPS)
    return _l1(fs["fc2"], fg["fc2"], reduction) + _l1(fs["pool"], fg["pool"], reduction)


def adversarial_loss(d_real: Tensor, d_fake: Tensor, generator_mode: str = "non_saturating") -> tuple[Tensor, Tensor]:
    """Return ``(discriminator_term, generator_term)``, both to be minimized.

    ``generator_mode="saturating"`` gives the literal min-max form
    ``mean log(1 - D(fake))``; the default is ``-mean log D(fake)``.
    """
    real = d_real.clamp(EPS, 1 - EPS)
    fake = d_fake.clamp(EPS, 1 - EPS)
    disc = -(torch.log(real).mean() + torch.log1p(-fake).mean())
    if generator_mode == "non_saturating":
        gen = -torch.log(fake).mean()
    elif generator_mode == "saturating":
        gen = torch.log1p(-fake).mean()
    else:
        raise ValueError(f"unknown generator_mode {generator_mode!r}")
    return disc, gen


def binary_cross_entropy(pred: Tensor, target: Tensor) -> Tensor:
    if pred.shape != target.shape:
        raise ShapeMismatch(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    p = pred.clamp(EPS, 1 - EPS)
    return -(target * torch.log(p) + (1 - target) * torch.log1p(-p)).mean()


def mask_loss(pred_masks: Mapping[int, Tensor], gt_masks: Mapping[int, Tensor]) -> Tensor:
    if set(pred_masks) != set(gt_masks):
        raise ShapeMismatch(f"scale sets differ: {sorted(pred_masks)} vs {sorted(gt_masks)}")
    return sum(binary_cross_entropy(pred_masks[s], gt_masks[s]) for s in sorted(pred_masks))


def total_loss(weights: LossWeights, components: Mapping[str, Tensor | float]) -> Tensor | float:
    missing = [c for c in COMPONENTS if c not in components]
    if missing:
        raise KeyError(f"missing loss components: {missing}")
    return sum(getattr(weights, c) * components[c] for c in COMPONENTS)


def margin_logits(embeddings: Tensor, class_weights: Tensor, labels: Tensor, cfg: MarginConfig) -> Tensor:
    """Scaled cosine logits with the additive angular margin on the target class."""
    if embeddings.dim() == 1:
        embeddings = embeddings.unsqueeze(0)
    labels = torch.as_tensor(labels, device=embeddings.device).reshape(-1).long()
    if labels.numel() != embeddings.shape[0]:
        raise ShapeMismatch("one label per embedding required")
    n_classes = class_weights.shape[0]
    if n_classes != cfg.num_classes:
        raise ShapeMismatch(f"class weights have {n_classes} rows, config says {cfg.num_classes}")
    if labels.numel() and (labels.min() < 0 or labels.max() >= n_classes):
        raise LabelOutOfRange(f"labels must lie in [0, {n_classes})")
    cos = (embeddings @ class_weights.T).clamp(-1.0, 1.0)
    if cfg.margin == 0:
        return cfg.scale * cos
    target = cos.gather(1, labels[:, None])
    sin = torch.sqrt((1.0 - target * target).clamp_min(1e-30))
    cos_m, sin_m = math.cos(cfg.margin), math.sin(cfg.margin)
    shifted = target * cos_m - sin * sin_m
    # beyond theta = pi - m, cos(theta + m) turns upward; keep a monotone penalty
    fallback = target - math.sin(math.pi - cfg.margin) * cfg.margin
    shifted = torch.where(target > math.cos(math.pi - cfg.margin), shifted, fallback)
    return cfg.scale * cos.scatter(1, labels[:, None], shifted)


def margin_softmax_loss(embeddings: Tensor, class_weights: Tensor, labels, cfg: MarginConfig) -> Tensor:
    """Additive angular margin cross-entropy; inputs are expected unit-norm."""
    logits = margin_logits(embeddings, class_weights, labels, cfg)
    labels = torch.as_tensor(labels, device=logits.device).reshape(-1).long()
    return F.cross_entropy(logits, labels)


class MarginHead(nn.Module):
    """Classification head holding the per-identity weight rows."""

    def __init__(self, embedding_dim: int, cfg: MarginConfig):
        super().__init__()
        self.cfg = cfg
        self.weight = nn.Parameter(torch.empty(cfg.num_classes, embedding_dim))
        nn.init.normal_(self.weight, std=0.01)

    def forward(self, embeddings: Tensor, labels: Tensor) -> Tensor:
        return margin_softmax_loss(F.normalize(embeddings, dim=1), F.normalize(self.weight, dim=1), labels, self.cfg)


@dataclass
class GeneratorLosses:
    """Bundle of per-component values produced during a generator step."""

    values: dict[str, Tensor] = field(default_factory=dict)

    def total(self, weights: LossWeights) -> Tensor:
        return total_loss(weights, self.values)

    def floats(self) -> dict[str, float]:
        return {k: float(v.detach()) for k, v in self.values.items()}


__all__ = [
    "COMPONENTS",
    "EPS",
    "PERCEPTUAL_WEIGHTS",
    "LossWeights",
    "MarginConfig",
    "MarginHead",
    "GeneratorLosses",
    "adversarial_loss",
    "binary_cross_entropy",
    "identity_preserving_loss",
    "illumination_preserving_loss",
    "margin_logits",
    "margin_softmax_loss",
    "mask_loss",
    "perceptual_loss",
    "pixel_loss",
    "total_loss",
]
