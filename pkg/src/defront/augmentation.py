"""Alignment-error gated defrontalization augmentation."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
import torch

from .errors import EmptyInput, InfeasibleTarget, InvalidState, ModelNotLoaded, PolicyUncalibrated
from .geometry import ARCFACE_TEMPLATE, FRONTAL_NAMES, AlignedFace, FaceSide, LandmarkSet, alignment_error, bisect_horizontal

log = logging.getLogger(__name__)

SIDES = ("left", "right")
HISTOGRAM_BINS = 32


@dataclass
class AugmentationPolicy:
    error_threshold: float | None = None
    apply_probability: float = 1.0
    target_fraction: float = 0.2
    rng_seed: int = 0

    def __post_init__(self):
        if self.error_threshold is not None and not self.error_threshold >= 0:
            raise ValueError("error_threshold must be non-negative")
        for name in ("apply_probability", "target_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")

    @property
    def calibrated(self) -> bool:
        return self.error_threshold is not None

    @classmethod
    def disabled(cls, rng_seed: int = 0) -> "AugmentationPolicy":
        """Baseline policy: the gate never opens."""
        return cls(error_threshold=0.0, rng_seed=rng_seed)


@dataclass(frozen=True)
class AugmentationDecision:
    apply: bool
    side: str | None = None

    def __post_init__(self):
        if self.apply != (self.side is not None):
            raise ValueError("side must be given exactly when apply is true")
        if self.side is not None and self.side not in SIDES:
            raise ValueError(f"side must be one of {SIDES}")


class RandomStream:
    """Counter-based uniforms: draw ``i`` depends only on (seed, stream_id, i).

    Data-loading workers each own a stream id, so results do not depend on
    scheduling order.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        self.counter = 0

    def draw(self, index: int) -> np.ndarray:
        return np.random.default_rng([self.seed, self.stream_id, int(index)]).random(2)

    def next(self) -> np.ndarray:
        u = self.draw(self.counter)
        self.counter += 1
        return u


def calibrate_threshold(errors, target_fraction: float = 0.2, apply_probability: float = 1.0) -> float:
    """Error threshold such that the expected defrontalized fraction is ``target_fraction``.

    The gate is ``error < threshold``, so the threshold is the
    ``target_fraction / apply_probability`` quantile of the errors.
    """
    errs = np.asarray(list(errors) if not isinstance(errors, np.ndarray) else errors, dtype=np.float64).ravel()
    if errs.size == 0:
        raise EmptyInput("no alignment errors to calibrate on")
    if apply_probability <= 0:
        if target_fraction > 0:
            raise InfeasibleTarget("apply_probability is zero, target cannot be reached")
        return 0.0
    q = target_fraction / apply_probability
    if q > 1.0:
        raise InfeasibleTarget(f"target {target_fraction} needs quantile {q:.3f} > 1")
    if q >= 1.0:
        return float(np.nextafter(errs.max(), np.inf))
    return float(np.quantile(errs, q))


def calibration_report(errors, threshold: float, target_fraction: float, apply_probability: float = 1.0) -> dict:
    errs = np.asarray(errors, dtype=np.float64).ravel()
    eligible = float(np.mean(errs < threshold)) if errs.size else 0.0
    realized = eligible * apply_probability
    counts, edges = np.histogram(errs, bins=HISTOGRAM_BINS) if errs.size else (np.zeros(HISTOGRAM_BINS, int), np.zeros(HISTOGRAM_BINS + 1))
    warnings = []
    if errs.size and np.all(errs == errs[0]):
        warnings.append("all alignment errors are equal; realized fraction is 0 or 1")
    if abs(realized - target_fraction) > 0.02:
        warnings.append(f"realized fraction {realized:.4f} differs from target {target_fraction:.4f}")
    return {
        "threshold": float(threshold),
        "target_fraction": float(target_fraction),
        "apply_probability": float(apply_probability),
        "eligible_fraction": eligible,
        "realized_fraction": realized,
        "n": int(errs.size),
        "histogram": {"counts": [int(c) for c in counts], "edges": [float(e) for e in edges]},
        "warnings": warnings,
    }


def calibrate_policy(errors, policy: AugmentationPolicy) -> tuple[AugmentationPolicy, dict]:
    t = calibrate_threshold(errors, policy.target_fraction, policy.apply_probability)
    report = calibration_report(errors, t, policy.target_fraction, policy.apply_probability)
    for w in report["warnings"]:
        log.warning("calibration: %s", w)
    calibrated = AugmentationPolicy(t, policy.apply_probability, policy.target_fraction, policy.rng_seed)
    return calibrated, report


def decide(record_error: float, policy: AugmentationPolicy, rng_stream: RandomStream, index: int | None = None) -> AugmentationDecision:
    """Gate on ``error < threshold`` and a Bernoulli draw, then pick a side uniformly."""
    if not policy.calibrated:
        raise PolicyUncalibrated("augmentation policy has no error threshold")
    u_apply, u_side = rng_stream.next() if index is None else rng_stream.draw(index)
    if not (record_error < policy.error_threshold and u_apply < policy.apply_probability):
        return AugmentationDecision(False)
    return AugmentationDecision(True, SIDES[int(u_side >= 0.5)])


@dataclass
class DefrontalizedFace:
    image: np.ndarray
    mask: np.ndarray
    side: str


def _to_tensor(image: np.ndarray) -> torch.Tensor:
    img = np.asarray(image, dtype=np.float32)
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    return torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1)))[None]


def apply_defrontalization(face: AlignedFace, side: str, defront_model) -> DefrontalizedFace:
    """Bisect, synthesize a profile, and return it in the requested side's orientation.

    Right-side requests are mirrored to the canonical orientation for the
    model and the result is mirrored back.
    """
    if defront_model is None:
        raise ModelNotLoaded("no defrontalization model loaded")
    if getattr(defront_model, "training", False):
        raise InvalidState("defrontalization model must be in eval mode")
    if face.side is not FaceSide.full:
        raise InvalidState(f"face already bisected ({face.side.value})")
    half = bisect_horizontal(face, side)
    param = next(defront_model.parameters(), None)
    x = _to_tensor(half.image)
    if param is not None:
        x = x.to(param.device, param.dtype)
    image, mask = defront_model.synthesize(x)
    image = image[0].permute(1, 2, 0).detach().cpu().numpy().astype(np.float32)
    mask = mask[0, 0].detach().cpu().numpy().astype(np.float32)
    if side == "right":
        image, mask = image[:, ::-1].copy(), mask[:, ::-1].copy()
    return DefrontalizedFace(np.clip(image, 0.0, 1.0), np.clip(mask, 0.0, 1.0), side)


def replace_background(result: DefrontalizedFace, background) -> np.ndarray:
    bg = np.broadcast_to(np.asarray(background, dtype=np.float32), result.image.shape)
    m = result.mask[:, :, None]
    return result.image * m + bg * (1 - m)


def augmented_sample(face: AlignedFace, record_error: float, label, policy: AugmentationPolicy, defront_model, rng: RandomStream, index: int | None = None):
    """Return ``(image, label, decision)``; the label is passed through untouched."""
    decision = decide(record_error, policy, rng, index)
    if not decision.apply:
        return np.asarray(face.image, dtype=np.float32), label, decision
    return apply_defrontalization(face, decision.side, defront_model).image, label, decision


# ---------------------------------------------------------------------------
# cached alignment errors


def template_hash(template: LandmarkSet = ARCFACE_TEMPLATE) -> str:
    arr = np.round(template.array(FRONTAL_NAMES), 6)
    return hashlib.sha256(arr.tobytes()).hexdigest()[:16]


def error_key(path, template: LandmarkSet = ARCFACE_TEMPLATE) -> str:
    return f"{Path(path)}|{template_hash(template)}"


def compute_error_cache(items: Iterable[tuple[str, LandmarkSet]], template: LandmarkSet = ARCFACE_TEMPLATE) -> dict[str, float]:
    return {error_key(p, template): alignment_error(lms, template) for p, lms in items}


def save_error_cache(path, cache: Mapping[str, float]) -> None:
    Path(path).write_text(json.dumps(dict(sorted(cache.items())), indent=0) + "\n", encoding="utf-8")


def load_error_cache(path) -> dict[str, float]:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    out = {}
    for k, v in raw.items():
        v = float(v)
        if not math.isfinite(v) or v < 0:
            raise ValueError(f"invalid cached error for {k}: {v}")
        out[k] = v
    return out
