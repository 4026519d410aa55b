"""Training loops: flow pretraining, adversarial defrontalization training, embedding training."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .augmentation import AugmentationPolicy, RandomStream, decide, error_key
from .data import FacePairRecord, FaceRecord, read_image
from .errors import CheckpointIOFailure, DataEmpty, NonFiniteLoss, PolicyUncalibrated
from .geometry import ALIGNED_SIZE, AlignedFace, FaceSide, align_frontal, align_profile, alignment_error, bisect_horizontal
from .losses import (
    COMPONENTS,
    LossWeights,
    MarginConfig,
    MarginHead,
    adversarial_loss,
    identity_preserving_loss,
    illumination_preserving_loss,
    mask_loss,
    perceptual_loss,
    pixel_loss,
    total_loss,
)
from .nets import (
    SCALES,
    DefrontModel,
    Discriminator,
    FlowNet,
    NetConfig,
    ResNetBackbone,
    SmallIdentityNet,
    SmallVGG,
    image_pyramid,
    load_checkpoint,
    restore,
    save_checkpoint,
    warp,
)

log = logging.getLogger(__name__)

MASK_THRESHOLD = 1.0 / 255.0


def poly_lr(lr0: float, step: int, total_steps: int, power: float = 1.0) -> float:
    """Polynomial decay from ``lr0`` at step 0 to 0 at ``total_steps``."""
    if total_steps <= 0:
        return lr0
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr0 * (1.0 - step / total_steps) ** power


# ---------------------------------------------------------------------------
# configs and metrics


@dataclass
class DefrontTrainConfig:
    epochs: int = 50
    weights: LossWeights = field(default_factory=LossWeights)
    lr: float = 2e-4
    betas: tuple[float, float] = (0.5, 0.999)
    batch_size: int = 8
    seed: int = 0
    flow_epochs: int = 10
    flow_lr: float = 1e-3
    smoothness_weight: float = 0.1
    generator_mode: str = "non_saturating"
    reduction: str = "mean"
    joint_flows: bool = False

    def __post_init__(self):
        if isinstance(self.weights, Mapping):
            self.weights = LossWeights(**self.weights)
        self.betas = tuple(self.betas)
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.flow_epochs < 0:
            raise ValueError("flow_epochs must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = self.weights.to_dict()
        d["betas"] = list(self.betas)
        return d


@dataclass
class EmbedTrainConfig:
    lr0: float = 0.1
    power: float = 1.0
    weight_decay: float = 5e-4
    momentum: float = 0.9
    epochs: int = 20
    batch_size: int = 32
    accumulation_steps: int = 32
    margin_scale: float = 64.0
    margin: float = 0.5
    policy: AugmentationPolicy = field(default_factory=AugmentationPolicy)
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.policy, Mapping):
            self.policy = AugmentationPolicy(**self.policy)
        if self.epochs < 1 or self.batch_size < 1 or self.accumulation_steps < 1:
            raise ValueError("epochs, batch_size and accumulation_steps must be positive")

    @property
    def effective_batch(self) -> int:
        return self.batch_size * self.accumulation_steps

    def to_dict(self) -> dict:
        d = asdict(self)
        d["policy"] = asdict(self.policy)
        return d


class TrainMetrics:
    """Per-step scalar log; optionally mirrored to a JSON-lines file."""

    def __init__(self, path=None):
        self.rows: list[dict] = []
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("", encoding="utf-8")

    def log(self, step: int, **values) -> dict:
        if self.rows and step <= self.rows[-1]["step"]:
            raise ValueError(f"metric steps must increase ({step} after {self.rows[-1]['step']})")
        row = {"step": int(step)}
        for k, v in values.items():
            if isinstance(v, Tensor) and v.numel() == 1:
                v = v.detach()
            if isinstance(v, (int, float, np.floating, np.integer, Tensor)):
                v = float(v)
                if not math.isfinite(v):
                    raise NonFiniteLoss(f"metric {k} is not finite at step {step}", step, values)
            row[k] = v
        self.rows.append(row)
        if self.path:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(row) + "\n")
        return row

    def series(self, key: str) -> list[float]:
        return [r[key] for r in self.rows if key in r]

    def __len__(self):
        return len(self.rows)


def _check_finite(step: int, values: Mapping[str, Tensor]) -> None:
    bad = {k: float(v) for k, v in values.items() if not torch.isfinite(v).all()}
    if bad:
        raise NonFiniteLoss(f"non-finite loss at step {step}: {bad}", step, bad)


def _seeded(seed: int, *extra: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), *map(int, extra)])


# ---------------------------------------------------------------------------
# paired data


@dataclass
class PairTensors:
    """Aligned, bisected training pairs held in memory (images in [-1, 1])."""

    frontal_half: Tensor
    profile: Tensor
    profile_masks: dict[int, Tensor]
    sides: list[str]
    identities: list[str]

    def __len__(self):
        return self.frontal_half.shape[0]

    def batch(self, idx) -> dict:
        idx = torch.as_tensor(idx, dtype=torch.long)
        fh = self.frontal_half[idx]
        pr = self.profile[idx]
        return {
            "frontal_half": fh,
            "frontal_pyr": image_pyramid(fh),
            "profile": pr,
            "profile_pyr": image_pyramid(pr),
            "masks": {s: m[idx] for s, m in self.profile_masks.items()},
        }


def profile_side(profile_lms) -> str:
    """Frontal half matching a profile: ear left of the nose means the left half is visible."""
    return "left" if profile_lms["ear_point"].x < profile_lms["nose_top"].x else "right"


def face_mask(image: np.ndarray) -> np.ndarray:
    """Binary mask of the non-fill region of an aligned image."""
    return (np.asarray(image).max(axis=2) > MASK_THRESHOLD).astype(np.float32)


def _mask_pyramid(mask: Tensor) -> dict[int, Tensor]:
    out = {}
    for s in SCALES:
        m = mask if s == mask.shape[-1] else F.adaptive_avg_pool2d(mask, s)
        out[s] = (m >= 0.5).to(mask.dtype)
    return out


def _chw(img: np.ndarray) -> Tensor:
    return torch.from_numpy(np.ascontiguousarray(np.asarray(img, dtype=np.float32).transpose(2, 0, 1)))


def align_pair(record: FacePairRecord, frontal_image=None, profile_image=None) -> tuple[AlignedFace, AlignedFace, str]:
    f_img = read_image(record.frontal_path) if frontal_image is None else frontal_image
    p_img = read_image(record.profile_path) if profile_image is None else profile_image
    frontal = align_frontal(f_img, record.frontal_landmarks)
    profile = align_profile(p_img, record.profile_landmarks, frontal)
    return frontal, profile, profile_side(record.profile_landmarks)


def build_pair_tensors(records: Sequence[FacePairRecord]) -> PairTensors:
    if not records:
        raise DataEmpty("no training pairs")
    fh, pr, masks, sides, ids = [], [], [], [], []
    for rec in records:
        frontal, profile, side = align_pair(rec)
        half = bisect_horizontal(frontal, side)
        fh.append(_chw(half.image) * 2 - 1)
        pr.append(_chw(profile.image) * 2 - 1)
        masks.append(torch.from_numpy(face_mask(profile.image))[None])
        sides.append(side)
        ids.append(rec.identity_id)
    mask = torch.stack(masks)
    return PairTensors(torch.stack(fh), torch.stack(pr), _mask_pyramid(mask), sides, ids)


def _epoch_batches(n: int, batch_size: int, seed: int, epoch: int, shuffle: bool = True) -> list[np.ndarray]:
    order = _seeded(seed, epoch).permutation(n) if shuffle else np.arange(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


# ---------------------------------------------------------------------------
# flow pretraining


def smoothness(flow: Tensor) -> Tensor:
    dx = (flow[..., :, 1:] - flow[..., :, :-1]).abs().mean()
    dy = (flow[..., 1:, :] - flow[..., :-1, :]).abs().mean()
    return dx + dy


def flow_photometric(net: FlowNet, source: Tensor, source_pyr, target_pyr) -> tuple[Tensor, Tensor]:
    """Photometric L1 of the warped source against the target, plus flow smoothness."""
    flows = net(source)
    photo = sum((warp(source_pyr[s], flows[s]) - target_pyr[s]).abs().mean() for s in SCALES)
    smooth = sum(smoothness(flows[s]) for s in SCALES)
    return photo, smooth


@dataclass
class FlowPretrainResult:
    forward_flow: FlowNet
    backward_flow: FlowNet
    metrics: TrainMetrics
    initial_photometric: float
    final_photometric: float
    steps: int = 0


@torch.no_grad()
def evaluate_flows(forward_flow: FlowNet, backward_flow: FlowNet, data: PairTensors, batch_size: int = 32) -> float:
    forward_flow.eval()
    backward_flow.eval()
    total, n = 0.0, 0
    for idx in _epoch_batches(len(data), batch_size, 0, 0, shuffle=False):
        b = data.batch(idx)
        pf, _ = flow_photometric(forward_flow, b["frontal_half"], b["frontal_pyr"], b["profile_pyr"])
        pb, _ = flow_photometric(backward_flow, b["profile"], b["profile_pyr"], b["frontal_pyr"])
        total += float(pf + pb) * len(idx)
        n += len(idx)
    return total / n


def pretrain_flows(
    data: PairTensors,
    config: DefrontTrainConfig,
    net_config: NetConfig | None = None,
    forward_flow: FlowNet | None = None,
    backward_flow: FlowNet | None = None,
    out_dir=None,
    metrics: TrainMetrics | None = None,
) -> FlowPretrainResult:
    """Train forward (frontal to profile) and backward (profile to frontal) flow networks."""
    if len(data) == 0:
        raise DataEmpty("no training pairs")
    net_config = net_config or NetConfig()
    torch.manual_seed(config.seed)
    fwd = forward_flow or FlowNet(3, net_config.flow_width, net_config.flow_depth)
    bwd = backward_flow or FlowNet(3, net_config.flow_width, net_config.flow_depth)
    metrics = metrics or TrainMetrics(Path(out_dir) / "flow_metrics.jsonl" if out_dir else None)
    initial = evaluate_flows(fwd, bwd, data)
    opt = torch.optim.Adam(list(fwd.parameters()) + list(bwd.parameters()), lr=config.flow_lr, betas=(0.9, 0.999))
    step = 0
    for epoch in range(config.flow_epochs):
        fwd.train()
        bwd.train()
        for idx in _epoch_batches(len(data), config.batch_size, config.seed, 10_000 + epoch):
            b = data.batch(idx)
            pf, sf = flow_photometric(fwd, b["frontal_half"], b["frontal_pyr"], b["profile_pyr"])
            pb, sb = flow_photometric(bwd, b["profile"], b["profile_pyr"], b["frontal_pyr"])
            loss = pf + pb + config.smoothness_weight * (sf + sb)
            _check_finite(step, {"flow_loss": loss})
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            step += 1
            metrics.log(step, epoch=epoch, photometric=pf + pb, smoothness=sf + sb, flow_loss=loss)
    final = evaluate_flows(fwd, bwd, data)
    fwd.eval()
    bwd.eval()
    if out_dir is not None:
        save_checkpoint(
            Path(out_dir) / "flows.pt",
            {"forward_flow": fwd, "backward_flow": bwd},
            {"train": config.to_dict(), "nets": net_config.to_dict()},
            step,
            {"initial_photometric": initial, "final_photometric": final},
        )
    return FlowPretrainResult(fwd, bwd, metrics, initial, final, step)


# ---------------------------------------------------------------------------
# adversarial defrontalization training


@dataclass
class DefrontTrainer:
    """Alternating generator/discriminator optimisation of the defrontalization model."""

    model: DefrontModel
    discriminator: Discriminator
    perceptual_net: nn.Module
    identity_net: nn.Module
    config: DefrontTrainConfig
    net_config: NetConfig = field(default_factory=NetConfig)
    metrics: TrainMetrics = field(default_factory=TrainMetrics)
    step: int = 0
    epoch: int = 0

    def __post_init__(self):
        for net in (self.perceptual_net, self.identity_net):
            net.eval()
            for p in net.parameters():
                p.requires_grad_(False)
        g_params = list(self.model.generator.parameters())
        if self.config.joint_flows:
            g_params += list(self.model.forward_flow.parameters()) + list(self.model.backward_flow.parameters())
        else:
            for p in list(self.model.forward_flow.parameters()) + list(self.model.backward_flow.parameters()):
                p.requires_grad_(False)
        self.opt_g = torch.optim.Adam(g_params, lr=self.config.lr, betas=self.config.betas)
        self.opt_d = torch.optim.Adam(self.discriminator.parameters(), lr=self.config.lr, betas=self.config.betas)

    def generator_losses(self, b: Mapping) -> tuple[dict[str, Tensor], Tensor]:
        cfg = self.config
        out, _ = self.model(b["frontal_half"])
        synth = out.images[112]
        back = self.model.backward_flow(synth)
        warped_back = {s: warp(out.images[s], back[s]) for s in SCALES}
        _, gen_adv = adversarial_loss(torch.full((1,), 0.5), self.discriminator(synth), cfg.generator_mode)
        values = {
            "pixel": pixel_loss(out, b["profile_pyr"], cfg.reduction),
            "perceptual": perceptual_loss(self.perceptual_net, synth, b["profile"], cfg.weights.perceptual_layers, cfg.reduction),
            "adversarial": gen_adv,
            "illumination": illumination_preserving_loss(warped_back, b["frontal_pyr"], cfg.reduction),
            "identity": identity_preserving_loss(self.identity_net, synth, b["profile"], cfg.reduction),
            "mask": mask_loss(out.masks, b["masks"]),
        }
        return values, synth

    def train_step(self, b: Mapping) -> dict:
        self.model.generator.train()
        self.discriminator.train()
        values, synth = self.generator_losses(b)
        g_total = total_loss(self.config.weights, values)
        _check_finite(self.step, {**values, "total": g_total})
        self.opt_g.zero_grad(set_to_none=True)
        g_total.backward()
        self.opt_g.step()

        d_real = self.discriminator(b["profile"])
        d_fake = self.discriminator(synth.detach())
        d_loss, _ = adversarial_loss(d_real, d_fake)
        _check_finite(self.step, {"discriminator": d_loss})
        self.opt_d.zero_grad(set_to_none=True)
        d_loss.backward()
        self.opt_d.step()
        with torch.no_grad():
            d_acc = 0.5 * (float((d_real > 0.5).float().mean()) + float((d_fake < 0.5).float().mean()))
        self.step += 1
        row = {k: float(v.detach()) for k, v in values.items()}
        row.update(total=float(g_total.detach()), discriminator=float(d_loss.detach()), d_accuracy=d_acc)
        return row

    def train_epoch(self, data: PairTensors) -> list[dict]:
        rows = []
        t0 = time.perf_counter()
        for idx in _epoch_batches(len(data), self.config.batch_size, self.config.seed, self.epoch):
            row = self.train_step(data.batch(idx))
            rows.append(self.metrics.log(self.step, epoch=self.epoch, **row))
        log.info("defront epoch %d: %.1f images/s", self.epoch, len(data) / max(time.perf_counter() - t0, 1e-9))
        self.epoch += 1
        return rows

    @torch.no_grad()
    def evaluate(self, data: PairTensors, batch_size: int = 32) -> dict[str, float]:
        """Mean pixel loss over ``data`` in eval mode."""
        self.model.eval()
        total, n = 0.0, 0
        for idx in _epoch_batches(len(data), batch_size, 0, 0, shuffle=False):
            b = data.batch(idx)
            out, _ = self.model(b["frontal_half"])
            total += float(pixel_loss(out, b["profile_pyr"], self.config.reduction)) * len(idx)
            n += len(idx)
        return {"pixel": total / n}

    def state(self) -> dict:
        return {
            "modules": {"model": self.model, "discriminator": self.discriminator},
            "extra": {
                "epoch": self.epoch,
                "opt_g": self.opt_g.state_dict(),
                "opt_d": self.opt_d.state_dict(),
            },
        }

    def save(self, path) -> None:
        st = self.state()
        save_checkpoint(path, st["modules"], {"train": self.config.to_dict(), "nets": self.net_config.to_dict()}, self.step, st["extra"])

    def load(self, path) -> None:
        payload = load_checkpoint(path)
        restore({"model": self.model, "discriminator": self.discriminator}, payload)
        self.opt_g.load_state_dict(payload["extra"]["opt_g"])
        self.opt_d.load_state_dict(payload["extra"]["opt_d"])
        self.step = int(payload["step"])
        self.epoch = int(payload["extra"]["epoch"])


@dataclass
class DefrontResult:
    model: DefrontModel
    discriminator: Discriminator
    metrics: TrainMetrics
    initial_pixel: float
    final_pixel: float
    checkpoints: list[Path] = field(default_factory=list)


def make_feature_nets(net_config: NetConfig, seed: int = 0) -> tuple[nn.Module, nn.Module]:
    """Seeded random stand-ins for the perceptual and identity feature networks."""
    return SmallVGG(net_config.feature_width, seed=seed), SmallIdentityNet(net_config.feature_width, seed=seed + 1)


def train_defront(
    data: PairTensors,
    config: DefrontTrainConfig,
    flows: FlowPretrainResult | None = None,
    net_config: NetConfig | None = None,
    out_dir=None,
    perceptual_net: nn.Module | None = None,
    identity_net: nn.Module | None = None,
) -> DefrontResult:
    if len(data) == 0:
        raise DataEmpty("no training pairs")
    net_config = net_config or NetConfig()
    torch.manual_seed(config.seed)
    model = DefrontModel(net_config)
    if flows is not None:
        model.forward_flow.load_state_dict(flows.forward_flow.state_dict())
        model.backward_flow.load_state_dict(flows.backward_flow.state_dict())
    elif not config.joint_flows:
        log.warning("training without pretrained flows; flows stay at initialisation unless joint_flows is set")
    disc = Discriminator(net_config.discriminator_width)
    if perceptual_net is None or identity_net is None:
        p_default, i_default = make_feature_nets(net_config, config.seed)
        perceptual_net = perceptual_net or p_default
        identity_net = identity_net or i_default
    metrics = TrainMetrics(Path(out_dir) / "defront_metrics.jsonl" if out_dir else None)
    trainer = DefrontTrainer(model, disc, perceptual_net, identity_net, config, net_config, metrics)
    initial = trainer.evaluate(data)["pixel"]
    ckpts = []
    for _ in range(config.epochs):
        trainer.train_epoch(data)
        if out_dir is not None:
            path = Path(out_dir) / f"defront_epoch{trainer.epoch:03d}.pt"
            trainer.save(path)
            ckpts.append(path)
    final = trainer.evaluate(data)["pixel"]
    model.eval()
    if out_dir is not None:
        save_checkpoint(
            Path(out_dir) / "defront.pt",
            {"model": model},
            {"train": config.to_dict(), "nets": net_config.to_dict()},
            trainer.step,
            {"initial_pixel": initial, "final_pixel": final},
        )
    return DefrontResult(model, disc, metrics, initial, final, ckpts)


def load_defront_model(path) -> DefrontModel:
    payload = load_checkpoint(path)
    cfg = NetConfig(**payload["config"].get("nets", {}))
    model = DefrontModel(cfg)
    weights = payload["weights"]
    key = "model" if "model" in weights else next(iter(weights))
    model.load_state_dict(weights[key])
    return model.eval()


# ---------------------------------------------------------------------------
# embedding training


@dataclass
class FaceTensors:
    """Frontally aligned training faces with labels and cached alignment errors."""

    faces: list[AlignedFace]
    labels: np.ndarray
    errors: np.ndarray
    paths: list[Path]
    classes: list[str]

    def __len__(self):
        return len(self.faces)


def build_face_tensors(records: Sequence[FaceRecord], error_cache: Mapping[str, float] | None = None) -> FaceTensors:
    if not records:
        raise DataEmpty("no training faces")
    classes = sorted({r.identity_id for r in records})
    index = {c: i for i, c in enumerate(classes)}
    faces, labels, errors = [], [], []
    for r in records:
        face = align_frontal(read_image(r.path), r.landmarks)
        faces.append(face)
        labels.append(index[r.identity_id])
        if r.alignment_error is not None:
            errors.append(r.alignment_error)
        elif error_cache is not None and error_key(r.path) in error_cache:
            errors.append(error_cache[error_key(r.path)])
        else:
            errors.append(alignment_error(r.landmarks))
    return FaceTensors(faces, np.asarray(labels), np.asarray(errors, dtype=np.float64), [Path(r.path) for r in records], classes)


def accumulate_gradients(params: Sequence[Tensor], loss_fn: Callable[[object], Tensor], micro_batches: Iterable, accumulation_steps: int) -> float:
    """Backpropagate ``loss_fn(mb) / accumulation_steps`` for each micro-batch.

    With mean-reduced per-batch losses and equal micro-batch sizes the
    accumulated gradient equals that of one large batch.  Returns the sum of
    the scaled losses.
    """
    del params  # gradients accumulate in-place on the parameters' .grad
    total = 0.0
    for mb in micro_batches:
        loss = loss_fn(mb) / accumulation_steps
        loss.backward()
        total += float(loss.detach())
    return total


@dataclass
class EmbedResult:
    backbone: ResNetBackbone
    head: MarginHead
    metrics: TrainMetrics
    augmented_fractions: list[float]
    lr_trace: list[float]
    optimizer_steps: int


def _faces_to_batch(images: list[np.ndarray]) -> Tensor:
    return torch.stack([_chw(im) for im in images])


def train_embeddings(
    data: FaceTensors,
    config: EmbedTrainConfig,
    defront_model: DefrontModel | None,
    net_config: NetConfig | None = None,
    out_dir=None,
    exclude_paths: Iterable = (),
    backbone: ResNetBackbone | None = None,
) -> EmbedResult:
    """Margin-softmax training with SGD, polynomial decay and gradient accumulation.

    Each sample visit asks the augmentation policy whether to replace the
    aligned face by a defrontalized profile; the decision for visit ``k`` of
    record ``i`` uses draw index ``k * len(data) + i`` of the policy stream.
    """
    policy = config.policy
    if not policy.calibrated:
        raise PolicyUncalibrated("calibrate the augmentation policy before training")
    overlap = {str(Path(p)) for p in exclude_paths} & {str(p) for p in data.paths}
    if overlap:
        raise ValueError(f"{len(overlap)} training images also appear in evaluation lists, e.g. {sorted(overlap)[0]}")
    if defront_model is not None:
        defront_model.eval()
        for p in defront_model.parameters():
            p.requires_grad_(False)
    net_config = net_config or NetConfig()
    torch.manual_seed(config.seed)
    backbone = backbone or ResNetBackbone.from_config(net_config)
    head = MarginHead(backbone.embedding_dim, MarginConfig(config.margin_scale, config.margin, len(data.classes)))
    params = list(backbone.parameters()) + list(head.parameters())
    opt = torch.optim.SGD(params, lr=config.lr0, momentum=config.momentum, weight_decay=config.weight_decay)
    metrics = TrainMetrics(Path(out_dir) / "embed_metrics.jsonl" if out_dir else None)
    stream = RandomStream(policy.rng_seed, 0)

    n = len(data)
    micro_per_epoch = math.ceil(n / config.batch_size)
    opt_steps_per_epoch = math.ceil(micro_per_epoch / config.accumulation_steps)
    total_opt_steps = opt_steps_per_epoch * config.epochs
    opt_step = 0
    lr_trace: list[float] = []
    fractions: list[float] = []
    micro_step = 0

    def load_batch(idx: np.ndarray, epoch: int) -> tuple[Tensor, Tensor, int]:
        images, todo = [], []
        for j, i in enumerate(idx):
            d = decide(float(data.errors[i]), policy, stream, epoch * n + int(i))
            images.append(np.asarray(data.faces[i].image, dtype=np.float32))
            if d.apply:
                todo.append((j, i, d.side))
        if todo and defront_model is None:
            raise PolicyUncalibrated("policy selects samples for defrontalization but no model was given")
        if todo:
            halves = []
            for _, i, side in todo:
                halves.append(_chw(bisect_horizontal(data.faces[i], side).image))
            with torch.no_grad():
                synth, _ = defront_model.synthesize(torch.stack(halves))
            synth = synth.clamp(0, 1).permute(0, 2, 3, 1).numpy()
            for (j, _, side), img in zip(todo, synth):
                images[j] = img[:, ::-1].copy() if side == "right" else img
        labels = torch.as_tensor(data.labels[idx], dtype=torch.long)
        return _faces_to_batch(images), labels, len(todo)

    for epoch in range(config.epochs):
        backbone.train()
        head.train()
        batches = _epoch_batches(n, config.batch_size, config.seed, 20_000 + epoch)
        n_aug = 0
        groups = [batches[k : k + config.accumulation_steps] for k in range(0, len(batches), config.accumulation_steps)]
        for group in groups:
            t0 = time.perf_counter()
            loaded = []
            for idx in group:
                x, y, k = load_batch(idx, epoch)
                n_aug += k
                loaded.append((x, y))
            lr = poly_lr(config.lr0, opt_step, total_opt_steps, config.power)
            for g in opt.param_groups:
                g["lr"] = lr
            opt.zero_grad(set_to_none=True)

            def loss_fn(batch):
                x, y = batch
                return head(backbone(x * 2 - 1), y)

            loss = accumulate_gradients(params, loss_fn, loaded, len(group))
            if not math.isfinite(loss):
                raise NonFiniteLoss(f"non-finite margin loss at optimizer step {opt_step}", opt_step, {"margin": loss})
            opt.step()
            lr_trace.append(lr)
            opt_step += 1
            micro_step += len(group)
            images = sum(len(b[1]) for b in loaded)
            metrics.log(opt_step, epoch=epoch, margin_loss=loss, lr=lr)
            log.debug("embed step %d: %.1f images/s", opt_step, images / max(time.perf_counter() - t0, 1e-9))
        frac = n_aug / n
        fractions.append(frac)
        log.info("epoch %d: defrontalized fraction %.4f", epoch, frac)
        metrics.rows[-1]["augmented_fraction"] = frac
    backbone.eval()
    if out_dir is not None:
        save_checkpoint(
            Path(out_dir) / "backbone.pt",
            {"backbone": backbone, "head": head},
            {"train": config.to_dict(), "nets": net_config.to_dict(), "classes": data.classes},
            opt_step,
            {"augmented_fractions": fractions},
        )
    return EmbedResult(backbone, head, metrics, fractions, lr_trace, opt_step)


def load_backbone(path) -> ResNetBackbone:
    payload = load_checkpoint(path)
    cfg = NetConfig(**payload["config"].get("nets", {}))
    bb = ResNetBackbone.from_config(cfg)
    if "backbone" not in payload["weights"]:
        raise CheckpointIOFailure(f"{path} holds no backbone weights")
    bb.load_state_dict(payload["weights"]["backbone"])
    return bb.eval()


__all__ = [
    "ALIGNED_SIZE",
    "COMPONENTS",
    "DefrontResult",
    "DefrontTrainConfig",
    "DefrontTrainer",
    "EmbedResult",
    "EmbedTrainConfig",
    "FaceSide",
    "FaceTensors",
    "FlowPretrainResult",
    "PairTensors",
    "TrainMetrics",
    "accumulate_gradients",
    "align_pair",
    "build_face_tensors",
    "build_pair_tensors",
    "evaluate_flows",
    "face_mask",
    "load_backbone",
    "load_defront_model",
    "poly_lr",
    "pretrain_flows",
    "profile_side",
    "smoothness",
    "train_defront",
    "train_embeddings",
]
