"""Networks for the flow-warping defrontalization model and the embedding backbone.

Tensor conventions: images are ``(N, C, H, W)`` in ``[-1, 1]`` inside the
networks; flow fields are ``(N, 2, H, W)`` pixel displacements where channel
0 is the x (column) offset and channel 1 the y (row) offset.
"""

from __future__ import annotations

import io
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import CheckpointIOFailure, ShapeMismatch, UnknownTap

SCALES = (28, 56, 112)
PERCEPTUAL_TAPS = ("conv1_1", "conv2_1", "conv3_1", "conv4_1", "conv5_1")
IDENTITY_TAPS = ("fc2", "pool")
CHECKPOINT_VERSION = 1


@dataclass
class NetConfig:
    flow_width: int = 8
    flow_depth: int = 4
    flow_param_budget: int = 7_000_000
    enforce_flow_budget: bool = False
    generator_width: int = 8
    discriminator_width: int = 16
    attention: bool = False
    backbone_block: str = "basic"
    backbone_layers: tuple[int, ...] = (1, 1, 1, 1)
    backbone_width: int = 16
    backbone_depth: int = 10
    embedding_dim: int = 128
    feature_width: int = 8

    def __post_init__(self):
        self.backbone_layers = tuple(int(v) for v in self.backbone_layers)
        for name in ("flow_width", "flow_depth", "generator_width", "discriminator_width", "backbone_width", "embedding_dim", "feature_width"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.backbone_block not in ("basic", "bottleneck"):
            raise ValueError("backbone_block must be 'basic' or 'bottleneck'")

    @classmethod
    def desk(cls) -> "NetConfig":
        return cls()

    @classmethod
    def full(cls) -> "NetConfig":
        """Full-scale preset: ~7M-parameter flow nets, 50-layer bottleneck backbone."""
        return cls(
            flow_width=38,
            flow_depth=4,
            enforce_flow_budget=True,
            generator_width=64,
            discriminator_width=64,
            attention=True,
            backbone_block="bottleneck",
            backbone_layers=(3, 4, 6, 3),
            backbone_width=64,
            backbone_depth=50,
            embedding_dim=512,
            feature_width=64,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone_layers"] = list(self.backbone_layers)
        return d


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


# ---------------------------------------------------------------------------
# warping


def _base_grid(h: int, w: int, like: Tensor) -> tuple[Tensor, Tensor]:
    ys = torch.arange(h, dtype=like.dtype, device=like.device).view(1, h, 1).expand(1, h, w)
    xs = torch.arange(w, dtype=like.dtype, device=like.device).view(1, 1, w).expand(1, h, w)
    return xs, ys


def warp(x: Tensor, flow: Tensor) -> Tensor:
    """Bilinearly sample ``x`` at ``(col + flow_x, row + flow_y)`` with edge clamping.

    Differentiable with respect to both ``x`` and ``flow``; a zero flow
    returns ``x`` exactly.
    """
    if x.dim() != 4 or flow.dim() != 4 or flow.shape[1] != 2:
        raise ShapeMismatch(f"expected (N,C,H,W) and (N,2,H,W), got {tuple(x.shape)} and {tuple(flow.shape)}")
    n, c, h, w = x.shape
    if flow.shape[0] != n or flow.shape[2:] != (h, w):
        raise ShapeMismatch(f"flow {tuple(flow.shape)} does not match tensor {tuple(x.shape)}")
    flow = flow.to(x.dtype)
    xs, ys = _base_grid(h, w, x)
    sx = (xs + flow[:, 0]).clamp(0, w - 1)
    sy = (ys + flow[:, 1]).clamp(0, h - 1)
    x0 = sx.detach().floor().clamp(max=max(w - 2, 0))
    y0 = sy.detach().floor().clamp(max=max(h - 2, 0))
    wx = sx - x0
    wy = sy - y0
    x0l, y0l = x0.long(), y0.long()
    x1l = (x0l + 1).clamp(max=w - 1)
    y1l = (y0l + 1).clamp(max=h - 1)

    flat = x.reshape(n, c, h * w)

    def gather(yi, xi):
        idx = (yi * w + xi).view(n, 1, h * w).expand(n, c, h * w)
        return flat.gather(2, idx).view(n, c, h, w)

    wx, wy = wx.unsqueeze(1), wy.unsqueeze(1)
    top = gather(y0l, x0l) * (1 - wx) + gather(y0l, x1l) * wx
    bottom = gather(y1l, x0l) * (1 - wx) + gather(y1l, x1l) * wx
    return top * (1 - wy) + bottom * wy


def resize_to(x: Tensor, size: int) -> Tensor:
    if x.shape[-1] == size and x.shape[-2] == size:
        return x
    return F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False, antialias=True)


def image_pyramid(x: Tensor, scales: Sequence[int] = SCALES) -> dict[int, Tensor]:
    return {s: resize_to(x, s) for s in scales}


def _check_input(x: Tensor, channels: int | None = None, size: int = 112) -> None:
    if x.dim() != 4 or x.shape[-2:] != (size, size):
        raise ShapeMismatch(f"expected (N,C,{size},{size}) input, got {tuple(x.shape)}")
    if channels is not None and x.shape[1] != channels:
        raise ShapeMismatch(f"expected {channels} channels, got {x.shape[1]}")


# ---------------------------------------------------------------------------
# building blocks


def _conv(cin: int, cout: int, k: int = 3, stride: int = 1) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, k, stride, k // 2)


class ConvAct(nn.Sequential):
    def __init__(self, cin, cout, k=3, stride=1, norm=True):
        layers = [_conv(cin, cout, k, stride)]
        if norm:
            layers.append(nn.InstanceNorm2d(cout, affine=True))
        layers.append(nn.LeakyReLU(0.2))
        super().__init__(*layers)


class SelfAttention(nn.Module):
    """SAGAN-style spatial self-attention with a learned residual gate."""

    def __init__(self, channels: int):
        super().__init__()
        inner = max(1, channels // 8)
        self.query = nn.Conv2d(channels, inner, 1)
        self.key = nn.Conv2d(channels, inner, 1)
        self.value = nn.Conv2d(channels, channels, 1)
        self.gamma = nn.Parameter(torch.full((1,), 0.1))

    def forward(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        q = self.query(x).flatten(2).transpose(1, 2)
        k = self.key(x).flatten(2)
        attn = torch.softmax(q @ k, dim=-1)
        v = self.value(x).flatten(2)
        out = (v @ attn.transpose(1, 2)).view(n, c, h, w)
        return x + self.gamma * out


# ---------------------------------------------------------------------------
# flow networks


class FlowNet(nn.Module):
    """U-Net predicting displacement fields at 28, 56 and 112 pixels.

    ``depth`` is the number of stride-2 encoder stages.  The 112-pixel input
    supports four; a fifth stage (as used for 128-pixel inputs) can be built
    with ``depth=5`` for parameter comparisons.
    """

    def __init__(self, in_channels: int = 3, width: int = 8, depth: int = 4, max_mult: int = 8):
        super().__init__()
        self.depth = depth
        chans = [width * min(2**i, max_mult) for i in range(depth + 1)]
        self.stem = nn.Sequential(ConvAct(in_channels, chans[0], norm=False), ConvAct(chans[0], chans[0]))
        self.down = nn.ModuleList(
            nn.Sequential(ConvAct(chans[i], chans[i + 1], stride=2), ConvAct(chans[i + 1], chans[i + 1]))
            for i in range(depth)
        )
        self.up = nn.ModuleList(
            nn.Sequential(ConvAct(chans[i + 1] + chans[i], chans[i]), ConvAct(chans[i], chans[i]))
            for i in reversed(range(depth))
        )
        # decoder outputs at levels 2, 1, 0 are 28, 56, 112 pixels
        self.heads = nn.ModuleDict({str(s): _conv(chans[lvl], 2) for s, lvl in zip(SCALES, (2, 1, 0))})
        for head in self.heads.values():
            nn.init.zeros_(head.weight)
            nn.init.zeros_(head.bias)
        self._levels = {2: 28, 1: 56, 0: 112}

    def forward(self, x: Tensor) -> dict[int, Tensor]:
        _check_input(x)
        skips = [self.stem(x)]
        for stage in self.down:
            skips.append(stage(skips[-1]))
        h = skips[-1]
        flows = {}
        for j, stage in enumerate(self.up):
            lvl = self.depth - 1 - j
            skip = skips[lvl]
            h = F.interpolate(h, size=skip.shape[-2:], mode="bilinear", align_corners=False)
            h = stage(torch.cat([h, skip], dim=1))
            if lvl in self._levels:
                s = self._levels[lvl]
                flows[s] = self.heads[str(s)](h)
        return flows


def flow_forward(net: FlowNet, frontal_half: Tensor) -> dict[int, Tensor]:
    return net(frontal_half)


# ---------------------------------------------------------------------------
# generator / discriminator


@dataclass
class MultiScaleOutput:
    images: dict[int, Tensor]
    masks: dict[int, Tensor] = field(default_factory=dict)

    def __post_init__(self):
        if set(self.images) != set(SCALES):
            raise ShapeMismatch(f"images must cover scales {SCALES}, got {sorted(self.images)}")
        if self.masks and set(self.masks) != set(SCALES):
            raise ShapeMismatch(f"masks must cover scales {SCALES}, got {sorted(self.masks)}")
        for s, t in list(self.images.items()) + list(self.masks.items()):
            if t.shape[-2:] != (s, s):
                raise ShapeMismatch(f"scale {s} tensor has shape {tuple(t.shape)}")


class Generator(nn.Module):
    """Encoder-decoder whose skip features are warped by the forward flow.

    Each decoder stage (28, 56, 112) carries an image head (tanh) and a
    one-channel mask head (sigmoid).
    """

    def __init__(self, width: int = 16, attention: bool = False, in_channels: int = 3, out_channels: int = 3):
        super().__init__()
        w = width
        self.enc0 = nn.Sequential(ConvAct(in_channels, w, norm=False), ConvAct(w, w))  # 112
        self.enc1 = ConvAct(w, 2 * w, stride=2)  # 56
        self.enc2 = ConvAct(2 * w, 4 * w, stride=2)  # 28
        self.enc3 = nn.Sequential(ConvAct(4 * w, 8 * w, stride=2), ConvAct(8 * w, 8 * w))  # 14
        self.attention = SelfAttention(8 * w) if attention else nn.Identity()
        skip_extra = in_channels  # warped input image joins every skip
        self.dec2 = nn.Sequential(ConvAct(8 * w + 4 * w + skip_extra, 4 * w), ConvAct(4 * w, 4 * w))
        self.dec1 = nn.Sequential(ConvAct(4 * w + 2 * w + skip_extra + out_channels, 2 * w), ConvAct(2 * w, 2 * w))
        self.dec0 = nn.Sequential(ConvAct(2 * w + w + skip_extra + out_channels, w), ConvAct(w, w))
        self.img_heads = nn.ModuleDict({"28": _conv(4 * w, out_channels), "56": _conv(2 * w, out_channels), "112": _conv(w, out_channels)})
        self.mask_heads = nn.ModuleDict({"28": _conv(4 * w, 1), "56": _conv(2 * w, 1), "112": _conv(w, 1)})

    def forward(self, frontal_half: Tensor, flows: Mapping[int, Tensor]) -> MultiScaleOutput:
        _check_input(frontal_half)
        for s in SCALES:
            if s not in flows:
                raise ShapeMismatch(f"missing flow at scale {s}")
        e0 = self.enc0(frontal_half)
        e1 = self.enc1(e0)
        e2 = self.enc2(e1)
        e3 = self.attention(self.enc3(e2))
        inputs = image_pyramid(frontal_half)
        images, masks = {}, {}
        h = e3
        prev = None
        for s, feat, dec in ((28, e2, self.dec2), (56, e1, self.dec1), (112, e0, self.dec0)):
            h = F.interpolate(h, size=(s, s), mode="bilinear", align_corners=False)
            parts = [h, warp(feat, flows[s]), warp(inputs[s], flows[s])]
            if prev is not None:
                parts.append(F.interpolate(prev, size=(s, s), mode="bilinear", align_corners=False))
            h = dec(torch.cat(parts, dim=1))
            images[s] = torch.tanh(self.img_heads[str(s)](h))
            masks[s] = torch.sigmoid(self.mask_heads[str(s)](h))
            prev = images[s]
        return MultiScaleOutput(images, masks)


def generator_forward(generator: Generator, frontal_half: Tensor, flows: Mapping[int, Tensor]) -> MultiScaleOutput:
    return generator(frontal_half, flows)


class Discriminator(nn.Module):
    """Patch discriminator returning a map of real-probabilities."""

    def __init__(self, width: int = 16, in_channels: int = 3, n_layers: int = 3):
        super().__init__()
        layers: list[nn.Module] = [_conv(in_channels, width, 4, 2), nn.LeakyReLU(0.2)]
        c = width
        for _ in range(n_layers - 1):
            layers.append(ConvAct(c, 2 * c, k=4, stride=2))
            c *= 2
        layers.append(ConvAct(c, c, k=3))
        layers.append(_conv(c, 1, 3))
        self.net = nn.Sequential(*layers)

    def logits(self, image: Tensor) -> Tensor:
        _check_input(image)
        return self.net(image)

    def forward(self, image: Tensor) -> Tensor:
        return torch.sigmoid(self.logits(image))


def discriminator_forward(disc: Discriminator, image: Tensor) -> Tensor:
    return disc(image)


class DefrontModel(nn.Module):
    """Forward flow + backward flow + generator, taking [0, 1] bisected frontal faces."""

    def __init__(self, cfg: NetConfig | None = None):
        super().__init__()
        cfg = cfg or NetConfig()
        self.cfg = cfg
        self.forward_flow = FlowNet(3, cfg.flow_width, cfg.flow_depth)
        self.backward_flow = FlowNet(3, cfg.flow_width, cfg.flow_depth)
        self.generator = Generator(cfg.generator_width, cfg.attention)
        if cfg.enforce_flow_budget:
            check_flow_budget(self.forward_flow, cfg.flow_param_budget)

    def forward(self, frontal_half: Tensor) -> tuple[MultiScaleOutput, dict[int, Tensor]]:
        """``frontal_half`` in [-1, 1]; returns the multi-scale synthesis and the flows used."""
        flows = self.forward_flow(frontal_half)
        return self.generator(frontal_half, flows), flows

    @torch.no_grad()
    def synthesize(self, frontal_half01: Tensor) -> tuple[Tensor, Tensor]:
        """[0, 1] in, ([0, 1] 112-pixel profile, 112-pixel mask) out."""
        out, _ = self(frontal_half01 * 2 - 1)
        return (out.images[112] + 1) / 2, out.masks[112]


def check_flow_budget(net: nn.Module, budget: int, tolerance: float = 0.2) -> int:
    n = count_parameters(net)
    if abs(n - budget) > tolerance * budget:
        raise ValueError(f"flow network has {n} parameters, outside ±{tolerance:.0%} of {budget}")
    return n


# ---------------------------------------------------------------------------
# embedding backbone


class BasicBlock(nn.Module):
    expansion = 1

    def __init__(self, cin, planes, stride=1):
        super().__init__()
        cout = planes * self.expansion
        self.body = nn.Sequential(
            nn.BatchNorm2d(cin),
            nn.Conv2d(cin, planes, 3, 1, 1, bias=False),
            nn.BatchNorm2d(planes),
            nn.PReLU(planes),
            nn.Conv2d(planes, cout, 3, stride, 1, bias=False),
            nn.BatchNorm2d(cout),
        )
        self.short = (
            nn.Identity() if stride == 1 and cin == cout else nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))
        )

    def forward(self, x):
        return self.body(x) + self.short(x)


class Bottleneck(nn.Module):
    expansion = 4

    def __init__(self, cin, planes, stride=1):
        super().__init__()
        cout = planes * self.expansion
        self.body = nn.Sequential(
            nn.Conv2d(cin, planes, 1, bias=False),
            nn.BatchNorm2d(planes),
            nn.ReLU(inplace=True),
            nn.Conv2d(planes, planes, 3, stride, 1, bias=False),
            nn.BatchNorm2d(planes),
            nn.ReLU(inplace=True),
            nn.Conv2d(planes, cout, 1, bias=False),
            nn.BatchNorm2d(cout),
        )
        self.short = (
            nn.Identity() if stride == 1 and cin == cout else nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))
        )
        self.act = nn.ReLU(inplace=True)

    def forward(self, x):
        return self.act(self.body(x) + self.short(x))


class ResNetBackbone(nn.Module):
    """Residual embedding network for 112x112 faces.

    ``forward`` returns raw features; use :func:`extract_embedding` for
    unit-norm embeddings.
    """

    def __init__(self, layers=(1, 1, 1, 1), width=16, embedding_dim=128, block="basic", stem_stride=2):
        super().__init__()
        block_cls = BasicBlock if block == "basic" else Bottleneck
        self.stem = nn.Sequential(nn.Conv2d(3, width, 3, stem_stride, 1, bias=False), nn.BatchNorm2d(width), nn.PReLU(width))
        stages = []
        cin = width
        for i, n in enumerate(layers):
            planes = width * 2**i
            for j in range(n):
                stages.append(block_cls(cin, planes, 2 if j == 0 else 1))
                cin = planes * block_cls.expansion
        self.stages = nn.Sequential(*stages)
        side = 112 // stem_stride
        for _ in layers:
            side = (side + 1) // 2
        self.bn = nn.BatchNorm2d(cin)
        self.fc = nn.Linear(cin * side * side, embedding_dim)
        self.features = nn.BatchNorm1d(embedding_dim)
        self.embedding_dim = embedding_dim

    @classmethod
    def from_config(cls, cfg: NetConfig) -> "ResNetBackbone":
        return cls(cfg.backbone_layers, cfg.backbone_width, cfg.embedding_dim, cfg.backbone_block, 2 if cfg.backbone_block == "basic" else 1)

    def forward(self, x: Tensor) -> Tensor:
        _check_input(x, 3)
        h = self.bn(self.stages(self.stem(x)))
        return self.features(self.fc(torch.flatten(h, 1)))


def extract_embedding(backbone: nn.Module, aligned: Tensor) -> Tensor:
    """Unit-norm embeddings for [0, 1] aligned faces ``(N, 3, 112, 112)``."""
    if aligned.dim() == 3:
        aligned = aligned.unsqueeze(0)
    _check_input(aligned, 3)
    feats = backbone(aligned * 2 - 1)
    return F.normalize(feats, dim=1, eps=1e-12)


def freeze_batchnorm(module: nn.Module) -> nn.Module:
    """Put every batch-norm layer in eval mode (running statistics frozen)."""
    for m in module.modules():
        if isinstance(m, nn.modules.batchnorm._BatchNorm):
            m.eval()
    return module


# ---------------------------------------------------------------------------
# pluggable feature networks


class TapNet(nn.Module):
    """A network whose forward returns a dict of named intermediate activations."""

    tap_names: tuple[str, ...] = ()

    def taps(self, x: Tensor, names: Sequence[str] | None = None) -> dict[str, Tensor]:
        out = self(x)
        if names is None:
            return out
        missing = [n for n in names if n not in out]
        if missing:
            raise UnknownTap(f"feature net has no taps {missing}; available {sorted(out)}")
        return {n: out[n] for n in names}


class SmallVGG(TapNet):
    """VGG-shaped network exposing the first conv of each of five blocks."""

    tap_names = PERCEPTUAL_TAPS

    def __init__(self, width: int = 8, seed: int | None = 0):
        super().__init__()
        gen_state = torch.random.get_rng_state()
        if seed is not None:
            torch.manual_seed(seed)
        chans = [width, 2 * width, 4 * width, 8 * width, 8 * width]
        self.blocks = nn.ModuleList()
        cin = 3
        for c in chans:
            self.blocks.append(nn.ModuleDict({"first": nn.Conv2d(cin, c, 3, 1, 1), "rest": nn.Conv2d(c, c, 3, 1, 1)}))
            cin = c
        if seed is not None:
            torch.random.set_rng_state(gen_state)

    def forward(self, x: Tensor) -> dict[str, Tensor]:
        out = {}
        h = x
        for i, (name, blk) in enumerate(zip(self.tap_names, self.blocks)):
            if i:
                h = F.max_pool2d(h, 2)
            h = F.relu(blk["first"](h))
            out[name] = h
            h = F.relu(blk["rest"](h))
        return out


class SmallIdentityNet(TapNet):
    """Light CNN-shaped identity network exposing ``pool`` and ``fc2``."""

    tap_names = IDENTITY_TAPS

    def __init__(self, width: int = 8, out_dim: int = 64, seed: int | None = 0):
        super().__init__()
        gen_state = torch.random.get_rng_state()
        if seed is not None:
            torch.manual_seed(seed)
        self.convs = nn.Sequential(
            nn.Conv2d(3, width, 5, 2, 2), nn.LeakyReLU(0.2),
            nn.Conv2d(width, 2 * width, 3, 2, 1), nn.LeakyReLU(0.2),
            nn.Conv2d(2 * width, 4 * width, 3, 2, 1), nn.LeakyReLU(0.2),
        )
        self.fc2 = nn.Linear(4 * width * 7 * 7, out_dim)
        if seed is not None:
            torch.random.set_rng_state(gen_state)

    def forward(self, x: Tensor) -> dict[str, Tensor]:
        h = self.convs(x)
        pool = F.adaptive_max_pool2d(h, 7)
        return {"pool": pool, "fc2": self.fc2(torch.flatten(pool, 1))}


class HookTapNet(TapNet):
    """Adapter exposing named submodule outputs of any module as taps.

    ``layers`` maps tap name to a dotted submodule path, e.g. the VGG-19
    preset maps ``conv1_1`` to ``features.1``.  Used to plug in externally
    trained perceptual or identity networks.
    """

    def __init__(self, module: nn.Module, layers: Mapping[str, str]):
        super().__init__()
        self.module = module
        self.layers = dict(layers)
        self.tap_names = tuple(self.layers)
        named = dict(module.named_modules())
        for tap, path in self.layers.items():
            if path not in named:
                raise UnknownTap(f"module has no submodule {path!r} for tap {tap!r}")

    def forward(self, x: Tensor) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        named = dict(self.module.named_modules())
        handles = []
        for tap, path in self.layers.items():
            def hook(_m, _inp, res, tap=tap):
                out[tap] = res
            handles.append(named[path].register_forward_hook(hook))
        try:
            self.module(x)
        finally:
            for h in handles:
                h.remove()
        return out


VGG19_TAP_LAYERS = {"conv1_1": "features.1", "conv2_1": "features.6", "conv3_1": "features.11", "conv4_1": "features.20", "conv5_1": "features.29"}


def vgg19_taps(weights=None) -> HookTapNet:
    """torchvision VGG-19 with the five perceptual taps (post-ReLU).

    ``weights`` is passed through to torchvision; published ImageNet weights
    need a download, so tests use the small random networks instead.
    """
    from torchvision.models import vgg19

    return HookTapNet(vgg19(weights=weights).eval(), VGG19_TAP_LAYERS)


def feature_net_taps(feature_net: TapNet, image: Tensor, names: Sequence[str] | None = None) -> dict[str, Tensor]:
    if not isinstance(feature_net, TapNet):
        raise UnknownTap("feature network does not expose named taps")
    return feature_net.taps(image, names)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, modules: Mapping[str, nn.Module], config: Mapping | None = None, step: int = 0, extra: Mapping | None = None) -> None:
    """Single-file archive: version, config echo, named weight tensors, step counter."""
    payload = {
        "version": CHECKPOINT_VERSION,
        "config": dict(config or {}),
        "step": int(step),
        "weights": {name: {k: v.detach().cpu().clone() for k, v in m.state_dict().items()} for name, m in modules.items()},
        "extra": dict(extra or {}),
    }
    write_checkpoint(path, payload)


def write_checkpoint(path, payload: Mapping) -> None:
    buf = io.BytesIO()
    torch.save(dict(payload), buf)
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_bytes(buf.getvalue())
    except OSError as exc:
        raise CheckpointIOFailure(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path) -> dict:
    try:
        payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise CheckpointIOFailure(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or "version" not in payload:
        raise CheckpointIOFailure(f"{path} is not a checkpoint (no version field)")
    if payload["version"] != CHECKPOINT_VERSION:
        raise CheckpointIOFailure(f"unsupported checkpoint version {payload['version']}")
    return payload


def restore(modules: Mapping[str, nn.Module], payload: Mapping) -> None:
    weights = payload["weights"]
    for name, m in modules.items():
        if name not in weights:
            raise CheckpointIOFailure(f"checkpoint has no weights for {name!r}")
        m.load_state_dict(weights[name])
