"""Symmetrical FCN: weight-shared sibling encoders, per-branch BN, fusing branch."""
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .reflection import ReciprocalPair

BRANCHES = ("origin", "reflect")
FUSION_MODES = ("hierarchical", "concat")


@dataclass
class SFCNConfig:
    levels: int = 3
    convs_per_level: Tuple[int, ...] = (1, 1, 1)
    channels_per_level: Tuple[int, ...] = (8, 16, 32)
    input_size: Tuple[int, int] = (64, 64)
    in_channels: int = 3
    bn_epsilon: float = 1e-5
    bn_momentum: float = 0.1
    share_bn_affine: bool = False
    # "concat" is the ablation without hierarchical fusion
    fusion: str = "hierarchical"
    head_kernel: int = 3
    output_classes: int = field(default=2, init=False)

    def __post_init__(self):
        self.convs_per_level = tuple(int(c) for c in self.convs_per_level)
        self.channels_per_level = tuple(int(c) for c in self.channels_per_level)
        self.input_size = tuple(int(s) for s in self.input_size)
        self.validate()

    def validate(self):
        if self.levels < 2:
            raise ValueError(f"levels must be >= 2, got {self.levels}")
        if len(self.channels_per_level) != self.levels:
            raise ValueError("channels_per_level must have one entry per level")
        if len(self.convs_per_level) != self.levels:
            raise ValueError("convs_per_level must have one entry per level")
        if min(self.channels_per_level) <= 0 or min(self.convs_per_level) <= 0:
            raise ValueError("channel and conv counts must be positive")
        if len(self.input_size) != 2:
            raise ValueError("input_size must be (H, W)")
        factor = 2 ** (self.levels - 1)
        h, w = self.input_size
        if h <= 0 or w <= 0 or h % factor or w % factor:
            raise ValueError(f"input size {self.input_size} must be divisible by {factor}")
        if not 0.0 < self.bn_momentum < 1.0:
            raise ValueError("bn_momentum must lie in (0, 1)")
        if self.bn_epsilon <= 0:
            raise ValueError("bn_epsilon must be positive")
        if self.fusion not in FUSION_MODES:
            raise ValueError(f"fusion must be one of {FUSION_MODES}")
        if self.head_kernel % 2 != 1:
            raise ValueError("head_kernel must be odd")

    @classmethod
    def full_scale(cls, input_size=(384, 384)) -> "SFCNConfig":
        """VGG-16 shaped siblings: 13 convs, 4 pools."""
        return cls(levels=5, convs_per_level=(2, 2, 3, 3, 3),
                   channels_per_level=(64, 128, 256, 512, 512), input_size=input_size)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("output_classes")
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


@dataclass
class SaliencyMap:
    probabilities: torch.Tensor  # N x H x W, foreground probability
    logits: torch.Tensor  # N x 2 x H x W


class FusionStage(nn.Module):
    """1x1 conv on the concatenated features, optionally followed by a x``scale`` deconv."""

    def __init__(self, in_channels, out_channels, scale=None):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, kernel_size=1)
        if scale:
            self.up = nn.ConvTranspose2d(out_channels, out_channels, kernel_size=2 * scale,
                                         stride=scale, padding=scale // 2)
        else:
            self.up = None

    def forward(self, x):
        return self.conv(x)


class SFCN(nn.Module):
    """Two sibling encoders sharing conv weights, each with its own BN state.

    Parameter names follow ``branch.conv.<i>``, ``bn.<origin|reflect>.<i>``,
    ``fusion.<level-1>`` and ``head``.
    """

    def __init__(self, config: SFCNConfig):
        super().__init__()
        self.config = config
        chans = config.channels_per_level

        convs, self.level_of_layer = [], []
        prev = config.in_channels
        for level, (n_convs, c) in enumerate(zip(config.convs_per_level, chans)):
            for _ in range(n_convs):
                convs.append(nn.Conv2d(prev, c, kernel_size=3, padding=1, bias=False))
                self.level_of_layer.append(level)
                prev = c
        self.branch = nn.Module()
        self.branch.conv = nn.ModuleList(convs)

        def bn_set():
            return nn.ModuleList(
                nn.BatchNorm2d(conv.out_channels, eps=config.bn_epsilon, momentum=config.bn_momentum)
                for conv in convs)

        self.bn = nn.ModuleDict({name: bn_set() for name in BRANCHES})
        if config.share_bn_affine:
            for bn_o, bn_r in zip(self.bn["origin"], self.bn["reflect"]):
                bn_r.weight = bn_o.weight
                bn_r.bias = bn_o.bias

        if config.fusion == "hierarchical":
            stages = []
            for level in range(config.levels):
                in_ch = 2 * chans[level]
                if level < config.levels - 1:
                    in_ch += chans[level + 1]
                stages.append(FusionStage(in_ch, chans[level], scale=2 if level > 0 else None))
            head_in = chans[0]
        else:
            top = chans[-1]
            stages = [FusionStage(2 * top, top, scale=2 ** (config.levels - 1))]
            head_in = top
        self.fusion = nn.ModuleList(stages)
        self.head = nn.Conv2d(head_in, config.output_classes, kernel_size=config.head_kernel,
                              padding=config.head_kernel // 2)
        # counts uses of f_{l+1} inside the fusing branch
        self.hierarchical_merges = 0

    def branch_forward(self, x: torch.Tensor, branch: str,
                       conv_weights: Optional[Sequence[torch.Tensor]] = None) -> List[torch.Tensor]:
        """Per-level features g_l of one sibling branch (input N x C x H x W).

        ``conv_weights`` substitutes the shared kernels, e.g. detached copies to
        isolate one branch's gradient contribution.
        """
        if branch not in BRANCHES:
            raise ValueError(f"unknown branch {branch!r}")
        expected = (self.config.in_channels, *self.config.input_size)
        if x.dim() != 4 or tuple(x.shape[1:]) != expected:
            raise ValueError(f"expected input of shape N x {expected}, got {tuple(x.shape)}")
        convs, bns = self.branch.conv, self.bn[branch]
        feats = []
        for i, (conv, bn) in enumerate(zip(convs, bns)):
            level = self.level_of_layer[i]
            if i > 0 and level != self.level_of_layer[i - 1]:
                feats.append(x)
                x = F.max_pool2d(x, kernel_size=2, stride=2)
            weight = conv.weight if conv_weights is None else conv_weights[i]
            x = F.relu(bn(F.conv2d(x, weight, padding=1)))
        feats.append(x)
        return feats

    def fuse(self, origin_feats: List[torch.Tensor], reflect_feats: List[torch.Tensor]) -> torch.Tensor:
        """Fused map f_1 at input resolution (f_L upsampled directly in concat mode)."""
        L = self.config.levels
        if len(origin_feats) != L or len(reflect_feats) != L:
            raise ValueError(f"expected {L} feature levels, got {len(origin_feats)} and {len(reflect_feats)}")
        for g, g_star in zip(origin_feats, reflect_feats):
            if g.shape != g_star.shape:
                raise ValueError("origin and reflected features differ in shape")
        if self.config.fusion == "concat":
            stage = self.fusion[0]
            return stage.up(stage(torch.cat([origin_feats[-1], reflect_feats[-1]], dim=1)))

        f = self.fusion[L - 1](torch.cat([origin_feats[L - 1], reflect_feats[L - 1]], dim=1))
        for level in range(L - 2, -1, -1):
            upsampled = self.fusion[level + 1].up(f)
            self.hierarchical_merges += 1
            f = self.fusion[level](torch.cat([origin_feats[level], upsampled, reflect_feats[level]], dim=1))
        return f

    def forward(self, origin: torch.Tensor, reflected: torch.Tensor) -> torch.Tensor:
        """Two-channel logits (N x 2 x H x W) for NCHW origin/reflected inputs."""
        g = self.branch_forward(origin, "origin")
        g_star = self.branch_forward(reflected, "reflect")
        return self.head(self.fuse(g, g_star))

    def predict(self, pair: ReciprocalPair, mode: str = "eval") -> SaliencyMap:
        """Run on a channels-last pair (H x W x 3 or N x H x W x 3)."""
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        self.train(mode == "train")
        origin, reflected = to_nchw(pair.origin, self), to_nchw(pair.reflected, self)
        logits = self(origin, reflected)
        return SaliencyMap(foreground_probability(logits), logits)


def foreground_probability(logits: torch.Tensor) -> torch.Tensor:
    return torch.softmax(logits, dim=1)[:, 1]


def to_nchw(x, model: Optional[nn.Module] = None) -> torch.Tensor:
    """Channels-last image(s) to an NCHW tensor in the model's dtype."""
    t = torch.as_tensor(x)
    if t.dim() == 3:
        t = t.unsqueeze(0)
    t = t.permute(0, 3, 1, 2).contiguous()
    if model is not None:
        t = t.to(next(model.parameters()).dtype)
    return t


def init_params(config: SFCNConfig, seed: int, dtype=torch.float32) -> SFCN:
    """Build an SFCN with msra (He, fan-in) kernels; BN at identity for both branches."""
    model = SFCN(config)
    gen = torch.Generator().manual_seed(int(seed))
    for name, module in model.named_modules():
        if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d)):
            w = module.weight
            fan_in = w.shape[1] * w.shape[2] * w.shape[3]
            if isinstance(module, nn.ConvTranspose2d):
                # input channels live in dim 0; each output pixel sees in/stride^2 taps per channel
                fan_in = w.shape[0] * w.shape[2] * w.shape[3] // (module.stride[0] * module.stride[1])
            with torch.no_grad():
                w.normal_(0.0, math.sqrt(2.0 / fan_in), generator=gen)
                if module.bias is not None:
                    module.bias.zero_()
        elif isinstance(module, nn.BatchNorm2d):
            module.reset_parameters()
    return model.to(dtype)


def backward(loss: torch.Tensor, model: nn.Module) -> Dict[str, torch.Tensor]:
    """Gradient of ``loss`` with respect to every trainable parameter, by name."""
    if not isinstance(loss, torch.Tensor) or loss.grad_fn is None:
        raise RuntimeError("backward needs a loss produced by a forward pass with gradient recording")
    names, params = zip(*[(n, p) for n, p in model.named_parameters() if p.requires_grad])
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    return {n: torch.zeros_like(p) if g is None else g for n, p, g in zip(names, params, grads)}


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
