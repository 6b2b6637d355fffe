"""Multi-stage scene text eraser with mask-guided compositing.

One erasing block (shared backbone, text localization head, background
reconstruction head) is applied ``num_stages`` times with the same weights.
Each stage composites the reconstruction into the original image through the
predicted soft text mask, so non-text pixels are inherited from the input.

Tensors are NCHW float tensors with values in [0, 1].
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, DimensionError, InputValidationError


@dataclass
class ModelConfig:
    base_channels: int = 32
    num_residual_blocks: int = 5
    psp_bin_sizes: tuple = (1, 2, 3, 6)
    num_stages: int = 3
    input_size: tuple = (64, 64)
    mrm_scales: tuple = (0.5, 0.25)
    region_ms: bool = True
    seed: int = 0

    def __post_init__(self):
        self.psp_bin_sizes = tuple(int(b) for b in self.psp_bin_sizes)
        self.input_size = tuple(int(s) for s in self.input_size)
        self.mrm_scales = tuple(float(s) for s in self.mrm_scales)
        self.validate()

    def validate(self) -> None:
        if self.num_stages < 1:
            raise ConfigError(f"num_stages must be >= 1, got {self.num_stages}")
        if self.base_channels < 4:
            raise ConfigError(f"base_channels must be >= 4, got {self.base_channels}")
        if self.num_residual_blocks < 1:
            raise ConfigError("num_residual_blocks must be >= 1")
        if len(self.input_size) != 2 or any(s <= 0 or s % 8 for s in self.input_size):
            raise ConfigError(f"input_size must be two positive multiples of 8, got {self.input_size}")
        bins = self.psp_bin_sizes
        if not bins or any(b < 1 for b in bins) or any(a >= b for a, b in zip(bins, bins[1:])):
            raise ConfigError(f"psp_bin_sizes must be strictly increasing positive ints, got {bins}")
        if bins[-1] > min(self.input_size) // 4:
            raise ConfigError(f"psp bin {bins[-1]} exceeds min(H, W)/4 for input {self.input_size}")
        if self.mrm_scales != (0.5, 0.25):
            # The two heads sit on the two deconvolution levels of the decoder.
            raise ConfigError(f"mrm_scales must be (0.5, 0.25), got {self.mrm_scales}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls(**json.loads(text))


@dataclass
class StageOutput:
    """Artifacts of one erasing stage.

    ``p1``/``p2`` are the half- and quarter-resolution composited MRM outputs;
    they are ``None`` unless the model ran in training mode.
    """

    stage_index: int
    mask: torch.Tensor
    raw_reconstruction: torch.Tensor
    composited: torch.Tensor
    p1: Optional[torch.Tensor] = None
    p2: Optional[torch.Tensor] = None
    raw_p1: Optional[torch.Tensor] = None
    raw_p2: Optional[torch.Tensor] = None


def conv3x3(in_ch: int, out_ch: int, stride: int = 1) -> nn.Conv2d:
    # reflect padding keeps constant maps constant, which the mask-head tests rely on
    return nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, padding_mode="reflect")


def resize(x: torch.Tensor, size) -> torch.Tensor:
    """Bilinear resize used for every mask/image rescale in the package."""
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    return F.interpolate(x, size=tuple(size), mode="bilinear", align_corners=False)


def region_compose(mask: torch.Tensor, reconstruction: torch.Tensor, original: torch.Tensor) -> torch.Tensor:
    """``mask * reconstruction + (1 - mask) * original`` with the mask broadcast over channels."""
    if mask.dim() != 4 or mask.shape[1] != 1:
        raise DimensionError(f"mask must be N x 1 x H x W, got {tuple(mask.shape)}")
    if reconstruction.shape != original.shape:
        raise DimensionError(
            f"reconstruction {tuple(reconstruction.shape)} and original {tuple(original.shape)} differ"
        )
    if mask.shape[0] != original.shape[0] or mask.shape[-2:] != original.shape[-2:]:
        raise DimensionError(f"mask {tuple(mask.shape)} does not match image {tuple(original.shape)}")
    return mask * reconstruction + (1 - mask) * original


def _logit(x: torch.Tensor, eps: float = 1e-3) -> torch.Tensor:
    x = x.clamp(eps, 1 - eps)
    return torch.log(x) - torch.log1p(-x)


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = conv3x3(channels, channels)
        self.conv2 = conv3x3(channels, channels)
        self.relu = nn.ReLU()

    def forward(self, x):
        return self.relu(x + self.conv2(self.relu(self.conv1(x))))


class Backbone(nn.Module):
    """Two stride-2 convolutions followed by residual blocks at 1/4 resolution.

    Returns the trunk features plus the shallow skips ``[input, 1/2, 1/4]``.
    """

    def __init__(self, in_channels: int, channels: int, num_blocks: int):
        super().__init__()
        self.conv1 = conv3x3(in_channels, channels, stride=2)
        self.conv2 = conv3x3(channels, channels, stride=2)
        self.blocks = nn.Sequential(*[ResidualBlock(channels) for _ in range(num_blocks)])
        self.relu = nn.ReLU()

    def forward(self, x):
        if x.shape[-1] % 4 or x.shape[-2] % 4:
            raise DimensionError(f"spatial size {tuple(x.shape[-2:])} is not divisible by 4")
        s1 = self.relu(self.conv1(x))
        s2 = self.relu(self.conv2(s1))
        return self.blocks(s2), [x, s1, s2]


class PyramidPooling(nn.Module):
    def __init__(self, channels: int, bin_sizes: Sequence[int]):
        super().__init__()
        branch_ch = max(channels // len(bin_sizes), 1)
        self.stages = nn.ModuleList(
            nn.Sequential(nn.AdaptiveAvgPool2d(b), nn.Conv2d(channels, branch_ch, 1), nn.ReLU())
            for b in bin_sizes
        )
        self.out_channels = channels + branch_ch * len(bin_sizes)

    def forward(self, x):
        size = x.shape[-2:]
        outs = [x] + [resize(stage(x), size) for stage in self.stages]
        return torch.cat(outs, dim=1)


class TextLocalizationHead(nn.Module):
    """PSP mask head. Pools at 1/8, upsamples to 1/4, then resizes to the image size."""

    def __init__(self, channels: int, bin_sizes: Sequence[int]):
        super().__init__()
        self.down = conv3x3(channels, channels, stride=2)
        self.psp = PyramidPooling(channels, bin_sizes)
        self.fuse = conv3x3(self.psp.out_channels, channels)
        self.refine = conv3x3(2 * channels, channels // 2)
        self.logits = nn.Conv2d(channels // 2, 1, 1)
        self.relu = nn.ReLU()

    def forward(self, features, out_size):
        x = self.relu(self.down(features))
        x = self.relu(self.fuse(self.psp(x)))
        x = resize(x, features.shape[-2:])
        x = self.relu(self.refine(torch.cat([x, features], dim=1)))
        return torch.sigmoid(resize(self.logits(x), out_size))


class BackgroundReconstructionHead(nn.Module):
    """Deconvolution decoder with skip connections and the training-only MRM heads."""

    def __init__(self, channels: int, in_channels: int = 6, depth: int = 2):
        super().__init__()
        half = channels // 2
        self.body = nn.Sequential(*[ResidualBlock(channels) for _ in range(depth)])
        self.fuse4 = conv3x3(2 * channels, channels)
        self.up1 = nn.ConvTranspose2d(channels, channels, 4, stride=2, padding=1)
        self.fuse2 = conv3x3(2 * channels, channels)
        self.up2 = nn.ConvTranspose2d(channels, half, 4, stride=2, padding=1)
        self.fuse1 = conv3x3(half + in_channels, half)
        self.out = conv3x3(half, 3)
        self.p1_head = conv3x3(channels, 3)
        self.p2_head = conv3x3(channels, 3)
        self.relu = nn.ReLU()
        # zero residual heads: every stage starts as an identity refinement
        for head in (self.out, self.p1_head, self.p2_head):
            nn.init.zeros_(head.weight)
            nn.init.zeros_(head.bias)

    def forward(self, features, skips, training: bool = False):
        x_full, s_half, s_quarter = skips
        if s_quarter.shape[-2:] != features.shape[-2:]:
            raise DimensionError(f"1/4 skip {tuple(s_quarter.shape)} vs features {tuple(features.shape)}")
        d4 = self.relu(self.fuse4(torch.cat([self.body(features), s_quarter], dim=1)))
        up = self.relu(self.up1(d4))
        if s_half.shape[-2:] != up.shape[-2:]:
            raise DimensionError(f"1/2 skip {tuple(s_half.shape)} vs decoder {tuple(up.shape)}")
        d2 = self.relu(self.fuse2(torch.cat([up, s_half], dim=1)))
        up = self.relu(self.up2(d2))
        if x_full.shape[-2:] != up.shape[-2:]:
            raise DimensionError(f"full skip {tuple(x_full.shape)} vs decoder {tuple(up.shape)}")
        d1 = self.relu(self.fuse1(torch.cat([up, x_full], dim=1)))
        # residual in logit space around the previous stage's output
        prev = x_full[:, 3:6]
        recon = torch.sigmoid(_logit(prev) + self.out(d1))
        if not training:
            return recon, None, None
        p1 = torch.sigmoid(_logit(resize(prev, d2.shape[-2:])) + self.p1_head(d2))
        p2 = torch.sigmoid(_logit(resize(prev, d4.shape[-2:])) + self.p2_head(d4))
        return recon, p1, p2


class ErasingBlock(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c = cfg.base_channels
        self.backbone = Backbone(6, c, cfg.num_residual_blocks)
        self.tln = TextLocalizationHead(c, cfg.psp_bin_sizes)
        self.brn = BackgroundReconstructionHead(c)

    def forward(self, x, training: bool = False):
        features, skips = self.backbone(x)
        mask = self.tln(features, x.shape[-2:])
        recon, p1, p2 = self.brn(features, skips, training)
        return mask, recon, p1, p2


MaskOverride = Union[torch.Tensor, Callable[[int, torch.Tensor], torch.Tensor]]


class PERT(nn.Module):
    """T-stage eraser; every stage calls the single ``self.block``."""

    def __init__(self, cfg: Optional[ModelConfig] = None):
        super().__init__()
        self.cfg = cfg or ModelConfig()
        self.cfg.validate()
        with torch.random.fork_rng(devices=[]):
            # default conv init is fan-in scaled (kaiming uniform); seed makes it reproducible
            torch.manual_seed(self.cfg.seed)
            self.block = ErasingBlock(self.cfg)

    @property
    def num_stages(self) -> int:
        return self.cfg.num_stages

    def forward(
        self,
        original: torch.Tensor,
        num_stages: Optional[int] = None,
        mask_override: Optional[MaskOverride] = None,
        binarize: Optional[float] = None,
    ) -> list[StageOutput]:
        """Run all erasing stages; returns one StageOutput per stage.

        ``mask_override`` replaces the predicted mask at every stage, either
        with a fixed N x 1 x H x W tensor or a callable ``(t, predicted) -> mask``.
        ``binarize`` thresholds predicted masks (inference-time hard masks).
        """
        validate_image(original)
        if original.shape[-1] % 8 or original.shape[-2] % 8:
            raise DimensionError(f"H and W must be divisible by 8, got {tuple(original.shape[-2:])}")
        T = num_stages or self.cfg.num_stages
        if T < 1:
            raise ConfigError(f"num_stages must be >= 1, got {T}")
        training = self.training
        size = original.shape[-2:]
        half = (size[0] // 2, size[1] // 2)
        quarter = (size[0] // 4, size[1] // 4)

        outputs = []
        prev = original
        for t in range(1, T + 1):
            mask, recon, raw_p1, raw_p2 = self.block(torch.cat([original, prev], dim=1), training)
            if binarize is not None:
                mask = (mask > binarize).to(mask.dtype)
            if mask_override is not None:
                mask = mask_override(t, mask) if callable(mask_override) else mask_override
            if self.cfg.region_ms:
                out = region_compose(mask, recon, original)
            else:
                out = recon
            p1 = p2 = None
            if training:
                if self.cfg.region_ms:
                    p1 = region_compose(resize(mask, half), raw_p1, resize(original, half))
                    p2 = region_compose(resize(mask, quarter), raw_p2, resize(original, quarter))
                else:
                    p1, p2 = raw_p1, raw_p2
            outputs.append(StageOutput(t, mask, recon, out, p1, p2, raw_p1, raw_p2))
            prev = out
        return outputs

    @torch.no_grad()
    def erase(self, original: torch.Tensor, **kwargs) -> torch.Tensor:
        """Final-stage composited output in inference mode."""
        was_training = self.training
        self.eval()
        try:
            return self(original, **kwargs)[-1].composited
        finally:
            self.train(was_training)


def validate_image(x: torch.Tensor) -> None:
    if x.dim() != 4 or x.shape[1] != 3:
        raise DimensionError(f"expected N x 3 x H x W image batch, got {tuple(x.shape)}")
    if not torch.isfinite(x).all():
        raise InputValidationError("image contains non-finite values")
    if x.min() < 0 or x.max() > 1:
        raise InputValidationError("image values must lie in [0, 1]")


def parameter_count(cfg_or_model: Union[ModelConfig, nn.Module]) -> int:
    model = cfg_or_model if isinstance(cfg_or_model, nn.Module) else PERT(cfg_or_model)
    return sum(p.numel() for p in model.parameters() if p.requires_grad)
