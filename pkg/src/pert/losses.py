"""Training objective: dice localization loss, region-global similarity loss,
negative SSIM and the VGG perceptual/style loss.

All functions take NCHW tensors and return scalar tensors (batch-averaged),
so they work unchanged in float32 training and float64 gradient checks.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, DimensionError
from .model import StageOutput, resize

# torchvision VGG16 ("D") feature layout; "M" is a 2x2 max-pool
VGG16_CFG = [64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M", 512, 512, 512, "M"]
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass
class LossWeights:
    alpha: float = 13.0
    alpha1: float = 10.0
    alpha2: float = 12.0
    beta: float = 2.0
    beta1: float = 0.8
    beta2: float = 1.0
    gs_scales: tuple = (8, 4, 1)
    feature_layer_indices: tuple = (4, 9, 16)
    perceptual_weight: float = 0.05
    style_weight: float = 120.0
    rg_loss: bool = True
    ssim_loss: bool = True
    vgg_loss: bool = True

    def __post_init__(self):
        self.gs_scales = tuple(int(s) for s in self.gs_scales)
        self.feature_layer_indices = tuple(int(i) for i in self.feature_layer_indices)
        for name in ("alpha", "alpha1", "alpha2", "beta", "beta1", "beta2", "perceptual_weight", "style_weight"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        s = self.gs_scales
        if not s or s[-1] != 1 or any(a <= b for a, b in zip(s, s[1:])):
            raise ConfigError(f"gs_scales must be strictly decreasing and end with 1, got {s}")


class VGGFeatures(nn.Module):
    """Frozen VGG16-layout feature network returning activations at tap indices.

    Tap ``k`` is the output of the first ``k`` layers of ``vgg16.features``
    (1-based), so the defaults (4, 9, 16) are relu1_2, relu2_2 and relu3_3.
    ``width`` scales channel counts; only ``width=1`` can load ImageNet weights.
    Inputs in [0, 1] are normalized with ``mean``/``std`` first.
    """

    def __init__(
        self,
        taps: Sequence[int] = (4, 9, 16),
        width: float = 1.0,
        seed: int = 0,
        mean: Sequence[float] = IMAGENET_MEAN,
        std: Sequence[float] = IMAGENET_STD,
    ):
        super().__init__()
        self.taps = tuple(sorted(taps))
        self.width = width
        layers = []
        in_ch = 3
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            for v in VGG16_CFG:
                if len(layers) >= self.taps[-1]:
                    break
                if v == "M":
                    layers.append(nn.MaxPool2d(2, 2))
                else:
                    out_ch = max(int(round(v * width)), 1)
                    conv = nn.Conv2d(in_ch, out_ch, 3, padding=1)
                    nn.init.kaiming_normal_(conv.weight, nonlinearity="relu")
                    nn.init.zeros_(conv.bias)
                    layers += [conv, nn.ReLU()]
                    in_ch = out_ch
        self.features = nn.Sequential(*layers[: self.taps[-1]])
        self.register_buffer("mean", torch.tensor(mean).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(std).view(1, 3, 1, 1))
        self.requires_grad_(False)
        self.eval()

    @classmethod
    def pretrained(cls, taps: Sequence[int] = (4, 9, 16)) -> "VGGFeatures":
        """ImageNet VGG16 weights via torchvision (downloads on first use)."""
        from torchvision.models import VGG16_Weights, vgg16

        net = cls(taps=taps, width=1.0)
        src = vgg16(weights=VGG16_Weights.IMAGENET1K_V1).features
        net.features.load_state_dict(src[: len(net.features)].state_dict())
        net.requires_grad_(False)
        return net

    @classmethod
    def random(cls, taps: Sequence[int] = (4, 9, 16), width: float = 0.125, seed: int = 0) -> "VGGFeatures":
        """Narrow, fixed-seed, frozen network for tests and offline training."""
        return cls(taps=taps, width=width, seed=seed)

    def train(self, mode: bool = True):
        # always frozen
        return super().train(False)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        x = (x - self.mean.to(x.dtype)) / self.std.to(x.dtype)
        feats = []
        for i, layer in enumerate(self.features, start=1):
            x = layer(x)
            if i in self.taps:
                feats.append(x)
        return feats


def dice_loss(pred: torch.Tensor, gt: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """``1 - 2*sum(p*y) / (sum(p) + sum(y) + eps)`` per sample, averaged over the batch."""
    if pred.shape != gt.shape:
        raise DimensionError(f"pred {tuple(pred.shape)} vs gt {tuple(gt.shape)}")
    if pred.numel() == 0:
        raise DimensionError("dice_loss on empty tensors")
    if pred.dim() <= 1:
        pred, gt = pred.reshape(1, -1), gt.reshape(1, -1)
    p = pred.flatten(1)
    y = gt.flatten(1)
    inter = (p * y).sum(1)
    dice = 2 * inter / (p.sum(1) + y.sum(1) + eps)
    return (1 - dice).mean()


def _masked_l1(pred, target, mask):
    return ((pred - target) * mask).abs().mean()


def rs_terms(final: StageOutput, gt: torch.Tensor, mask_gt: torch.Tensor, w: LossWeights) -> dict:
    """The six weighted addends of the region-aware similarity loss.

    Text pixels (mask 1) use the alpha weights and non-text pixels the beta
    weights; MRM targets are the ground truth resized to each head's size.
    """
    if final.p1 is None or final.p2 is None:
        raise ValueError("rs_loss needs the MRM outputs; run the model in training mode")
    terms = {
        "rs_text": w.alpha * _masked_l1(final.composited, gt, mask_gt),
        "rs_bg": w.beta * _masked_l1(final.composited, gt, 1 - mask_gt),
    }
    for i, (p, a, b) in enumerate(((final.p1, w.alpha1, w.beta1), (final.p2, w.alpha2, w.beta2)), start=1):
        size = p.shape[-2:]
        g, m = resize(gt, size), resize(mask_gt, size)
        terms[f"rs_p{i}_text"] = a * _masked_l1(p, g, m)
        terms[f"rs_p{i}_bg"] = b * _masked_l1(p, g, 1 - m)
    return terms


def rs_loss(final: StageOutput, gt: torch.Tensor, mask_gt: torch.Tensor, w: LossWeights) -> torch.Tensor:
    return sum(rs_terms(final, gt, mask_gt, w).values())


def pairwise_similarity(feat: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    """Cosine similarity between every pair of pixels of an N x D x S x S map.

    Returns N x S^2 x S^2. ``eps`` is added to each norm so zero vectors give 0.
    The diagonal is set to exactly 1 for nonzero vectors (the eps-guarded
    self-cosine is 1 - O(eps / |F|), which would leak into the S=1 term).
    """
    f = feat.flatten(2)  # N x D x S^2
    norm = f.norm(dim=1, keepdim=True)
    unit = f / (norm + eps)
    gamma = unit.transpose(1, 2) @ unit
    eye = torch.eye(gamma.shape[-1], dtype=torch.bool, device=gamma.device)
    diag = (norm[:, 0] > 0).to(gamma.dtype)  # N x S^2
    return torch.where(eye, torch.diag_embed(diag), gamma)


def gs_loss_from_features(feats_out, feats_gt, scales: Sequence[int]) -> torch.Tensor:
    """Sum over taps and scales of ``(1 / S^2) * sum_ij (g_out - g_gt)^2``, batch-averaged."""
    total = 0.0
    for fo, fg in zip(feats_out, feats_gt):
        for s in scales:
            if fo.shape[-1] < s or fo.shape[-2] < s:
                raise DimensionError(f"feature map {tuple(fo.shape[-2:])} is smaller than pooling size {s}")
            go = pairwise_similarity(F.adaptive_max_pool2d(fo, s))
            gg = pairwise_similarity(F.adaptive_max_pool2d(fg, s))
            total = total + ((go - gg) ** 2).sum(dim=(1, 2)).mean() / (s * s)
    return total


def gs_loss(out: torch.Tensor, gt: torch.Tensor, fx: VGGFeatures, w: LossWeights) -> torch.Tensor:
    return gs_loss_from_features(fx(out), fx(gt), w.gs_scales)


def gaussian_window(size: int = 11, sigma: float = 1.5, dtype=torch.float32) -> torch.Tensor:
    coords = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(coords**2) / (2 * sigma**2))
    g = g / g.sum()
    return (g[:, None] * g[None, :]).to(dtype)


def ssim(a: torch.Tensor, b: torch.Tensor, window_size: int = 11, sigma: float = 1.5, data_range: float = 1.0) -> torch.Tensor:
    """Mean SSIM over all valid Gaussian windows and channels, averaged over the batch."""
    if a.shape != b.shape:
        raise DimensionError(f"ssim inputs differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.shape[-1] < window_size or a.shape[-2] < window_size:
        raise DimensionError(f"image {tuple(a.shape[-2:])} smaller than the {window_size}x{window_size} window")
    c = a.shape[1]
    win = gaussian_window(window_size, sigma, a.dtype).to(a.device).expand(c, 1, window_size, window_size)
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2

    def filt(x):
        return F.conv2d(x, win, groups=c)

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a**2
    var_b = filt(b * b) - mu_b**2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return (num / den).flatten(1).mean(1).mean()


def neg_ssim_loss(out: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    return -ssim(out, gt)


def gram_matrix(feat: torch.Tensor) -> torch.Tensor:
    """Unnormalized Gram matrix ``F F^T`` of an N x C x H x W map (N x C x C)."""
    f = feat.flatten(2)
    return f @ f.transpose(1, 2)


def vgg_loss_from_features(feats_out, feats_gt, w: LossWeights) -> torch.Tensor:
    perceptual = 0.0
    style = 0.0
    for fo, fg in zip(feats_out, feats_gt):
        perceptual = perceptual + (fo - fg).abs().mean()
        c, h, wd = fo.shape[1:]
        norm = c * h * wd
        style = style + (gram_matrix(fo) / norm - gram_matrix(fg) / norm).abs().mean()
    return w.perceptual_weight * perceptual + w.style_weight * style


def vgg_loss(out: torch.Tensor, gt: torch.Tensor, fx: VGGFeatures, w: LossWeights) -> torch.Tensor:
    return vgg_loss_from_features(fx(out), fx(gt), w)


def total_loss(
    stages: Sequence[StageOutput],
    gt: torch.Tensor,
    mask_gt: torch.Tensor,
    fx: Optional[VGGFeatures],
    w: LossWeights,
) -> tuple[torch.Tensor, dict]:
    """Dice on every stage's mask plus reconstruction terms on the final stage only.

    Returns the total and a breakdown of float values for logging. Disabled
    terms are absent from the breakdown.
    """
    breakdown = {}
    total = 0.0
    for s in stages:
        d = dice_loss(s.mask, mask_gt)
        breakdown[f"dice_{s.stage_index}"] = d
        total = total + d
    final = stages[-1]
    out = final.composited
    if w.rg_loss:
        rs = rs_loss(final, gt, mask_gt, w)
        breakdown["rs"] = rs
        total = total + rs
    if w.ssim_loss:
        ns = neg_ssim_loss(out, gt)
        breakdown["neg_ssim"] = ns
        total = total + ns
    if (w.rg_loss or w.vgg_loss) and fx is None:
        raise ValueError("a feature extractor is required for the GS and VGG terms")
    if w.rg_loss or w.vgg_loss:
        fo, fg = fx(out), fx(gt)
        if w.rg_loss:
            gs = gs_loss_from_features(fo, fg, w.gs_scales)
            breakdown["gs"] = gs
            total = total + gs
        if w.vgg_loss:
            v = vgg_loss_from_features(fo, fg, w)
            breakdown["vgg"] = v
            total = total + v
    logged = {k: float(v.detach()) for k, v in breakdown.items()}
    logged["total"] = float(total.detach())
    return total, logged
