"""
Training objectives.

Every L1 term is a mean over elements, so weights don't depend on image
size. Generator total:

    L_G = adv + l1*(L1 + F_L1) + vgg*(VGG + F_VGG) + fm*FM + temp*Temp

Discriminator totals are their hinge terms.
"""

from dataclasses import dataclass, fields
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import LossWeights
from .errors import ShapeError
from .networks import FeaturePyramid


def _check_same(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {tuple(a.shape)} and {tuple(b.shape)} differ")


class PerceptualExtractor(nn.Module):
    """
    Frozen, seeded random conv pyramid standing in for a pretrained
    backbone: image -> list of 4 feature maps.
    """

    widths = (16, 32, 64, 64)

    def __init__(self, seed: int = 1234, in_channels: int = 3):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        layers = []
        cin = in_channels
        for i, cout in enumerate(self.widths):
            conv = nn.Conv2d(cin, cout, kernel_size=3, stride=1 if i == 0 else 2, padding=1)
            with torch.no_grad():
                fan_in = cin * 9
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * (2.0 / fan_in) ** 0.5)
                conv.bias.zero_()
            layers.append(conv)
            cin = cout
        self.layers = nn.ModuleList(layers)
        self.requires_grad_(False)
        self.eval()

    def forward(self, image: torch.Tensor) -> list[torch.Tensor]:
        features = []
        x = image
        for conv in self.layers:
            x = F.relu(conv(x))
            features.append(x)
        return features


# -----------------------------------------------------------------------------
# Terms
# -----------------------------------------------------------------------------

def hinge_d(real_scores: torch.Tensor, fake_scores: torch.Tensor) -> torch.Tensor:
    """mean(max(0, 1 - real)) + mean(max(0, 1 + fake))."""
    return F.relu(1.0 - real_scores).mean() + F.relu(1.0 + fake_scores).mean()


def hinge_g(fake_scores_d: torch.Tensor, fake_scores_dm: torch.Tensor) -> torch.Tensor:
    """-mean(D(fake)) - mean(D_m(fake mouth))."""
    return -fake_scores_d.mean() - fake_scores_dm.mean()


def recon_l1(generated: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    _check_same(generated, target, "L1")
    return (generated - target).abs().mean()


def perceptual(generated: torch.Tensor, target: torch.Tensor, extractor: nn.Module) -> torch.Tensor:
    """Sum over extractor layers of the mean L1 between features."""
    _check_same(generated, target, "perceptual")
    total = generated.new_zeros(())
    for fg, ft in zip(extractor(generated), extractor(target)):
        total = total + (fg - ft).abs().mean()
    return total


def feature_match(real_feats: Sequence[torch.Tensor], fake_feats: Sequence[torch.Tensor]) -> torch.Tensor:
    """
    Sum over layers of the mean L1 between discriminator features of the
    real and fake passes. Real features are treated as constants.
    """
    if len(real_feats) != len(fake_feats):
        raise ShapeError(f"Feature matching: {len(real_feats)} real layers vs {len(fake_feats)} fake layers")
    total = fake_feats[0].new_zeros(()) if fake_feats else torch.zeros(())
    for real, fake in zip(real_feats, fake_feats):
        _check_same(real, fake, "feature matching")
        total = total + (fake - real.detach()).abs().mean()
    return total


def warp_losses(
    warped_reference: torch.Tensor,
    target: torch.Tensor,
    extractor: nn.Module,
) -> tuple[torch.Tensor, torch.Tensor]:
    """(L1, perceptual) between the warped reference and the true frame."""
    return recon_l1(warped_reference, target), perceptual(warped_reference, target, extractor)


def temporal_loss(
    pyramid_prev: FeaturePyramid | Sequence[torch.Tensor],
    pyramid_curr: FeaturePyramid | Sequence[torch.Tensor],
) -> torch.Tensor:
    """Sum over the three warped feature levels of the mean L1 between frames t-1 and t."""
    prev = pyramid_prev.levels if isinstance(pyramid_prev, FeaturePyramid) else list(pyramid_prev)
    curr = pyramid_curr.levels if isinstance(pyramid_curr, FeaturePyramid) else list(pyramid_curr)
    if len(prev) != len(curr):
        raise ShapeError(f"Temporal loss: {len(prev)} vs {len(curr)} pyramid levels")
    total = curr[0].new_zeros(())
    for a, b in zip(prev, curr):
        _check_same(a, b, "temporal level")
        total = total + (a - b).abs().mean()
    return total


# -----------------------------------------------------------------------------
# Totals
# -----------------------------------------------------------------------------

@dataclass
class GeneratorTerms:
    """Component terms of the generator objective for one batch."""
    adv: torch.Tensor
    l1: torch.Tensor
    vgg: torch.Tensor
    fm: torch.Tensor
    warp_l1: torch.Tensor
    warp_vgg: torch.Tensor
    temp: torch.Tensor

    def as_record(self) -> dict[str, float]:
        return {f"g_{f.name}": float(getattr(self, f.name).detach()) for f in fields(self)}


def total_g(terms: GeneratorTerms, weights: LossWeights) -> torch.Tensor:
    return (
        terms.adv
        + weights.l1 * (terms.l1 + terms.warp_l1)
        + weights.vgg * (terms.vgg + terms.warp_vgg)
        + weights.fm * terms.fm
        + weights.temp * terms.temp
    )


def total_d(real_scores: torch.Tensor, fake_scores: torch.Tensor) -> torch.Tensor:
    return hinge_d(real_scores, fake_scores)


def total_dm(real_scores: torch.Tensor, fake_scores: torch.Tensor) -> torch.Tensor:
    return hinge_d(real_scores, fake_scores)
