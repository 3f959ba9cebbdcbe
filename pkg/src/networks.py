"""
Neural components of the reenactment generator and its discriminators.

Tensors are channels-first (B, C, H, W). Flow fields are (B, 2, H, W) with
(dx, dy) displacements in pixels: output pixel p samples the input at
p + flow[p] (backward warping), clamped to the image border.

Shape traces: forward passes of the flow and rendering networks accept an
optional `trace` list and append (label, (H, W, C)) after every layer, so
architecture tables can be checked row by row.
"""

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.parametrizations import spectral_norm

from .config import ArchPreset
from .errors import ShapeError


IN_EPS = 1e-5
LRELU_SLOPE = 0.2

Trace = list[tuple[str, tuple[int, int, int]]]


def _record(trace: Trace | None, label: str, x: torch.Tensor) -> None:
    if trace is not None:
        trace.append((label, (x.shape[2], x.shape[3], x.shape[1])))


# -----------------------------------------------------------------------------
# Warping and resampling
# -----------------------------------------------------------------------------

def bilinear_warp(image: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """
    Sample `image` at p + flow[p] with bilinear interpolation.

    Sample positions are clamped to the image, so out-of-range samples
    replicate the border. A zero flow returns the input exactly.
    Differentiable w.r.t. both inputs.

    Args:
        image: (B, C, H, W) image or feature map.
        flow: (B, 2, H, W) pixel displacements (dx, dy).

    Raises:
        ShapeError: If batch or spatial sizes differ.
    """
    if image.dim() != 4 or flow.dim() != 4 or flow.shape[1] != 2:
        raise ShapeError(f"Expected image (B,C,H,W) and flow (B,2,H,W), got {tuple(image.shape)} and {tuple(flow.shape)}")
    B, C, H, W = image.shape
    if flow.shape[0] != B or flow.shape[2:] != image.shape[2:]:
        raise ShapeError(f"Flow {tuple(flow.shape)} does not match image {tuple(image.shape)}")

    ys = torch.arange(H, dtype=flow.dtype, device=flow.device).view(1, H, 1)
    xs = torch.arange(W, dtype=flow.dtype, device=flow.device).view(1, 1, W)
    sx = (xs + flow[:, 0]).clamp(0, W - 1)
    sy = (ys + flow[:, 1]).clamp(0, H - 1)

    x0 = sx.detach().floor()
    y0 = sy.detach().floor()
    wx = (sx - x0).unsqueeze(1)
    wy = (sy - y0).unsqueeze(1)
    x0 = x0.long()
    y0 = y0.long()
    x1 = (x0 + 1).clamp(max=W - 1)
    y1 = (y0 + 1).clamp(max=H - 1)

    flat = image.reshape(B, C, H * W)

    def gather(yi: torch.Tensor, xi: torch.Tensor) -> torch.Tensor:
        index = (yi * W + xi).view(B, 1, H * W).expand(B, C, H * W)
        return flat.gather(2, index).view(B, C, H, W)

    top = gather(y0, x0) * (1 - wx) + gather(y0, x1) * wx
    bottom = gather(y1, x0) * (1 - wx) + gather(y1, x1) * wx
    return top * (1 - wy) + bottom * wy


def downsample_flow(flow: torch.Tensor) -> torch.Tensor:
    """
    Halve a flow field: bilinear 2x spatial downsampling, then divide the
    displacements by two.

    Raises:
        ShapeError: If H or W is odd.
    """
    H, W = flow.shape[-2:]
    if H % 2 or W % 2:
        raise ShapeError(f"Cannot halve a flow field of odd size {H}x{W}")
    half = F.interpolate(flow, size=(H // 2, W // 2), mode="bilinear", align_corners=False)
    return half / 2.0


def pixel_shuffle(features: torch.Tensor, r: int = 2) -> torch.Tensor:
    """
    (B, r*r*C, H, W) -> (B, C, r*H, r*W).

    Raises:
        ShapeError: If channels aren't divisible by r*r.
    """
    if features.shape[1] % (r * r):
        raise ShapeError(f"Pixel shuffle needs channels divisible by {r * r}, got {features.shape[1]}")
    return F.pixel_shuffle(features, r)


def resize_to(x: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    """Nearest-neighbour resize of a conditioning map to another map's spatial size."""
    if x.shape[-2:] == like.shape[-2:]:
        return x
    return F.interpolate(x, size=like.shape[-2:], mode="nearest")


# -----------------------------------------------------------------------------
# Normalization blocks
# -----------------------------------------------------------------------------

class SPADELayer(nn.Module):
    """
    Parameter-free instance norm modulated per pixel:
    out = IN(x) * gamma(m) + beta(m), with gamma/beta predicted from the
    modulation map m by a shared conv + two conv heads.
    """

    def __init__(self, channels: int, modulation_channels: int, hidden: int = 128):
        super().__init__()
        self.norm = nn.InstanceNorm2d(channels, affine=False, eps=IN_EPS)
        self.shared = nn.Sequential(
            nn.Conv2d(modulation_channels, hidden, kernel_size=3, padding=1),
            nn.ReLU(),
        )
        self.gamma = nn.Conv2d(hidden, channels, kernel_size=3, padding=1)
        self.beta = nn.Conv2d(hidden, channels, kernel_size=3, padding=1)
        # gamma starts at 1
        nn.init.zeros_(self.gamma.weight)
        nn.init.ones_(self.gamma.bias)

    def forward(self, x: torch.Tensor, modulation: torch.Tensor) -> torch.Tensor:
        if modulation.shape[-2:] != x.shape[-2:]:
            raise ShapeError(
                f"SPADE modulation size {tuple(modulation.shape[-2:])} != feature size {tuple(x.shape[-2:])}"
            )
        h = self.shared(modulation)
        return self.norm(x) * self.gamma(h) + self.beta(h)


class AdaINLayer(nn.Module):
    """Instance norm with per-channel gamma/beta from a conditioning vector."""

    def __init__(self, channels: int, vector_dim: int):
        super().__init__()
        self.channels = channels
        self.vector_dim = vector_dim
        self.norm = nn.InstanceNorm2d(channels, affine=False, eps=IN_EPS)
        self.affine = nn.Linear(vector_dim, 2 * channels)
        with torch.no_grad():
            self.affine.weight[:channels].zero_()
            self.affine.bias[:channels].fill_(1.0)
            self.affine.bias[channels:].zero_()

    def forward(self, x: torch.Tensor, vector: torch.Tensor) -> torch.Tensor:
        if vector.dim() != 2 or vector.shape[1] != self.vector_dim:
            raise ShapeError(f"AdaIN expects a (B, {self.vector_dim}) vector, got {tuple(vector.shape)}")
        params = self.affine(vector)
        gamma = params[:, :self.channels, None, None]
        beta = params[:, self.channels:, None, None]
        return self.norm(x) * gamma + beta


class SPADEBlock(nn.Module):
    """Two (SPADE -> LeakyReLU -> conv3x3) units, no residual; channels preserved."""

    def __init__(self, channels: int, modulation_channels: int, hidden: int = 128):
        super().__init__()
        self.norm_1 = SPADELayer(channels, modulation_channels, hidden)
        self.conv_1 = nn.Conv2d(channels, channels, kernel_size=3, padding=1)
        self.norm_2 = SPADELayer(channels, modulation_channels, hidden)
        self.conv_2 = nn.Conv2d(channels, channels, kernel_size=3, padding=1)
        self.act = nn.LeakyReLU(LRELU_SLOPE)

    def forward(self, x: torch.Tensor, modulation: torch.Tensor) -> torch.Tensor:
        x = self.conv_1(self.act(self.norm_1(x, modulation)))
        return self.conv_2(self.act(self.norm_2(x, modulation)))


class AdaINBlock(nn.Module):
    """Two (AdaIN -> LeakyReLU -> conv3x3) units, no residual; shape preserved."""

    def __init__(self, channels: int, vector_dim: int):
        super().__init__()
        self.norm_1 = AdaINLayer(channels, vector_dim)
        self.conv_1 = nn.Conv2d(channels, channels, kernel_size=3, padding=1)
        self.norm_2 = AdaINLayer(channels, vector_dim)
        self.conv_2 = nn.Conv2d(channels, channels, kernel_size=3, padding=1)
        self.act = nn.LeakyReLU(LRELU_SLOPE)

    def forward(self, x: torch.Tensor, vector: torch.Tensor) -> torch.Tensor:
        x = self.conv_1(self.act(self.norm_1(x, vector)))
        return self.conv_2(self.act(self.norm_2(x, vector)))


def spade_block(block: SPADEBlock, features: torch.Tensor, modulation: torch.Tensor) -> torch.Tensor:
    """Apply a SPADE block (functional form)."""
    return block(features, modulation)


def adain_block(block: AdaINBlock, features: torch.Tensor, vector: torch.Tensor) -> torch.Tensor:
    """Apply an AdaIN block (functional form)."""
    return block(features, vector)


# -----------------------------------------------------------------------------
# Generator
# -----------------------------------------------------------------------------

@dataclass
class FeaturePyramid:
    """Feature maps at full/half/quarter resolution plus the reference image."""
    level1: torch.Tensor
    level2: torch.Tensor
    level3: torch.Tensor
    warped_reference: torch.Tensor

    @property
    def levels(self) -> list[torch.Tensor]:
        return [self.level1, self.level2, self.level3]


@dataclass
class GeneratorInput:
    """
    driving_maps: (B, 3(k+1), H, W), oldest first, x_t in the last 3 channels.
    reference_image, reference_map: (B, 3, H, W).
    audio: (B, audio_dim).
    """
    driving_maps: torch.Tensor
    reference_image: torch.Tensor
    reference_map: torch.Tensor
    audio: torch.Tensor


@dataclass
class GeneratorOutput:
    frame: torch.Tensor
    flow: torch.Tensor
    pyramid: FeaturePyramid


class Encoder(nn.Module):
    """conv7x7 -> conv3x3/2 -> conv3x3/2, each with instance norm and ReLU."""

    def __init__(self, in_channels: int, widths: tuple[int, int, int]):
        super().__init__()
        c1, c2, c3 = widths

        def unit(cin, cout, k, stride):
            return nn.Sequential(
                nn.Conv2d(cin, cout, kernel_size=k, stride=stride, padding=k // 2),
                nn.InstanceNorm2d(cout, affine=False, eps=IN_EPS),
                nn.ReLU(),
            )

        self.layer1 = unit(in_channels, c1, 7, 1)
        self.layer2 = unit(c1, c2, 3, 2)
        self.layer3 = unit(c2, c3, 3, 2)

    def forward(self, x: torch.Tensor, trace: Trace | None = None) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        h1 = self.layer1(x)
        _record(trace, "encoder.conv7", h1)
        h2 = self.layer2(h1)
        _record(trace, "encoder.conv3_1", h2)
        h3 = self.layer3(h2)
        _record(trace, "encoder.conv3_2", h3)
        return h1, h2, h3


class DenseFlowNetwork(nn.Module):
    """
    Encodes (reference image, reference map) into a three-level pyramid and
    decodes a dense flow guided by the driving maps through SPADE blocks.
    With zero_flow=True the decoder is not built and the flow is all zeros.
    """

    def __init__(self, arch: ArchPreset, zero_flow: bool = False):
        super().__init__()
        c1, c2, c3 = arch.widths
        m = arch.driving_channels
        self.zero_flow = zero_flow
        self.encoder = Encoder(6, arch.widths)
        if zero_flow:
            self.decoder = None
            return
        self.decoder = nn.ModuleDict({
            "spade3_1": SPADEBlock(c3, m, arch.hidden),
            "spade3_2": SPADEBlock(c3, m, arch.hidden),
            "spade3_3": SPADEBlock(c3, m, arch.hidden),
            "spade2": SPADEBlock(c2, m, arch.hidden),
            "out": nn.Conv2d(c1, 2, kernel_size=7, padding=3),
        })
        # Flow starts at zero, so the warp begins as the identity
        nn.init.zeros_(self.decoder["out"].weight)
        nn.init.zeros_(self.decoder["out"].bias)

    def forward(
        self,
        reference_image: torch.Tensor,
        reference_map: torch.Tensor,
        driving_maps: torch.Tensor,
        trace: Trace | None = None,
    ) -> tuple[torch.Tensor, FeaturePyramid]:
        """Returns (flow, unwarped pyramid)."""
        h1, h2, h3 = self.encoder(torch.cat([reference_image, reference_map], dim=1), trace)
        pyramid = FeaturePyramid(h1, h2, h3, reference_image)
        B, _, H, W = reference_image.shape
        if self.decoder is None:
            return reference_image.new_zeros(B, 2, H, W), pyramid

        d = self.decoder
        x = h3
        for name in ("spade3_1", "spade3_2", "spade3_3"):
            x = d[name](x, resize_to(driving_maps, x))
            _record(trace, f"flow.{name}", x)
        x = pixel_shuffle(x)
        _record(trace, "flow.shuffle1", x)
        x = d["spade2"](x, resize_to(driving_maps, x))
        _record(trace, "flow.spade2", x)
        x = pixel_shuffle(x)
        _record(trace, "flow.shuffle2", x)
        flow = d["out"](x)
        _record(trace, "flow.conv7", flow)
        return flow, pyramid


class RenderingNetwork(nn.Module):
    """
    Encodes the driving maps and decodes a frame through alternating SPADE
    (warped visual features, coarse to fine, then the warped reference) and
    AdaIN (audio) blocks, with pixel shuffle upsampling and a tanh output.
    """

    def __init__(self, arch: ArchPreset):
        super().__init__()
        c1, c2, c3 = arch.widths
        self.encoder = Encoder(arch.driving_channels, arch.widths)
        self.spade3 = SPADEBlock(c3, c3, arch.hidden)
        self.adain3 = AdaINBlock(c3, arch.audio_dim)
        self.spade2 = SPADEBlock(c2, c2, arch.hidden)
        self.adain2 = AdaINBlock(c2, arch.audio_dim)
        self.spade1 = SPADEBlock(c1, c1, arch.hidden)
        self.adain1 = AdaINBlock(c1, arch.audio_dim)
        self.spade_ref = SPADEBlock(c1, 3, arch.hidden)
        self.act = nn.LeakyReLU(LRELU_SLOPE)
        self.out = nn.Conv2d(c1, 3, kernel_size=7, padding=3)

    def forward(
        self,
        driving_maps: torch.Tensor,
        pyramid: FeaturePyramid,
        audio: torch.Tensor,
        trace: Trace | None = None,
    ) -> torch.Tensor:
        _, _, x = self.encoder(driving_maps, trace)
        x = self.spade3(x, pyramid.level3)
        _record(trace, "render.spade3", x)
        x = self.adain3(x, audio)
        _record(trace, "render.adain3", x)
        x = pixel_shuffle(x)
        _record(trace, "render.shuffle1", x)
        x = self.spade2(x, pyramid.level2)
        _record(trace, "render.spade2", x)
        x = self.adain2(x, audio)
        _record(trace, "render.adain2", x)
        x = pixel_shuffle(x)
        _record(trace, "render.shuffle2", x)
        x = self.spade1(x, pyramid.level1)
        _record(trace, "render.spade1", x)
        x = self.adain1(x, audio)
        _record(trace, "render.adain1", x)
        x = self.spade_ref(x, pyramid.warped_reference)
        _record(trace, "render.spade_ref", x)
        frame = torch.tanh(self.out(self.act(x)))
        _record(trace, "render.conv7", frame)
        return frame


class Generator(nn.Module):
    """Flow network F, pyramid warping and rendering network R."""

    def __init__(self, arch: ArchPreset, ablation: str = "full"):
        super().__init__()
        self.arch = arch
        self.ablation = ablation
        # R before F: ablations share every weight they have in common
        render_net = RenderingNetwork(arch)
        self.flow_net = DenseFlowNetwork(arch, zero_flow=(ablation == "no_flow"))
        self.render_net = render_net

    def check_input(self, inp: GeneratorInput) -> None:
        """
        Raises:
            ShapeError: If the input doesn't match the architecture.
        """
        res = self.arch.resolution
        expected = {
            "driving_maps": (self.arch.driving_channels, res, res),
            "reference_image": (3, res, res),
            "reference_map": (3, res, res),
        }
        for name, shape in expected.items():
            tensor = getattr(inp, name)
            if tensor.dim() != 4 or tuple(tensor.shape[1:]) != shape:
                raise ShapeError(f"{name} must be (B, {', '.join(map(str, shape))}), got {tuple(tensor.shape)}")
        if inp.audio.dim() != 2 or inp.audio.shape[1] != self.arch.audio_dim:
            raise ShapeError(f"audio must be (B, {self.arch.audio_dim}), got {tuple(inp.audio.shape)}")

    def forward(self, inp: GeneratorInput, trace: Trace | None = None) -> GeneratorOutput:
        self.check_input(inp)
        audio = torch.zeros_like(inp.audio) if self.ablation == "no_audio" else inp.audio

        flow, pyramid = self.flow_net(inp.reference_image, inp.reference_map, inp.driving_maps, trace)
        flow2 = downsample_flow(flow)
        flow3 = downsample_flow(flow2)
        warped = FeaturePyramid(
            level1=bilinear_warp(pyramid.level1, flow),
            level2=bilinear_warp(pyramid.level2, flow2),
            level3=bilinear_warp(pyramid.level3, flow3),
            warped_reference=bilinear_warp(inp.reference_image, flow),
        )
        frame = self.render_net(inp.driving_maps, warped, audio, trace)
        return GeneratorOutput(frame=frame, flow=flow, pyramid=warped)


def flow_network_forward(
    F_net: DenseFlowNetwork,
    reference_image: torch.Tensor,
    reference_map: torch.Tensor,
    driving_maps: torch.Tensor,
) -> tuple[torch.Tensor, FeaturePyramid]:
    """Flow field and unwarped reference pyramid."""
    return F_net(reference_image, reference_map, driving_maps)


def rendering_network_forward(
    R_net: RenderingNetwork,
    driving_maps: torch.Tensor,
    warped_pyramid: FeaturePyramid,
    audio: torch.Tensor,
) -> torch.Tensor:
    """Frame in [-1, 1] from driving maps, warped features and audio."""
    return R_net(driving_maps, warped_pyramid, audio)


def generator_forward(G: Generator, inp: GeneratorInput) -> GeneratorOutput:
    return G(inp)


# -----------------------------------------------------------------------------
# Discriminators
# -----------------------------------------------------------------------------

class PatchDiscriminator(nn.Module):
    """
    Multi-layer patch discriminator: 4x4 convs, LeakyReLU(0.2), instance
    norm with spectral normalization on the normalized convs, last strided
    layer at stride 1. Returns every layer's output; the last one is the
    (B, 1, h, w) score map.
    """

    def __init__(self, in_channels: int, base: int = 64, n_layers: int = 4):
        super().__init__()
        kw, padw = 4, 2
        nf = base
        layers = [nn.Sequential(
            nn.Conv2d(in_channels, nf, kernel_size=kw, stride=2, padding=padw),
            nn.LeakyReLU(LRELU_SLOPE),
        )]
        for n in range(1, n_layers):
            nf_prev, nf = nf, min(nf * 2, 512)
            stride = 1 if n == n_layers - 1 else 2
            layers.append(nn.Sequential(
                spectral_norm(nn.Conv2d(nf_prev, nf, kernel_size=kw, stride=stride, padding=padw)),
                nn.InstanceNorm2d(nf, affine=False, eps=IN_EPS),
                nn.LeakyReLU(LRELU_SLOPE),
            ))
        layers.append(nn.Sequential(nn.Conv2d(nf, 1, kernel_size=kw, stride=1, padding=padw)))
        self.layers = nn.ModuleList(layers)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        features = []
        for layer in self.layers:
            x = layer(x)
            features.append(x)
        return features

    def spectral_convs(self) -> list[nn.Conv2d]:
        return [layer[0] for layer in self.layers if hasattr(layer[0], "parametrizations")]


class ImageDiscriminator(PatchDiscriminator):
    """D: scores (face map, frame) pairs."""

    def __init__(self, arch: ArchPreset):
        super().__init__(6, arch.disc_base, arch.disc_layers)

    def forward(self, face_map: torch.Tensor, frame: torch.Tensor) -> list[torch.Tensor]:
        if face_map.shape != frame.shape:
            raise ShapeError(f"Face map {tuple(face_map.shape)} and frame {tuple(frame.shape)} differ")
        return super().forward(torch.cat([face_map, frame], dim=1))


def replicate_audio(audio: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """(B, D) -> (B, D, height, width), same vector at every location."""
    return audio[:, :, None, None].expand(-1, -1, height, width)


class MouthDiscriminator(PatchDiscriminator):
    """D_m: scores mouth crops concatenated with the spatially replicated audio feature."""

    def __init__(self, arch: ArchPreset):
        super().__init__(3 + arch.audio_dim, arch.disc_base, arch.disc_layers)
        self.audio_dim = arch.audio_dim
        self.mouth_size = arch.mouth_size

    def forward(self, audio: torch.Tensor, mouth_crop: torch.Tensor) -> list[torch.Tensor]:
        if mouth_crop.dim() != 4 or mouth_crop.shape[1] != 3:
            raise ShapeError(f"Mouth crop must be (B, 3, h, w), got {tuple(mouth_crop.shape)}")
        if audio.dim() != 2 or audio.shape[1] != self.audio_dim or audio.shape[0] != mouth_crop.shape[0]:
            raise ShapeError(f"Audio must be (B, {self.audio_dim}), got {tuple(audio.shape)}")
        h, w = mouth_crop.shape[-2:]
        return super().forward(torch.cat([mouth_crop, replicate_audio(audio, h, w)], dim=1))


def discriminator_forward(D: ImageDiscriminator, face_map: torch.Tensor, frame: torch.Tensor) -> torch.Tensor:
    """Score map of D on a (face map, frame) pair."""
    return D(face_map, frame)[-1]


def mouth_discriminator_forward(Dm: MouthDiscriminator, audio: torch.Tensor, mouth_crop: torch.Tensor) -> torch.Tensor:
    """Score map of D_m on a mouth crop conditioned on audio."""
    return Dm(audio, mouth_crop)[-1]
