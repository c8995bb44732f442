"""Nested U-shaped encoder, multi-scale task routing, and task decoders.

The encoder stacks five two-level mini-U blocks with taps L1..L5 at strides
1, 2, 4, 8, 16. Task features are routed from selected taps, all resized to
the L5 grid and projected to one common width, so the graph blocks can treat
every task uniformly. Decoders climb back to full resolution with encoder
skips. Dropout sits on the three deepest encoder and decoder levels and is
driven by an explicit generator so stochastic passes are replayable.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .config import BackboneConfig
from .errors import ShapeError, ValidationError


class DropoutState:
    """Shared switch and RNG source for every dropout site in one model."""

    def __init__(self, rate: float):
        self.rate = float(rate)
        self.active = False
        self.generator: torch.Generator | None = None

    def seed(self, seed: int) -> None:
        self.generator = torch.Generator()
        self.generator.manual_seed(int(seed))


class SeededDropout(nn.Module):
    """Element dropout whose mask comes from the shared DropoutState.

    Unlike the stock module it stays usable in eval mode, which is what
    stochastic test-time sampling needs, and its draws are reproducible
    because they go through an explicit generator.
    """

    def __init__(self, state: DropoutState):
        super().__init__()
        self.state = state

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        st = self.state
        if not st.active or st.rate <= 0.0:
            return x
        keep = 1.0 - st.rate
        noise = torch.rand(x.shape, generator=st.generator,
                           device=x.device, dtype=x.dtype)
        return x * (noise < keep).to(x.dtype) / keep


class REBNCONV(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, dilation: int = 1):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, padding=dilation, dilation=dilation)
        self.bn = nn.BatchNorm2d(out_ch)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.relu(self.bn(self.conv(x)))


def _upsample_like(x: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
    if x.shape[2:] == ref.shape[2:]:
        return x
    return F.interpolate(x, size=ref.shape[2:], mode="bilinear", align_corners=False)


class NestedUBlock(nn.Module):
    """Residual block whose body is itself a two-level U: encode at full and
    half resolution, run a dilated conv at the bottom, decode with skips."""

    def __init__(self, in_ch: int, mid_ch: int, out_ch: int, dilation: int = 2):
        super().__init__()
        self.conv_in = REBNCONV(in_ch, out_ch)
        self.enc1 = REBNCONV(out_ch, mid_ch)
        self.enc2 = REBNCONV(mid_ch, mid_ch)
        self.bottom = REBNCONV(mid_ch, mid_ch, dilation=dilation)
        self.dec2 = REBNCONV(2 * mid_ch, mid_ch)
        self.dec1 = REBNCONV(2 * mid_ch, out_ch)
        self.pool = nn.MaxPool2d(2, stride=2, ceil_mode=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x0 = self.conv_in(x)
        e1 = self.enc1(x0)
        e2 = self.enc2(self.pool(e1))
        b = self.bottom(e2)
        d2 = self.dec2(torch.cat((b, e2), dim=1))
        d1 = self.dec1(torch.cat((_upsample_like(d2, e1), e1), dim=1))
        return d1 + x0


class Encoder(nn.Module):
    """Five-level encoder returning taps L1..L5 at strides 1, 2, 4, 8, 16."""

    def __init__(self, cfg: BackboneConfig, in_channels: int = 1,
                 state: DropoutState | None = None):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        ch = cfg.channels
        mids = tuple(max(2, c // 2) for c in ch)
        ins = (in_channels,) + ch[:-1]
        self.blocks = nn.ModuleList(
            NestedUBlock(ins[i], mids[i], ch[i], cfg.dilations[i])
            for i in range(5))
        self.pool = nn.MaxPool2d(2, stride=2, ceil_mode=True)
        self.dropout_state = state if state is not None else DropoutState(cfg.dropout_rate)
        # stochastic regularization on the three deepest levels only
        self.drops = nn.ModuleList(
            SeededDropout(self.dropout_state) if i >= 2 else nn.Identity()
            for i in range(5))

    def forward(self, image: torch.Tensor) -> tuple[torch.Tensor, ...]:
        if image.ndim != 4:
            raise ShapeError(f"expected B x C x H x W input, got shape {tuple(image.shape)}")
        h, w = image.shape[2], image.shape[3]
        if self.cfg.strict_input_check and (h % 16 or w % 16):
            raise ShapeError(
                f"input spatial size {h}x{w} must be divisible by 16")
        taps = []
        x = image
        for i in range(5):
            if i > 0:
                x = self.pool(x)
            x = self.drops[i](self.blocks[i](x))
            taps.append(x)
        return tuple(taps)


class FeatureRouter(nn.Module):
    """Builds the three task feature maps from encoder taps.

    Boundary draws on L2..L4, shape on L3..L5, region on L5 alone; every
    contributing tap is resized bilinearly to the L5 grid, concatenated, and
    projected to the common width by a 1x1 conv + batch norm.
    """

    TAP_SETS = {"boundary": (1, 2, 3), "shape": (2, 3, 4), "region": (4,)}

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        ch = cfg.channels
        c = cfg.routed_channels
        self.proj = nn.ModuleDict()
        for role, taps in self.TAP_SETS.items():
            in_ch = sum(ch[i] for i in taps)
            self.proj[role] = nn.Sequential(
                nn.Conv2d(in_ch, c, 1), nn.BatchNorm2d(c))

    def forward(self, taps: tuple[torch.Tensor, ...]) -> dict[str, torch.Tensor]:
        if len(taps) != 5:
            raise ShapeError(f"expected 5 taps, got {len(taps)}")
        batches = {t.shape[0] for t in taps}
        if len(batches) != 1:
            raise ShapeError(f"taps disagree on batch dimension: {sorted(batches)}")
        ref = taps[4]
        out = {}
        for role, idxs in self.TAP_SETS.items():
            stack = [_upsample_like(taps[i], ref) for i in idxs]
            x = stack[0] if len(stack) == 1 else torch.cat(stack, dim=1)
            out[role] = self.proj[role](x)
        return out


class SingleRouter(nn.Module):
    """L5-only routing used by the vessel branch."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.proj = nn.Sequential(
            nn.Conv2d(cfg.channels[4], cfg.routed_channels, 1),
            nn.BatchNorm2d(cfg.routed_channels))

    def forward(self, taps: tuple[torch.Tensor, ...]) -> torch.Tensor:
        return self.proj(taps[4])


class Decoder(nn.Module):
    """Climbs from the L5 grid back to input resolution in four stages,
    concatenating encoder skips L4..L1, and ends in a single-channel head."""

    STAGE_CH = (32, 24, 16, 12)

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        ch = cfg.channels
        skips = (ch[3], ch[2], ch[1], ch[0])
        ins = (cfg.routed_channels,) + self.STAGE_CH[:-1]
        self.stages = nn.ModuleList(
            nn.Sequential(
                REBNCONV(ins[i] + skips[i], self.STAGE_CH[i]),
                REBNCONV(self.STAGE_CH[i], self.STAGE_CH[i]))
            for i in range(4))
        self.head = nn.Conv2d(self.STAGE_CH[-1], 1, 1)
        self.dropout_state: DropoutState | None = None
        self.drops = nn.ModuleList(nn.Identity() for _ in range(4))

    def attach_dropout(self, state: DropoutState) -> None:
        self.dropout_state = state
        self.drops = nn.ModuleList(
            SeededDropout(state) if i < 3 else nn.Identity() for i in range(4))

    def forward(self, feat: torch.Tensor,
                taps: tuple[torch.Tensor, ...]) -> torch.Tensor:
        skips = (taps[3], taps[2], taps[1], taps[0])
        x = feat
        for i, stage in enumerate(self.stages):
            x = _upsample_like(x, skips[i])
            x = self.drops[i](stage(torch.cat((x, skips[i]), dim=1)))
        return self.head(x)


def mask_image(image: torch.Tensor, region_prob: torch.Tensor) -> torch.Tensor:
    """Pixel-wise product of the image with a region probability map."""
    if image.shape != region_prob.shape:
        raise ShapeError(
            f"image shape {tuple(image.shape)} != region_prob shape "
            f"{tuple(region_prob.shape)}")
    lo = float(region_prob.detach().min())
    hi = float(region_prob.detach().max())
    if lo < -1e-6 or hi > 1.0 + 1e-6:
        raise ValidationError(
            f"region_prob values must lie in [0, 1], found [{lo:.3g}, {hi:.3g}]")
    return image * region_prob
