"""
Codebook-conditioned style-based generator of character structure priors.

The learned 4x4 constant of a StyleGAN2 synthesis network is replaced by a
projection of one codebook row per character; a single style vector w
modulates every layer. There are no noise inputs, so generate(c, w) is a pure
function of its parameters.
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from src.config import STRUCTURE_SIZE, ModelProfile
from src.errors import ConfigError, NonFiniteLossError, PriorIndexError
from src.layers import EqualLinear, PixelNorm, ResidualDiscriminator
from src.losses import hinge_d, hinge_g

logger = logging.getLogger(__name__)

PRIOR_SCALES = (32, 64)


@dataclass
class PriorBundle:
    structure: torch.Tensor
    features: Dict[int, torch.Tensor]

    def select(self, index: int) -> "PriorBundle":
        return PriorBundle(
            structure=self.structure[index : index + 1],
            features={s: f[index : index + 1] for s, f in self.features.items()},
        )


class ModulatedConv2d(nn.Module):
    """Per-sample modulated (and demodulated) convolution; optional bilinear x2 upsampling first."""

    def __init__(self, in_channel: int, out_channel: int, kernel_size: int, style_dim: int, demodulate: bool = True, upsample: bool = False):
        super().__init__()
        self.in_channel = in_channel
        self.out_channel = out_channel
        self.kernel_size = kernel_size
        self.upsample = upsample
        self.demodulate = demodulate
        self.scale = 1 / math.sqrt(in_channel * kernel_size**2)
        self.padding = kernel_size // 2
        self.weight = nn.Parameter(torch.randn(1, out_channel, in_channel, kernel_size, kernel_size))
        self.modulation = EqualLinear(style_dim, in_channel, bias_init=1.0)

    def forward(self, x: torch.Tensor, style: torch.Tensor) -> torch.Tensor:
        if self.upsample:
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        batch, in_channel, height, width = x.shape
        style = self.modulation(style).view(batch, 1, in_channel, 1, 1)
        weight = self.scale * self.weight * style
        if self.demodulate:
            demod = torch.rsqrt(weight.pow(2).sum([2, 3, 4]) + 1e-8)
            weight = weight * demod.view(batch, self.out_channel, 1, 1, 1)
        weight = weight.view(batch * self.out_channel, in_channel, self.kernel_size, self.kernel_size)
        out = F.conv2d(x.reshape(1, batch * in_channel, height, width), weight, padding=self.padding, groups=batch)
        return out.view(batch, self.out_channel, height, width)


class StyledConv(nn.Module):
    def __init__(self, in_channel: int, out_channel: int, style_dim: int, upsample: bool = False):
        super().__init__()
        self.conv = ModulatedConv2d(in_channel, out_channel, 3, style_dim, upsample=upsample)
        self.bias = nn.Parameter(torch.zeros(out_channel))

    def forward(self, x: torch.Tensor, style: torch.Tensor):
        """Returns (pre-activation, activation)."""
        pre = self.conv(x, style) + self.bias.view(1, -1, 1, 1)
        return pre, F.leaky_relu(pre, 0.2) * math.sqrt(2)


class ToStructure(nn.Module):
    def __init__(self, in_channel: int, style_dim: int):
        super().__init__()
        self.conv = ModulatedConv2d(in_channel, 1, 1, style_dim, demodulate=False)
        self.bias = nn.Parameter(torch.zeros(1, 1, 1, 1))

    def forward(self, x: torch.Tensor, style: torch.Tensor, skip: Optional[torch.Tensor] = None) -> torch.Tensor:
        out = self.conv(x, style) + self.bias
        if skip is not None:
            out = out + F.interpolate(skip, scale_factor=2, mode="bilinear", align_corners=False)
        return out


class MappingNetwork(nn.Module):
    def __init__(self, z_dim: int, w_dim: int, n_layers: int = 4, lr_mul: float = 0.01):
        super().__init__()
        layers: List[nn.Module] = [PixelNorm()]
        for i in range(n_layers):
            layers.append(EqualLinear(z_dim if i == 0 else w_dim, w_dim, lr_mul=lr_mul, activation=True))
        self.net = nn.Sequential(*layers)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.net(z)


class Codebook(nn.Module):
    """One learnable code per character. With `sparse` set, lookups give sparse gradients for a row-local optimizer."""

    def __init__(self, num_codes: int, code_dim: int, sparse: bool = False):
        super().__init__()
        self.table = nn.Parameter(torch.randn(num_codes, code_dim))
        self.sparse = sparse

    @property
    def num_codes(self) -> int:
        return self.table.shape[0]

    def forward(self, c_index: torch.Tensor) -> torch.Tensor:
        if c_index.numel() and (int(c_index.min()) < 0 or int(c_index.max()) >= self.num_codes):
            raise PriorIndexError(f"Code index out of range [0, {self.num_codes}): {c_index.tolist()}")
        return F.embedding(c_index, self.table, sparse=self.sparse)


class StructureGenerator(nn.Module):
    """generate(c, w) -> PriorBundle with a 1x128x128 structure and taps at `prior_scales`."""

    def __init__(self, num_codes: int, profile: Optional[ModelProfile] = None, prior_scales: Sequence[int] = PRIOR_SCALES):
        super().__init__()
        profile = profile or ModelProfile()
        self.profile = profile
        self.prior_scales = tuple(sorted(prior_scales))
        self.z_dim = profile.w_dim
        self.w_dim = profile.w_dim
        ch = profile.synthesis_channels

        self.codebook = Codebook(num_codes, profile.code_dim)
        self.mapping = MappingNetwork(self.z_dim, self.w_dim, profile.mapping_layers)
        self.code_proj = EqualLinear(profile.code_dim, ch[4] * 16)

        self.conv1 = StyledConv(ch[4], ch[4], self.w_dim)
        self.to_structure1 = ToStructure(ch[4], self.w_dim)
        self.resolutions = [8, 16, 32, 64, STRUCTURE_SIZE]
        self.up_convs = nn.ModuleList()
        self.convs = nn.ModuleList()
        self.to_structures = nn.ModuleList()
        prev = ch[4]
        for res in self.resolutions:
            self.up_convs.append(StyledConv(prev, ch[res], self.w_dim, upsample=True))
            self.convs.append(StyledConv(ch[res], ch[res], self.w_dim))
            self.to_structures.append(ToStructure(ch[res], self.w_dim))
            prev = ch[res]

    @property
    def num_codes(self) -> int:
        return self.codebook.num_codes

    def feature_channels(self, scale: int) -> int:
        return self.profile.synthesis_channels[scale]

    def synthesis_parameters(self) -> List[nn.Parameter]:
        """Everything except the codebook table."""
        return [p for name, p in self.named_parameters() if name != "codebook.table"]

    def map_latent(self, z: torch.Tensor) -> torch.Tensor:
        return self.mapping(z)

    def forward(self, c_index: torch.Tensor, w: torch.Tensor) -> PriorBundle:
        code = self.codebook(c_index)
        x = self.code_proj(code).view(code.shape[0], -1, 4, 4)
        _, x = self.conv1(x, w)
        skip = self.to_structure1(x, w)
        features: Dict[int, torch.Tensor] = {}
        for res, up, conv, to_structure in zip(self.resolutions, self.up_convs, self.convs, self.to_structures):
            _, x = up(x, w)
            pre, x = conv(x, w)
            if res in self.prior_scales:
                features[res] = pre
            skip = to_structure(x, w, skip)
        return PriorBundle(structure=torch.sigmoid(skip), features=features)

    def generate(self, c_index: torch.Tensor, w: torch.Tensor) -> PriorBundle:
        return self(c_index, w)

    @torch.no_grad()
    def mean_w(self, n: int = 4096, generator: Optional[torch.Generator] = None) -> torch.Tensor:
        z = torch.randn(n, self.z_dim, generator=generator, device=self.codebook.table.device)
        return self.map_latent(z).mean(dim=0, keepdim=True)


def interpolate_w(w1: torch.Tensor, w2: torch.Tensor, steps: int) -> List[torch.Tensor]:
    """Linear interpolation with exact endpoints."""
    if steps < 2:
        raise ConfigError(f"Interpolation needs at least 2 steps, got {steps}")
    ts = [i / (steps - 1) for i in range(steps)]
    return [(1.0 - t) * w1 + t * w2 for t in ts]


class PriorDiscriminator(ResidualDiscriminator):
    """Unconditional discriminator on 1x128x128 structure masks."""

    def __init__(self, base_channels: int = 32):
        super().__init__(1, base_channels)


def _check_finite(losses: Dict[str, torch.Tensor], **diagnostics) -> None:
    for name, value in losses.items():
        if not torch.isfinite(value).all():
            raise NonFiniteLossError(name, float(value.detach().float().mean()), diagnostics)


def pretrain_step(
    generator: StructureGenerator,
    discriminator: PriorDiscriminator,
    recognizer: nn.Module,
    g_optimizer: torch.optim.Optimizer,
    d_optimizer: torch.optim.Optimizer,
    c_index: torch.Tensor,
    z: torch.Tensor,
    gt_renderer: Callable[[torch.Tensor], torch.Tensor],
    lambda_recog: float = 1.0,
    code_optimizer: Optional[torch.optim.Optimizer] = None,
) -> Dict[str, float]:
    """One alternating D/G update. The recognizer must already be frozen.

    With a `code_optimizer` (SparseAdam over a sparse codebook), `g_optimizer` should hold only
    `synthesis_parameters()`; codebook rows absent from `c_index` then stay bit-unchanged.
    """
    g_optimizers = [g_optimizer] + ([code_optimizer] if code_optimizer is not None else [])
    real = gt_renderer(c_index)

    with torch.no_grad():
        fake = generator(c_index, generator.map_latent(z)).structure
    adv_d = hinge_d(discriminator(real), discriminator(fake))
    _check_finite({"adv_d": adv_d}, codes=c_index.tolist())
    d_optimizer.zero_grad(set_to_none=True)
    adv_d.backward()
    d_optimizer.step()

    structure = generator(c_index, generator.map_latent(z)).structure
    adv_g = hinge_g(discriminator(structure))
    recog = F.cross_entropy(recognizer(structure), c_index)
    total = adv_g + lambda_recog * recog if lambda_recog else adv_g
    _check_finite({"adv_g": adv_g, "recog": recog, "total": total}, codes=c_index.tolist())
    for opt in g_optimizers:
        opt.zero_grad(set_to_none=True)
    total.backward()
    for opt in g_optimizers:
        opt.step()
    return {"adv_d": float(adv_d), "adv_g": float(adv_g), "recog": float(recog), "total": float(total)}
