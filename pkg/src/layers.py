"""Equalized-learning-rate layers and the residual discriminator shared by the GAN parts."""

import math
from typing import List, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F


def fused_leaky_relu(x: torch.Tensor, bias: Optional[torch.Tensor] = None, negative_slope: float = 0.2) -> torch.Tensor:
    if bias is not None:
        x = x + bias.view(1, -1, *([1] * (x.dim() - 2)))
    return F.leaky_relu(x, negative_slope) * math.sqrt(2)


class PixelNorm(nn.Module):
    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * torch.rsqrt(torch.mean(x**2, dim=1, keepdim=True) + 1e-8)


class EqualLinear(nn.Module):
    def __init__(self, in_dim: int, out_dim: int, bias: bool = True, bias_init: float = 0.0, lr_mul: float = 1.0, activation: bool = False):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_dim, in_dim).div_(lr_mul))
        self.bias = nn.Parameter(torch.full((out_dim,), float(bias_init))) if bias else None
        self.scale = lr_mul / math.sqrt(in_dim)
        self.lr_mul = lr_mul
        self.activation = activation

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        bias = self.bias * self.lr_mul if self.bias is not None else None
        if self.activation:
            return fused_leaky_relu(F.linear(x, self.weight * self.scale), bias)
        return F.linear(x, self.weight * self.scale, bias=bias)


class EqualConv2d(nn.Module):
    def __init__(self, in_channel: int, out_channel: int, kernel_size: int, stride: int = 1, padding: int = 0, bias: bool = True):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_channel, in_channel, kernel_size, kernel_size))
        self.bias = nn.Parameter(torch.zeros(out_channel)) if bias else None
        self.scale = 1 / math.sqrt(in_channel * kernel_size**2)
        self.stride = stride
        self.padding = padding

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.conv2d(x, self.weight * self.scale, bias=self.bias, stride=self.stride, padding=self.padding)


class DiscConv(nn.Module):
    def __init__(self, in_channel: int, out_channel: int, kernel_size: int, downsample: bool = False, activate: bool = True):
        super().__init__()
        self.conv = EqualConv2d(in_channel, out_channel, kernel_size, padding=kernel_size // 2, bias=activate)
        self.downsample = downsample
        self.activate = activate

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.conv(x)
        if self.downsample:
            x = F.avg_pool2d(x, 2)
        if self.activate:
            x = F.leaky_relu(x, 0.2) * math.sqrt(2)
        return x


class DiscResBlock(nn.Module):
    def __init__(self, in_channel: int, out_channel: int):
        super().__init__()
        self.conv1 = DiscConv(in_channel, in_channel, 3)
        self.conv2 = DiscConv(in_channel, out_channel, 3, downsample=True)
        self.skip = DiscConv(in_channel, out_channel, 1, downsample=True, activate=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return (self.conv2(self.conv1(x)) + self.skip(x)) / math.sqrt(2)


class ResidualDiscriminator(nn.Module):
    """Residual downsampling discriminator over `in_channels` x size x size inputs; one score per image."""

    def __init__(self, in_channels: int, base_channels: int = 32, size: int = 128, max_channels: int = 256):
        super().__init__()
        blocks: List[nn.Module] = [DiscConv(in_channels, base_channels, 1)]
        channels, res = base_channels, size
        while res > 4:
            out = min(channels * 2, max_channels)
            blocks.append(DiscResBlock(channels, out))
            channels, res = out, res // 2
        self.blocks = nn.Sequential(*blocks)
        self.final_conv = DiscConv(channels, channels, 3)
        self.head = nn.Sequential(EqualLinear(channels * 16, channels, activation=True), EqualLinear(channels, 1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.final_conv(self.blocks(x))
        return self.head(x.flatten(1)).squeeze(1)
