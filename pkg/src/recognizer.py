"""Patch-embedding self-attention classifier over 1x128x128 structure masks."""

import torch
import torch.nn as nn

from src.config import STRUCTURE_SIZE


class StructureRecognizer(nn.Module):
    def __init__(self, num_classes: int, dim: int = 128, depth: int = 2, heads: int = 4, patch: int = 16, image_size: int = STRUCTURE_SIZE):
        super().__init__()
        self.num_classes = num_classes
        n_patches = (image_size // patch) ** 2
        self.patch_embed = nn.Conv2d(1, dim, kernel_size=patch, stride=patch)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, n_patches + 1, dim))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        layer = nn.TransformerEncoderLayer(dim, heads, dim_feedforward=dim * 2, dropout=0.0, batch_first=True, norm_first=True)
        self.encoder = nn.TransformerEncoder(layer, depth, enable_nested_tensor=False)
        self.norm = nn.LayerNorm(dim)
        self.head = nn.Linear(dim, num_classes)

    def forward(self, masks: torch.Tensor) -> torch.Tensor:
        x = self.patch_embed(masks).flatten(2).transpose(1, 2)
        cls_tokens = self.cls_token.expand(x.shape[0], -1, -1)
        x = torch.cat((cls_tokens, x), dim=1) + self.pos_embed
        x = self.norm(self.encoder(x))
        return self.head(x[:, 0])

    @torch.no_grad()
    def predict(self, masks: torch.Tensor) -> torch.Tensor:
        return self(masks).argmax(dim=1)


def freeze(module: nn.Module) -> nn.Module:
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    return module
