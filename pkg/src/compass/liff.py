"""Local implicit filter function: arbitrary-scale inter-layer prediction.

An RDN-style extractor turns the previous reconstruction into features,
which are unfolded (3x3), nearest-neighbour upsampled to the target grid and
fed with the local grid and scale token to an MLP that emits one C x 3 color
filter per target pixel. The prediction is the per-pixel product of the
feature slice and its filter.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import coords
from .config import LiffConfig


class RDB(nn.Module):
    def __init__(self, g0: int, growth: int, n_convs: int):
        super().__init__()
        self.convs = nn.ModuleList(
            nn.Conv2d(g0 + i * growth, growth, 3, padding=1) for i in range(n_convs)
        )
        self.fuse = nn.Conv2d(g0 + n_convs * growth, g0, 1)

    def forward(self, x):
        feats = x
        for conv in self.convs:
            feats = torch.cat([feats, F.relu(conv(feats))], dim=1)
        return self.fuse(feats) + x


class RDNExtractor(nn.Module):
    """Shallow convs, residual dense blocks, global fusion; stride 1 throughout."""

    def __init__(self, cfg: LiffConfig, in_channels: int = 3):
        super().__init__()
        g0 = cfg.n_feats
        self.in_channels = in_channels
        self.sfe1 = nn.Conv2d(in_channels, g0, 3, padding=1)
        self.sfe2 = nn.Conv2d(g0, g0, 3, padding=1)
        self.rdbs = nn.ModuleList(RDB(g0, cfg.growth, cfg.rdb_convs) for _ in range(cfg.n_rdb))
        self.gff = nn.Sequential(
            nn.Conv2d(cfg.n_rdb * g0, g0, 1),
            nn.Conv2d(g0, g0, 3, padding=1),
        )

    def forward(self, x):
        if x.shape[1] != self.in_channels:
            raise ValueError(f"expected {self.in_channels} channels, got {x.shape[1]}")
        f1 = self.sfe1(x)
        h = self.sfe2(f1)
        outs = []
        for rdb in self.rdbs:
            h = rdb(h)
            outs.append(h)
        return self.gff(torch.cat(outs, dim=1)) + f1


class FilterMLP(nn.Module):
    def __init__(self, in_dim: int, hidden: tuple[int, ...], out_dim: int):
        super().__init__()
        layers = []
        last = in_dim
        for width in hidden:
            layers += [nn.Linear(last, width), nn.ReLU()]
            last = width
        layers.append(nn.Linear(last, out_dim))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


def unfold_features(feat: torch.Tensor) -> torch.Tensor:
    """Concatenate each pixel's zero-padded 3x3 neighbourhood: C -> 9C channels."""
    b, c, h, w = feat.shape
    return F.unfold(feat, kernel_size=3, padding=1).view(b, c * 9, h, w)


def upsample_nearest(feat: torch.Tensor, target: tuple[int, int]) -> torch.Tensor:
    ri = torch.from_numpy(coords.axis_correspondence(feat.shape[-2], int(target[0])))
    rj = torch.from_numpy(coords.axis_correspondence(feat.shape[-1], int(target[1])))
    return feat.index_select(-2, ri).index_select(-1, rj)


def pixelwise_predict(feat_flat: torch.Tensor, filters: torch.Tensor) -> torch.Tensor:
    """(..., n, C) features times (..., n, C, 3) filters -> (..., n, 3)."""
    if feat_flat.shape[-2:] != filters.shape[-3:-1]:
        raise ValueError(f"feature {tuple(feat_flat.shape)} and filter {tuple(filters.shape)} shapes disagree")
    return torch.einsum("...nc,...nco->...no", feat_flat, filters)


class LIFF(nn.Module):
    def __init__(self, cfg: LiffConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = RDNExtractor(cfg)
        c = cfg.unfolded
        self.mlp = FilterMLP(c + 4, cfg.mlp_hidden, c * 3)

    def extract_features(self, img: torch.Tensor) -> torch.Tensor:
        return self.encoder(img)

    def generate_filters(self, feat_flat, grid, token):
        if not (feat_flat.shape[:-1] == grid.shape[:-1] == token.shape[:-1]):
            raise ValueError(
                f"batch dims disagree: {tuple(feat_flat.shape)}, {tuple(grid.shape)}, {tuple(token.shape)}"
            )
        out = self.mlp(torch.cat([feat_flat, grid, token], dim=-1))
        return out.view(*feat_flat.shape[:-1], feat_flat.shape[-1], 3)

    def forward(self, prev: torch.Tensor, target: tuple[int, int]) -> torch.Tensor:
        """Predict a (B, 3, H, W) image from the (B, 3, h, w) reconstruction."""
        h, w = int(target[0]), int(target[1])
        src = tuple(prev.shape[-2:])
        feat = upsample_nearest(unfold_features(self.extract_features(prev)), (h, w))
        b, c = feat.shape[:2]
        feat_flat = feat.permute(0, 2, 3, 1).reshape(b, h * w, c)
        grid = torch.from_numpy(coords.local_grid(src, (h, w))).to(feat.dtype)
        token = torch.from_numpy(coords.scale_token(src, (h, w))).to(feat.dtype)
        grid = grid.unsqueeze(0).expand(b, -1, -1)
        token = token.unsqueeze(0).expand(b, -1, -1)
        chunk = self.cfg.query_chunk
        outs = []
        for start in range(0, h * w, chunk):
            sl = slice(start, start + chunk)
            f = self.generate_filters(feat_flat[:, sl], grid[:, sl], token[:, sl])
            outs.append(pixelwise_predict(feat_flat[:, sl], f))
        pred = torch.cat(outs, dim=1)
        return pred.view(b, h, w, 3).permute(0, 3, 1, 2)

    predict = forward
