"""Comparison variants without an occurrence module.

``PatchProtoNet`` compares r x r prototype patches against every r x r window
of the feature map and keeps the best match. ``GAPProtoNet`` compares the
globally averaged feature vector against every prototype.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F

from .exceptions import ConfigError
from .model import PrototypeNet, cosine_similarity


def patch_similarity(feature_map: torch.Tensor, prototype_patch: torch.Tensor) -> torch.Tensor:
    """Maximum cosine similarity between a ``(D, r, r)`` patch and all windows of ``(D, H, W)``."""
    sims = patch_similarity_map(feature_map, prototype_patch)
    return sims.max()


def patch_similarity_map(feature_map: torch.Tensor, prototype_patch: torch.Tensor) -> torch.Tensor:
    feature_map = torch.as_tensor(feature_map)
    prototype_patch = torch.as_tensor(prototype_patch, dtype=feature_map.dtype)
    D, H, W = feature_map.shape
    r = prototype_patch.shape[-1]
    if prototype_patch.shape != (D, r, r):
        raise ConfigError(f"prototype patch must be ({D}, r, r), got {tuple(prototype_patch.shape)}")
    if r > H or r > W:
        raise ConfigError(f"patch size r={r} exceeds feature grid {H}x{W}")
    windows = F.unfold(feature_map[None], kernel_size=r)[0].T  # (L, D*r*r)
    sims = cosine_similarity(windows, prototype_patch.reshape(1, -1))
    return sims.view(H - r + 1, W - r + 1)


def gap_pooled_feature(feature_map: torch.Tensor) -> torch.Tensor:
    """Mean feature vector over the spatial grid of a ``(..., D, H, W)`` map."""
    return torch.as_tensor(feature_map).mean(dim=(-2, -1))


class PatchProtoNet(PrototypeNet):
    variant = "patch"

    @property
    def prototype_dim(self) -> int:
        r = self.config.patch_r
        return self.config.feature_dim * r * r

    def prototype_features(self, feature_map, backbone_out, bbox_masks=None):
        if bbox_masks is not None:
            raise ConfigError("box-restricted pooling is only defined for the xprotonet variant")
        r = self.config.patch_r
        windows = F.unfold(feature_map, kernel_size=r).transpose(1, 2)  # (B, L, D*r*r)
        sims = self.similarity(windows[:, None, None], self.prototypes[None, :, :, None])  # (B,C,K,L)
        best_sims, best_idx = sims.max(dim=-1)  # first max on ties
        B, C, K = best_idx.shape
        pooled = torch.gather(
            windows[:, None, None].expand(B, C, K, *windows.shape[1:]),
            3,
            best_idx[..., None, None].expand(B, C, K, 1, windows.shape[-1]),
        ).squeeze(3)
        return pooled, None, best_sims

    @torch.no_grad()
    def footprint_maps(self, feature_map, backbone_out):
        """Binary grid indicator of each prototype's best-matching window."""
        r = self.config.patch_r
        B, _, H, W = feature_map.shape
        windows = F.unfold(feature_map, kernel_size=r).transpose(1, 2)
        sims = self.similarity(windows[:, None, None], self.prototypes[None, :, :, None])
        best = sims.argmax(dim=-1)
        n_cols = W - r + 1
        rows, cols = best // n_cols, best % n_cols
        ii = torch.arange(H).view(1, 1, 1, H, 1)
        jj = torch.arange(W).view(1, 1, 1, 1, W)
        rows, cols = rows[..., None, None], cols[..., None, None]
        inside = (ii >= rows) & (ii < rows + r) & (jj >= cols) & (jj < cols + r)
        return inside.to(feature_map.dtype)


class GAPProtoNet(PrototypeNet):
    variant = "gap"

    def prototype_features(self, feature_map, backbone_out, bbox_masks=None):
        if bbox_masks is not None:
            raise ConfigError("box-restricted pooling is only defined for the xprotonet variant")
        C, K = self.config.num_classes, self.config.prototypes_per_class
        f = gap_pooled_feature(feature_map)
        pooled = f[:, None, None, :].expand(-1, C, K, -1)
        sims = self.similarity(pooled, self.prototypes.unsqueeze(0))
        return pooled, None, sims

    @torch.no_grad()
    def footprint_maps(self, feature_map, backbone_out):
        B, _, H, W = feature_map.shape
        C, K = self.config.num_classes, self.config.prototypes_per_class
        return feature_map.new_ones(B, C, K, H, W)
