"""Convolutional backbone and feature-pyramid pathway.

The bottom-up path is a stack of VGG-style blocks (convs + 2x2 max pool)
whose pool outputs form the maps C, plus a conv-only top group whose output
is the highest map. The top-down path laterally merges them into the
pyramid Z: the top map goes through a 1x1 conv, every lower level is the
3x3-smoothed sum of the upsampled level above and a 1x1 lateral of its
bottom-up map.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

TOP_LEVEL = 5


@dataclass
class BackboneConfig:
    input_size: int = 64
    # (conv count, channel width) per pooled block, base first
    blocks: list = field(default_factory=lambda: [[2, 16], [2, 32], [2, 64], [2, 64]])
    top_convs: int = 2
    feature_dim: int = 32
    levels: tuple = (2, 3, 4, 5)

    def validate(self) -> None:
        if self.feature_dim <= 0:
            raise ValueError("backbone.feature_dim: must be > 0")
        if not self.blocks:
            raise ValueError("backbone.blocks: at least one block required")
        for b in self.blocks:
            if len(b) != 2 or b[0] < 1 or b[1] < 1:
                raise ValueError(f"backbone.blocks: bad entry {b!r}")
        levels = tuple(self.levels)
        if not levels or sorted(set(levels)) != sorted(levels):
            raise ValueError("backbone.levels: must be non-empty and unique")
        if any(l < 2 or l > TOP_LEVEL for l in levels):
            raise ValueError(f"backbone.levels: levels must lie in 2..{TOP_LEVEL}")
        n_pooled = len([l for l in levels if l < TOP_LEVEL])
        if len(self.blocks) < n_pooled:
            raise ValueError(
                f"backbone.blocks: {len(self.blocks)} blocks cannot emit "
                f"{n_pooled} pooled levels"
            )
        if self.input_size % (2 ** len(self.blocks)):
            raise ValueError(
                f"backbone.input_size: {self.input_size} not divisible by "
                f"2^{len(self.blocks)}"
            )
        if self.top_convs < 1:
            raise ValueError("backbone.top_convs: must be >= 1")

    # -- level geometry ------------------------------------------------------
    def block_for_level(self, level: int) -> int:
        """Pooled-block index providing the bottom-up map of ``level`` (< top)."""
        return len(self.blocks) - (TOP_LEVEL - level)

    def level_extent(self, level: int) -> int:
        if level == TOP_LEVEL:
            return self.input_size // 2 ** len(self.blocks)
        return self.input_size // 2 ** (self.block_for_level(level) + 1)

    @property
    def computed_levels(self) -> list:
        """Levels the top-down recursion must produce (top down to the lowest emitted)."""
        return list(range(TOP_LEVEL, min(self.levels) - 1, -1))


def _he_conv(rng, cout, cin, k):
    scale = np.sqrt(2.0 / (cin * k * k))
    return rng.normal(0.0, scale, size=(cout, cin, k, k))


class FeaturePyramidNet:
    """Owns backbone + pyramid parameters; pure function of (weights, input)."""

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        self.params: dict[str, ad.Tensor] = {}
        cin = 1
        for bi, (n_convs, width) in enumerate(cfg.blocks):
            for ci in range(n_convs):
                self._add(f"backbone.block{bi}.conv{ci}.w", _he_conv(rng, width, cin, 3))
                self._add(f"backbone.block{bi}.conv{ci}.b", np.zeros(width))
                cin = width
        top_width = cfg.blocks[-1][1]
        for ci in range(cfg.top_convs):
            self._add(f"backbone.top.conv{ci}.w", _he_conv(rng, top_width, cin, 3))
            self._add(f"backbone.top.conv{ci}.b", np.zeros(top_width))
            cin = top_width
        d = cfg.feature_dim
        for level in cfg.computed_levels:
            src_width = top_width if level == TOP_LEVEL else cfg.blocks[cfg.block_for_level(level)][1]
            self._add(f"fpn.lateral{level}.w", _he_conv(rng, d, src_width, 1))
            self._add(f"fpn.lateral{level}.b", np.zeros(d))
            if level < TOP_LEVEL:
                self._add(f"fpn.smooth{level}.w", _he_conv(rng, d, d, 3))
                self._add(f"fpn.smooth{level}.b", np.zeros(d))

    def _add(self, name, data):
        self.params[name] = ad.Tensor(data, requires_grad=True)

    # -- forward -------------------------------------------------------------
    def bottom_up(self, x: ad.Tensor) -> dict:
        """Input (B, 1, H, H) -> bottom-up maps {level: Tensor}."""
        cfg = self.cfg
        h = x.shape[-1]
        if x.ndim != 4 or x.shape[1] != 1 or x.shape[2] != h or h != cfg.input_size:
            raise ValueError(
                f"bottom_up: expected (B,1,{cfg.input_size},{cfg.input_size}) input, "
                f"got {tuple(x.shape)}"
            )
        maps = {}
        cur = x
        for bi, (n_convs, _) in enumerate(cfg.blocks):
            for ci in range(n_convs):
                cur = ad.relu(ad.conv2d(
                    cur,
                    self.params[f"backbone.block{bi}.conv{ci}.w"],
                    self.params[f"backbone.block{bi}.conv{ci}.b"],
                    stride=1, padding=1,
                ))
            cur = ad.maxpool2d(cur, 2, 2)
            maps[bi] = cur
        for ci in range(cfg.top_convs):
            cur = ad.relu(ad.conv2d(
                cur,
                self.params[f"backbone.top.conv{ci}.w"],
                self.params[f"backbone.top.conv{ci}.b"],
                stride=1, padding=1,
            ))
        out = {TOP_LEVEL: cur}
        for level in cfg.computed_levels:
            if level < TOP_LEVEL:
                out[level] = maps[cfg.block_for_level(level)]
        return out

    def top_down(self, c_maps: dict) -> dict:
        """Bottom-up maps -> pyramid {level: Tensor}, all with feature_dim channels."""
        cfg = self.cfg
        z = {}
        prev = None
        for level in cfg.computed_levels:
            lateral = ad.conv2d(
                c_maps[level],
                self.params[f"fpn.lateral{level}.w"],
                self.params[f"fpn.lateral{level}.b"],
                stride=1, padding=0,
            )
            if level == TOP_LEVEL:
                z[level] = lateral
            else:
                factor = lateral.shape[-1] // prev.shape[-1]
                merged = ad.upsample(prev, factor, "nearest") + lateral
                z[level] = ad.conv2d(
                    merged,
                    self.params[f"fpn.smooth{level}.w"],
                    self.params[f"fpn.smooth{level}.b"],
                    stride=1, padding=1,
                )
            prev = z[level]
        return {l: z[l] for l in cfg.levels}

    def forward(self, x: ad.Tensor) -> dict:
        return self.top_down(self.bottom_up(x))
