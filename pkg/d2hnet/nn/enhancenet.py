"""
EnhanceNet: full-resolution refinement with hierarchical deformable alignment.

Two feature pyramids are extracted: branch A from concat(s_n, t_up) and
branch B from l_n. At every level (coarse to fine) the long-exposure
features are aligned to the short/deblurred ones with a modulated
deformable convolution whose offsets are predicted from both features and
the upsampled offsets of the coarser level, then fused. A decoder with
skips from the fused features produces a residual added to t_up.
"""
from dataclasses import dataclass
from typing import Optional

import numpy as np

from d2hnet import config
from d2hnet.core.ops import (
    DeformOffsets,
    add,
    bilinear_resize,
    concat_channels,
    leaky_relu,
    scale,
    sigmoid,
    split_channels,
)
from d2hnet.core.tensor import GradNode, as_node
from d2hnet.nn.layers import Conv2d, DeformConv2d, Module, ResidualBlock
from d2hnet.utils.errors import ShapeError
from d2hnet.utils.validators import validate_divisible, validate_same_shape

KERNEL_TAPS = 9


def level_widths(base: int, levels: int) -> list[int]:
    """base * {1, 2, 4, 8, 8, ...}."""
    return [base * min(2 ** i, 8) for i in range(levels)]


def upsample_offsets(offsets: GradNode, height: int, width: int) -> GradNode:
    """Bilinear x2 upsampling of coarser offsets, rescaled to finer pixel units."""
    if (height, width) != (2 * offsets.shape[2], 2 * offsets.shape[3]):
        raise ShapeError(
            f"coarser offsets {offsets.shape[2:]} do not match level extents {(height, width)}"
        )
    return scale(bilinear_resize(offsets, height, width), 2.0)


class FeaturePyramid(Module):
    """Stride-2 conv pyramid; level i has extents H / 2^(i-1)."""

    def __init__(self, in_channels: int, widths: list[int], rng: np.random.Generator,
                 slope: float = config.LEAKY_SLOPE, dtype=np.float32):
        super().__init__()
        self.slope = slope
        self.stages = []
        cin = in_channels
        for i, w in enumerate(widths):
            first = Conv2d(cin, w, 3, rng, stride=1 if i == 0 else 2, slope=slope, dtype=dtype)
            second = Conv2d(w, w, 3, rng, slope=slope, dtype=dtype)
            self.add_module(f"level{i + 1}a", first)
            self.add_module(f"level{i + 1}b", second)
            self.stages.append((first, second))
            cin = w

    def __call__(self, x) -> list[GradNode]:
        feats = []
        for first, second in self.stages:
            x = leaky_relu(second(leaky_relu(first(x), self.slope)), self.slope)
            feats.append(x)
        return feats


class AlignmentLevel(Module):
    """Offset producer c^i, deformable alignment and fusion r^i of one level."""

    def __init__(self, width: int, coarsest: bool, rng: np.random.Generator, residual_layers: int,
                 dense: bool = False, slope: float = config.LEAKY_SLOPE, dtype=np.float32):
        super().__init__()
        self.width = width
        self.coarsest = coarsest
        self.dense = dense
        self.slope = slope
        if not dense:
            extra = 0 if coarsest else 2 * KERNEL_TAPS
            self.offset_conv1 = self.add_module(
                "offset_conv1", Conv2d(2 * width + extra, width, 3, rng, slope=slope, dtype=dtype))
            self.offset_conv2 = self.add_module(
                "offset_conv2", Conv2d(width, 3 * KERNEL_TAPS, 3, rng, gain=0.1, slope=slope, dtype=dtype))
        self.dcn_pack = self.add_module("dcn_pack", DeformConv2d(width, width, 3, rng, slope=slope, dtype=dtype))
        self.fuse_conv = self.add_module("fuse_conv", Conv2d(2 * width, width, 1, rng, slope=slope, dtype=dtype))
        self.fuse_block = self.add_module("fuse_block", ResidualBlock(width, rng, residual_layers, slope, dtype))

    def compute_offsets(self, feat_s: GradNode, feat_l: GradNode,
                        coarser: Optional[GradNode] = None) -> DeformOffsets:
        """Predict offsets and sigmoid mask from both features and the coarser offsets."""
        if self.dense:
            raise RuntimeError("dense alignment level has no offset producer")
        validate_same_shape(feat_s.shape, feat_l.shape, "alignment features")
        if self.coarsest and coarser is not None:
            raise ValueError("coarsest alignment level takes no coarser offsets")
        if not self.coarsest and coarser is None:
            raise ValueError("alignment level needs the coarser level's offsets")

        inputs = [feat_s, feat_l]
        if coarser is not None:
            inputs.append(upsample_offsets(coarser, feat_s.shape[2], feat_s.shape[3]))
        hidden = leaky_relu(self.offset_conv1(concat_channels(*inputs)), self.slope)
        offsets, mask = split_channels(self.offset_conv2(hidden), (2 * KERNEL_TAPS, KERNEL_TAPS))
        return DeformOffsets(offsets=offsets, mask=sigmoid(mask))

    def align(self, feat_l: GradNode, offsets: Optional[DeformOffsets]) -> GradNode:
        return self.dcn_pack(feat_l, offsets)

    def fuse(self, feat_s: GradNode, aligned: GradNode) -> GradNode:
        fused = leaky_relu(self.fuse_conv(concat_channels(feat_s, aligned)), self.slope)
        return self.fuse_block(fused)

    def __call__(self, feat_s: GradNode, feat_l: GradNode,
                 coarser: Optional[GradNode] = None) -> tuple[GradNode, Optional[GradNode]]:
        if self.dense:
            return self.fuse(feat_s, self.align(feat_l, None)), None
        offsets = self.compute_offsets(feat_s, feat_l, coarser)
        return self.fuse(feat_s, self.align(feat_l, offsets)), offsets.offsets


@dataclass
class EnhanceOutput:
    y: GradNode
    offsets: list[Optional[GradNode]]


class EnhanceNet(Module):
    """Refines the upsampled DeblurNet output with both exposures.

    ``dense_alignment`` replaces the deformable alignment with a plain conv,
    ``skip_fusion=False`` drops per-level alignment/fusion and decoder skips
    (the deepest features of both branches are only concatenated), and
    ``tail_block=False`` removes the full-resolution residual block.
    """

    def __init__(
        self,
        rng: np.random.Generator,
        base: int = config.ENHANCE_BASE_WIDTH,
        levels: int = config.PYRAMID_LEVELS,
        residual_layers: int = config.RESIDUAL_LAYERS,
        slope: float = config.LEAKY_SLOPE,
        dense_alignment: bool = False,
        skip_fusion: bool = True,
        tail_block: bool = True,
        dtype=np.float32,
    ):
        super().__init__()
        self.slope = slope
        self.levels = levels
        self.skip_fusion = skip_fusion
        self.widths = level_widths(base, levels)
        w = self.widths

        self.pyramid_s = self.add_module("pyramid_s", FeaturePyramid(6, w, rng, slope, dtype))
        self.pyramid_l = self.add_module("pyramid_l", FeaturePyramid(3, w, rng, slope, dtype))

        self.align_levels: list[Optional[AlignmentLevel]] = [None] * levels
        if skip_fusion:
            for i in range(levels - 1, -1, -1):
                self.align_levels[i] = self.add_module(
                    f"align{i + 1}",
                    AlignmentLevel(w[i], i == levels - 1, rng, residual_layers, dense_alignment, slope, dtype),
                )
        else:
            self.merge_conv = self.add_module(
                "merge_conv", Conv2d(2 * w[-1], w[-1], 1, rng, slope=slope, dtype=dtype))

        self.decoder = []
        for i in range(levels - 2, -1, -1):
            up = self.add_module(f"dec{i + 1}_up", Conv2d(w[i + 1], w[i], 3, rng, slope=slope, dtype=dtype))
            skip_in = 2 * w[i] if skip_fusion else w[i]
            merge = self.add_module(f"dec{i + 1}_merge", Conv2d(skip_in, w[i], 1, rng, slope=slope, dtype=dtype))
            conv = self.add_module(f"dec{i + 1}_conv", Conv2d(w[i], w[i], 3, rng, slope=slope, dtype=dtype))
            self.decoder.append((i, up, merge, conv))

        self.tail = (self.add_module("tail", ResidualBlock(w[0], rng, residual_layers, slope, dtype))
                     if tail_block else None)
        self.out = self.add_module("out", Conv2d(w[0], 3, 3, rng, slope=slope, dtype=dtype))

    @property
    def divisor(self) -> int:
        return 2 ** (self.levels - 1)

    def decoder_modules(self) -> list[Module]:
        """Everything after the fused features (for residual-identity checks)."""
        mods: list[Module] = [m for _, up, merge, conv in self.decoder for m in (up, merge, conv)]
        if self.tail is not None:
            mods.append(self.tail)
        mods.append(self.out)
        return mods

    def _act(self, v: GradNode) -> GradNode:
        return leaky_relu(v, self.slope)

    def forward_with_offsets(self, short_img, long_img, t_up) -> EnhanceOutput:
        short_img = as_node(short_img, "enhance short input")
        long_img = as_node(long_img, "enhance long input")
        t_up = as_node(t_up, "enhance t_up input")
        validate_same_shape(short_img.shape, long_img.shape, "EnhanceNet inputs")
        validate_same_shape(short_img.shape, t_up.shape, "EnhanceNet inputs")
        validate_divisible(short_img.shape[2], short_img.shape[3], self.divisor, "EnhanceNet input")

        feats_s = self.pyramid_s(concat_channels(short_img, t_up))
        feats_l = self.pyramid_l(long_img)

        offsets: list[Optional[GradNode]] = [None] * self.levels
        if self.skip_fusion:
            fused: dict[int, GradNode] = {}
            coarser = None
            for i in range(self.levels - 1, -1, -1):
                fused[i], coarser = self.align_levels[i](feats_s[i], feats_l[i], coarser)
                offsets[i] = coarser
            x = fused[self.levels - 1]
        else:
            fused = {}
            x = self._act(self.merge_conv(concat_channels(feats_s[-1], feats_l[-1])))

        for i, up, merge, conv in self.decoder:
            h, w = feats_s[i].shape[2:]
            x = self._act(up(bilinear_resize(x, h, w)))
            if self.skip_fusion:
                x = concat_channels(x, fused[i])
            x = self._act(merge(x))
            x = self._act(conv(x))

        if self.tail is not None:
            x = self.tail(x)
        return EnhanceOutput(y=add(self.out(x), t_up), offsets=offsets)

    def __call__(self, short_img, long_img, t_up) -> GradNode:
        return self.forward_with_offsets(short_img, long_img, t_up).y
