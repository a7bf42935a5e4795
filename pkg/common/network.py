"""
Siamese landmark network: a U-Net shaped branch that predicts a landmark
probability map plus a multi-scale feature pyramid, and a single fully
connected matching head. One branch module serves both images.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from common.config import MODEL_CONFIG

logger = logging.getLogger(__name__)

DOWNSAMPLINGS = 4
HEAD_INPUTS = ("pairwise", "concat")


@dataclass(frozen=True)
class ModelConfig:
    encoder_filters: Tuple[int, ...] = tuple(MODEL_CONFIG["encoder_filters"])
    descriptor_blocks: Tuple[int, ...] = tuple(MODEL_CONFIG["descriptor_blocks"])
    in_channels: int = MODEL_CONFIG["in_channels"]
    head_input: str = MODEL_CONFIG["head_input"]

    def __post_init__(self):
        filters = tuple(int(f) for f in self.encoder_filters)
        blocks = tuple(int(b) for b in self.descriptor_blocks)
        if len(filters) != DOWNSAMPLINGS + 1:
            raise ValueError(f"encoder_filters needs {DOWNSAMPLINGS + 1} entries, got {len(filters)}")
        if any(b != 2 * a for a, b in zip(filters, filters[1:])):
            raise ValueError(f"encoder_filters must double at every block, got {list(filters)}")
        if not blocks or any(b < 0 or b >= len(filters) for b in blocks):
            raise ValueError(f"descriptor_blocks out of range: {list(blocks)}")
        if self.head_input not in HEAD_INPUTS:
            raise ValueError(f"head_input must be one of {HEAD_INPUTS}, got {self.head_input!r}")
        object.__setattr__(self, "encoder_filters", filters)
        object.__setattr__(self, "descriptor_blocks", blocks)

    @property
    def descriptor_dim(self) -> int:
        return sum(self.encoder_filters[b] for b in self.descriptor_blocks)

    @property
    def descriptor_strides(self) -> Tuple[int, ...]:
        return tuple(2 ** b for b in self.descriptor_blocks)

    @property
    def head_input_dim(self) -> int:
        return 2 * self.descriptor_dim

    def to_dict(self) -> dict:
        return {"encoder_filters": list(self.encoder_filters),
                "descriptor_blocks": list(self.descriptor_blocks),
                "in_channels": self.in_channels,
                "head_input": self.head_input}

    @classmethod
    def from_dict(cls, record: dict) -> "ModelConfig":
        return cls(tuple(record["encoder_filters"]), tuple(record["descriptor_blocks"]),
                   int(record.get("in_channels", 1)), record.get("head_input", MODEL_CONFIG["head_input"]))


@dataclass
class FeaturePyramid:
    """Raw feature maps (1, C, h, w) of the descriptor blocks with their strides"""
    levels: List[torch.Tensor]
    strides: Tuple[int, ...]
    image_shape: Tuple[int, int]
    padding: Tuple[int, int] = field(default=(0, 0))


class ConvBlock(nn.Module):
    """Two 3x3 convolutions, each followed by ReLU"""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv = nn.Sequential(
            nn.Conv2d(in_channels, out_channels, kernel_size=3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_channels, out_channels, kernel_size=3, padding=1),
            nn.ReLU(inplace=True)
        )

    def forward(self, x):
        return self.conv(x)


class LandmarkBranch(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        filters = config.encoder_filters

        self.encoders = nn.ModuleList()
        in_channels = config.in_channels
        for out_channels in filters:
            self.encoders.append(ConvBlock(in_channels, out_channels))
            in_channels = out_channels

        self.pool = nn.MaxPool2d(kernel_size=2)
        self.up = nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False)

        # dec[k] merges the upsampled level k+1 with the skip from level k
        self.decoders = nn.ModuleList(
            ConvBlock(filters[k + 1] + filters[k], filters[k]) for k in range(DOWNSAMPLINGS)
        )
        self.final = nn.Conv2d(filters[0], 1, kernel_size=1)

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, List[torch.Tensor]]:
        """x: (N, C, H, W) with H, W divisible by 16; returns (prob (N, H, W), encoder maps)"""
        skips = []
        for k, encoder in enumerate(self.encoders):
            x = encoder(x if k == 0 else self.pool(x))
            skips.append(x)

        x = skips[-1]
        for k in reversed(range(DOWNSAMPLINGS)):
            x = self.decoders[k](torch.cat([self.up(x), skips[k]], dim=1))

        prob = torch.sigmoid(self.final(x))[:, 0]
        return prob, skips


class MatchHead(nn.Module):
    """
    c_hat = sigmoid(W x + b), one fully connected layer over every (f1, f2) pair.

    x is [f1 * f2; (f1 - f2)^2] for head_input="pairwise" and [f1; f2] for
    "concat". Both are 2 * D wide. A linear layer on [f1; f2] separates into
    a_i + b_j, so its row-wise argmax is the same for every i.
    """

    def __init__(self, descriptor_dim: int, head_input: str = "pairwise"):
        super().__init__()
        if head_input not in HEAD_INPUTS:
            raise ValueError(f"head_input must be one of {HEAD_INPUTS}, got {head_input!r}")
        self.descriptor_dim = descriptor_dim
        self.head_input = head_input
        self.fc = nn.Linear(2 * descriptor_dim, 1)

    def logits(self, f1: torch.Tensor, f2: torch.Tensor) -> torch.Tensor:
        if f1.shape[-1] != self.descriptor_dim or f2.shape[-1] != self.descriptor_dim:
            raise ValueError(
                f"Descriptor dimension mismatch: got {f1.shape[-1]} and {f2.shape[-1]}, "
                f"expected {self.descriptor_dim}"
            )
        w1 = self.fc.weight[0, :self.descriptor_dim]
        w2 = self.fc.weight[0, self.descriptor_dim:]
        if self.head_input == "concat":
            # W [f1; f2] split into the two halves, broadcast over all K1 x K2 pairs
            return (f1 @ w1)[:, None] + (f2 @ w2)[None, :] + self.fc.bias[0]

        # w1.(f1*f2) + w2.(f1-f2)^2 expanded into matrix products
        cross = (f1 * (w1 - 2.0 * w2)) @ f2.T
        return cross + ((f1 * f1) @ w2)[:, None] + ((f2 * f2) @ w2)[None, :] + self.fc.bias[0]

    def forward(self, f1: torch.Tensor, f2: torch.Tensor) -> torch.Tensor:
        """f1: (K1, D), f2: (K2, D) -> (K1, K2)"""
        return torch.sigmoid(self.logits(f1, f2))


class LandmarkMatcher(nn.Module):
    """Branch and head; the branch is a single module shared by both inputs"""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.branch = LandmarkBranch(config)
        self.head = MatchHead(config.descriptor_dim, config.head_input)


def init_params(config: ModelConfig, seed: int) -> LandmarkMatcher:
    """Fan-in scaled (He) init for convolutions and the head, zero biases"""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = LandmarkMatcher(config)
        for module in model.modules():
            if isinstance(module, (nn.Conv2d, nn.Linear)):
                nn.init.kaiming_normal_(module.weight, mode="fan_in", nonlinearity="relu")
                nn.init.zeros_(module.bias)
    logger.debug("Initialized model (seed=%d, %d parameters)", seed,
                 sum(p.numel() for p in model.parameters()))
    return model


def _pad_to_multiple(x: torch.Tensor, multiple: int) -> Tuple[torch.Tensor, Tuple[int, int]]:
    height, width = x.shape[-2:]
    pad_h = (-height) % multiple
    pad_w = (-width) % multiple
    if pad_h or pad_w:
        x = F.pad(x, (0, pad_w, 0, pad_h), mode="replicate")
    return x, (pad_h, pad_w)


def forward_branch(model: LandmarkMatcher, images: torch.Tensor) -> Tuple[torch.Tensor, List[FeaturePyramid]]:
    """
    Run the shared branch on a batch of [0,1]-scaled images.

    images: (N, H, W) or (H, W). Inputs are padded bottom/right to a multiple of
    16 and outputs cropped back, so coordinates need no remapping.
    Returns the probability maps (N, H, W) and one FeaturePyramid per image.
    """
    if images.dim() == 2:
        images = images[None]
    if not torch.isfinite(images).all():
        raise ValueError("forward_branch got non-finite input")

    height, width = images.shape[-2:]
    x, padding = _pad_to_multiple(images[:, None], 2 ** DOWNSAMPLINGS)
    prob, skips = model.branch(x)
    prob = prob[:, :height, :width]

    config = model.config
    pyramids = []
    for n in range(images.shape[0]):
        levels = []
        for block in config.descriptor_blocks:
            stride = 2 ** block
            h = -(-height // stride)
            w = -(-width // stride)
            levels.append(skips[block][n:n + 1, :, :h, :w])
        pyramids.append(FeaturePyramid(levels, config.descriptor_strides, (height, width), padding))
    return prob, pyramids


def _bilinear_gather(level: torch.Tensor, rows: torch.Tensor, cols: torch.Tensor) -> torch.Tensor:
    """level (1, C, h, w), fractional node coordinates (K,) -> (K, C); edges clamp"""
    _, _, h, w = level.shape
    r0 = torch.floor(rows).clamp(0, h - 1)
    c0 = torch.floor(cols).clamp(0, w - 1)
    dr = (rows - r0).clamp(0, 1)
    dc = (cols - c0).clamp(0, 1)
    r0 = r0.long()
    c0 = c0.long()
    r1 = (r0 + 1).clamp(max=h - 1)
    c1 = (c0 + 1).clamp(max=w - 1)

    grid = level[0]
    top = grid[:, r0, c0] * (1 - dc) + grid[:, r0, c1] * dc
    bottom = grid[:, r1, c0] * (1 - dc) + grid[:, r1, c1] * dc
    return (top * (1 - dr)[None] + bottom * dr[None]).T


def sample_descriptors(pyramid: FeaturePyramid, points) -> torch.Tensor:
    """
    Bilinearly interpolate every level at point/stride, concatenate, L2-normalize.
    points: (K, 2) (row, col) pixels inside the image. Returns (K, D).
    """
    points = torch.as_tensor(np.asarray(points, dtype=np.float64), dtype=pyramid.levels[0].dtype)
    points = points.reshape(-1, 2)
    channels = sum(level.shape[1] for level in pyramid.levels)
    if points.shape[0] == 0:
        return pyramid.levels[0].new_zeros((0, channels))

    height, width = pyramid.image_shape
    outside = (points[:, 0] < 0) | (points[:, 0] > height - 1) | (points[:, 1] < 0) | (points[:, 1] > width - 1)
    if bool(outside.any()):
        raise ValueError(f"{int(outside.sum())} point(s) lie outside the {height}x{width} image")

    parts = [
        _bilinear_gather(level, points[:, 0] / stride, points[:, 1] / stride)
        for level, stride in zip(pyramid.levels, pyramid.strides)
    ]
    return F.normalize(torch.cat(parts, dim=1), p=2, dim=1, eps=1e-12)


def match_head(model: LandmarkMatcher, f1: torch.Tensor, f2: torch.Tensor) -> torch.Tensor:
    return model.head(f1, f2)


def descriptor_distances(f1: torch.Tensor, f2: torch.Tensor) -> torch.Tensor:
    """Squared L2 distances (K1, K2); exactly 0 for identical descriptors"""
    if f1.shape[0] == 0 or f2.shape[0] == 0:
        return f1.new_zeros((f1.shape[0], f2.shape[0]))
    dist = torch.cdist(f1[None], f2[None], p=2.0, compute_mode="donot_use_mm_for_euclid_dist")[0]
    return dist * dist


def image_tensor(pixels: np.ndarray, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    return torch.as_tensor(np.ascontiguousarray(pixels), dtype=dtype)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def parameter_digest(model: nn.Module) -> Sequence[float]:
    """Cheap fingerprint used in logs and determinism checks"""
    return [float(p.detach().double().sum()) for p in model.parameters()]
