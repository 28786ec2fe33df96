"""Proposal network for multi-person gaze target detection.

A four-stage convolutional pyramid extracts scene features; a decoder with
lateral connections expands them back to heatmap resolution (``f_dec``). An
intermediate head detection map ``h_det`` is predicted from ``f_dec``, turned
into a single-channel head feature ``f_head`` by one convolution, and
re-injected by concatenation to form ``f_prop``. Three convolutional branches
map ``f_prop`` to N head, gaze and connection heatmaps; a small conv + linear
head maps ``f_dec`` to N out-of-frame logits.

The backbone is a named preset behind ``ModelConfig.backbone_spec`` so that
alternative feature extractors can be swapped in without touching the heads.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

BACKBONE_PRESETS: dict[str, tuple[int, int, int, int]] = {
    # stage channels at strides 2 / 4 / 8 / 16
    "compact": (16, 32, 64, 128),
    "wide": (32, 64, 128, 256),
    "tiny": (3, 4, 6, 8),
}

CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    """Shape and capacity of the proposal network.

    ``input_size`` must be twice the heatmap width: the backbone downsamples
    by 16 and the decoder upsamples by 8, so heatmaps come out at input/2.
    """

    input_size: int = 128
    num_proposals: int = 20
    heatmap_size: tuple[int, int] = (64, 64)  # (m, n)
    decoded_channels: int = 64
    backbone_spec: str = "compact"
    head_hidden: int = 32
    oof_channels: int = 8
    use_head_reinjection: bool = True

    def __post_init__(self):
        if self.num_proposals < 1:
            raise ValueError("num_proposals must be >= 1")
        if self.decoded_channels < 1:
            raise ValueError("decoded_channels must be >= 1")
        m, n = self.heatmap_size
        if m != n:
            raise ValueError(f"heatmap must be square, got {self.heatmap_size}")
        if self.input_size != 2 * m or self.input_size % 16 != 0:
            raise ValueError(
                f"input_size {self.input_size} incompatible with heatmap {self.heatmap_size}: "
                "the decoder chain requires input_size = 2 * heatmap width, divisible by 16"
            )
        if self.backbone_spec not in BACKBONE_PRESETS:
            raise ValueError(
                f"unknown backbone_spec {self.backbone_spec!r}; options: {sorted(BACKBONE_PRESETS)}"
            )
        if m % 4 != 0:
            raise ValueError("heatmap width must be divisible by 4 (out-of-frame head stride)")


@dataclass
class FeatureMaps:
    """Intermediate features exposed for supervision, probing and ablations.

    Shapes carry a leading batch dimension; ``scene(b)`` gives one sample's
    view. ``h_det`` is the clamped-to-[0,1] head detection map.
    """

    f_dec: torch.Tensor  # [B, C, n, m]
    h_det: torch.Tensor  # [B, n, m], clamped to [0, 1]
    f_head: torch.Tensor  # [B, 1, n, m]
    f_prop: torch.Tensor  # [B, C + 1, n, m]

    def scene(self, b: int) -> "FeatureMaps":
        return FeatureMaps(self.f_dec[b], self.h_det[b], self.f_head[b], self.f_prop[b])


@dataclass
class ProposalSet:
    """N predicted head-target instances for a scene (or a batch of scenes).

    Heatmaps are sigmoid outputs in (0, 1); ``oof_logits`` are pre-sigmoid,
    so sigmoid(oof_logits) is the out-of-frame probability per proposal.
    """

    head_maps: torch.Tensor  # [..., N, n, m]
    gaze_maps: torch.Tensor  # [..., N, n, m]
    connection_maps: torch.Tensor  # [..., N, n, m]
    oof_logits: torch.Tensor  # [..., N]

    def scene(self, b: int) -> "ProposalSet":
        return ProposalSet(
            self.head_maps[b], self.gaze_maps[b], self.connection_maps[b], self.oof_logits[b]
        )

    def numpy(self) -> "ProposalSet":
        def conv(t):
            return t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)

        return ProposalSet(
            conv(self.head_maps), conv(self.gaze_maps), conv(self.connection_maps), conv(self.oof_logits)
        )


def _stage(c_in: int, c_out: int, dilation: int = 1) -> nn.Sequential:
    # dilation on the refinement conv widens the receptive field at the deep
    # scales, where head-to-target geometry must be resolved, at no extra cost
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, stride=2, padding=1),
        nn.SiLU(inplace=True),
        nn.Conv2d(c_out, c_out, 3, padding=dilation, dilation=dilation),
        nn.SiLU(inplace=True),
    )


class HeadTargetNet(nn.Module):
    """End-to-end network: scene image in, N head-target proposals out."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c1, c2, c3, c4 = BACKBONE_PRESETS[config.backbone_spec]
        dec = config.decoded_channels
        hid = config.head_hidden
        n_prop = config.num_proposals

        self.stage1 = _stage(3, c1)
        self.stage2 = _stage(c1, c2)
        self.stage3 = _stage(c2, c3, dilation=2)
        self.stage4 = _stage(c3, c4, dilation=2)

        self.up1 = nn.Conv2d(c4, c3, 3, padding=1)
        self.lat3 = nn.Conv2d(c3, c3, 1)
        self.up2 = nn.Conv2d(c3, c2, 3, padding=1)
        self.lat2 = nn.Conv2d(c2, c2, 1)
        self.up3 = nn.Conv2d(c2, dec, 3, padding=1)
        self.lat1 = nn.Conv2d(c1, dec, 1)

        self.det_head = nn.Sequential(
            nn.Conv2d(dec, hid, 3, padding=1), nn.SiLU(inplace=True), nn.Conv2d(hid, 1, 3, padding=1)
        )
        self.head_feature = nn.Conv2d(1, 1, 3, padding=1)

        def branch():
            return nn.Sequential(
                nn.Conv2d(dec + 1, hid, 3, padding=1),
                nn.SiLU(inplace=True),
                nn.Conv2d(hid, n_prop, 3, padding=1),
            )

        self.head_branch = branch()
        self.gaze_branch = branch()
        self.connection_branch = branch()

        m, n = config.heatmap_size
        self.oof_conv = nn.Conv2d(dec, config.oof_channels, 3, stride=4, padding=1)
        self.oof_fc = nn.Linear(config.oof_channels * (m // 4) * (n // 4), n_prop)

    def forward(self, images: torch.Tensor) -> tuple[FeatureMaps, ProposalSet]:
        """Run the network on a [B, 3, S, S] batch.

        Returns feature maps and a proposal set with batched tensors; use
        ``.scene(b)`` on either to obtain per-sample views.
        """
        cfg = self.config
        if images.ndim != 4 or images.shape[1] != 3 or images.shape[-2:] != (cfg.input_size,) * 2:
            raise ValueError(
                f"expected images of shape [B, 3, {cfg.input_size}, {cfg.input_size}], "
                f"got {tuple(images.shape)}"
            )
        c1 = self.stage1(images)
        c2 = self.stage2(c1)
        c3 = self.stage3(c2)
        c4 = self.stage4(c3)

        u = F.silu(self.up1(F.interpolate(c4, scale_factor=2, mode="nearest")) + self.lat3(c3))
        u = F.silu(self.up2(F.interpolate(u, scale_factor=2, mode="nearest")) + self.lat2(c2))
        f_dec = F.silu(self.up3(F.interpolate(u, scale_factor=2, mode="nearest")) + self.lat1(c1))

        h_det = self.det_head(f_dec).clamp(0.0, 1.0)
        f_head = self.head_feature(h_det)
        if not cfg.use_head_reinjection:
            f_head = f_head * 0.0
        f_prop = torch.cat([f_dec, f_head], dim=1)

        features = FeatureMaps(f_dec=f_dec, h_det=h_det.squeeze(1), f_head=f_head, f_prop=f_prop)
        proposals = ProposalSet(
            head_maps=torch.sigmoid(self.head_branch(f_prop)),
            gaze_maps=torch.sigmoid(self.gaze_branch(f_prop)),
            connection_maps=torch.sigmoid(self.connection_branch(f_prop)),
            oof_logits=self.oof_fc(torch.flatten(F.silu(self.oof_conv(f_dec)), 1)),
        )
        return features, proposals


def init_parameters(model: HeadTargetNet, seed: int) -> HeadTargetNet:
    """Deterministic fan-in-scaled initialization.

    Conv and linear weights draw from N(0, 2/fan_in); biases start at zero
    except the detection head's output bias, which starts at 0.5 so the
    clamped detection map begins inside its active range.
    """
    gen = torch.Generator().manual_seed(seed)
    for module in model.modules():
        if isinstance(module, nn.Conv2d):
            fan_in = module.in_channels * module.kernel_size[0] * module.kernel_size[1]
        elif isinstance(module, nn.Linear):
            fan_in = module.in_features
        else:
            continue
        with torch.no_grad():
            module.weight.copy_(
                torch.randn(module.weight.shape, generator=gen, dtype=torch.float32)
                * float(np.sqrt(2.0 / fan_in))
            )
            if module.bias is not None:
                module.bias.zero_()
    with torch.no_grad():
        model.det_head[-1].bias.fill_(0.5)
    return model


def build_model(config: ModelConfig, seed: int = 0) -> HeadTargetNet:
    return init_parameters(HeadTargetNet(config), seed)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def images_to_tensor(images: np.ndarray | list[np.ndarray]) -> torch.Tensor:
    """Stack [S, S, 3] float images into the [B, 3, S, S] tensor forward expects."""
    arr = np.stack(images) if isinstance(images, (list, tuple)) else np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).float()
