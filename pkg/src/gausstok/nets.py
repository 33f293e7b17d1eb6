"""Learnable networks for the dual-branch tokenizer.

Contains the convolutional encoder/decoder pair, the vector-quantized grid
branch, the Gaussian parameter head with constraint mapping and a lightweight
sampling-based refinement, the four fusion operators, the patch discriminator,
and the pluggable perceptual feature extractor registry.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .codebook import Codebook, quantize_nn, straight_through
from .splat import splat_autograd

SCALE_EPS = 1e-4
TWO_PI = 2.0 * math.pi
# Cell-relative reach of the position offset: Gaussians stay near their owning
# token but can cross cell borders.
POSITION_REACH = 1.5
# Raw-parameter bias init: scales start around softplus(-3) ~ 0.05 normalized
# units (covers the owning cell), opacities around sigmoid(2) ~ 0.88.
SCALE_RAW_INIT = -3.0
OPACITY_LOGIT_INIT = 2.0
FEATURE_RAW_INIT = 1.0

FUSION_MODES = ("hadamard", "add", "mask_adding", "cross_attention")
BRANCH_MODES = ("vq_gs", "vq_vq")


@dataclass(frozen=True)
class EncoderDecoderConfig:
    """Shape contract of the convolutional trunk.

    The latent grid is input_resolution / downsample_factor per side and the
    token count is its number of cells.
    """

    input_resolution: int = 32
    downsample_factor: int = 4
    channels: int = 8
    base_width: int = 64
    res_blocks: int = 2

    def __post_init__(self):
        r = self.downsample_factor
        if r < 1 or (r & (r - 1)) != 0:
            raise ValueError(f"downsample_factor must be a power of two, got {r}")
        if self.input_resolution % r != 0:
            raise ValueError(
                f"input_resolution {self.input_resolution} not divisible by {r}"
            )

    @property
    def grid_size(self) -> int:
        return self.input_resolution // self.downsample_factor

    @property
    def num_tokens(self) -> int:
        return self.grid_size * self.grid_size

    @property
    def num_stages(self) -> int:
        return int(round(math.log2(self.downsample_factor)))


@dataclass(frozen=True)
class ModelConfig:
    """Everything the tokenizer model needs to build itself."""

    trunk: EncoderDecoderConfig = field(default_factory=EncoderDecoderConfig)
    num_gaussians: int = 1
    fusion_mode: str = "hadamard"
    branch_mode: str = "vq_gs"
    k_vq: int = 1024
    k_geo: int = 1024
    k_feat: int = 1024
    k_opacity: int = 16
    ema_decay: float = 0.99
    commitment_beta: float = 0.25
    refine_steps: int = 1
    per_gaussian_features: bool = False

    def __post_init__(self):
        if self.fusion_mode not in FUSION_MODES:
            raise ValueError(f"unknown fusion mode {self.fusion_mode!r}")
        if self.branch_mode not in BRANCH_MODES:
            raise ValueError(f"unknown branch mode {self.branch_mode!r}")
        if self.num_gaussians < 1:
            raise ValueError("num_gaussians must be >= 1")


def _group_norm(channels: int) -> nn.GroupNorm:
    groups = 8 if channels % 8 == 0 else (4 if channels % 4 == 0 else 1)
    return nn.GroupNorm(groups, channels)


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.norm1 = _group_norm(channels)
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm2 = _group_norm(channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        h = self.conv1(F.relu(self.norm1(x)))
        h = self.conv2(F.relu(self.norm2(h)))
        return x + h


def _stage_widths(base: int, stages: int) -> list[int]:
    return [min(base * 2 ** (i + 1), 8 * base) for i in range(stages)]


class Encoder(nn.Module):
    """Strided convolutional encoder producing the dense latent grid."""

    def __init__(self, cfg: EncoderDecoderConfig):
        super().__init__()
        self.cfg = cfg
        widths = _stage_widths(cfg.base_width, cfg.num_stages)
        layers: list[nn.Module] = [nn.Conv2d(3, cfg.base_width, 3, padding=1)]
        w = cfg.base_width
        for w_next in widths:
            layers.append(nn.Conv2d(w, w_next, 4, stride=2, padding=1))
            layers.extend(ResidualBlock(w_next) for _ in range(cfg.res_blocks))
            w = w_next
        layers += [_group_norm(w), nn.ReLU(), nn.Conv2d(w, cfg.channels, 1)]
        self.net = nn.Sequential(*layers)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        r = self.cfg.input_resolution
        if images.ndim != 4 or images.shape[1] != 3 or images.shape[2] != r or images.shape[3] != r:
            raise ValueError(
                f"expected images of shape (B, 3, {r}, {r}), got {tuple(images.shape)}"
            )
        return self.net(images)


class Decoder(nn.Module):
    """Mirror of the encoder: progressively upsamples the fused latent grid."""

    def __init__(self, cfg: EncoderDecoderConfig):
        super().__init__()
        self.cfg = cfg
        widths = _stage_widths(cfg.base_width, cfg.num_stages)
        w = widths[-1] if widths else cfg.base_width
        layers: list[nn.Module] = [nn.Conv2d(cfg.channels, w, 3, padding=1)]
        layers.extend(ResidualBlock(w) for _ in range(cfg.res_blocks))
        down = [cfg.base_width] + widths[:-1]
        for w_next in reversed(down):
            layers.append(nn.Upsample(scale_factor=2, mode="nearest"))
            layers.append(nn.Conv2d(w, w_next, 3, padding=1))
            layers.extend(ResidualBlock(w_next) for _ in range(cfg.res_blocks))
            w = w_next
        layers += [_group_norm(w), nn.ReLU(), nn.Conv2d(w, 3, 3, padding=1)]
        self.net = nn.Sequential(*layers)

    def forward(self, latent: torch.Tensor) -> torch.Tensor:
        g = self.cfg.grid_size
        if latent.ndim != 4 or latent.shape[1] != self.cfg.channels or latent.shape[2] != g or latent.shape[3] != g:
            raise ValueError(
                f"expected latent of shape (B, {self.cfg.channels}, {g}, {g}), got {tuple(latent.shape)}"
            )
        return torch.sigmoid(self.net(latent))


class PatchDiscriminator(nn.Module):
    """Three stride-2 conv stages plus a 1x1 logit head (receptive field 22 px)."""

    def __init__(self, resolution: int, base_width: int = 32):
        super().__init__()
        self.resolution = resolution
        w = base_width
        self.net = nn.Sequential(
            nn.Conv2d(3, w, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(w, 2 * w, 4, stride=2, padding=1),
            _group_norm(2 * w),
            nn.LeakyReLU(0.2),
            nn.Conv2d(2 * w, 4 * w, 4, stride=2, padding=1),
            _group_norm(4 * w),
            nn.LeakyReLU(0.2),
            nn.Conv2d(4 * w, 1, 1),
        )

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        r = self.resolution
        if images.shape[-2:] != (r, r):
            raise ValueError(f"expected {r}x{r} images, got {tuple(images.shape)}")
        return self.net(images)


# ---------------------------------------------------------------------------
# Gaussian branch


@dataclass(frozen=True)
class GeoCodec:
    """Fixed affine map between constrained Gaussian geometry and 5-vectors.

    Code vectors are (x, y, theta / 2pi, u0, u1) with u = (log s - center) /
    half_range, so the three component groups are commensurate under one plain
    Euclidean norm. The same constants apply at quantization and
    dequantization.
    """

    log_scale_center: float = -3.0
    log_scale_half_range: float = 2.0
    min_scale: float = SCALE_EPS
    max_scale: float = 2.0

    def encode(self, positions, rotations, scales) -> torch.Tensor:
        t = (rotations % TWO_PI) / TWO_PI
        u = (torch.log(scales) - self.log_scale_center) / self.log_scale_half_range
        return torch.cat([positions, t.unsqueeze(-1), u], dim=-1)

    def decode(self, vec5: torch.Tensor):
        positions = vec5[..., 0:2].clamp(0.0, 1.0)
        t = vec5[..., 2]
        rotations = (t - torch.floor(t.detach())) * TWO_PI
        scales = torch.exp(
            self.log_scale_center + vec5[..., 3:5] * self.log_scale_half_range
        ).clamp(self.min_scale, self.max_scale)
        return positions, rotations, scales


@dataclass
class GaussianHeadOutput:
    """Unconstrained per-token Gaussian parameters, M Gaussians per token.

    Raw layout per Gaussian: 2 position offsets, 2 rotation components (mapped
    through atan2), 2 scale logits, 1 opacity logit; features are one d-vector
    per token (or per Gaussian when configured).
    """

    pos_raw: torch.Tensor       # (B, N, M, 2)
    rot_raw: torch.Tensor       # (B, N, M, 2)
    scale_raw: torch.Tensor     # (B, N, M, 2)
    opacity_logit: torch.Tensor  # (B, N, M)
    feature_raw: torch.Tensor   # (B, N, d) or (B, N, M, d)

    def clone(self) -> "GaussianHeadOutput":
        return GaussianHeadOutput(
            self.pos_raw.clone(), self.rot_raw.clone(), self.scale_raw.clone(),
            self.opacity_logit.clone(), self.feature_raw.clone(),
        )


def cell_centers(grid_size: int, dtype, device) -> torch.Tensor:
    """(N, 2) centers of a row-major square grid in normalized coordinates."""
    coords = (torch.arange(grid_size, dtype=dtype, device=device) + 0.5) / grid_size
    cy, cx = torch.meshgrid(coords, coords, indexing="ij")
    return torch.stack([cx.reshape(-1), cy.reshape(-1)], dim=-1)


def constrain_gaussians(out: GaussianHeadOutput, grid_size: int):
    """Map raw head outputs to valid Gaussian parameters.

    positions = cell center + tanh(raw) * 1.5 * cell size, clamped to [0, 1];
    rotation = atan2(raw_sin, raw_cos) in [0, 2pi); scales = softplus(raw) +
    eps; opacity = sigmoid(logit).
    """
    centers = cell_centers(grid_size, out.pos_raw.dtype, out.pos_raw.device)
    reach = POSITION_REACH / grid_size
    positions = (centers[None, :, None, :] + torch.tanh(out.pos_raw) * reach).clamp(0.0, 1.0)
    rotations = torch.atan2(out.rot_raw[..., 0], out.rot_raw[..., 1]) % TWO_PI
    scales = F.softplus(out.scale_raw) + SCALE_EPS
    opacities = torch.sigmoid(out.opacity_logit).clamp_min(1e-8)
    return positions, rotations, scales, opacities


class GaussianHead(nn.Module):
    """Per-cell prediction of M raw Gaussian parameter sets plus token features."""

    def __init__(self, channels: int, num_gaussians: int, per_gaussian_features: bool,
                 hidden: int = 64):
        super().__init__()
        self.channels = channels
        self.num_gaussians = num_gaussians
        self.per_gaussian_features = per_gaussian_features
        m = num_gaussians
        feat_out = channels * (m if per_gaussian_features else 1)
        self.geo_out = 7 * m
        self.body = nn.Sequential(
            nn.Conv2d(channels, hidden, 1),
            nn.ReLU(),
        )
        self.head = nn.Conv2d(hidden, self.geo_out + feat_out, 1)
        with torch.no_grad():
            self.head.weight.normal_(0.0, 0.01)
            bias = torch.tensor(
                [0.0, 0.0, 0.0, 1.0, SCALE_RAW_INIT, SCALE_RAW_INIT, OPACITY_LOGIT_INIT]
            ).repeat(m)
            self.head.bias.copy_(torch.cat([bias, torch.full((feat_out,), FEATURE_RAW_INIT)]))

    def forward(self, latent: torch.Tensor) -> GaussianHeadOutput:
        b, _, h, w = latent.shape
        n = h * w
        m = self.num_gaussians
        raw = self.head(self.body(latent))
        raw = raw.permute(0, 2, 3, 1).reshape(b, n, -1)
        geo = raw[..., : self.geo_out].reshape(b, n, m, 7)
        feat = raw[..., self.geo_out :]
        if self.per_gaussian_features:
            feat = feat.reshape(b, n, m, self.channels)
        return GaussianHeadOutput(
            pos_raw=geo[..., 0:2],
            rot_raw=geo[..., 2:4],
            scale_raw=geo[..., 4:6],
            opacity_logit=geo[..., 6],
            feature_raw=feat,
        )


def bilinear_sample(fmap: torch.Tensor, xy: torch.Tensor) -> torch.Tensor:
    """Sample (B, C, H, W) maps at normalized (B, K, 2) coordinates.

    Uses the same pixel-center convention as the rasterizer ((x+0.5)/W) with
    border replication; differentiable in both the map and the coordinates.
    """
    b, c, h, w = fmap.shape
    x = xy[..., 0] * w - 0.5
    y = xy[..., 1] * h - 0.5
    x0 = torch.floor(x)
    y0 = torch.floor(y)
    wx = x - x0
    wy = y - y0
    x0i = x0.long().clamp(0, w - 1)
    x1i = (x0.long() + 1).clamp(0, w - 1)
    y0i = y0.long().clamp(0, h - 1)
    y1i = (y0.long() + 1).clamp(0, h - 1)
    flat = fmap.reshape(b, c, h * w)

    def gather(yi, xi):
        idx = (yi * w + xi).unsqueeze(1).expand(-1, c, -1)
        return torch.gather(flat, 2, idx)

    v00 = gather(y0i, x0i)
    v01 = gather(y0i, x1i)
    v10 = gather(y1i, x0i)
    v11 = gather(y1i, x1i)
    wx = wx.unsqueeze(1)
    wy = wy.unsqueeze(1)
    top = v00 * (1 - wx) + v01 * wx
    bot = v10 * (1 - wx) + v11 * wx
    return (top * (1 - wy) + bot * wy).permute(0, 2, 1)


class GaussianRefiner(nn.Module):
    """Residual refinement driven by feature samples around each Gaussian.

    Each step bilinearly samples the latent map at the Gaussian's current
    position plus four learned offset points and feeds the concatenated
    samples through a small MLP that emits additive residuals for every raw
    parameter. The final layer is zero-initialized so refinement starts as the
    identity.
    """

    NUM_OFFSETS = 4

    def __init__(self, channels: int, hidden: int = 32):
        super().__init__()
        self.channels = channels
        self.offsets = nn.Parameter(torch.randn(self.NUM_OFFSETS, 2) * 0.05)
        self.mlp = nn.Sequential(
            nn.Linear((self.NUM_OFFSETS + 1) * channels, hidden),
            nn.ReLU(),
            nn.Linear(hidden, 7 + channels),
        )
        with torch.no_grad():
            self.mlp[-1].weight.zero_()
            self.mlp[-1].bias.zero_()

    def forward(self, out: GaussianHeadOutput, latent: torch.Tensor,
                grid_size: int, steps: int) -> GaussianHeadOutput:
        if steps == 0:
            return out
        b, n, m, _ = out.pos_raw.shape
        current = out
        for _ in range(steps):
            positions, _, _, _ = constrain_gaussians(current, grid_size)
            pts = positions.reshape(b, n * m, 2)
            samples = [bilinear_sample(latent, pts)]
            for j in range(self.NUM_OFFSETS):
                samples.append(bilinear_sample(latent, pts + self.offsets[j]))
            stacked = torch.cat(samples, dim=-1)  # (B, N*M, 5*d)
            res = self.mlp(stacked).reshape(b, n, m, 7 + self.channels)
            feat_res = res[..., 7:]
            if current.feature_raw.ndim == 3:
                feat_res = feat_res.mean(dim=2)
            current = GaussianHeadOutput(
                pos_raw=current.pos_raw + res[..., 0:2],
                rot_raw=current.rot_raw + res[..., 2:4],
                scale_raw=current.scale_raw + res[..., 4:6],
                opacity_logit=current.opacity_logit + res[..., 6],
                feature_raw=current.feature_raw + feat_res,
            )
        return current


# ---------------------------------------------------------------------------
# Fusion


def fuse(f_vq: torch.Tensor, f_gs: torch.Tensor, mode: str) -> torch.Tensor:
    """Parameter-free fusion of two aligned feature maps."""
    if f_vq.shape != f_gs.shape:
        raise ValueError(f"shape mismatch: {tuple(f_vq.shape)} vs {tuple(f_gs.shape)}")
    if mode == "hadamard":
        return f_vq * f_gs
    if mode == "add":
        return f_vq + f_gs
    raise ValueError(f"fuse() only handles parameter-free modes, got {mode!r}")


class FusionModule(nn.Module):
    """All four fusion variants behind one forward(f_vq, f_gs) interface."""

    def __init__(self, mode: str, channels: int):
        super().__init__()
        if mode not in FUSION_MODES:
            raise ValueError(f"unknown fusion mode {mode!r}")
        self.mode = mode
        self.channels = channels
        if mode == "mask_adding":
            self.mask_head = nn.Conv2d(channels, 1, 1)
        elif mode == "cross_attention":
            self.to_q = nn.Linear(channels, channels)
            self.to_k = nn.Linear(channels, channels)
            self.to_v = nn.Linear(channels, channels)
            self.proj = nn.Linear(channels, channels)

    def forward(self, f_vq: torch.Tensor, f_gs: torch.Tensor) -> torch.Tensor:
        if f_vq.shape != f_gs.shape:
            raise ValueError(f"shape mismatch: {tuple(f_vq.shape)} vs {tuple(f_gs.shape)}")
        if self.mode in ("hadamard", "add"):
            return fuse(f_vq, f_gs, self.mode)
        if self.mode == "mask_adding":
            return f_vq * torch.sigmoid(self.mask_head(f_vq)) + f_gs
        b, c, h, w = f_vq.shape
        a = f_vq.permute(0, 2, 3, 1).reshape(b, h * w, c)
        g = f_gs.permute(0, 2, 3, 1).reshape(b, h * w, c)
        attn = torch.softmax(
            self.to_q(a) @ self.to_k(g).transpose(1, 2) / math.sqrt(c), dim=-1
        )
        out = a + self.proj(attn @ self.to_v(g))
        return out.reshape(b, h, w, c).permute(0, 3, 1, 2)


# ---------------------------------------------------------------------------
# Perceptual feature extractors

_EXTRACTORS: dict[str, Callable[..., nn.Module]] = {}


def register_extractor(name: str, factory: Callable[..., nn.Module]) -> None:
    _EXTRACTORS[name] = factory


def get_extractor(name: str, **kwargs) -> nn.Module:
    if name not in _EXTRACTORS:
        raise ValueError(
            f"unknown perceptual extractor {name!r}; registered: {sorted(_EXTRACTORS)}"
        )
    return _EXTRACTORS[name](**kwargs)


class RandomMultiScaleExtractor(nn.Module):
    """Frozen, seeded random conv stack producing three maps at halving scales."""

    WIDTHS = (16, 32, 64)

    def __init__(self, seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        w_in = 3
        for i, w_out in enumerate(self.WIDTHS):
            weight = torch.randn(w_out, w_in, 3, 3, generator=gen) / math.sqrt(9 * w_in)
            self.register_buffer(f"weight{i}", weight)
            w_in = w_out

    def forward(self, images: torch.Tensor) -> list[torch.Tensor]:
        maps = []
        h = images
        for i in range(len(self.WIDTHS)):
            w = getattr(self, f"weight{i}").to(h.dtype)
            h = F.relu(F.conv2d(h, w, stride=2, padding=1))
            maps.append(h)
        return maps


class IdentityExtractor(nn.Module):
    """Single layer returning the image itself; reduces the perceptual loss to MSE."""

    def forward(self, images: torch.Tensor) -> list[torch.Tensor]:
        return [images]


register_extractor("random-multiscale", RandomMultiScaleExtractor)
register_extractor("identity", IdentityExtractor)


def perceptual_features(images: torch.Tensor, extractor: nn.Module) -> list[torch.Tensor]:
    """List of feature maps for the multi-layer perceptual distance."""
    return extractor(images)


# ---------------------------------------------------------------------------
# Full model


@dataclass
class TokenIndices:
    """Per-image discrete output of the tokenizer."""

    vq: torch.Tensor               # (B, N)
    geo: Optional[torch.Tensor]    # (B, N, M)
    feat: Optional[torch.Tensor]   # (B, N) or (B, N, M)
    opacity: Optional[torch.Tensor]  # (B, N, M)
    vq2: Optional[torch.Tensor] = None  # (B, N), dual-VQ baseline only


@dataclass
class ModelOutput:
    recon: torch.Tensor
    commitment: torch.Tensor
    f_vq: torch.Tensor
    f_gs: torch.Tensor
    indices: Optional[TokenIndices]
    ema_feeds: dict  # codebook name -> (vectors detached, indices)


class TokenizerModel(nn.Module):
    """Dual-branch tokenizer: VQ grid fused with splatted discrete Gaussians."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        trunk = config.trunk
        self.encoder = Encoder(trunk)
        self.decoder = Decoder(trunk)
        self.fusion = FusionModule(config.fusion_mode, trunk.channels)
        self.geo_codec = GeoCodec()
        d = trunk.channels
        if config.branch_mode == "vq_gs":
            self.gaussian_head = GaussianHead(
                d, config.num_gaussians, config.per_gaussian_features
            )
            self.refiner = GaussianRefiner(d)
        else:
            self.branch2_proj = nn.Conv2d(d, d, 3, padding=1)
        self.codebooks = self._build_codebooks()

    def _build_codebooks(self) -> dict[str, Codebook]:
        cfg = self.config
        d = cfg.trunk.channels
        m = cfg.ema_decay
        books = {"vq": Codebook(torch.randn(cfg.k_vq, d) * 0.1, decay=m)}
        if cfg.branch_mode == "vq_gs":
            books["geo"] = Codebook(torch.randn(cfg.k_geo, 5) * 0.1, decay=m)
            books["feat"] = Codebook(torch.randn(cfg.k_feat, d) * 0.1, decay=m)
            # Opacity levels start uniform in (0, 1]; EMA adapts them later.
            levels = (torch.arange(cfg.k_opacity, dtype=torch.float32) + 1.0) / cfg.k_opacity
            books["opacity"] = Codebook(levels.unsqueeze(1), decay=m)
        else:
            books["vq2"] = Codebook(torch.randn(cfg.k_vq, d) * 0.1, decay=m)
        return books

    # -- shape helpers -----------------------------------------------------

    @property
    def grid_size(self) -> int:
        return self.config.trunk.grid_size

    @property
    def num_tokens(self) -> int:
        return self.config.trunk.num_tokens

    def _cells_from_grid(self, grid: torch.Tensor) -> torch.Tensor:
        b, c, h, w = grid.shape
        return grid.permute(0, 2, 3, 1).reshape(b, h * w, c)

    def _grid_from_cells(self, cells: torch.Tensor) -> torch.Tensor:
        b, n, c = cells.shape
        g = self.grid_size
        return cells.reshape(b, g, g, c).permute(0, 3, 1, 2)

    def _dtype(self):
        return next(self.encoder.parameters()).dtype

    # -- branch computations -------------------------------------------------

    def _vq_branch(self, latent: torch.Tensor, book_name: str, quantize: bool):
        cells = self._cells_from_grid(latent)
        b, n, d = cells.shape
        flat = cells.reshape(b * n, d)
        if not quantize:
            passed = straight_through(flat, flat)
            zero = flat.sum() * 0.0
            return self._grid_from_cells(passed.reshape(b, n, d)), None, zero, flat
        book = self.codebooks[book_name]
        result = quantize_nn(flat, book, beta=self.config.commitment_beta)
        quant = straight_through(flat, result.quantized.to(flat.dtype))
        f_q = self._grid_from_cells(quant.reshape(b, n, d))
        return f_q, result.indices.reshape(b, n), result.commitment_loss, flat

    def _head_raw(self, latent: torch.Tensor) -> GaussianHeadOutput:
        out = self.gaussian_head(latent)
        return self.refiner(out, latent, self.grid_size, self.config.refine_steps)

    def _quantize_gaussians(self, out: GaussianHeadOutput, quantize: bool):
        """Returns splat-ready parameters plus indices, commitment, EMA feeds."""
        cfg = self.config
        beta = cfg.commitment_beta
        b, n, m, _ = out.pos_raw.shape
        positions, rotations, scales, opacities = constrain_gaussians(out, self.grid_size)
        geo5 = self.geo_codec.encode(positions, rotations, scales)
        geo_flat = geo5.reshape(b * n * m, 5)
        opa_flat = opacities.reshape(b * n * m, 1)
        feat = out.feature_raw
        feat_flat = feat.reshape(-1, feat.shape[-1])

        zero = geo_flat.sum() * 0.0
        if not quantize:
            geo_q = straight_through(geo_flat, geo_flat)
            opa_q = straight_through(opa_flat, opa_flat)
            feat_q = straight_through(feat_flat, feat_flat)
            indices = (None, None, None)
            commitment = zero
            feeds = {}
        else:
            geo_res = quantize_nn(geo_flat, self.codebooks["geo"], beta=beta)
            opa_res = quantize_nn(opa_flat, self.codebooks["opacity"], beta=beta)
            feat_res = quantize_nn(feat_flat, self.codebooks["feat"], beta=beta)
            geo_q = straight_through(geo_flat, geo_res.quantized.to(geo_flat.dtype))
            opa_q = straight_through(opa_flat, opa_res.quantized.to(opa_flat.dtype))
            feat_q = straight_through(feat_flat, feat_res.quantized.to(feat_flat.dtype))
            indices = (
                geo_res.indices.reshape(b, n, m),
                feat_res.indices.reshape(b, n, m) if cfg.per_gaussian_features
                else feat_res.indices.reshape(b, n),
                opa_res.indices.reshape(b, n, m),
            )
            commitment = geo_res.commitment_loss + opa_res.commitment_loss + feat_res.commitment_loss
            feeds = {
                "geo": (geo_flat.detach(), geo_res.indices),
                "opacity": (opa_flat.detach(), opa_res.indices),
                "feat": (feat_flat.detach(), feat_res.indices),
            }

        pos_q, rot_q, scl_q = self.geo_codec.decode(geo_q.reshape(b, n, m, 5))
        alpha_q = opa_q.reshape(b, n, m).clamp(1e-8, 1.0)
        if cfg.per_gaussian_features:
            feats = feat_q.reshape(b, n, m, -1)
        else:
            feats = feat_q.reshape(b, n, -1)
        return (pos_q, rot_q, scl_q, alpha_q, feats), indices, commitment, feeds

    def _splat_params(self, params) -> torch.Tensor:
        """Rasterize per-image Gaussian parameters into a (B, d, H, W) map."""
        pos, rot, scl, alpha, feats = params
        b, n, m, _ = pos.shape
        g = self.grid_size
        token_of_gaussian = torch.arange(n).repeat_interleave(m)
        maps = []
        for i in range(b):
            if feats.ndim == 3:
                per_gauss = feats[i][token_of_gaussian]
            else:
                per_gauss = feats[i].reshape(n * m, -1)
            fmap = splat_autograd(
                pos[i].reshape(n * m, 2),
                rot[i].reshape(n * m),
                scl[i].reshape(n * m, 2),
                alpha[i].reshape(n * m),
                per_gauss,
                (g, g),
            )
            maps.append(fmap.permute(2, 0, 1))
        return torch.stack(maps, dim=0)

    # -- public surface ------------------------------------------------------

    def forward(self, images: torch.Tensor, quantize: bool = True) -> ModelOutput:
        latent = self.encoder(images)
        f_vq, vq_idx, vq_commit, vq_raw = self._vq_branch(latent, "vq", quantize)
        ema_feeds = {}
        if quantize and vq_idx is not None:
            ema_feeds["vq"] = (vq_raw.detach(), vq_idx.reshape(-1))

        if self.config.branch_mode == "vq_gs":
            head_out = self._head_raw(latent)
            params, (geo_idx, feat_idx, opa_idx), gs_commit, gs_feeds = \
                self._quantize_gaussians(head_out, quantize)
            f_gs = self._splat_params(params)
            ema_feeds.update(gs_feeds)
            indices = None
            if quantize:
                indices = TokenIndices(vq=vq_idx, geo=geo_idx, feat=feat_idx, opacity=opa_idx)
        else:
            latent2 = self.branch2_proj(latent)
            f_gs, vq2_idx, gs_commit, vq2_raw = self._vq_branch(latent2, "vq2", quantize)
            indices = None
            if quantize:
                ema_feeds["vq2"] = (vq2_raw.detach(), vq2_idx.reshape(-1))
                indices = TokenIndices(vq=vq_idx, geo=None, feat=None, opacity=None, vq2=vq2_idx)

        fused = self.fusion(f_vq, f_gs)
        recon = self.decoder(fused)
        return ModelOutput(
            recon=recon,
            commitment=vq_commit + gs_commit,
            f_vq=f_vq,
            f_gs=f_gs,
            indices=indices,
            ema_feeds=ema_feeds,
        )

    @torch.no_grad()
    def encode_indices(self, images: torch.Tensor) -> TokenIndices:
        return self.forward(images, quantize=True).indices

    @torch.no_grad()
    def decode_indices(self, tokens: TokenIndices) -> torch.Tensor:
        """Reconstruct images from discrete indices alone (no encoder access)."""
        cfg = self.config
        d = cfg.trunk.channels
        b, n = tokens.vq.shape
        m = cfg.num_gaussians
        f_vq = self._grid_from_cells(self.codebooks["vq"].entries[tokens.vq.reshape(-1)]
                                     .reshape(b, n, d).to(self._dtype()))
        if cfg.branch_mode == "vq_gs":
            geo5 = self.codebooks["geo"].entries[tokens.geo.reshape(-1)] \
                .reshape(b, n, m, 5).to(self._dtype())
            pos, rot, scl = self.geo_codec.decode(geo5)
            alpha = self.codebooks["opacity"].entries[tokens.opacity.reshape(-1)] \
                .reshape(b, n, m).to(self._dtype()).clamp(1e-8, 1.0)
            feats = self.codebooks["feat"].entries[tokens.feat.reshape(-1)].to(self._dtype())
            if cfg.per_gaussian_features:
                feats = feats.reshape(b, n, m, d)
            else:
                feats = feats.reshape(b, n, d)
            f_gs = self._splat_params((pos, rot, scl, alpha, feats))
        else:
            if tokens.vq2 is None:
                raise ValueError("dual-VQ model requires vq2 indices")
            f_gs = self._grid_from_cells(self.codebooks["vq2"].entries[tokens.vq2.reshape(-1)]
                                         .reshape(b, n, d).to(self._dtype()))
        return self.decoder(self.fusion(f_vq, f_gs))

    @torch.no_grad()
    def reconstruct(self, images: torch.Tensor) -> torch.Tensor:
        return self.forward(images, quantize=True).recon

    @torch.no_grad()
    def raw_code_vectors(self, images: torch.Tensor) -> dict[str, torch.Tensor]:
        """Unquantized code vectors per codebook, for data-driven initialization."""
        latent = self.encoder(images)
        cells = self._cells_from_grid(latent)
        out = {"vq": cells.reshape(-1, cells.shape[-1])}
        if self.config.branch_mode == "vq_gs":
            head_out = self._head_raw(latent)
            positions, rotations, scales, opacities = constrain_gaussians(head_out, self.grid_size)
            out["geo"] = self.geo_codec.encode(positions, rotations, scales).reshape(-1, 5)
            out["feat"] = head_out.feature_raw.reshape(-1, head_out.feature_raw.shape[-1])
            out["opacity"] = opacities.reshape(-1, 1)
        else:
            cells2 = self._cells_from_grid(self.branch2_proj(latent))
            out["vq2"] = cells2.reshape(-1, cells2.shape[-1])
        return out

    def init_codebooks_from_batch(self, images: torch.Tensor, rng: np.random.Generator) -> None:
        """Resample codebook entries from the first batch's raw vectors.

        The opacity codebook keeps its uniform levels; everything else is
        seeded from data to avoid cold-start collapse.
        """
        raws = self.raw_code_vectors(images)
        for name, book in self.codebooks.items():
            if name == "opacity":
                continue
            self.codebooks[name] = Codebook.init_from_samples(
                raws[name], book.size, rng, decay=book.decay
            )
