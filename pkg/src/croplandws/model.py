"""Multi-temporal segmentation network.

A shared convolutional encoder embeds every frame of a T x C x H x W cube
into an L+1 level pyramid (level 0 at full resolution, each deeper level
halves the spatial size). A lightweight temporal attention head computes
per-pixel weights over frames at the coarsest level, which are resized to
every level to collapse time; a convolutional decoder with skip connections
restores full resolution, and a softmax head emits per-pixel class
probabilities.

Missing data is handled through the validity raster: invalid frame pixels
enter the encoder as zeros (plus an explicit validity input channel) and are
excluded from temporal attention, which renormalizes over valid frames. At
pixels where every frame is invalid the attention falls back to uniform
weights and a diagnostic counter is incremented.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError
from .sits import SITSCube, normalize_frames

CHECKPOINT_FORMAT_VERSION = 1
_MASK_FILL = -1e30  # pre-softmax score for invalid frames; exp underflows to exactly 0


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    channel_widths has levels+1 entries (level 0 keeps full resolution, each
    deeper level halves it). input_channels counts the cube's reflectance
    channels; the network additionally consumes one validity channel.
    """

    levels: int = 2
    channel_widths: tuple[int, ...] = (16, 32, 64)
    input_channels: int = 4
    classes: int = 2
    attention_heads: int = 4
    attention_key_dim: int = 8
    temporal_positions: int = 12
    use_positional_encoding: bool = True

    def __post_init__(self) -> None:
        if self.levels < 1:
            raise ConfigError(f"levels must be >= 1, got {self.levels}")
        if len(self.channel_widths) != self.levels + 1:
            raise ConfigError(
                f"need levels+1 channel widths, got {len(self.channel_widths)} "
                f"for levels={self.levels}"
            )
        if any(b <= a for a, b in zip(self.channel_widths, self.channel_widths[1:])):
            raise ConfigError("channel widths must strictly increase with depth")
        if self.classes < 2:
            raise ConfigError("need >= 2 classes")


def _norm(channels: int) -> nn.GroupNorm:
    groups = 4 if channels % 4 == 0 else 1
    return nn.GroupNorm(groups, channels)


class _ConvBlock(nn.Module):
    """Two 3x3 convolutions with group norm and ReLU."""

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1),
            _norm(out_ch),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_ch, out_ch, 3, padding=1),
            _norm(out_ch),
            nn.ReLU(inplace=True),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


def sinusoidal_encoding(positions: torch.Tensor, dim: int) -> torch.Tensor:
    """Classic sin/cos positional table for integer period indices, shape (T, dim)."""
    pos = positions.to(torch.float64)[:, None]
    idx = torch.arange(dim, dtype=torch.float64, device=positions.device)
    angle = pos / torch.pow(10000.0, 2.0 * torch.div(idx, 2, rounding_mode="floor") / dim)
    enc = torch.where(idx % 2 == 0, torch.sin(angle), torch.cos(angle))
    return enc


class TemporalAttention(nn.Module):
    """Lightweight temporal attention computed at the coarsest level.

    Per pixel, frame features (plus a sinusoidal encoding of the period
    index) are projected to multi-head keys and scored against one learned
    master query per head; the head-averaged softmax over frames is the
    attention map. Invalid frames get a -1e30 score, so their weight is
    exactly 0; all-invalid pixels degrade to uniform weights.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        dim = cfg.channel_widths[-1]
        self.key_proj = nn.Linear(dim, cfg.attention_heads * cfg.attention_key_dim)
        self.query = nn.Parameter(
            torch.randn(cfg.attention_heads, cfg.attention_key_dim) / math.sqrt(cfg.attention_key_dim)
        )
        self.fallback_pixels = 0  # cumulative all-invalid pixel count (diagnostic)

    def forward(
        self,
        deepest: torch.Tensor,  # B x T x C_L x h x w
        validity: torch.Tensor,  # B x T x h x w (coarsest-level validity)
        period_labels: Sequence[int],
    ) -> torch.Tensor:
        b, t, c, h, w = deepest.shape
        tokens = deepest.permute(0, 3, 4, 1, 2)  # B,h,w,T,C
        if self.cfg.use_positional_encoding:
            pos = torch.as_tensor(list(period_labels), device=deepest.device)
            enc = sinusoidal_encoding(pos, c).to(deepest.dtype)
            tokens = tokens + enc[None, None, None, :, :]
        keys = self.key_proj(tokens).reshape(
            b, h, w, t, self.cfg.attention_heads, self.cfg.attention_key_dim
        )
        scores = (keys * self.query[None, None, None, None]).sum(-1)
        scores = scores / math.sqrt(self.cfg.attention_key_dim)  # B,h,w,T,heads
        invalid = (validity == 0).permute(0, 2, 3, 1)[..., None]  # B,h,w,T,1
        scores = scores.masked_fill(invalid, _MASK_FILL)
        attn = torch.softmax(scores, dim=3).mean(dim=4)  # B,h,w,T
        self.fallback_pixels += int((validity.sum(dim=1) == 0).sum().item())
        return attn.permute(0, 3, 1, 2)  # B,T,h,w


class UTAE(nn.Module):
    """The full network; see the module docstring for the dataflow."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        widths = cfg.channel_widths
        in_ch = cfg.input_channels + 1  # + validity channel
        self.encoder = nn.ModuleList(
            [_ConvBlock(in_ch, widths[0], stride=1)]
            + [_ConvBlock(widths[l], widths[l + 1], stride=2) for l in range(cfg.levels)]
        )
        self.temporal = TemporalAttention(cfg)
        self.fuse_convs = nn.ModuleList(nn.Conv2d(wd, wd, 1) for wd in widths)
        self.up_convs = nn.ModuleList(
            nn.ConvTranspose2d(widths[l + 1], widths[l], 2, stride=2)
            for l in reversed(range(cfg.levels))
        )
        self.dec_blocks = nn.ModuleList(
            _ConvBlock(2 * widths[l], widths[l]) for l in reversed(range(cfg.levels))
        )
        self.head = nn.Conv2d(widths[0], cfg.classes, 1)

    # -- stages ------------------------------------------------------------

    def encode_spatial(self, frames: torch.Tensor) -> list[torch.Tensor]:
        """Embed every frame with the shared encoder.

        frames: B x T x (C+1) x H x W. Returns L+1 tensors, level l shaped
        B x T x C_l x H/2^l x W/2^l.
        """
        b, t, c, h, w = frames.shape
        factor = 2**self.cfg.levels
        if h % factor or w % factor:
            raise ConfigError(f"spatial size {h}x{w} not divisible by 2^levels={factor}")
        x = frames.reshape(b * t, c, h, w)
        pyramid = []
        for block in self.encoder:
            x = block(x)
            pyramid.append(x.reshape(b, t, *x.shape[1:]))
        return pyramid

    def level_validity(self, validity: torch.Tensor, level: int) -> torch.Tensor:
        """Validity pooled to a pyramid level: a coarse cell is valid if any
        covered pixel is (any-pooling keeps partially observed cells usable)."""
        if level == 0:
            return validity
        b, t, h, w = validity.shape
        pooled = F.max_pool2d(validity.reshape(b * t, 1, h, w).float(), 2**level)
        return pooled.reshape(b, t, *pooled.shape[2:])

    def attend_temporal(
        self,
        pyramid: list[torch.Tensor],
        validity: torch.Tensor,
        period_labels: Sequence[int],
    ) -> list[torch.Tensor]:
        """Per-level attention maps (B x T x H_l x W_l), each a distribution
        over valid frames.

        Attention is computed once at the coarsest level, bilinearly resized
        to the other levels, then re-masked against that level's pooled
        validity and renormalized so the per-pixel sum stays 1.
        """
        deep_valid = self.level_validity(validity, self.cfg.levels)
        attn_deep = self.temporal(pyramid[-1], deep_valid, period_labels)
        b, t = attn_deep.shape[:2]
        maps = []
        for level, feats in enumerate(pyramid):
            h_l, w_l = feats.shape[-2:]
            if level == self.cfg.levels:
                a = attn_deep
            else:
                a = F.interpolate(attn_deep, size=(h_l, w_l), mode="bilinear", align_corners=False)
            v = self.level_validity(validity, level).to(a.dtype)
            a = a * v
            s = a.sum(dim=1, keepdim=True)
            uniform = torch.full_like(a, 1.0 / t)
            maps.append(torch.where(s > 0, a / torch.where(s > 0, s, torch.ones_like(s)), uniform))
        return maps

    def fuse_temporal(
        self, pyramid: list[torch.Tensor], attention: list[torch.Tensor]
    ) -> list[torch.Tensor]:
        """Collapse time per level: attention-weighted sum over frames
        followed by the level's shared 1x1 convolution."""
        fused = []
        for feats, attn, conv in zip(pyramid, attention, self.fuse_convs):
            weighted = (feats * attn[:, :, None]).sum(dim=1)
            fused.append(conv(weighted))
        return fused

    def decode(self, fused: list[torch.Tensor]) -> list[torch.Tensor]:
        """Upsample from the deepest fused map, concatenating the matching
        skip at each level. Returns maps ordered deep -> full resolution;
        the last one matches the input size."""
        maps = [fused[-1]]
        d = fused[-1]
        for i, (up, block) in enumerate(zip(self.up_convs, self.dec_blocks)):
            level = self.cfg.levels - 1 - i
            d = block(torch.cat([up(d), fused[level]], dim=1))
            maps.append(d)
        return maps

    def predict(self, decoder_maps: list[torch.Tensor]) -> torch.Tensor:
        """Class probabilities B x K x H x W from the full-resolution map."""
        return torch.softmax(self.head(decoder_maps[-1]), dim=1)

    # -- full pass ----------------------------------------------------------

    def forward(
        self,
        frames: torch.Tensor,
        validity: torch.Tensor,
        period_labels: Sequence[int] | None = None,
    ) -> tuple[torch.Tensor, list[torch.Tensor]]:
        """frames: B x T x (C+1) x H x W with invalid pixels already zeroed;
        validity: B x T x H x W. Returns (probabilities, decoder maps)."""
        if period_labels is None:
            period_labels = list(range(1, frames.shape[1] + 1))
        pyramid = self.encode_spatial(frames)
        attention = self.attend_temporal(pyramid, validity, period_labels)
        fused = self.fuse_temporal(pyramid, attention)
        maps = self.decode(fused)
        return self.predict(maps), maps


def build_model(cfg: ModelConfig, seed: int = 0) -> UTAE:
    """Construct a UTAE with seeded parameter initialization."""
    torch.manual_seed(seed)
    return UTAE(cfg)


def prepare_input(
    cube: SITSCube,
    mean: np.ndarray,
    std: np.ndarray,
    device: torch.device | str = "cpu",
    dtype: torch.dtype = torch.float32,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Model input for one cube: z-scored frames with invalid pixels zeroed,
    plus the validity raster appended as an extra channel.

    Returns (frames 1 x T x (C+1) x H x W, validity 1 x T x H x W).
    """
    frames = normalize_frames(cube.frames, cube.validity, np.asarray(mean), np.asarray(std))
    v = cube.validity.astype(np.float32)
    stacked = np.concatenate([frames, v[:, None]], axis=1)
    ft = torch.as_tensor(stacked, dtype=dtype, device=device)[None]
    vt = torch.as_tensor(cube.validity, dtype=dtype, device=device)[None]
    return ft, vt


# ---------------------------------------------------------------------------
# Checkpoints and inference wrapper
# ---------------------------------------------------------------------------

def save_checkpoint(
    path: str | Path,
    model: UTAE,
    norm_mean: np.ndarray,
    norm_std: np.ndarray,
    extra: dict | None = None,
) -> Path:
    """Self-describing archive: config, named parameters, normalization."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "model_config": asdict(model.cfg),
        "state_dict": model.state_dict(),
        "normalization": {
            "mean": np.asarray(norm_mean, dtype=np.float64).tolist(),
            "std": np.asarray(norm_std, dtype=np.float64).tolist(),
        },
        "extra": extra or {},
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path: str | Path) -> tuple[UTAE, np.ndarray, np.ndarray, dict]:
    """Rebuild the model and normalization statistics from an archive."""
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ConfigError(f"unsupported checkpoint format version {version!r}")
    cfg = ModelConfig(**{**payload["model_config"], "channel_widths": tuple(payload["model_config"]["channel_widths"])})
    model = UTAE(cfg)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    mean = np.asarray(payload["normalization"]["mean"], dtype=np.float64)
    std = np.asarray(payload["normalization"]["std"], dtype=np.float64)
    return model, mean, std, payload.get("extra", {})


class InferenceModel:
    """Frozen-parameter wrapper used by tiled mapping and embedding export."""

    def __init__(self, model: UTAE, norm_mean: np.ndarray, norm_std: np.ndarray):
        self.model = model.eval()
        self.norm_mean = np.asarray(norm_mean, dtype=np.float64)
        self.norm_std = np.asarray(norm_std, dtype=np.float64)

    @classmethod
    def from_checkpoint(cls, path: str | Path) -> "InferenceModel":
        model, mean, std, _ = load_checkpoint(path)
        return cls(model, mean, std)

    @torch.no_grad()
    def predict_probabilities(self, cube: SITSCube) -> np.ndarray:
        """K x h x w class probabilities for one tile."""
        frames, validity = prepare_input(cube, self.norm_mean, self.norm_std)
        probs, _ = self.model(frames, validity, cube.period_labels)
        return probs[0].numpy()

    @torch.no_grad()
    def feature_space(self, cube: SITSCube) -> np.ndarray:
        """D x h x w per-pixel feature distributions (upsampled decoder maps,
        channel-concatenated, softmaxed)."""
        from .weak_supervision import feature_space

        frames, validity = prepare_input(cube, self.norm_mean, self.norm_std)
        _, maps = self.model(frames, validity, cube.period_labels)
        return feature_space(maps)[0].numpy()
