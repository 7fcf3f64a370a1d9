"""The weakly supervised objective.

Supervised part: masked cross-entropy over pixels whose fused label is
high-quality. Unsupervised part: for sampled anchor pixels, the most
similar / most dissimilar pixels (Sorensen-Dice search in the per-pixel
feature distributions) and the most similar 8-neighbor are found, and
KL-divergence terms pull anchors toward similar pixels and neighbors while
pushing them away from dissimilar ones. The dissimilarity term is hinged at
a margin so the objective stays bounded below. Matches are found on a
detached copy of the feature space; gradients flow only through the KL
values, not through the argmax selection.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .fusion import IGNORE

EPS = 1e-8

# 8-neighborhood offsets in ascending linear-index order, so a first-win
# scan implements the lowest-pixel-index tie break.
_NEIGHBOR_OFFSETS = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]


@dataclass(frozen=True)
class LossWeights:
    """Term weights of the combined objective; all nonnegative.

    margin (nats) bounds the dissimilarity term: it contributes
    max(0, margin - KL(anchor, dissimilar)).
    """

    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    margin: float = 1.0
    supervised_weight: float = 1.0

    def __post_init__(self) -> None:
        for name in ("alpha", "beta", "gamma", "margin", "supervised_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


@dataclass
class AnchorSet:
    """Per-anchor match indices (linear pixel ids into the H*W image)."""

    anchors: np.ndarray
    pool: np.ndarray
    similar: np.ndarray
    dissimilar: np.ndarray
    neighbor: np.ndarray


def feature_space(decoder_maps: list[torch.Tensor]) -> torch.Tensor:
    """Fuse decoder maps into per-pixel feature distributions.

    Every map is bilinearly upsampled to the full-resolution map's size and
    channel-concatenated; a softmax over the stacked channels turns each
    pixel into a distribution. Returns B x D x H x W.
    """
    size = decoder_maps[-1].shape[-2:]
    stacked = torch.cat(
        [
            m if m.shape[-2:] == size else F.interpolate(m, size=size, mode="bilinear", align_corners=False)
            for m in decoder_maps
        ],
        dim=1,
    )
    return torch.softmax(stacked, dim=1)


def supervised_loss(
    probs: torch.Tensor,
    labels: torch.Tensor | np.ndarray,
    mask: torch.Tensor | np.ndarray,
) -> torch.Tensor:
    """Masked cross-entropy: mean of -log p(label) over pixels with mask = 1
    and a non-ignore label. Pixels outside the mask contribute exactly
    nothing (they are never touched, so the loss is bit-invariant to them).
    Returns 0 when no pixel contributes.
    """
    single = probs.dim() == 3
    p = probs[None] if single else probs
    lab = torch.as_tensor(np.asarray(labels), dtype=torch.long, device=p.device)
    msk = torch.as_tensor(np.asarray(mask), device=p.device)
    if single:
        lab, msk = lab[None], msk[None]
    contributing = (msk != 0) & (lab != IGNORE)
    if not bool(contributing.any()):
        return p.new_zeros(())
    flat = p.permute(0, 2, 3, 1).reshape(-1, p.shape[1])[contributing.reshape(-1)]
    picked = flat.gather(1, lab.reshape(-1)[contributing.reshape(-1)][:, None]).squeeze(1)
    return -(torch.log(picked.clamp_min(EPS))).mean()


def dice_similarity(z_a: torch.Tensor, z_b: torch.Tensor) -> torch.Tensor:
    """Sorensen-Dice index 2<a,b> / (|a|^2 + |b|^2) over the last dim."""
    num = 2.0 * (z_a * z_b).sum(dim=-1)
    den = (z_a * z_a).sum(dim=-1) + (z_b * z_b).sum(dim=-1)
    return num / den


def kl_divergence(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    """KL(p || q) over the last dim, both clamped below at EPS before logs."""
    pc = p.clamp_min(EPS)
    qc = q.clamp_min(EPS)
    return (pc * (torch.log(pc) - torch.log(qc))).sum(dim=-1)


def sample_anchor_pool(
    n_pixels: int, k: int, m: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Seeded uniform samples without replacement: K anchors and an M pool."""
    anchors = rng.choice(n_pixels, size=min(k, n_pixels), replace=False)
    pool = rng.choice(n_pixels, size=min(m, n_pixels), replace=False)
    return anchors.astype(np.int64), pool.astype(np.int64)


def find_matches(z: torch.Tensor, anchors: np.ndarray, pool: np.ndarray) -> AnchorSet:
    """For each anchor pixel, the most similar and most dissimilar pool pixel
    plus the most similar 8-neighbor, by Dice similarity on the (detached)
    feature distributions. Ties resolve to the lowest linear pixel index; an
    anchor never matches itself.
    """
    if z.dim() != 3:
        raise ValueError("z must be D x H x W")
    d, h, w = z.shape
    if anchors.size == 0 or pool.size == 0:
        raise ValueError("anchors and pool must be nonempty")
    flat = z.detach().reshape(d, -1).T  # N x D
    pool = np.sort(np.asarray(pool, dtype=np.int64))
    anchors = np.asarray(anchors, dtype=np.int64)

    za = flat[torch.as_tensor(anchors)]
    zp = flat[torch.as_tensor(pool)]
    num = 2.0 * (za @ zp.T)
    den = (za * za).sum(1)[:, None] + (zp * zp).sum(1)[None, :]
    sims = (num / den).numpy()

    self_hit = anchors[:, None] == pool[None, :]
    s_pos = np.argmax(np.where(self_hit, -np.inf, sims), axis=1)
    d_pos = np.argmin(np.where(self_hit, np.inf, sims), axis=1)

    rows, cols = anchors // w, anchors % w
    best_sim = np.full(anchors.shape, -np.inf)
    best_idx = np.zeros(anchors.shape, dtype=np.int64)
    for di, dj in _NEIGHBOR_OFFSETS:
        ri, cj = rows + di, cols + dj
        inside = (ri >= 0) & (ri < h) & (cj >= 0) & (cj < w)
        if not inside.any():
            continue
        nbr = (ri * w + cj)[inside]
        s = dice_similarity(flat[torch.as_tensor(anchors[inside])], flat[torch.as_tensor(nbr)]).numpy()
        take = np.zeros(anchors.shape, dtype=bool)
        take[inside] = s > best_sim[inside]
        best_sim[take] = s[take[inside]]
        best_idx[take] = nbr[take[inside]]
    return AnchorSet(
        anchors=anchors,
        pool=pool,
        similar=pool[s_pos],
        dissimilar=pool[d_pos],
        neighbor=best_idx,
    )


def unsupervised_loss(z: torch.Tensor, matches: AnchorSet, w: LossWeights) -> torch.Tensor:
    """alpha * mean KL(anchor, similar) + beta * mean hinge(margin - KL(anchor,
    dissimilar)) + gamma * mean KL(anchor, similar-neighbor).

    The matched distributions act as fixed targets (stop-gradient): only the
    anchor side carries gradients. Two-sided pulls make mutually-matched
    pixels collapse onto each other over long optimization, which destabilizes
    the feature space the terms are meant to protect.
    """
    d = z.shape[0]
    flat = z.reshape(d, -1).T
    zn = flat[torch.as_tensor(matches.anchors)]
    zs = flat[torch.as_tensor(matches.similar)].detach()
    zd = flat[torch.as_tensor(matches.dissimilar)].detach()
    zsn = flat[torch.as_tensor(matches.neighbor)].detach()
    term_sim = kl_divergence(zn, zs).mean()
    term_dis = F.relu(w.margin - kl_divergence(zn, zd)).mean()
    term_nbr = kl_divergence(zn, zsn).mean()
    return w.alpha * term_sim + w.beta * term_dis + w.gamma * term_nbr


def total_loss(
    probs: torch.Tensor,
    decoder_maps: list[torch.Tensor],
    labels: np.ndarray | torch.Tensor,
    mask: np.ndarray | torch.Tensor,
    w: LossWeights,
    rng: np.random.Generator,
    anchors_per_patch: int = 256,
    pool_size: int = 2048,
) -> tuple[torch.Tensor, dict]:
    """Combined objective for one patch's forward outputs.

    supervised_weight * Loss_SL + Loss_USL; a patch with zero high-quality
    pixels receives only the unsupervised part. The anchor/pool sample is
    drawn from `rng` (resampled by the caller every step).
    """
    p = probs.squeeze(0) if probs.dim() == 4 else probs
    maps = [m if m.dim() == 4 else m[None] for m in decoder_maps]
    z = feature_space(maps)[0]

    loss_sl = supervised_loss(p, labels, mask)
    n_sup = int(((np.asarray(mask) != 0) & (np.asarray(labels) != IGNORE)).sum())

    h, wdt = p.shape[-2:]
    anchors, pool = sample_anchor_pool(h * wdt, anchors_per_patch, pool_size, rng)
    matches = find_matches(z, anchors, pool)
    loss_usl = unsupervised_loss(z, matches, w)

    total = w.supervised_weight * loss_sl + loss_usl
    diagnostics = {
        "loss_total": float(total.detach()),
        "loss_sl": float(loss_sl.detach()),
        "loss_usl": float(loss_usl.detach()),
        "mask_fraction": float(np.asarray(mask, dtype=bool).mean()),
        "n_supervised_pixels": n_sup,
        "n_anchors": int(anchors.size),
        "n_pool": int(pool.size),
    }
    return total, diagnostics
