"""Unsupervised objectives over the multi-modal stream.

Three tasks share one encoder forward per item: masked-token denoising
(the raster is never altered, so vision can help reconstruct text), image
reconstruction through a shallow transposed-conv decoder, and a binary
text-image matching head over the sequence-start feature. Reconstruction
is skipped entirely on mismatched pairs, so its head receives exactly zero
gradient there. The joint loss weights default to 5 / 1 / 5.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import LossWeights, ModelConfig
from .features import CLS_ID, MASK_ID, PAD_ID, Prepared, RESERVED_TOKENS

LTR_CHANNELS = (16, 8)  # decoder feature channels before the final 1-channel map


@dataclass
class PretrainHeads:
    mlm_w: T.Tensor  # [d, vocab]
    mlm_b: T.Tensor  # [vocab]
    ltr_lin_w: T.Tensor  # [d, c0*ph*pw]
    ltr_lin_b: T.Tensor
    ltr_up1_w: T.Tensor  # [c0, c1, 4, 4]
    ltr_up1_b: T.Tensor
    ltr_up2_w: T.Tensor  # [c1, 1, 4, 4]
    ltr_up2_b: T.Tensor
    tdi_w: T.Tensor  # [d, 1]
    tdi_b: T.Tensor  # [1]


def patch_extents(cfg: ModelConfig) -> tuple[int, int]:
    gh, gw = cfg.token_grid
    return cfg.image_size // (4 * gh), cfg.image_size // (4 * gw)


def init_pretrain_heads(rng: T.Rng, cfg: ModelConfig, vocab_size: int) -> PretrainHeads:
    c0, c1 = LTR_CHANNELS
    ph, pw = patch_extents(cfg)

    def p(shape, std=0.02):
        return T.Tensor(rng.normal(shape, std=std), requires_grad=True)

    def z(shape):
        return T.Tensor(np.zeros(shape), requires_grad=True)

    return PretrainHeads(
        mlm_w=p((cfg.d, vocab_size)),
        mlm_b=z((vocab_size,)),
        ltr_lin_w=p((cfg.d, c0 * ph * pw)),
        ltr_lin_b=z((c0 * ph * pw,)),
        ltr_up1_w=p((c0, c1, 4, 4), std=np.sqrt(2.0 / (c0 * 16))),
        ltr_up1_b=z((c1,)),
        ltr_up2_w=p((c1, 1, 4, 4), std=np.sqrt(2.0 / (c1 * 16))),
        ltr_up2_b=z((1,)),
        tdi_w=p((cfg.d, 1)),
        tdi_b=z((1,)),
    )


def pretrain_head_dict(h: PretrainHeads) -> dict:
    return {
        "head.mlm_w": h.mlm_w, "head.mlm_b": h.mlm_b,
        "head.ltr_lin_w": h.ltr_lin_w, "head.ltr_lin_b": h.ltr_lin_b,
        "head.ltr_up1_w": h.ltr_up1_w, "head.ltr_up1_b": h.ltr_up1_b,
        "head.ltr_up2_w": h.ltr_up2_w, "head.ltr_up2_b": h.ltr_up2_b,
        "head.tdi_w": h.tdi_w, "head.tdi_b": h.tdi_b,
    }


# ---------------------------------------------------------------------------
# Corruption and pairing

def apply_mlm_corruption(
    token_ids: np.ndarray,
    mask: np.ndarray,
    rng: T.Rng,
    vocab_size: int,
    rate: float = 0.15,
):
    """BERT-style denoising targets: each real non-[CLS] token is picked
    i.i.d. with probability `rate`; picked tokens become [MASK] 80% of the
    time, a random non-reserved id 10%, unchanged 10%. The image is never
    touched. Returns (corrupted_ids, targets) with -1 at unpicked slots."""
    corrupted = token_ids.copy()
    targets = np.full_like(token_ids, -1)
    n_reserved = len(RESERVED_TOKENS)
    for pos in range(len(token_ids)):
        if not mask[pos] or token_ids[pos] in (PAD_ID, CLS_ID):
            continue
        if rng.random() >= rate:
            continue
        targets[pos] = token_ids[pos]
        r = rng.random()
        if r < 0.8:
            corrupted[pos] = MASK_ID
        elif r < 0.9:
            corrupted[pos] = int(rng.integers(n_reserved, vocab_size))
        # else: keep the original token
    return corrupted, targets


@dataclass
class PretrainBatchItem:
    prep: Prepared
    corrupted_ids: np.ndarray
    mlm_targets: np.ndarray
    encoder_image: T.Tensor  # image fed to the encoder (swapped on mismatch)
    tdi_label: int  # 1 matched, 0 mismatched


def sample_tdi_pairing(items: list[PretrainBatchItem], rng: T.Rng, mismatch_rate: float = 0.2):
    """Independently swap each item's image for another item's with
    probability mismatch_rate. A batch of one stays matched."""
    n = len(items)
    for i, item in enumerate(items):
        if n >= 2 and rng.random() < mismatch_rate:
            j = int(rng.integers(0, n - 1))
            if j >= i:
                j += 1
            item.encoder_image = items[j].prep.image_input
            item.tdi_label = 0
        else:
            item.encoder_image = item.prep.image_input
            item.tdi_label = 1
    return items


def make_batch_items(preps, rng: T.Rng, vocab_size: int, rate: float, mismatch_rate: float):
    items = []
    for k, prep in enumerate(preps):
        ids, targets = apply_mlm_corruption(
            prep.token_ids, prep.mask, rng.derive(k), vocab_size, rate
        )
        items.append(PretrainBatchItem(prep, ids, targets, prep.image_input, 1))
    return sample_tdi_pairing(items, rng.derive(len(preps)), mismatch_rate)


# ---------------------------------------------------------------------------
# Losses

def mm_mlm_loss(mbar: T.Tensor, mlm_targets: np.ndarray, heads: PretrainHeads) -> T.Tensor:
    """Mean cross-entropy over corrupted positions; exact 0 (constant, no
    gradient) when nothing was corrupted."""
    sel = np.flatnonzero(mlm_targets >= 0)
    if sel.size == 0:
        return T.Tensor(0.0)
    logits = T.add(T.matmul(mbar, heads.mlm_w), heads.mlm_b)
    picked = T.embedding_lookup(logits, sel)
    return T.mean(T.cross_entropy_from_logits(picked, mlm_targets[sel]))


def ltr_decode(mbar: T.Tensor, heads: PretrainHeads, cfg: ModelConfig) -> T.Tensor:
    """Tokens [N,d] -> per-token patch -> feature grid by token index ->
    two stride-2 transposed convs -> [1, H, W]."""
    c0, _ = LTR_CHANNELS
    gh, gw = cfg.token_grid
    ph, pw = patch_extents(cfg)
    x = T.add(T.matmul(mbar, heads.ltr_lin_w), heads.ltr_lin_b)  # [N, c0*ph*pw]
    x = T.reshape(x, (gh, gw, c0, ph, pw))
    x = T.transpose(x, (2, 0, 3, 1, 4))  # [c0, gh, ph, gw, pw]
    x = T.reshape(x, (c0, gh * ph, gw * pw))
    x = T.relu(T.transposed_conv2d(x, heads.ltr_up1_w, heads.ltr_up1_b, stride=2, padding=1))
    return T.transposed_conv2d(x, heads.ltr_up2_w, heads.ltr_up2_b, stride=2, padding=1)


def ltr_loss(
    mbar: T.Tensor,
    original_image: T.Tensor,
    heads: PretrainHeads,
    tdi_label: int,
    cfg: ModelConfig,
) -> T.Tensor:
    """Mean smooth-L1 reconstruction error; ignored (exact 0, no gradient)
    on mismatched pairs."""
    if tdi_label == 0:
        return T.Tensor(0.0)
    recon = ltr_decode(mbar, heads, cfg)
    if recon.data.shape != original_image.data.shape:
        raise T.ShapeError(
            f"reconstruction {recon.data.shape} vs image {original_image.data.shape}"
        )
    return T.mean(T.smooth_l1(T.sub(recon, original_image)))


def tdi_loss(mbar: T.Tensor, tdi_label: int, heads: PretrainHeads) -> T.Tensor:
    """Binary match/mismatch from the sequence-start feature through a
    linear head."""
    cls = T.slice(mbar, np.s_[0:1, :])  # [1, d]
    logit = T.add(T.matmul(cls, heads.tdi_w), heads.tdi_b)
    return T.mean(T.binary_cross_entropy_from_logit(logit, float(tdi_label)))


def pretrain_loss(item: PretrainBatchItem, model, heads: PretrainHeads,
                  weights: LossWeights, rng=None):
    """Weighted joint objective for one item: total = mlm*L_mlm + ltr*L_ltr
    + tdi*L_tdi. Returns (total tensor, component floats). rng enables
    train-mode dropout in the encoder."""
    mbar, _, _ = model.forward(item.prep, token_ids=item.corrupted_ids,
                               image_input=item.encoder_image, rng=rng)
    l_mlm = mm_mlm_loss(mbar, item.mlm_targets, heads)
    l_ltr = ltr_loss(mbar, item.encoder_image, heads, item.tdi_label, model.cfg)
    l_tdi = tdi_loss(mbar, item.tdi_label, heads)
    total = T.add(
        T.add(T.scale(l_mlm, weights.mlm), T.scale(l_ltr, weights.ltr)),
        T.scale(l_tdi, weights.tdi),
    )
    components = {
        "mlm": float(l_mlm.data),
        "ltr": float(l_ltr.data),
        "tdi": float(l_tdi.data),
        "total": float(total.data),
    }
    return total, components
