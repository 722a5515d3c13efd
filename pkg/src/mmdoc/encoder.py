"""Multi-modal self-attention encoder stack.

Each layer runs two self-attentions: the text branch over the evolving
hidden stream, the visual branch over the fixed visual embedding, which is
re-supplied to every layer as an information residual. Both branches add a
clipped 1-D relative bias (query and key forms) and a spatial score term
computed from the modality's spatial embedding through query/key
projections that are SHARED between the branches. Branch outputs merge by
addition, then the usual projection / residual / layer-norm / FFN follow.

Scaling follows the reference recipe: the key-query and spatial terms are
scaled by 1/sqrt(d_head); the relative terms are not.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .features import FeatureBundle


@dataclass
class LayerParams:
    q_t: T.Tensor
    k_t: T.Tensor
    v_t: T.Tensor
    q_v: T.Tensor
    k_v: T.Tensor
    v_v: T.Tensor
    sq: T.Tensor  # spatial query projection, shared across branches
    sk: T.Tensor  # spatial key projection, shared across branches
    sq_vis: T.Tensor | None  # separate visual copies, only when unshared
    sk_vis: T.Tensor | None
    rel_text: T.Tensor  # [2*span+1, d_head]
    rel_vis: T.Tensor
    out_w: T.Tensor
    out_b: T.Tensor
    ffn1_w: T.Tensor
    ffn1_b: T.Tensor
    ffn2_w: T.Tensor
    ffn2_b: T.Tensor
    ln1_g: T.Tensor
    ln1_b: T.Tensor
    ln2_g: T.Tensor
    ln2_b: T.Tensor


def _param(rng, shape, std=0.02):
    return T.Tensor(rng.normal(shape, std=std), requires_grad=True)


def _zeros(shape):
    return T.Tensor(np.zeros(shape), requires_grad=True)


def _ones(shape):
    return T.Tensor(np.ones(shape), requires_grad=True)


def init_layer_params(rng: T.Rng, cfg: ModelConfig) -> LayerParams:
    d, dh = cfg.d, cfg.d_head
    share = cfg.share_spatial_weights
    return LayerParams(
        q_t=_param(rng, (d, d)),
        k_t=_param(rng, (d, d)),
        v_t=_param(rng, (d, d)),
        q_v=_param(rng, (d, d)),
        k_v=_param(rng, (d, d)),
        v_v=_param(rng, (d, d)),
        sq=_param(rng, (d, d)),
        sk=_param(rng, (d, d)),
        sq_vis=None if share else _param(rng, (d, d)),
        sk_vis=None if share else _param(rng, (d, d)),
        rel_text=_param(rng, (2 * cfg.span + 1, dh)),
        rel_vis=_param(rng, (2 * cfg.span + 1, dh)),
        out_w=_param(rng, (d, d)),
        out_b=_zeros((d,)),
        ffn1_w=_param(rng, (d, 4 * d)),
        ffn1_b=_zeros((4 * d,)),
        ffn2_w=_param(rng, (4 * d, d)),
        ffn2_b=_zeros((d,)),
        ln1_g=_ones((d,)),
        ln1_b=_zeros((d,)),
        ln2_g=_ones((d,)),
        ln2_b=_zeros((d,)),
    )


def init_encoder_params(rng: T.Rng, cfg: ModelConfig) -> list[LayerParams]:
    return [init_layer_params(rng.derive(l), cfg) for l in range(cfg.layers)]


def layer_param_dict(lp: LayerParams, index: int) -> dict:
    out = {}
    for name in (
        "q_t", "k_t", "v_t", "q_v", "k_v", "v_v", "sq", "sk", "sq_vis", "sk_vis",
        "rel_text", "rel_vis", "out_w", "out_b", "ffn1_w", "ffn1_b", "ffn2_w",
        "ffn2_b", "ln1_g", "ln1_b", "ln2_g", "ln2_b",
    ):
        t = getattr(lp, name)
        if t is not None:
            out[f"enc.{index}.{name}"] = t
    return out


def encoder_param_dict(layers: list[LayerParams]) -> dict:
    out = {}
    for i, lp in enumerate(layers):
        out.update(layer_param_dict(lp, i))
    return out


# ---------------------------------------------------------------------------
# Attention pieces

def split_heads(x: T.Tensor, heads: int) -> T.Tensor:
    n, d = x.data.shape
    return T.transpose(T.reshape(x, (n, heads, d // heads)), (1, 0, 2))


def merge_heads(x: T.Tensor) -> T.Tensor:
    h, n, dh = x.data.shape
    return T.reshape(T.transpose(x, (1, 0, 2)), (n, h * dh))


def clipped_offsets(n: int, span: int) -> np.ndarray:
    """offset[i, j] = clamp(j - i, -span, span) + span, an index into the
    relative table."""
    idx = np.arange(n)
    return np.clip(idx[None, :] - idx[:, None], -span, span) + span


def relative_bias(vectors: T.Tensor, rel_table: T.Tensor, span: int, kind: str) -> T.Tensor:
    """bias[h,i,j] = dot(vectors[h,i], table[offset(i,j)]) for kind="query",
    dot(vectors[h,j], table[offset(i,j)]) for kind="key"."""
    heads, n, dh = vectors.data.shape
    rows = T.embedding_lookup(rel_table, clipped_offsets(n, span).reshape(-1))
    grid = T.reshape(rows, (1, n, n, dh))
    if kind == "query":
        v = T.reshape(vectors, (heads, n, 1, dh))
    elif kind == "key":
        v = T.reshape(vectors, (heads, 1, n, dh))
    else:
        raise ValueError(f"kind must be query|key, got {kind!r}")
    return T.sum(T.mul(v, grid), axis=3)


def _key_mask_fill(mask, n: int) -> np.ndarray | None:
    if mask is None:
        return None
    fill = np.where(np.asarray(mask, dtype=bool), 0.0, -np.inf)
    return fill.reshape(1, 1, n)


def modality_attention_scores(
    x_mod: T.Tensor,
    spatial_emb: T.Tensor,
    lp: LayerParams,
    branch: str,
    mask,
    cfg: ModelConfig,
) -> T.Tensor:
    """Four-term attention scores [heads, N, N] for one branch; masked key
    columns are -inf."""
    if branch == "text":
        wq, wk, rel = lp.q_t, lp.k_t, lp.rel_text
        sq, sk = lp.sq, lp.sk
    elif branch == "visual":
        wq, wk, rel = lp.q_v, lp.k_v, lp.rel_vis
        sq = lp.sq if cfg.share_spatial_weights else lp.sq_vis
        sk = lp.sk if cfg.share_spatial_weights else lp.sk_vis
    else:
        raise ValueError(f"branch must be text|visual, got {branch!r}")
    n = x_mod.data.shape[0]
    inv_sqrt = 1.0 / np.sqrt(cfg.d_head)
    q = split_heads(T.matmul(x_mod, wq), cfg.heads)
    k = split_heads(T.matmul(x_mod, wk), cfg.heads)
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 2, 1))), inv_sqrt)
    scores = T.add(scores, relative_bias(q, rel, cfg.span, "query"))
    scores = T.add(scores, relative_bias(k, rel, cfg.span, "key"))
    sp_q = split_heads(T.matmul(spatial_emb, sq), cfg.heads)
    sp_k = split_heads(T.matmul(spatial_emb, sk), cfg.heads)
    scores = T.add(scores, T.scale(T.matmul(sp_q, T.transpose(sp_k, (0, 2, 1))), inv_sqrt))
    fill = _key_mask_fill(mask, n)
    if fill is not None:
        scores = T.add(scores, T.Tensor(fill))
    return scores


def _branch_context(x_mod, spatial_emb, lp, branch, mask, cfg, rng):
    scores = modality_attention_scores(x_mod, spatial_emb, lp, branch, mask, cfg)
    softmax_mask = None if mask is None else np.broadcast_to(
        np.asarray(mask, dtype=bool).reshape(1, 1, -1), scores.data.shape
    )
    probs = T.softmax_rows(scores, mask=softmax_mask)
    mixed = probs if rng is None else T.dropout(probs, cfg.dropout, rng)
    wv = lp.v_t if branch == "text" else lp.v_v
    values = split_heads(T.matmul(x_mod, wv), cfg.heads)
    return T.matmul(mixed, values), probs


def layer_forward(
    hidden: T.Tensor,
    v_bar: T.Tensor,
    v_s: T.Tensor,
    t_s: T.Tensor,
    lp: LayerParams,
    mask,
    cfg: ModelConfig,
    rng: T.Rng | None = None,
):
    """One encoder layer. Text attends the hidden stream with the text
    spatial bias; the visual branch attends the fixed visual embedding with
    the visual spatial bias and no padding mask (visual tokens have no
    pads). Branch contexts merge by addition. rng enables train-time
    dropout at cfg.dropout (default rate 0 keeps everything deterministic)."""
    text_ctx, text_probs = _branch_context(hidden, t_s, lp, "text", mask, cfg, rng)
    vis_ctx, vis_probs = _branch_context(v_bar, v_s, lp, "visual", None, cfg, rng)
    ctx = merge_heads(T.add(text_ctx, vis_ctx))
    attn_out = T.add(T.matmul(ctx, lp.out_w), lp.out_b)
    hidden = T.layer_norm(T.add(hidden, attn_out), lp.ln1_g, lp.ln1_b)
    act = T.gelu(T.add(T.matmul(hidden, lp.ffn1_w), lp.ffn1_b))
    if rng is not None:
        act = T.dropout(act, cfg.dropout, rng)
    ff = T.add(T.matmul(act, lp.ffn2_w), lp.ffn2_b)
    hidden = T.layer_norm(T.add(hidden, ff), lp.ln2_g, lp.ln2_b)
    return hidden, text_probs, vis_probs


def encoder_forward(
    layers: list[LayerParams],
    bundle: FeatureBundle,
    cfg: ModelConfig,
    collect_attention: bool = False,
    rng: T.Rng | None = None,
):
    """Run the stack; returns the final multi-modal stream [N, d] and,
    optionally, per-layer (text, visual) attention probabilities."""
    if cfg.inject_spatial_into_hidden:
        hidden = T.add(bundle.t_bar, bundle.t_s)
    else:
        hidden = bundle.t_bar
    collected = []
    for lp in layers:
        hidden, text_probs, vis_probs = layer_forward(
            hidden, bundle.v_bar, bundle.v_s, bundle.t_s, lp, bundle.mask, cfg, rng
        )
        if collect_attention:
            collected.append((text_probs.data.copy(), vis_probs.data.copy()))
    return hidden, collected


def parameter_count(params: dict) -> int:
    return int(np.sum([t.data.size for t in params.values()]))
