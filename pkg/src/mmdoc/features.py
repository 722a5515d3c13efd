"""Encoder input preparation.

Produces the four aligned [N, d] streams a forward pass needs: the text
embedding, the visual embedding, and one spatial embedding per modality
(separate parameter sets, since spatial dependency can be modality
specific), plus the padding mask. Position 0 is always the sequence-start
token, whose spatial record covers the whole page.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .docdata import Document, SpatialRecord, full_page_record, image_to_model_input
from .docdata import normalize_and_bin, pad_record

PAD_ID, CLS_ID, MASK_ID, UNK_ID = 0, 1, 2, 3
RESERVED_TOKENS = ("[PAD]", "[CLS]", "[MASK]", "[UNK]")


class Vocab:
    """Greedy longest-match subword inventory built from a corpus.

    Inventory order is deterministic: single characters first, then longer
    strings, each group lexicographic. Ids 0..3 are reserved.
    """

    def __init__(self, inventory: list[str]):
        self.inventory = list(inventory)
        self.id_of = {tok: i + len(RESERVED_TOKENS) for i, tok in enumerate(self.inventory)}
        self.max_token_len = max((len(t) for t in self.inventory), default=1)

    @property
    def size(self) -> int:
        return len(RESERVED_TOKENS) + len(self.inventory)

    def token_string(self, idx: int) -> str:
        if idx < len(RESERVED_TOKENS):
            return RESERVED_TOKENS[idx]
        return self.inventory[idx - len(RESERVED_TOKENS)]

    @classmethod
    def build(cls, words, max_size: int = 2000) -> "Vocab":
        chars, longer = set(), set()
        for w in words:
            w = w.lower()
            for ch in w:
                chars.add(ch)
            if len(w) > 1:
                longer.add(w)
        inventory = sorted(chars) + sorted(longer)
        return cls(inventory[: max_size - len(RESERVED_TOKENS)])

    def encode_word(self, word: str) -> list[int]:
        word = word.lower()
        ids = []
        i = 0
        while i < len(word):
            match = None
            for j in range(min(len(word), i + self.max_token_len), i, -1):
                if word[i:j] in self.id_of:
                    match = word[i:j]
                    break
            if match is None:
                ids.append(UNK_ID)
                i += 1
            else:
                ids.append(self.id_of[match])
                i += len(match)
        return ids

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for tok in self.inventory:
                f.write(tok + "\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, "r", encoding="utf-8") as f:
            return cls([line.rstrip("\n") for line in f if line.rstrip("\n")])


# ---------------------------------------------------------------------------
# Tokenization

@dataclass
class Tokenized:
    token_ids: np.ndarray  # int64 [N]
    word_index: np.ndarray  # int64 [N], -1 at [CLS]/[PAD]
    mask: np.ndarray  # bool [N], False exactly at [PAD]


def tokenize(doc: Document, vocab: Vocab, n_tokens: int) -> Tokenized:
    """[CLS] + first n_tokens-1 subwords (the rest are ignored), then [PAD]."""
    ids = [CLS_ID]
    widx = [-1]
    for wi, w in enumerate(doc.words):
        if len(ids) >= n_tokens:
            break
        for sub in vocab.encode_word(w.text):
            ids.append(sub)
            widx.append(wi)
            if len(ids) >= n_tokens:
                break
    real = len(ids)
    ids.extend([PAD_ID] * (n_tokens - real))
    widx.extend([-1] * (n_tokens - real))
    mask = np.zeros(n_tokens, dtype=bool)
    mask[:real] = True
    return Tokenized(np.array(ids, dtype=np.int64), np.array(widx, dtype=np.int64), mask)


def token_spatial_records(doc: Document, tok: Tokenized, num_bins: int) -> list[SpatialRecord]:
    """Per-token records: position 0 covers the page, subwords inherit their
    word's record, pads are all-zero. abs_pos is the token position."""
    word_records = normalize_and_bin(doc, num_bins) if doc.words else []
    out = []
    for pos, wi in enumerate(tok.word_index):
        if pos == 0:
            out.append(full_page_record(doc, num_bins, abs_pos=0))
        elif wi < 0:
            out.append(pad_record(pos))
        else:
            out.append(dataclasses.replace(word_records[wi], abs_pos=pos))
    return out


# ---------------------------------------------------------------------------
# Parameters

X_SUBFEATURES = ("x1", "x3", "w", "ax0", "ax1", "ax2", "ax3", "ax4")
Y_SUBFEATURES = ("y1", "y3", "h", "ay0", "ay1", "ay2", "ay3", "ay4")


@dataclass
class SpatialTables:
    """One [num_bins, d] lookup table per scalar sub-feature, plus the
    absolute 1-D position table; the embedding is their sum."""

    tables: dict  # name -> Tensor [num_bins, d]
    p_abs: T.Tensor  # [N, d]


@dataclass
class FeatureParams:
    w_t: T.Tensor  # [vocab, d]
    cnn: list  # [(w, b)] conv blocks, stride 2 each
    conv1x1_w: T.Tensor  # [d, c, 1, 1]
    conv1x1_b: T.Tensor  # [d]
    visual_linear: T.Tensor  # [h_l*w_l, N]
    spatial_text: SpatialTables
    spatial_visual: SpatialTables


def _param(rng: T.Rng, shape, std=0.02) -> T.Tensor:
    return T.Tensor(rng.normal(shape, std=std), requires_grad=True)


def _zeros(shape) -> T.Tensor:
    return T.Tensor(np.zeros(shape), requires_grad=True)


def _spatial_tables(rng: T.Rng, cfg: ModelConfig) -> SpatialTables:
    tables = {}
    for name in X_SUBFEATURES + Y_SUBFEATURES:
        tables[name] = _param(rng, (cfg.num_bins, cfg.d))
    return SpatialTables(tables=tables, p_abs=_param(rng, (cfg.n_tokens, cfg.d)))


def init_feature_params(rng: T.Rng, cfg: ModelConfig, vocab_size: int) -> FeatureParams:
    cnn = []
    c_in = cfg.in_channels
    for c_out in cfg.cnn_channels:
        std = np.sqrt(2.0 / (c_in * 9))
        cnn.append((_param(rng, (c_out, c_in, 3, 3), std=std), _zeros((c_out,))))
        c_in = c_out
    return FeatureParams(
        w_t=_param(rng, (vocab_size, cfg.d)),
        cnn=cnn,
        conv1x1_w=_param(rng, (cfg.d, c_in, 1, 1), std=np.sqrt(2.0 / c_in)),
        conv1x1_b=_zeros((cfg.d,)),
        visual_linear=_param(rng, (cfg.feature_cells, cfg.n_tokens)),
        spatial_text=_spatial_tables(rng, cfg),
        spatial_visual=_spatial_tables(rng, cfg),
    )


def feature_param_dict(p: FeatureParams) -> dict:
    out = {"feat.w_t": p.w_t}
    for i, (w, b) in enumerate(p.cnn):
        out[f"feat.cnn{i}.w"] = w
        out[f"feat.cnn{i}.b"] = b
    out["feat.conv1x1.w"] = p.conv1x1_w
    out["feat.conv1x1.b"] = p.conv1x1_b
    out["feat.visual_linear"] = p.visual_linear
    for modality, tabs in (("text", p.spatial_text), ("visual", p.spatial_visual)):
        for name in X_SUBFEATURES + Y_SUBFEATURES:
            out[f"feat.spatial.{modality}.{name}"] = tabs.tables[name]
        out[f"feat.spatial.{modality}.p_abs"] = tabs.p_abs
    return out


# ---------------------------------------------------------------------------
# Embeddings

def embed_text(params: FeatureParams, token_ids: np.ndarray) -> T.Tensor:
    return T.embedding_lookup(params.w_t, token_ids)


def embed_visual(params: FeatureParams, image_input: T.Tensor, cfg: ModelConfig) -> T.Tensor:
    """Image [1,H,W] -> conv stack -> 1x1 conv to d channels -> flatten ->
    linear over the cell axis -> [N, d]."""
    x = image_input
    for w, b in params.cnn:
        x = T.relu(T.conv2d(x, w, b, stride=2, padding=1))
    x = T.conv2d(x, params.conv1x1_w, params.conv1x1_b)  # [d, hl, wl]
    d = x.data.shape[0]
    cells = x.data.shape[1] * x.data.shape[2]
    if cells != params.visual_linear.data.shape[0]:
        raise T.ShapeError(
            f"visual feature cells {cells} do not match projection "
            f"{params.visual_linear.data.shape}"
        )
    flat = T.reshape(x, (d, cells))
    return T.transpose(T.matmul(flat, params.visual_linear))  # [N, d]


def embed_spatial(params: FeatureParams, records: list[SpatialRecord], modality: str) -> T.Tensor:
    """Sum of the 16 sub-feature lookups plus the absolute-position row."""
    tabs = params.spatial_text if modality == "text" else params.spatial_visual
    feats = {}
    for i, name in enumerate(X_SUBFEATURES):
        feats[name] = np.array([r.x_features()[i] for r in records], dtype=np.int64)
    for i, name in enumerate(Y_SUBFEATURES):
        feats[name] = np.array([r.y_features()[i] for r in records], dtype=np.int64)
    out = T.embedding_lookup(tabs.p_abs, np.array([r.abs_pos for r in records], dtype=np.int64))
    for name in X_SUBFEATURES + Y_SUBFEATURES:
        out = T.add(out, T.embedding_lookup(tabs.tables[name], feats[name]))
    return out


# ---------------------------------------------------------------------------
# Bundles

@dataclass
class Prepared:
    """Parameter-free view of a document, cacheable across training steps."""

    doc_id: str
    token_ids: np.ndarray
    word_index: np.ndarray
    mask: np.ndarray
    records: list[SpatialRecord]
    image_input: T.Tensor
    labels: np.ndarray  # int64 [N], -1 where no label applies
    doc_class: int | None


@dataclass
class FeatureBundle:
    v_bar: T.Tensor
    t_bar: T.Tensor
    v_s: T.Tensor
    t_s: T.Tensor
    mask: np.ndarray
    token_ids: np.ndarray
    records: list[SpatialRecord]


def prepare_document(doc: Document, vocab: Vocab, cfg: ModelConfig) -> Prepared:
    tok = tokenize(doc, vocab, cfg.n_tokens)
    records = token_spatial_records(doc, tok, cfg.num_bins)
    image_input = image_to_model_input(doc.image, (cfg.image_size, cfg.image_size))
    labels = np.full(cfg.n_tokens, -1, dtype=np.int64)
    for pos, wi in enumerate(tok.word_index):
        if wi >= 0 and doc.words[wi].label is not None:
            labels[pos] = doc.words[wi].label
    return Prepared(
        doc_id=doc.id,
        token_ids=tok.token_ids,
        word_index=tok.word_index,
        mask=tok.mask,
        records=records,
        image_input=image_input,
        labels=labels,
        doc_class=doc.doc_class,
    )


def embed_bundle(
    params: FeatureParams,
    cfg: ModelConfig,
    prep: Prepared,
    token_ids: np.ndarray | None = None,
    image_input: T.Tensor | None = None,
) -> FeatureBundle:
    ids = prep.token_ids if token_ids is None else token_ids
    img = prep.image_input if image_input is None else image_input
    return FeatureBundle(
        v_bar=embed_visual(params, img, cfg),
        t_bar=embed_text(params, ids),
        v_s=embed_spatial(params, prep.records, "visual"),
        t_s=embed_spatial(params, prep.records, "text"),
        mask=prep.mask,
        token_ids=ids,
        records=prep.records,
    )
