"""Synthetic form-document generator.

Each page is a fixed 8-row grid; a row holds one leading word and two
trailing words. In an "ambiguous" row the leading word comes from a key
pool and is either a header (drawn with a gray underline) or a question
(no underline) with equal probability; the trailing words are answers when
the row is a question and background otherwise. Text and geometry are
identically distributed in both cases, so header/question (and the
answer/other status of the trailing words) are decidable only from the
raster. The document class is likewise encoded purely by gray page
decorations, never by words or layout.

Glyphs are rendered black with a 5x7 bitmap font whose every row and
column carries ink; all cue ink (underlines, class marks) is mid-gray.
Re-parsing black glyph blocks therefore recovers the word boxes exactly
while the cues stay visible to a vision model.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .docdata import DataError, Document, WordBox
from .tensor import Rng

LABEL_NAMES = ("other", "header", "question", "answer")
OTHER, HEADER, QUESTION, ANSWER = 0, 1, 2, 3
VISION_DEPENDENT_CLASSES = (HEADER, QUESTION, ANSWER)
N_DOC_CLASSES = 3

GLYPH_W, GLYPH_H, GLYPH_PITCH = 5, 7, 6
INK, CUE = 0, 128

GRID_ROWS = 8
ROW_Y0, ROW_DY = 26, 26
SLOT_XS = (24, 120, 190)
# underline bar: fixed width so geometry stays label-free, thick enough to
# survive a 4x nearest-neighbor downsample with pixels to spare
UNDERLINE_DY, UNDERLINE_THICKNESS, UNDERLINE_WIDTH = 9, 12, 88

_FONT_ROWS = {
    "a": (".XXX.", "X...X", "X...X", "XXXXX", "X...X", "X...X", "X...X"),
    "b": ("XXXX.", "X...X", "X...X", "XXXX.", "X...X", "X...X", "XXXX."),
    "c": (".XXXX", "X....", "X....", "X....", "X....", "X....", ".XXXX"),
    "d": ("XXXX.", "X...X", "X...X", "X...X", "X...X", "X...X", "XXXX."),
    "e": ("XXXXX", "X....", "X....", "XXXX.", "X....", "X....", "XXXXX"),
    "f": ("XXXXX", "X....", "X....", "XXXX.", "X....", "X....", "X...."),
    "g": (".XXXX", "X....", "X....", "X.XXX", "X...X", "X...X", ".XXXX"),
    "h": ("X...X", "X...X", "X...X", "XXXXX", "X...X", "X...X", "X...X"),
    "i": ("XXXXX", "..X..", "..X..", "..X..", "..X..", "..X..", "XXXXX"),
    "j": ("XXXXX", "....X", "....X", "....X", "X...X", "X...X", ".XXX."),
    "k": ("X...X", "X..X.", "X.X..", "XX...", "X.X..", "X..X.", "X...X"),
    "l": ("X....", "X....", "X....", "X....", "X....", "X....", "XXXXX"),
    "m": ("X...X", "XX.XX", "X.X.X", "X.X.X", "X...X", "X...X", "X...X"),
    "n": ("X...X", "XX..X", "X.X.X", "X.X.X", "X..XX", "X...X", "X...X"),
    "o": (".XXX.", "X...X", "X...X", "X...X", "X...X", "X...X", ".XXX."),
    "p": ("XXXX.", "X...X", "X...X", "XXXX.", "X....", "X....", "X...."),
    "q": (".XXX.", "X...X", "X...X", "X...X", "X.X.X", "X..X.", ".XX.X"),
    "r": ("XXXX.", "X...X", "X...X", "XXXX.", "X.X..", "X..X.", "X...X"),
    "s": (".XXXX", "X....", "X....", ".XXX.", "....X", "....X", "XXXX."),
    "t": ("XXXXX", "..X..", "..X..", "..X..", "..X..", "..X..", "..X.."),
    "u": ("X...X", "X...X", "X...X", "X...X", "X...X", "X...X", ".XXX."),
    "v": ("X...X", "X...X", "X...X", "X...X", "X...X", ".X.X.", "..X.."),
    "w": ("X...X", "X...X", "X...X", "X.X.X", "X.X.X", "XX.XX", "X...X"),
    "x": ("X...X", "X...X", ".X.X.", "..X..", ".X.X.", "X...X", "X...X"),
    "y": ("X...X", "X...X", ".X.X.", "..X..", "..X..", "..X..", "..X.."),
    "z": ("XXXXX", "....X", "...X.", "..X..", ".X...", "X....", "XXXXX"),
    "0": (".XXX.", "X...X", "X..XX", "X.X.X", "XX..X", "X...X", ".XXX."),
    "1": ("..X..", ".XX..", "..X..", "..X..", "..X..", "X.X.X", "XXXXX"),
    "2": (".XXX.", "X...X", "....X", "...X.", "..X..", ".X...", "XXXXX"),
    "3": ("XXXX.", "....X", "....X", ".XXX.", "....X", "....X", "XXXX."),
    "4": ("...X.", "..XX.", ".X.X.", "X..X.", "XXXXX", "...X.", "...X."),
    "5": ("XXXXX", "X....", "X....", "XXXX.", "....X", "....X", "XXXX."),
    "6": (".XXXX", "X....", "X....", "XXXX.", "X...X", "X...X", ".XXX."),
    "7": ("XXXXX", "....X", "...X.", "..X..", "..X..", ".X...", "X...."),
    "8": (".XXX.", "X...X", "X...X", ".XXX.", "X...X", "X...X", ".XXX."),
    "9": (".XXX.", "X...X", "X...X", ".XXXX", "....X", "....X", "XXXX."),
}

FONT = {
    ch: np.array([[c == "X" for c in row] for row in rows], dtype=bool)
    for ch, rows in _FONT_ROWS.items()
}


def _word_pool(tag: int, count: int, lengths=(4, 5, 6)) -> tuple[str, ...]:
    """Deterministic pronounceable nonsense words, disjoint across tags."""
    consonants = "bcdfghjklmnprstvz"
    vowels = "aeiou"
    rng = Rng(0x57EB1 + tag)  # fixed per-pool stream
    words, seen = [], set()
    while len(words) < count:
        n = lengths[int(rng.integers(0, len(lengths)))]
        chars = []
        for i in range(n):
            pool = consonants if i % 2 == 0 else vowels
            chars.append(pool[int(rng.integers(0, len(pool)))])
        w = "".join(chars)
        if w not in seen:
            seen.add(w)
            words.append(w)
    return tuple(words)


@dataclass
class VocabSpec:
    """Word pools for the generator. Key and value pools are shared by both
    row variants so word identity never reveals a vision-dependent label;
    pools are large enough that pool membership takes real data to learn."""

    kv_words: tuple[str, ...] = _word_pool(1, 64)
    val_words: tuple[str, ...] = _word_pool(2, 96)
    misc_words: tuple[str, ...] = _word_pool(3, 24)
    number_words: tuple[str, ...] = tuple(f"{n:02d}" for n in range(0, 80, 2))
    ambig_row_prob: float = 0.55
    underline_prob: float = 0.5
    match_prob: float = 0.7  # first trailing word echoes a key-specific value


@dataclass
class Corpus:
    documents: list[Document]
    splits: list[str]
    meta: dict = field(default_factory=dict)

    def split(self, name: str) -> list[Document]:
        return [d for d, s in zip(self.documents, self.splits) if s == name]


def word_width(text: str) -> int:
    return GLYPH_PITCH * len(text) - 1


def render_word(image: np.ndarray, x0: int, y0: int, text: str) -> None:
    x = x0
    for ch in text:
        glyph = FONT[ch]
        cell = image[y0 : y0 + GLYPH_H, x : x + GLYPH_W]
        cell[glyph] = INK
        x += GLYPH_PITCH


def _min_page_extents() -> tuple[int, int]:
    longest = 6  # longest pool word, checked in generate
    need_w = SLOT_XS[-1] + GLYPH_PITCH * longest + 8
    need_h = ROW_Y0 + (GRID_ROWS - 1) * ROW_DY + UNDERLINE_DY + UNDERLINE_THICKNESS + 24
    return need_w, need_h


def _draw_class_decoration(image: np.ndarray, doc_class: int) -> None:
    h, w = image.shape
    if doc_class == 1:
        image[8:28, w - 28 : w - 8] = CUE
    elif doc_class == 2:
        image[h - 20 : h - 12, 8 : w - 8] = CUE


def generate_document(rng: Rng, doc_id: str, page: tuple[int, int], spec: VocabSpec) -> Document:
    width, height = page
    need_w, need_h = _min_page_extents()
    if width < need_w or height < need_h:
        raise DataError(
            f"page {width}x{height} too small for layout (need >= {need_w}x{need_h})"
        )
    image = np.full((height, width), 255, dtype=np.uint8)
    doc_class = int(rng.integers(0, N_DOC_CLASSES))
    _draw_class_decoration(image, doc_class)

    val_of = {k: spec.val_words[i % len(spec.val_words)] for i, k in enumerate(spec.kv_words)}
    words: list[WordBox] = []
    for r in range(GRID_ROWS):
        y0 = ROW_Y0 + r * ROW_DY
        if rng.random() < spec.ambig_row_prob:
            key = spec.kv_words[int(rng.integers(0, len(spec.kv_words)))]
            underlined = rng.random() < spec.underline_prob
            lead_label = HEADER if underlined else QUESTION
            trail_label = OTHER if underlined else ANSWER
            if rng.random() < spec.match_prob:
                t1 = val_of[key]
            else:
                t1 = spec.val_words[int(rng.integers(0, len(spec.val_words)))]
            t2 = spec.val_words[int(rng.integers(0, len(spec.val_words)))]
            row_words = [(key, lead_label), (t1, trail_label), (t2, trail_label)]
        else:
            underlined = False
            a = spec.misc_words[int(rng.integers(0, len(spec.misc_words)))]
            n1 = spec.number_words[int(rng.integers(0, len(spec.number_words)))]
            n2 = spec.number_words[int(rng.integers(0, len(spec.number_words)))]
            row_words = [(a, OTHER), (n1, OTHER), (n2, OTHER)]
        for slot, (text, label) in enumerate(row_words):
            x0 = SLOT_XS[slot]
            render_word(image, x0, y0, text)
            ww = word_width(text)
            if slot == 0 and underlined:
                uy = y0 + UNDERLINE_DY
                image[uy : uy + UNDERLINE_THICKNESS, x0 : x0 + UNDERLINE_WIDTH] = CUE
            box = (x0, y0, x0 + ww, y0, x0 + ww, y0 + GLYPH_H, x0, y0 + GLYPH_H)
            words.append(WordBox(text, box, label))
    return Document(doc_id, width, height, words, image, doc_class)


def generate_synthetic_corpus(
    rng: Rng,
    n_docs: int,
    page: tuple[int, int] = (256, 256),
    vocab_spec: VocabSpec | None = None,
    test_fraction: float = 1.0 / 6.0,
) -> Corpus:
    """Deterministic labeled corpus; document i depends only on (seed, i)."""
    if n_docs < 1:
        raise ValueError("n_docs must be >= 1")
    spec = vocab_spec or VocabSpec()
    for pool in (spec.kv_words, spec.val_words, spec.misc_words, spec.number_words):
        for word in pool:
            if len(word) > 6 or any(ch not in FONT for ch in word):
                raise DataError(f"pool word {word!r} not renderable (max 6 known glyphs)")
    n_test = int(round(n_docs * test_fraction))
    docs, splits = [], []
    for i in range(n_docs):
        doc = generate_document(rng.derive(i), f"doc{i:05d}", page, spec)
        docs.append(doc)
        splits.append("test" if i >= n_docs - n_test else "train")
    meta = {
        "label_names": list(LABEL_NAMES),
        "n_labels": len(LABEL_NAMES),
        "n_doc_classes": N_DOC_CLASSES,
        "vision_dependent_classes": list(VISION_DEPENDENT_CLASSES),
        "seed": rng.seed,
        "page": list(page),
    }
    return Corpus(docs, splits, meta)


def write_corpus(corpus: Corpus, out_dir) -> str:
    """Write ocr/*.json, img/*.pgm, manifest.json and meta.json; returns the
    manifest path."""
    import json
    import os

    from .docdata import save_document, write_manifest

    os.makedirs(os.path.join(out_dir, "ocr"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "img"), exist_ok=True)
    entries = []
    for doc, split in zip(corpus.documents, corpus.splits):
        ocr_rel = os.path.join("ocr", f"{doc.id}.json")
        img_rel = os.path.join("img", f"{doc.id}.pgm")
        save_document(doc, os.path.join(out_dir, ocr_rel), os.path.join(out_dir, img_rel))
        entries.append((ocr_rel, img_rel, split))
    manifest = os.path.join(out_dir, "manifest.json")
    write_manifest(manifest, entries)
    with open(os.path.join(out_dir, "meta.json"), "w", encoding="utf-8") as f:
        json.dump(corpus.meta, f, indent=2, sort_keys=True)
        f.write("\n")
    return manifest
