"""Document data model and ingestion.

A Document is OCR output (words + quadrilateral pixel boxes, in emission
order, which is not necessarily reading order) plus the page raster and
optional labels. Ingestion is strict: anything off-schema raises DataError
with enough context to find the offending byte or word.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T


class DataError(ValueError):
    """Malformed or invariant-violating document data."""


@dataclass
class WordBox:
    """One OCR word: text, 8-int pixel box (TL, TR, BR, BL), optional label."""

    text: str
    box: tuple[int, ...]
    label: int | None = None

    @property
    def x1(self):
        return self.box[0]

    @property
    def y1(self):
        return self.box[1]

    @property
    def x3(self):
        return self.box[4]

    @property
    def y3(self):
        return self.box[5]

    def corner_xs(self):
        return (self.box[0], self.box[2], self.box[4], self.box[6])

    def corner_ys(self):
        return (self.box[1], self.box[3], self.box[5], self.box[7])

    def centroid(self):
        return (sum(self.corner_xs()) / 4.0, sum(self.corner_ys()) / 4.0)


@dataclass
class Document:
    id: str
    width: int
    height: int
    words: list[WordBox]
    image: np.ndarray  # uint8 [height, width]
    doc_class: int | None = None


@dataclass
class SpatialRecord:
    """Binned layout features for one token.

    Absolute corner/extent bins plus, per axis, the five deltas to the next
    token's box (four corners and the centroid), shift-encoded so negative
    deltas land in [0, num_bins). The final token's deltas are all 0.
    """

    x1: int
    y1: int
    x3: int
    y3: int
    w: int
    h: int
    a_rel_x: tuple[int, ...]
    a_rel_y: tuple[int, ...]
    abs_pos: int

    def x_features(self):
        return (self.x1, self.x3, self.w) + self.a_rel_x

    def y_features(self):
        return (self.y1, self.y3, self.h) + self.a_rel_y


def validate_document(doc: Document) -> None:
    if doc.width <= 0 or doc.height <= 0:
        raise DataError(f"document {doc.id}: non-positive page extents {doc.width}x{doc.height}")
    if doc.image.shape != (doc.height, doc.width):
        raise DataError(
            f"document {doc.id}: image extents {doc.image.shape} do not match "
            f"page {doc.height}x{doc.width}"
        )
    for i, w in enumerate(doc.words):
        if len(w.box) != 8:
            raise DataError(f"document {doc.id}: word {i} box has {len(w.box)} coords, need 8")
        xs, ys = w.corner_xs(), w.corner_ys()
        if min(xs) < 0 or max(xs) > doc.width or min(ys) < 0 or max(ys) > doc.height:
            raise DataError(f"document {doc.id}: word {i} box {w.box} outside page")
        if w.x1 > w.x3 or w.y1 > w.y3:
            raise DataError(
                f"document {doc.id}: word {i} box {w.box} violates x1<=x3, y1<=y3"
            )


# ---------------------------------------------------------------------------
# OCR JSON: {"id":str,"width":int,"height":int,"class":int|null,
#            "words":[{"text":str,"box":[8 ints],"label":int|null}]}

def _parse_json_bytes(raw: bytes, origin: str) -> dict:
    try:
        return json.loads(raw.decode("utf-8"))
    except json.JSONDecodeError as e:
        byte_offset = len(e.doc[: e.pos].encode("utf-8"))
        raise DataError(f"{origin}: JSON parse error at byte {byte_offset}: {e.msg}") from e
    except UnicodeDecodeError as e:
        raise DataError(f"{origin}: not valid UTF-8 at byte {e.start}") from e


def document_from_ocr_dict(obj, image: np.ndarray, origin: str = "<ocr>") -> Document:
    if not isinstance(obj, dict):
        raise DataError(f"{origin}: top level must be an object")
    try:
        doc_id = str(obj["id"])
        width = int(obj["width"])
        height = int(obj["height"])
        raw_words = obj["words"]
    except (KeyError, TypeError, ValueError) as e:
        raise DataError(f"{origin}: missing or malformed required field: {e}") from e
    doc_class = obj.get("class")
    if doc_class is not None:
        doc_class = int(doc_class)
    if not isinstance(raw_words, list):
        raise DataError(f"{origin}: 'words' must be a list")
    words = []
    for i, w in enumerate(raw_words):
        try:
            box = tuple(int(v) for v in w["box"])
            label = w.get("label")
            words.append(WordBox(str(w["text"]), box, None if label is None else int(label)))
        except (KeyError, TypeError, ValueError) as e:
            raise DataError(f"{origin}: word {i} malformed: {e}") from e
    doc = Document(doc_id, width, height, words, image, doc_class)
    validate_document(doc)
    return doc


def document_to_ocr_dict(doc: Document) -> dict:
    return {
        "id": doc.id,
        "width": doc.width,
        "height": doc.height,
        "class": doc.doc_class,
        "words": [
            {"text": w.text, "box": list(w.box), "label": w.label} for w in doc.words
        ],
    }


def load_document(ocr_json_path, image_path) -> Document:
    with open(ocr_json_path, "rb") as f:
        obj = _parse_json_bytes(f.read(), str(ocr_json_path))
    image = read_pgm(image_path)
    return document_from_ocr_dict(obj, image, origin=str(ocr_json_path))


def save_document(doc: Document, ocr_json_path, image_path) -> None:
    payload = json.dumps(document_to_ocr_dict(doc), sort_keys=True, separators=(",", ":"))
    with open(ocr_json_path, "wb") as f:
        f.write(payload.encode("utf-8"))
        f.write(b"\n")
    write_pgm(image_path, doc.image)


# ---------------------------------------------------------------------------
# PGM P5 (binary, maxval 255)

def write_pgm(path, image: np.ndarray) -> None:
    image = np.asarray(image, dtype=np.uint8)
    h, w = image.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(image.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    if not raw.startswith(b"P5"):
        raise DataError(f"{path}: not a P5 PGM")
    # header: magic, width, height, maxval; '#' comments allowed between tokens
    tokens, pos = [], 2
    while len(tokens) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"{path}: truncated PGM header")
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError as e:
        raise DataError(f"{path}: bad PGM header token: {e}") from e
    if maxval != 255:
        raise DataError(f"{path}: PGM maxval must be 255, got {maxval}")
    data = raw[pos : pos + w * h]
    if len(data) != w * h:
        raise DataError(f"{path}: PGM pixel data truncated ({len(data)} of {w * h} bytes)")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).copy()


# ---------------------------------------------------------------------------
# Coordinate binning

def bin_absolute(coord: float, extent: int, num_bins: int) -> int:
    b = int(np.floor(coord / extent * (num_bins - 1)))
    return min(max(b, 0), num_bins - 1)


def bin_delta(delta: float, extent: int, num_bins: int) -> int:
    """Shift-encode a signed delta: 0 maps to the center bin (num_bins-1)//2."""
    half = (num_bins - 1) // 2
    scaled = int(np.floor(delta / extent * half))
    return min(max(scaled + half, 0), num_bins - 1)


def relative_deltas(words: list[WordBox]):
    """Per word, signed deltas to the NEXT word's box: four corners and the
    centroid, per axis. The last word gets zeros. Returned unbinned."""
    n = len(words)
    dx = np.zeros((n, 5), dtype=np.float64)
    dy = np.zeros((n, 5), dtype=np.float64)
    for k in range(n - 1):
        cur, nxt = words[k], words[k + 1]
        for i in range(4):
            dx[k, i] = nxt.corner_xs()[i] - cur.corner_xs()[i]
            dy[k, i] = nxt.corner_ys()[i] - cur.corner_ys()[i]
        dx[k, 4] = nxt.centroid()[0] - cur.centroid()[0]
        dy[k, 4] = nxt.centroid()[1] - cur.centroid()[1]
    return dx, dy


def normalize_and_bin(doc: Document, num_bins: int) -> list[SpatialRecord]:
    """Bin each word's absolute box features and next-word deltas.

    The final word's relative features are the literal zero vector (not the
    center bin), which gives the embedding tables a dedicated end-of-stream
    row to learn.
    """
    if num_bins < 2:
        raise ValueError(f"num_bins must be >= 2, got {num_bins}")
    if not doc.words:
        raise DataError(f"document {doc.id}: cannot bin an empty document")
    dx, dy = relative_deltas(doc.words)
    records = []
    last = len(doc.words) - 1
    for k, w in enumerate(doc.words):
        if k == last:
            ax = ay = (0, 0, 0, 0, 0)
        else:
            ax = tuple(bin_delta(v, doc.width, num_bins) for v in dx[k])
            ay = tuple(bin_delta(v, doc.height, num_bins) for v in dy[k])
        records.append(
            SpatialRecord(
                x1=bin_absolute(w.x1, doc.width, num_bins),
                y1=bin_absolute(w.y1, doc.height, num_bins),
                x3=bin_absolute(w.x3, doc.width, num_bins),
                y3=bin_absolute(w.y3, doc.height, num_bins),
                w=bin_absolute(w.x3 - w.x1, doc.width, num_bins),
                h=bin_absolute(w.y3 - w.y1, doc.height, num_bins),
                a_rel_x=ax,
                a_rel_y=ay,
                abs_pos=k,
            )
        )
    return records


def full_page_record(doc: Document, num_bins: int, abs_pos: int = 0) -> SpatialRecord:
    """Record covering the whole page (used for the sequence-start token)."""
    return SpatialRecord(
        x1=0,
        y1=0,
        x3=num_bins - 1,
        y3=num_bins - 1,
        w=num_bins - 1,
        h=num_bins - 1,
        a_rel_x=(0, 0, 0, 0, 0),
        a_rel_y=(0, 0, 0, 0, 0),
        abs_pos=abs_pos,
    )


def pad_record(abs_pos: int) -> SpatialRecord:
    return SpatialRecord(0, 0, 0, 0, 0, 0, (0, 0, 0, 0, 0), (0, 0, 0, 0, 0), abs_pos)


# ---------------------------------------------------------------------------
# Raster -> model input

def image_to_model_input(image: np.ndarray, target: tuple[int, int]) -> T.Tensor:
    """Nearest-neighbor resize to target (H, W), then map [0,255] -> [-0.5, 0.5].

    Source pixel for output (i, j) is (floor(i*h/H), floor(j*w/W)).
    """
    h, w = image.shape
    th, tw = target
    if h == 0 or w == 0 or th == 0 or tw == 0:
        raise DataError(f"zero-extent image: {image.shape} -> {target}")
    rows = (np.arange(th) * h // th).astype(np.int64)
    cols = (np.arange(tw) * w // tw).astype(np.int64)
    resized = image[np.ix_(rows, cols)].astype(np.float64)
    return T.Tensor((resized / 255.0 - 0.5)[None, :, :])


# ---------------------------------------------------------------------------
# Corpus manifest: JSON list of [ocr_path, image_path, split]

def write_manifest(path, entries) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump([list(e) for e in entries], f, indent=0)
        f.write("\n")


def read_manifest(path) -> list[tuple[str, str, str]]:
    with open(path, "rb") as f:
        obj = _parse_json_bytes(f.read(), str(path))
    if not isinstance(obj, list):
        raise DataError(f"{path}: manifest must be a JSON list")
    out = []
    for i, e in enumerate(obj):
        if not isinstance(e, list) or len(e) != 3:
            raise DataError(f"{path}: manifest entry {i} must be [ocr, image, split]")
        out.append((str(e[0]), str(e[1]), str(e[2])))
    return out


def load_corpus(manifest_path) -> list[tuple[Document, str]]:
    import os

    base = os.path.dirname(os.path.abspath(manifest_path))
    out = []
    for ocr, img, split in read_manifest(manifest_path):
        ocr_p = ocr if os.path.isabs(ocr) else os.path.join(base, ocr)
        img_p = img if os.path.isabs(img) else os.path.join(base, img)
        out.append((load_document(ocr_p, img_p), split))
    return out
