import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mmdoc import docdata as dd
from mmdoc import tensor as T


def make_doc(words, width=100, height=80, doc_class=None):
    img = np.full((height, width), 255, dtype=np.uint8)
    return dd.Document("d0", width, height, words, img, doc_class)


def simple_box(x1, y1, x3, y3):
    return (x1, y1, x3, y1, x3, y3, x1, y3)


# ---------------------------------------------------------------------------
# load / save / validate

def test_load_minimal_document(tmp_path):
    ocr = {
        "id": "d",
        "width": 20,
        "height": 20,
        "class": None,
        "words": [{"text": "hi", "box": [0, 0, 10, 0, 10, 10, 0, 10], "label": None}],
    }
    (tmp_path / "d.json").write_text(json.dumps(ocr))
    dd.write_pgm(tmp_path / "d.pgm", np.zeros((20, 20), dtype=np.uint8))
    doc = dd.load_document(tmp_path / "d.json", tmp_path / "d.pgm")
    assert len(doc.words) == 1
    assert doc.words[0].text == "hi"
    assert doc.words[0].box == (0, 0, 10, 0, 10, 10, 0, 10)


def test_box_with_x3_less_than_x1_is_validation_error():
    w = dd.WordBox("bad", simple_box(10, 0, 5, 10))
    with pytest.raises(dd.DataError, match="word 0"):
        dd.validate_document(make_doc([w]))


def test_box_outside_page_names_word_index():
    words = [
        dd.WordBox("ok", simple_box(0, 0, 10, 10)),
        dd.WordBox("bad", simple_box(0, 0, 120, 10)),
    ]
    with pytest.raises(dd.DataError, match="word 1"):
        dd.validate_document(make_doc(words))


def test_image_page_size_mismatch_is_error():
    doc = make_doc([dd.WordBox("w", simple_box(0, 0, 5, 5))])
    doc.image = np.zeros((10, 10), dtype=np.uint8)
    with pytest.raises(dd.DataError, match="extents"):
        dd.validate_document(doc)


def test_malformed_json_reports_byte_offset(tmp_path):
    p = tmp_path / "bad.json"
    p.write_bytes(b'{"id": "x", }')
    dd.write_pgm(tmp_path / "x.pgm", np.zeros((4, 4), dtype=np.uint8))
    with pytest.raises(dd.DataError, match="byte 12"):
        dd.load_document(p, tmp_path / "x.pgm")


def test_save_load_roundtrip_is_byte_identical(tmp_path):
    from mmdoc.synthgen import generate_synthetic_corpus

    corpus = generate_synthetic_corpus(T.Rng(5), 3)
    for doc in corpus.documents:
        dd.save_document(doc, tmp_path / "a.json", tmp_path / "a.pgm")
        loaded = dd.load_document(tmp_path / "a.json", tmp_path / "a.pgm")
        dd.save_document(loaded, tmp_path / "b.json", tmp_path / "b.pgm")
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
        assert (tmp_path / "a.pgm").read_bytes() == (tmp_path / "b.pgm").read_bytes()


def test_pgm_roundtrip_and_header_validation(tmp_path):
    img = (np.arange(12, dtype=np.uint8) * 20).reshape(3, 4)
    dd.write_pgm(tmp_path / "i.pgm", img)
    assert np.array_equal(dd.read_pgm(tmp_path / "i.pgm"), img)
    (tmp_path / "bad.pgm").write_bytes(b"P6\n2 2\n255\n" + bytes(4))
    with pytest.raises(dd.DataError, match="P5"):
        dd.read_pgm(tmp_path / "bad.pgm")
    (tmp_path / "short.pgm").write_bytes(b"P5\n4 4\n255\n" + bytes(3))
    with pytest.raises(dd.DataError, match="truncated"):
        dd.read_pgm(tmp_path / "short.pgm")


# ---------------------------------------------------------------------------
# fuzzed ingestion: valid schema never raises, invalid always DataError

_word_st = st.fixed_dictionaries(
    {
        "text": st.text(min_size=1, max_size=5),
        "box": st.tuples(
            st.integers(0, 40), st.integers(0, 40), st.integers(0, 9), st.integers(0, 9)
        ).map(lambda t: [t[0], t[1], t[0] + t[2], t[1], t[0] + t[2], t[1] + t[3], t[0], t[1] + t[3]]),
        "label": st.one_of(st.none(), st.integers(0, 3)),
    }
)


@given(st.lists(_word_st, max_size=6), st.one_of(st.none(), st.integers(0, 5)))
def test_fuzzed_valid_ocr_never_raises(words, doc_class):
    obj = {"id": "f", "width": 50, "height": 50, "class": doc_class, "words": words}
    doc = dd.document_from_ocr_dict(obj, np.zeros((50, 50), dtype=np.uint8))
    assert len(doc.words) == len(words)


@given(
    st.one_of(
        st.just(b"not json at all"),
        st.just(b'{"id": 1}'),
        st.just(b'{"id":"x","width":5,"height":5,"words":{}}'),
        st.just(b'{"id":"x","width":5,"height":5,"words":[{"text":"a","box":[1,2]}]}'),
        st.just(b'{"id":"x","width":"wide","height":5,"words":[]}'),
        st.binary(max_size=30),
    )
)
def test_fuzzed_invalid_ocr_always_structured_error(raw):
    try:
        obj = dd._parse_json_bytes(raw, "<fuzz>")
        dd.document_from_ocr_dict(obj, np.zeros((5, 5), dtype=np.uint8))
    except dd.DataError:
        pass  # structured error is the contract
    # anything else (no error) means the bytes happened to be valid: fine


# ---------------------------------------------------------------------------
# binning

def test_bin_extremes_full_page_word():
    w = dd.WordBox("w", simple_box(0, 0, 100, 80))
    rec = dd.normalize_and_bin(make_doc([w]), num_bins=1000)[0]
    assert rec.x1 == 0 and rec.y1 == 0
    assert rec.x3 == 999 and rec.y3 == 999
    assert rec.w == 999 and rec.h == 999


def test_identical_consecutive_boxes_hit_zero_delta_bin():
    words = [dd.WordBox("a", simple_box(10, 10, 20, 20)), dd.WordBox("b", simple_box(10, 10, 20, 20))]
    recs = dd.normalize_and_bin(make_doc(words), num_bins=128)
    center = (128 - 1) // 2
    assert recs[0].a_rel_x == (center,) * 5
    assert recs[0].a_rel_y == (center,) * 5


def test_last_token_a_rel_is_zero_vector():
    words = [dd.WordBox("a", simple_box(0, 0, 10, 10)), dd.WordBox("b", simple_box(30, 40, 50, 60))]
    recs = dd.normalize_and_bin(make_doc(words), num_bins=64)
    assert recs[-1].a_rel_x == (0, 0, 0, 0, 0)
    assert recs[-1].a_rel_y == (0, 0, 0, 0, 0)


def test_unbinned_deltas_match_corner_subtraction_oracle():
    from mmdoc.synthgen import generate_synthetic_corpus

    corpus = generate_synthetic_corpus(T.Rng(9), 4)
    for doc in corpus.documents:
        dx, dy = dd.relative_deltas(doc.words)
        for k in range(len(doc.words) - 1):
            cur, nxt = doc.words[k], doc.words[k + 1]
            cxs, nxs = cur.corner_xs(), nxt.corner_xs()
            cys, nys = cur.corner_ys(), nxt.corner_ys()
            for i in range(4):
                assert dx[k, i] == nxs[i] - cxs[i]
                assert dy[k, i] == nys[i] - cys[i]
            assert dx[k, 4] == sum(nxs) / 4 - sum(cxs) / 4
            assert dy[k, 4] == sum(nys) / 4 - sum(cys) / 4


def test_empty_document_binning_is_error():
    with pytest.raises(dd.DataError, match="empty"):
        dd.normalize_and_bin(make_doc([]), num_bins=8)


@given(
    st.integers(0, 200),
    st.integers(0, 200),
    st.integers(2, 300),
    st.integers(1, 200),
)
def test_binning_is_monotone(a, b, num_bins, extent):
    lo, hi = sorted((min(a, extent), min(b, extent)))
    assert dd.bin_absolute(lo, extent, num_bins) <= dd.bin_absolute(hi, extent, num_bins)


@given(st.integers(-100, 100), st.integers(2, 257))
def test_delta_bins_stay_in_range(delta, num_bins):
    b = dd.bin_delta(delta, 100, num_bins)
    assert 0 <= b <= num_bins - 1


# ---------------------------------------------------------------------------
# image -> model input

def test_all_white_page_maps_to_half():
    img = np.full((16, 16), 255, dtype=np.uint8)
    out = dd.image_to_model_input(img, (8, 8))
    assert out.data.shape == (1, 8, 8)
    assert np.allclose(out.data, 0.5)


def test_all_black_page_maps_to_minus_half():
    out = dd.image_to_model_input(np.zeros((16, 16), dtype=np.uint8), (8, 8))
    assert np.allclose(out.data, -0.5)


def test_checkerboard_downsize_matches_nearest_neighbor_oracle():
    img = np.zeros((8, 8), dtype=np.uint8)
    img[::2, ::2] = 255
    img[1::2, 1::2] = 255
    out = dd.image_to_model_input(img, (4, 4))
    # oracle: output (i, j) samples source (2i, 2j)
    want = np.empty((4, 4))
    for i in range(4):
        for j in range(4):
            want[i, j] = img[2 * i, 2 * j] / 255.0 - 0.5
    assert np.array_equal(out.data[0], want)


def test_zero_extent_image_is_error():
    with pytest.raises(dd.DataError, match="zero-extent"):
        dd.image_to_model_input(np.zeros((0, 4), dtype=np.uint8), (4, 4))


# ---------------------------------------------------------------------------
# manifest

def test_manifest_roundtrip(tmp_path):
    entries = [("ocr/a.json", "img/a.pgm", "train"), ("ocr/b.json", "img/b.pgm", "test")]
    dd.write_manifest(tmp_path / "m.json", entries)
    assert dd.read_manifest(tmp_path / "m.json") == entries
    raw = json.loads((tmp_path / "m.json").read_text())
    assert isinstance(raw, list) and raw[0] == ["ocr/a.json", "img/a.pgm", "train"]
