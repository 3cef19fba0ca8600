import hashlib

import numpy as np
import pytest

from breen import synthdata as sd
from breen.teacher import FormatError


def test_vocab_is_closed_over_grammar():
    for sentence in sd.grammar_sentences():
        assert sd.detokenize(sd.tokenize(sentence, bos=False, eos=False)) == sentence


def test_unknown_word_raises():
    with pytest.raises(sd.TokenizerError):
        sd.tokenize("a purple circle")


def test_tokenize_markers():
    ids = sd.tokenize("red")
    assert ids[0] == sd.VOCAB.bos and ids[-1] == sd.VOCAB.eos and len(ids) == 3
    assert sd.tokenize("red", bos=False, eos=False) == [sd.VOCAB.index["red"]]


def test_gen_sample_is_pure_function_of_seed():
    a, b = sd.gen_sample(42, sd.QA), sd.gen_sample(42, sd.QA)
    np.testing.assert_array_equal(a.pixels, b.pixels)
    assert a.caption_ids == b.caption_ids and a.instr_ids == b.instr_ids and a.resp_ids == b.resp_ids
    np.testing.assert_array_equal(a.teacher.features, b.teacher.features)
    assert not np.array_equal(a.pixels, sd.gen_sample(43, sd.QA).pixels)


def test_sample_shapes():
    s = sd.gen_sample(1)
    assert s.pixels.shape == (336, 336, 3) and s.pixels.dtype == np.uint8
    assert s.teacher.features.shape == (24, 24, 32)
    assert s.instr_ids == [] and s.resp_ids == []


def test_caption_matches_placements():
    s = sd.gen_sample(7)
    assert sd.detokenize(s.caption_ids) == sd.caption_text(s.placements)
    assert 1 <= len(s.placements) <= 3


@pytest.mark.parametrize("seed", range(40))
def test_answer_is_visible_in_pixels(seed):
    s = sd.gen_sample(seed, sd.QA)
    answer = sd.detokenize(s.resp_ids).split()[0]
    assert answer in sd.COLORS
    assert sd.answer_from_pixels(s.pixels, s.instr_ids) == answer


def test_shapes_stay_inside_their_cell():
    for seed in range(30):
        for p in sd.gen_sample(seed).placements:
            mask = sd._shape_mask(p)
            r, c = divmod(p.cell, 3)
            inside = np.zeros_like(mask)
            inside[r * sd.CELL : (r + 1) * sd.CELL, c * sd.CELL : (c + 1) * sd.CELL] = True
            assert mask.any() and not (mask & ~inside).any()


def test_dataset_round_trip(tmp_path):
    samples = sd.gen_dataset(5, 4, sd.QA, tmp_path / "d.brds")
    back = sd.load_dataset(tmp_path / "d.brds")
    assert len(back) == 4
    for a, b in zip(samples, back):
        np.testing.assert_array_equal(a.pixels, b.pixels)
        np.testing.assert_array_equal(a.teacher.features, b.teacher.features)
        assert (a.caption_ids, a.instr_ids, a.resp_ids, a.mode) == (b.caption_ids, b.instr_ids, b.resp_ids, b.mode)
        assert a.placements == b.placements


def test_dataset_streaming_yields_in_order(tmp_path):
    samples = sd.gen_dataset(6, 3, sd.CAPTION, tmp_path / "d.brds")
    assert [s.sample_seed for s in sd.iter_dataset(tmp_path / "d.brds")] == [s.sample_seed for s in samples]


def test_dataset_truncation_names_record(tmp_path):
    path = tmp_path / "d.brds"
    sd.gen_dataset(5, 2, sd.CAPTION, path)
    buf = path.read_bytes()
    path.write_bytes(buf[:-10])
    with pytest.raises(FormatError, match="record 1"):
        sd.load_dataset(path)


def test_dataset_bad_magic(tmp_path):
    path = tmp_path / "d.brds"
    sd.gen_dataset(5, 1, sd.CAPTION, path)
    path.write_bytes(b"NOPE" + path.read_bytes()[4:])
    with pytest.raises(FormatError, match="magic"):
        sd.load_dataset(path)


def test_bad_mode_and_count():
    with pytest.raises(ValueError):
        sd.gen_sample(0, "dialogue")
    with pytest.raises(ValueError):
        sd.gen_samples(0, 0)


def test_empty_text_is_just_markers():
    assert sd.tokenize("") == [sd.VOCAB.bos, sd.VOCAB.eos]
    assert sd.detokenize(sd.tokenize("")) == ""


def test_disjoint_seeds_give_no_identical_images():
    digests = set()
    for seed in (1, 2):
        for i in range(500):
            rng = np.random.default_rng(sd.sample_seed(seed, i))
            digests.add(hashlib.sha256(sd.render(sd._placements(rng)).tobytes()).hexdigest())
    assert len(digests) == 1000


def test_render_path_matches_gen_sample():
    s = sd.gen_sample(sd.sample_seed(1, 3))
    rng = np.random.default_rng(sd.sample_seed(1, 3))
    np.testing.assert_array_equal(sd.render(sd._placements(rng)), s.pixels)
