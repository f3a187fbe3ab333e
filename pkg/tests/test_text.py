"""Tokenizer, closed answer vocabulary, and prompt pools."""

import collections

import pytest

from tinyumm.scenes import SceneSpec, generate_scene, make_qa, render
from tinyumm.text import (GEN_TASKS, SPECIALS, Vocabulary, answer_vocab,
                          canonicalize, load_prompt_pool, sample_prompt)


def test_canonicalize():
    assert canonicalize("Is there a RED circle?") == "is there a red circle"
    assert canonicalize("  left-to-right,   order! ") == "left to right order"
    assert canonicalize("What color is the square?") == "what color is the square"


def test_specials_have_lowest_ids():
    vocab = Vocabulary.default()
    for i, tok in enumerate(SPECIALS):
        assert vocab.id_of[tok] == i
    n = len(SPECIALS)
    assert all(vocab.id_of[t] >= n for t in vocab.tokens if t not in SPECIALS)


def test_encode_decode_roundtrip():
    vocab = Vocabulary.default()
    text = "Is the red circle closer than the blue square?"
    ids = vocab.encode(text)
    assert ids[0] == vocab.bos
    assert ids[-1] == vocab.eos
    assert vocab.decode(ids) == canonicalize(text)


def test_oov_error_names_the_word():
    vocab = Vocabulary.default()
    with pytest.raises(ValueError, match="xylophone"):
        vocab.encode("is there a xylophone")


def test_vocab_save_load_identical(tmp_path):
    vocab = Vocabulary.default()
    vocab.save(tmp_path / "v.json")
    loaded = Vocabulary.load(tmp_path / "v.json")
    assert loaded.tokens == vocab.tokens
    assert (tmp_path / "v.json").read_bytes() == (
        tmp_path / "v.json").read_bytes()


def test_vocab_covers_all_scene_text():
    vocab = Vocabulary.default()
    spec = SceneSpec()
    for seed in range(50):
        scene = generate_scene(spec, seed)
        r = render(scene)
        vocab.encode(r.caption)
        for q, a, _ in r.qa:
            vocab.encode(q)
            vocab.encode(a)
    for task in GEN_TASKS:
        for prompt in load_prompt_pool(task).prompts:
            vocab.encode(prompt)


def test_answer_vocab_closed_and_covering():
    answers = answer_vocab()
    assert len(answers) == len(set(answers))
    spec = SceneSpec()
    seen = set()
    for seed in range(100):
        scene = generate_scene(spec, seed)
        for _, a, _ in make_qa(scene, seed):
            assert a in answers
            seen.add(a)
    assert "yes" in seen and "no" in seen


def test_prompt_pools_shape():
    for task in GEN_TASKS:
        pool = load_prompt_pool(task)
        assert pool.task == task
        assert len(pool.prompts) == 10
        assert len(set(pool.prompts)) == 10
        assert all(p.strip() for p in pool.prompts)


def test_prompt_sampling_uniform():
    pool = load_prompt_pool("depth")
    counts = collections.Counter(
        sample_prompt(pool, seed) for seed in range(10_000))
    assert set(counts) <= set(pool.prompts)
    for prompt in pool.prompts:
        assert 800 <= counts[prompt] <= 1200, (prompt, counts[prompt])
    # chi-square against uniform: 9 dof, reject far tail only
    expected = 10_000 / 10
    chi2 = sum((c - expected) ** 2 / expected for c in counts.values())
    assert chi2 < 27.9  # p ~ 0.001 for 9 dof


def test_prompt_sampling_deterministic():
    pool = load_prompt_pool("seg")
    assert sample_prompt(pool, 123) == sample_prompt(pool, 123)


def test_vocabulary_rejects_duplicates_and_misplaced_specials():
    with pytest.raises(ValueError):
        Vocabulary(list(SPECIALS) + ["a", "a"])
    with pytest.raises(ValueError):
        Vocabulary(["a"] + list(SPECIALS))
