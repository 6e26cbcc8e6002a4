import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from oracles import best_permutation_match, two_topic_corpus

from docpretext.errors import DomainError
from docpretext.topic_pipeline import (NUM_TOKEN, TokenDoc, TopicModel, Vocabulary, build_vocab,
                                       clean_text, heldout_log_likelihood, lda_fit, lda_infer,
                                       make_topic_sample, read_soft_labels, write_soft_labels)


@pytest.fixture(scope="module")
def corpus():
    return two_topic_corpus()


@pytest.fixture(scope="module")
def model(corpus):
    docs, vocab, _ = corpus
    return lda_fit(docs, vocab, K=2, alpha=0.1, beta=0.01, iters=500, seed=3)


def test_clean_examples():
    assert clean_text("Price: 45 USD!!") == ["price", NUM_TOKEN, "usd"]
    assert clean_text("") == []
    assert clean_text("A1B2") == ["a", NUM_TOKEN, "b", NUM_TOKEN]
    assert clean_text("Re-sent 3.5 times_ok") == ["re", "sent", NUM_TOKEN, NUM_TOKEN, "times", "ok"]


@given(st.text())
def test_clean_idempotent_and_token_alphabet(raw):
    toks = clean_text(raw)
    assert clean_text(" ".join(toks)) == toks
    for t in toks:
        if t != NUM_TOKEN:
            assert t == t.lower()
            assert not any(ch.isdigit() for ch in t)
            assert all(ch.isalnum() for ch in t)


def test_vocab_examples():
    docs = [["tobacco", "x"], ["tobacco"], ["tobacco", "y"]]
    assert "tobacco" in build_vocab(docs, min_df=3).terms
    v = build_vocab([["a", "z"], ["a"], ["b"]], min_df=2)
    assert v.terms == ["a"]
    v = build_vocab([["a", "b"], ["b", "a"]], min_df=1, max_size=1)
    assert v.terms == ["a"]
    with pytest.raises(DomainError):
        build_vocab([["a"]], min_df=2)


def test_vocab_order_and_index():
    v = build_vocab([TokenDoc("1", ["c", "a", "b"]), TokenDoc("2", ["b"])], min_df=1)
    assert v.terms == ["a", "b", "c"]
    assert [v.index[t] for t in v.terms] == [0, 1, 2]
    assert v.encode(["b", "zzz", "c"]).tolist() == [1, 2]


def test_disjoint_topics_recovered(model):
    phi = model.topic_word()
    mass_a = phi[:, :10].sum(axis=1)
    assert all(max(m, 1 - m) >= 0.95 for m in mass_a)
    assert {int(m > 0.5) for m in mass_a} == {0, 1}


def test_single_topic_is_smoothed_unigram(corpus):
    docs, vocab, _ = corpus
    m = lda_fit(docs, vocab, K=1, iters=3, seed=0)
    counts = np.bincount(np.concatenate(docs), minlength=len(vocab))
    expected = (counts + 0.01) / (counts.sum() + len(vocab) * 0.01)
    np.testing.assert_allclose(m.topic_word()[0], expected, rtol=0, atol=1e-12)


def test_fit_deterministic(corpus):
    docs, vocab, _ = corpus
    a = lda_fit(docs, vocab, K=3, iters=20, seed=8)
    b = lda_fit(docs, vocab, K=3, iters=20, seed=8)
    assert np.array_equal(a.topic_word_counts, b.topic_word_counts)
    assert np.array_equal(a.doc_topic_counts, b.doc_topic_counts)


def test_token_conservation_every_sweep(corpus):
    docs, vocab, _ = corpus
    total = sum(len(d) for d in docs)
    lengths = np.array([len(d) for d in docs])
    seen = []

    def check(sweep, nkw, ndk):
        assert nkw.sum() == total and (nkw >= 0).all() and (ndk >= 0).all()
        assert np.array_equal(ndk.sum(axis=1), lengths)
        seen.append(sweep)

    lda_fit(docs, vocab, K=4, iters=15, seed=1, callback=check)
    assert seen == list(range(15))


def test_fit_errors(corpus):
    _, vocab, _ = corpus
    with pytest.raises(DomainError):
        lda_fit([[], []], vocab, K=2)
    with pytest.raises(DomainError):
        lda_fit([[0]], vocab, K=0)


def test_default_alpha(corpus):
    docs, vocab, _ = corpus
    assert lda_fit(docs[:5], vocab, K=4, iters=1).alpha == 12.5


def test_infer_empty_doc_uniform(model):
    theta = lda_infer(model, [], iters=10, burn_in=2)
    assert theta.tolist() == [0.5, 0.5]
    m3 = TopicModel(3, model.vocab, np.ones((3, 20), np.int64), 50 / 3, 0.01, 0, 1)
    assert lda_infer(m3, []).tolist() == [1 / 3] * 3


def test_infer_pure_document(model):
    a_topic = int(np.argmax(model.topic_word()[:, :10].sum(axis=1)))
    doc = np.arange(10).repeat(5)
    theta = lda_infer(model, doc, iters=60, burn_in=10, seed=2)
    assert theta[a_topic] >= 0.9
    assert theta.sum() == pytest.approx(1.0, abs=1e-9)


def test_infer_errors(model):
    with pytest.raises(DomainError):
        lda_infer(model, [0, 1], iters=5, burn_in=5)


def test_heldout_likelihood_beats_uniform(model):
    held, _, mixes = two_topic_corpus(n_docs=40, seed=99)
    ll = heldout_log_likelihood(model, held)
    # likelihood under the generating parameters themselves
    phi = np.zeros((2, 20))
    phi[0, :10] = phi[1, 10:] = 0.1
    oracle = sum(np.log(m @ phi[:, d]).sum() for d, m in zip(held, mixes)) / sum(map(len, held))
    assert ll > np.log(1 / 20) + 0.3
    assert abs(ll - oracle) < 0.05


def test_relabeling_symmetry(corpus):
    docs, vocab, _ = corpus
    a = lda_fit(docs, vocab, K=2, alpha=0.1, iters=300, seed=1)
    b = lda_fit(docs, vocab, K=2, alpha=0.1, iters=300, seed=2)
    ta = np.stack([a.train_theta(i) for i in range(len(docs))])
    tb = np.stack([b.train_theta(i) for i in range(len(docs))])
    perm = best_permutation_match(ta, tb)
    assert np.abs(ta - tb[:, perm]).mean() < 0.02
    # the per-document multiset of mixture weights is label-free
    np.testing.assert_allclose(np.sort(ta, axis=1), np.sort(tb, axis=1), atol=0.1)


def test_model_json_roundtrip(tmp_path, model):
    model.save(tmp_path / "m.json")
    obj = json.loads((tmp_path / "m.json").read_text())
    assert {"K", "alpha", "beta", "seed", "iters", "vocab", "topic_word_counts"} <= set(obj)
    back = TopicModel.load(tmp_path / "m.json")
    assert back.to_json() == model.to_json()
    assert np.array_equal(back.topic_word_counts, model.topic_word_counts)


def test_topic_sample():
    img = np.zeros((384, 384), np.float32)
    theta = np.full(64, 1 / 64)
    s = make_topic_sample(img, theta)
    assert s.target.shape == (64,) and s.task == "lda_topics"
    onehot = np.eye(8)[3]
    assert make_topic_sample(img, onehot).target[3] == 1.0
    with pytest.raises(DomainError):
        make_topic_sample(img, np.full(4, 0.125))


def test_soft_label_file(tmp_path):
    thetas = {"b": np.array([0.25, 0.75]), "a": np.array([1.0, 0.0])}
    write_soft_labels(tmp_path / "t.jsonl", thetas)
    lines = (tmp_path / "t.jsonl").read_text().splitlines()
    assert json.loads(lines[0]) == {"id": "a", "theta": [1.0, 0.0]}
    back = read_soft_labels(tmp_path / "t.jsonl")
    assert set(back) == {"a", "b"} and back["b"].tolist() == [0.25, 0.75]


def test_vocabulary_rejects_duplicates():
    with pytest.raises(DomainError):
        Vocabulary(["a", "a"])
