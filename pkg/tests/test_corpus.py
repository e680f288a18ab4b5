import numpy as np
import pytest

from copt.autodiff import backward
from copt.corpus import (BOS, EOS, PAD, UNK, DialogueInstance, EncodedCorpus, SyntheticPolicy,
                         SyntheticSpec, Vocab, build_vocab, gen_synthetic, load_dialogues,
                         split_and_batch, write_dialogues)
from copt.gumbel import RngStream

from conftest import tiny_generator


def _write(tmp_path, text):
    p = tmp_path / "d.txt"
    p.write_text(text, encoding="utf-8")
    return p


def test_k_utterance_dialogue_gives_k_minus_one_instances(tmp_path):
    path = _write(tmp_path, "a b __eou__ c d __eou__ e __eou__ f g __eou__\n")
    inst = load_dialogues(path)
    assert len(inst) == 3
    assert inst[0].history == [["a", "b"]] and inst[0].response == ["c", "d"]
    assert inst[2].history == [["a", "b"], ["c", "d"], ["e"]]


def test_two_utterances_and_window_cap(tmp_path):
    path = _write(tmp_path, "Hi __eou__ there __eou__\n" + " __eou__ ".join("u%d" % i for i in
                                                                              range(6)) + "\n")
    inst = load_dialogues(path)
    assert inst[0].history == [["hi"]] and inst[0].response == ["there"]
    six = inst[1:]
    assert len(six) == 5
    assert six[4].history == [["u2"], ["u3"], ["u4"]] and six[4].response == ["u5"]


def test_short_dialogues_are_skipped_with_warning(tmp_path, caplog):
    path = _write(tmp_path, "lonely __eou__\na __eou__ b __eou__\n")
    inst = load_dialogues(path)
    assert len(inst) == 1
    assert "skipped 1" in caplog.text


def test_unreadable_file(tmp_path):
    with pytest.raises(OSError):
        load_dialogues(tmp_path / "missing.txt")


def test_build_vocab_size_truncation_and_ties():
    inst = [DialogueInstance([["x", "y"]], ["z", "x"])]
    assert len(build_vocab(inst, 10)) == 7
    inst = [DialogueInstance([["a", "b", "c", "c", "c"]], ["b", "d", "d"])]
    # c:3, b:2, d:2 -> keep c then the tie b/d broken lexicographically
    v = build_vocab(inst, 6)
    assert v.content_tokens == ["c", "b"]
    assert v.encode(["d", "a"]) == [UNK, UNK]
    v = build_vocab([DialogueInstance([["b"]], ["a"])], 5)
    assert v.content_tokens == ["a"]
    with pytest.raises(ValueError):
        build_vocab(inst, 4)


def test_vocab_reserved_ids_and_encoding():
    v = Vocab(["hello", "world"])
    assert (v.stoi["<pad>"], v.stoi["<unk>"], v.stoi["<bos>"], v.stoi["<eos>"]) == (
        PAD, UNK, BOS, EOS)
    assert v.encode_history([["hello"], ["world", "zzz"]]) == [4, EOS, 5, UNK]
    assert v.encode_response(["world"]) == [5, EOS]
    assert v.decode([4, 5]) == ["hello", "world"]
    assert v.hash() == Vocab(["hello", "world"]).hash() != Vocab(["world", "hello"]).hash()


def test_gen_synthetic_deterministic_and_in_vocab():
    spec = SyntheticSpec(vocab_size=30, n_templates=6, n_instances=200)
    a, b = gen_synthetic(spec, seed=4), gen_synthetic(spec, seed=4)
    assert a.instances == b.instances and a.policy.templates == b.policy.templates
    assert len(a.instances) == 200
    vocab = Vocab(a.policy.content_tokens)
    assert len(vocab) == 30
    for inst in a.instances:
        assert UNK not in vocab.encode(inst.response)
    assert gen_synthetic(spec, seed=5).instances != a.instances


def test_synthetic_response_distribution_matches_policy():
    spec = SyntheticSpec(vocab_size=40, n_templates=8, n_instances=10)
    pol = gen_synthetic(spec, seed=1).policy
    history = [pol.templates[3]]
    exact = pol.response_distribution(history)
    rng = RngStream(9)
    draws = [tuple(pol.sample_response(history, rng)) for _ in range(10_000)]
    keys = set(exact) | set(draws)
    emp = {k: draws.count(k) / len(draws) for k in keys}
    tv = 0.5 * sum(abs(emp.get(k, 0) - exact.get(k, 0)) for k in keys)
    assert tv <= 0.03


def test_synthetic_step_distribution_is_normalized():
    pol = gen_synthetic(SyntheticSpec(vocab_size=12, n_templates=10, min_len=1, max_len=2,
                                      n_instances=5), seed=0).policy
    history = [pol.templates[0]]
    first = pol.step_distribution(history, [])
    assert sum(first.values()) == pytest.approx(1.0)
    tok = max(first, key=first.get)
    assert sum(pol.step_distribution(history, [tok]).values()) == pytest.approx(1.0)


def test_synthetic_export_round_trip(tmp_path):
    sc = gen_synthetic(SyntheticSpec(vocab_size=30, n_templates=5, n_instances=100), seed=2)
    corpus_path, policy_path = sc.write(tmp_path)
    assert load_dialogues(corpus_path) == sc.instances
    pol = SyntheticPolicy.from_json(policy_path.read_text())
    assert pol.templates == sc.policy.templates
    assert np.allclose(pol.template_probs([pol.templates[0]]),
                       sc.policy.template_probs([pol.templates[0]]))


def test_synthetic_spec_validation():
    with pytest.raises(ValueError):
        SyntheticSpec(vocab_size=7)


def _encoded(n=10):
    rng = np.random.default_rng(0)
    hist = [list(rng.integers(4, 9, size=rng.integers(1, 6))) for _ in range(n)]
    resp = [list(rng.integers(4, 9, size=rng.integers(1, 4))) + [EOS] for _ in range(n)]
    return EncodedCorpus(hist, resp)


def test_split_and_batch_sizes_and_shuffle():
    corpus = _encoded(10)
    sizes = [len(b) for b in split_and_batch(corpus, 4, RngStream(0))]
    assert sizes == [4, 4, 2]
    first = [b.index.tolist() for b in split_and_batch(corpus, 4, RngStream(3))]
    again = [b.index.tolist() for b in split_and_batch(corpus, 4, RngStream(3))]
    assert first == again
    assert sorted(sum(first, [])) == list(range(10))
    with pytest.raises(ValueError):
        next(split_and_batch(corpus, 0, RngStream(0)))


def test_padding_never_changes_loss_or_gradients():
    model = tiny_generator(vocab_size=9, seed=3)
    corpus = _encoded(6)
    params = model.parameters()
    for i in range(len(corpus)):
        single = corpus.batch([i])
        loss = model.nll(single.history, single.history_mask, single.response, single.response_mask)
        grads = backward(loss, params)
        # same instance padded out to longer history and response
        h = np.concatenate([single.history, np.full((1, 4), PAD)], axis=1)
        hm = np.concatenate([single.history_mask, np.zeros((1, 4))], axis=1)
        r = np.concatenate([single.response, np.full((1, 3), PAD)], axis=1)
        rm = np.concatenate([single.response_mask, np.zeros((1, 3))], axis=1)
        padded = model.nll(h, hm, r, rm)
        assert padded.item() == loss.item()
        assert all(np.array_equal(a, b) for a, b in zip(grads, backward(padded, params)))
        # the content behind the mask is irrelevant too
        h2 = np.where(hm > 0, h, 7)
        r2 = np.where(rm > 0, r, 5)
        assert model.nll(h2, hm, r2, rm).item() == loss.item()


def test_padded_batch_loss_equals_sum_of_unpadded_losses():
    model = tiny_generator(vocab_size=9, seed=4)
    corpus = _encoded(8)
    batch = corpus.batch(range(8))
    total = model.nll(batch.history, batch.history_mask, batch.response, batch.response_mask)
    parts = []
    for i in range(8):
        b = corpus.batch([i])
        parts.append(model.nll(b.history, b.history_mask, b.response, b.response_mask).item())
    assert total.item() == pytest.approx(sum(parts), rel=1e-12)


def test_write_dialogues_format(tmp_path):
    path = tmp_path / "x.txt"
    write_dialogues(path, [[["a", "b"], ["c"]]])
    assert path.read_text() == "a b __eou__ c __eou__\n"
