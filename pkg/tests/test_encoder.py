import warnings

import numpy as np
import pytest

from zsrel.encoder import (EmptySentenceError, EncoderConfig, Instance, PcnnParams, accuracy,
                           classify_topT, init_params, load_instances, load_params, loss_and_grads,
                           pcnn_forward, read_checkpoint, save_instances, save_params, softmax, train_classifier)
from zsrel.kgstore import Vocab
from zsrel.semspace import WordVectors
from oracles import central_diff, rel_error


def toy_wv(words=("a", "b", "c", "d", "e", "f"), dim=4, seed=0):
    rng = np.random.default_rng(seed)
    return WordVectors({w: i for i, w in enumerate(words)}, rng.normal(size=(len(words), dim)))


def small_cfg(**kw):
    base = dict(channels=4, pos_dim=3, max_dist=5, dropout=0.0, seed=0)
    base.update(kw)
    return EncoderConfig(**base)


def manual_params(weights, bias=0.0, max_dist=5):
    """One filter over 1-d words with zero position tables."""
    filters = np.zeros((1, 3, 3))
    filters[0, :, 0] = weights
    return PcnnParams(unk=np.zeros(1), pos_head=np.zeros((2 * max_dist + 1, 1)),
                      pos_tail=np.zeros((2 * max_dist + 1, 1)), filters=filters, conv_bias=np.array([bias]),
                      W_c=np.zeros((2, 3)), b_c=np.zeros(2), classes=[0, 1], dropout=0.0, max_dist=max_dist)


# --- instances ------------------------------------------------------------------

def test_instance_validation():
    with pytest.raises(EmptySentenceError):
        Instance((), (0, 0), (0, 0))
    with pytest.raises(ValueError):
        Instance(("a", "b"), (0, 0), (2, 2))
    with pytest.raises(ValueError):
        Instance(("a", "b", "c"), (0, 1), (1, 2))
    inst = Instance(("a", "b", "c"), (2, 2), (0, 0))
    assert inst.swapped and inst.ordered_spans == ((0, 0), (2, 2))


def test_instance_file_round_trip(tmp_path):
    rels = Vocab(["p", "q"])
    insts = [Instance(("x", "y", "z"), (0, 0), (2, 2), 1), Instance(("u", "v"), (1, 1), (0, 0), 0)]
    save_instances(insts, tmp_path / "i.jsonl", rels)
    assert load_instances(tmp_path / "i.jsonl", rels) == insts


# --- forward ----------------------------------------------------------------------

def test_zero_params_give_zero_features():
    wv = toy_wv()
    params = init_params(wv.dim, [0, 1], small_cfg())
    for name in ("unk", "pos_head", "pos_tail", "filters", "conv_bias"):
        getattr(params, name)[...] = 0
    f = pcnn_forward(Instance(("a", "b", "c"), (0, 0), (2, 2)), wv, params)
    np.testing.assert_array_equal(f, np.zeros(12))


def test_default_feature_length():
    wv = toy_wv()
    params = init_params(wv.dim, [0, 1], EncoderConfig())
    assert pcnn_forward(Instance(("a", "b", "c"), (0, 0), (2, 2)), wv, params).shape == (750,)


def test_hand_computed_pooling():
    x = np.array([1.0, -2.0, 3.0, 0.5, -1.0])
    wv = WordVectors({w: i for i, w in enumerate("vwxyz")}, x[:, None])
    w = np.array([0.5, 1.0, -1.0])
    params = manual_params(w, bias=0.1)
    inst = Instance(tuple("vwxyz"), (0, 0), (3, 3))
    xp = np.concatenate([[0.0], x, [0.0]])
    conv = np.array([w @ xp[i:i + 3] for i in range(5)]) + 0.1
    expected = np.tanh([conv[0:1].max(), conv[1:3].max(), conv[3:5].max()])
    np.testing.assert_allclose(pcnn_forward(inst, wv, params), expected, rtol=0, atol=1e-15)


def test_empty_middle_segment_pools_to_zero():
    wv = WordVectors({"p": 0, "q": 1}, np.array([[2.0], [3.0]]))
    params = manual_params([0.0, 1.0, 0.0], bias=0.0)
    f = pcnn_forward(Instance(("p", "q"), (0, 0), (1, 1)), wv, params)
    np.testing.assert_allclose(f, np.tanh([2.0, 0.0, 3.0]))


def test_unknown_words_share_vector():
    wv = WordVectors({"k": 0}, np.array([[1.0]]))
    params = manual_params([0.0, 1.0, 0.0])
    params.unk[...] = 0.25
    f = pcnn_forward(Instance(("k", "oov1", "oov2"), (0, 0), (2, 2)), wv, params)
    np.testing.assert_allclose(f, np.tanh([1.0, 0.25, 0.25]))


def test_eval_mode_deterministic_train_mode_drops():
    wv = toy_wv()
    params = init_params(wv.dim, [0, 1], small_cfg(dropout=0.5))
    inst = Instance(("a", "b", "c", "d"), (0, 0), (3, 3))
    np.testing.assert_array_equal(pcnn_forward(inst, wv, params), pcnn_forward(inst, wv, params))
    f = pcnn_forward(inst, wv, params, True, np.random.default_rng(0))
    assert np.any(f == 0) and np.any(f != 0)


def test_pooling_dominance():
    x = np.array([1.0, -2.0, 3.0, 0.5, -1.0])
    wv = WordVectors({w: i for i, w in enumerate("vwxyz")}, x[:, None])
    inst = Instance(tuple("vwxyz"), (0, 0), (3, 3))
    params = manual_params([0.0, 1.0, 0.0])
    before = np.arctanh(pcnn_forward(inst, wv, params))
    wv.vectors[2, 0] += 1.0         # token 2 is the middle-segment maximum
    after = np.arctanh(pcnn_forward(inst, wv, params))
    assert after[1] >= before[1]
    np.testing.assert_allclose(after[[0, 2]], before[[0, 2]])


def test_span_shift_changes_only_position_channels():
    wv = toy_wv()
    params = init_params(wv.dim, [0, 1], small_cfg())
    a = Instance(("a", "b", "c", "d", "e"), (0, 0), (4, 4))
    b = Instance(("a", "b", "c", "d", "e"), (0, 0), (3, 3))
    assert np.any(pcnn_forward(a, wv, params) != pcnn_forward(b, wv, params))
    params.pos_head[...] = 0
    params.pos_tail[...] = 0
    # with zero position tables only the segment split differs; shared tokens still yield identical conv
    fa, fb = pcnn_forward(a, wv, params), pcnn_forward(b, wv, params)
    np.testing.assert_array_equal(fa[:4], fb[:4])


def test_empty_sentence_error():
    with pytest.raises(EmptySentenceError):
        Instance([], (0, 0), (0, 0))


# --- softmax / classification ------------------------------------------------------

def test_softmax_is_probability_vector():
    rng = np.random.default_rng(0)
    for _ in range(20):
        p = softmax(rng.normal(scale=30, size=7))
        assert np.all(p >= 0)
        assert abs(p.sum() - 1) <= 1e-12


def test_classify_topT_full_and_saturated():
    params = manual_params([0, 0, 0])
    params.W_c = np.eye(3)
    params.b_c = np.zeros(3)
    params.classes = [4, 7, 9]
    top = classify_topT(np.array([10.0, 0, 0]), params, 1)
    assert top[0][0] == 4 and top[0][1] > 0.99
    full = classify_topT(np.array([0.3, 0.1, 0.2]), params, 3)
    assert abs(sum(p for _, p in full) - 1) <= 1e-12
    assert [r for r, _ in full] == [4, 9, 7]
    tied = classify_topT(np.zeros(3), params, 2)
    assert [r for r, _ in tied] == [4, 7]
    with pytest.raises(ValueError):
        classify_topT(np.zeros(3), params, 4)


# --- gradients ----------------------------------------------------------------------

@pytest.mark.parametrize("dropout", [0.0, 0.5])
def test_cross_entropy_gradients(dropout):
    wv = WordVectors({w: i for i, w in enumerate("abcd")}, np.random.default_rng(1).normal(size=(4, 3)))
    params = init_params(wv.dim, [0, 1], small_cfg(dropout=dropout, seed=3))
    inst = Instance(("a", "b", "zz", "c", "d", "a"), (1, 1), (4, 4), 1)
    # same dropout mask for every evaluation
    run = lambda: loss_and_grads(inst, wv, params, dropout > 0, np.random.default_rng(5))
    _, grads = run()
    names = ["unk", "pos_head", "pos_tail", "filters", "conv_bias", "W_c", "b_c"]
    numeric = central_diff(lambda: run()[0], [getattr(params, n) for n in names])
    for name, num in zip(names, numeric):
        assert rel_error(grads[name], num) < 1e-4, name


# --- training -------------------------------------------------------------------------

def separable_set():
    sents = []
    for i in range(10):
        sents.append(Instance(("e1", "alpha", "e2"), (0, 0), (2, 2), 3))
        sents.append(Instance(("e1", "the", "beta", "e2"), (0, 0), (3, 3), 8))
    return sents


def test_toy_training_reaches_full_accuracy():
    wv = toy_wv(("e1", "e2", "alpha", "beta", "the"), dim=5)
    params = train_classifier(separable_set(), wv, small_cfg(epochs=50, learning_rate=0.05))
    assert accuracy(separable_set(), wv, params) == 1.0
    assert params.classes == [3, 8]


def test_zero_epochs_equal_init():
    wv = toy_wv(("e1", "e2", "alpha", "beta", "the"), dim=5)
    cfg = small_cfg(epochs=0)
    trained = train_classifier(separable_set(), wv, cfg)
    init = init_params(wv.dim, [3, 8], cfg, np.random.default_rng(cfg.seed))
    for k, v in init.arrays().items():
        np.testing.assert_array_equal(trained.arrays()[k], v)


def test_word_vectors_stay_frozen():
    wv = toy_wv(("e1", "e2", "alpha", "beta", "the"), dim=5)
    before = wv.vectors.copy()
    train_classifier(separable_set(), wv, small_cfg(epochs=3))
    np.testing.assert_array_equal(wv.vectors, before)


def test_training_deterministic():
    wv = toy_wv(("e1", "e2", "alpha", "beta", "the"), dim=5)
    a = train_classifier(separable_set(), wv, small_cfg(epochs=3, dropout=0.5))
    b = train_classifier(separable_set(), wv, small_cfg(epochs=3, dropout=0.5))
    np.testing.assert_array_equal(a.filters, b.filters)


def test_unseen_label_rejected():
    wv = toy_wv(("e1", "e2", "alpha", "beta", "the"), dim=5)
    with pytest.raises(ValueError):
        train_classifier(separable_set(), wv, small_cfg(epochs=1), classes=[3])


def test_default_hyperparameters():
    cfg = EncoderConfig()
    assert (cfg.kernel, cfg.pos_dim, cfg.channels, cfg.dropout, cfg.learning_rate) == (3, 5, 250, 0.5, 0.01)


def test_margin_warns():
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        EncoderConfig(margin=2.0)
    assert any("margin" in str(w.message) for w in caught)


# --- checkpoints ------------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    rels = Vocab(["p", "q", "s"])
    params = init_params(4, [0, 2], small_cfg())
    save_params(params, tmp_path / "m.ckpt", rels, small_cfg())
    back = load_params(tmp_path / "m.ckpt", rels)
    for k, v in params.arrays().items():
        np.testing.assert_array_equal(back.arrays()[k], v)
    assert back.classes == [0, 2] and back.dropout == params.dropout


def test_checkpoint_kind_and_magic(tmp_path):
    rels = Vocab(["p", "q"])
    save_params(init_params(2, [0, 1], small_cfg()), tmp_path / "m.ckpt", rels)
    with pytest.raises(ValueError, match="expected"):
        read_checkpoint(tmp_path / "m.ckpt", "devise")
    (tmp_path / "junk").write_bytes(b"hello\n")
    with pytest.raises(ValueError, match="not a checkpoint"):
        read_checkpoint(tmp_path / "junk", "pcnn")
