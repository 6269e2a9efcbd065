import numpy as np
import pytest

import dannkit.autodiff as ad
from dannkit.data import Document
from dannkit.extractors import (AvgExtractor, CnnExtractor, GruParams,
                                HanExtractor, TfidfExtractor, attention_pool,
                                fit_idf, gru_cell, gru_sequence,
                                max_norm_rescale)
from oracles import (attention_ref, conv_maxpool_ref, fd_grad,
                     gru_sequence_ref, gru_step_ref, idf_ref, rel_err,
                     tfidf_vector_ref)


def rand(*shape, seed=0):
    return np.random.default_rng(seed).standard_normal(shape)


def pdict(g):
    return {"Wz": g.Wz.value, "Uz": g.Uz.value, "bz": g.bz.value,
            "Wr": g.Wr.value, "Ur": g.Ur.value, "br": g.br.value,
            "Wh": g.Wh.value, "Uh": g.Uh.value, "bh": g.bh.value}


def fd_against(named_nodes, build, tol=1e-5):
    """FD-check d(build())/d(node) for persistent parameter nodes, where
    ``build`` reassembles the scalar graph from their current buffers."""
    grads = ad.backward(build())
    for name, node in named_nodes:
        def f(x, node=node):
            keep = node.value.copy()
            node.value[...] = x
            try:
                return float(build().value)
            finally:
                node.value[...] = keep

        fd = fd_grad(f, node.value.copy())
        assert node in grads, f"{name} got no gradient"
        assert rel_err(grads[node], fd) < tol, f"{name}: {rel_err(grads[node], fd)}"


# -- idf / tfidf ------------------------------------------------------------

def doc(tokens, domain=0, label=0):
    return Document(list(tokens), [(0, len(tokens))], domain, label=label)


def test_fit_idf_matches_formula():
    docs = [doc(["good", "good", "fine"]), doc(["bad"]), doc(["fine", "bad"])]
    table = fit_idf(docs)
    assert table.n_docs == 3
    assert table.doc_freq == {"good": 1, "fine": 2, "bad": 2}
    for tok, df in [("good", 1), ("fine", 2), ("never-seen", 0)]:
        np.testing.assert_allclose(table.idf(tok), idf_ref(3, df), rtol=1e-12)
    with pytest.raises(ValueError):
        fit_idf([])


def test_tfidf_pool_matches_reference():
    rng = np.random.default_rng(1)
    d = doc(["a", "b", "a", "c", "a"])
    rows = {t: rng.standard_normal(6) for t in "abc"}
    table = fit_idf([doc(["a", "b"]), doc(["b", "c"]), doc(["d"])])
    ext = TfidfExtractor(6, {0: table}, np.random.default_rng(2), hidden=4)
    embedded = ad.constant(np.stack([rows[t] for t in d.tokens]))
    want = tfidf_vector_ref(d.tokens, rows, table.n_docs, table.doc_freq)
    np.testing.assert_allclose(ext.pool(d, embedded).value, want, rtol=1e-12)


def test_tfidf_uses_per_domain_tables():
    tables = {0: fit_idf([doc(["x"]), doc(["y"])]),
              1: fit_idf([doc(["x"] * 1)] * 50)}
    ext = TfidfExtractor(3, tables, np.random.default_rng(0), hidden=2)
    embedded = ad.constant(np.ones((1, 3)))
    v0 = ext.pool(doc(["x"], domain=0), embedded).value
    v1 = ext.pool(doc(["x"], domain=1), embedded).value
    assert v0[0] > v1[0]  # rarer in domain 0, hence weighted higher


def test_idf_hand_values():
    # two docs; "both" appears in each, "one" in a single doc
    table = fit_idf([doc(["both", "one"]), doc(["both"])])
    np.testing.assert_allclose(table.idf("both"), 1.0, rtol=1e-12)
    np.testing.assert_allclose(table.idf("one"), np.log(3 / 2) + 1.0, rtol=1e-12)
    np.testing.assert_allclose(table.idf("unseen"), np.log(3.0) + 1.0, rtol=1e-12)


def test_pooled_stages_are_order_invariant():
    rows = {t: rand(5, seed=ord(t)) for t in "abcd"}
    table = fit_idf([doc(["a", "b"]), doc(["c", "d"])])
    tf = TfidfExtractor(5, {0: table}, np.random.default_rng(0))
    for tokens in (["a", "b", "c", "a"], ["d", "d", "b"]):
        shuffled = list(np.random.default_rng(1).permutation(tokens))
        mk = lambda ts: ad.constant(np.stack([rows[t] for t in ts]))
        np.testing.assert_allclose(AvgExtractor.pool(mk(tokens)).value,
                                   AvgExtractor.pool(mk(shuffled)).value, rtol=1e-12)
        np.testing.assert_allclose(tf.pool(doc(tokens), mk(tokens)).value,
                                   tf.pool(doc(shuffled), mk(shuffled)).value,
                                   rtol=1e-12)


def test_tfidf_equal_weights_reduce_to_scaled_mean():
    # every token once, all with the same document frequency: one shared weight
    table = fit_idf([doc(["a", "b", "c"]), doc(["x"])])
    ext = TfidfExtractor(4, {0: table}, np.random.default_rng(0))
    rows = rand(3, 4, seed=40)
    pooled = ext.pool(doc(["a", "b", "c"]), ad.constant(rows)).value
    np.testing.assert_allclose(pooled, table.idf("a") * rows.mean(axis=0), rtol=1e-12)


# -- dense-head extractors ----------------------------------------------------

def test_avg_extractor_formula_and_dim():
    ext = AvgExtractor(5, np.random.default_rng(3), hidden=7)
    rows = rand(4, 5, seed=4)
    out = ext.forward(doc(list("abcd")), ad.constant(rows))
    want = np.maximum(rows.mean(axis=0) @ ext.W.value + ext.b.value, 0.0)
    np.testing.assert_allclose(out.value, want, rtol=1e-12)
    assert out.value.shape == (ext.feature_dim,) == (7,)


def test_extractor_init_is_deterministic_in_rng():
    a = AvgExtractor(5, np.random.default_rng(8))
    b = AvgExtractor(5, np.random.default_rng(8))
    np.testing.assert_array_equal(a.W.value, b.W.value)


# -- recurrent parts -----------------------------------------------------------

def test_gru_sequence_matches_stepwise_reference():
    rng = np.random.default_rng(5)
    params = GruParams(3, 4, rng)
    xs = rand(6, 3, seed=6)
    for reverse in (False, True):
        got = gru_sequence(params, ad.constant(xs), reverse=reverse)
        want = gru_sequence_ref(xs, pdict(params), reverse=reverse)
        np.testing.assert_allclose(got.value, want, rtol=1e-12, atol=1e-14)


def test_gru_sequence_honors_initial_state():
    params = GruParams(2, 3, np.random.default_rng(7))
    xs, h0 = rand(4, 2, seed=8), rand(3, seed=9)
    got = gru_sequence(params, ad.constant(xs), h0=ad.constant(h0))
    want = gru_sequence_ref(xs, pdict(params), h0=h0)
    np.testing.assert_allclose(got.value, want, rtol=1e-12, atol=1e-14)


def test_gru_cell_is_one_reference_step():
    params = GruParams(3, 2, np.random.default_rng(10))
    x_t, h_prev = rand(3, seed=11), rand(2, seed=12)
    got = gru_cell(params, ad.constant(x_t), ad.constant(h_prev))
    np.testing.assert_allclose(got.value, gru_step_ref(x_t, h_prev, pdict(params)),
                               rtol=1e-12, atol=1e-14)
    with pytest.raises(ad.ShapeError):
        gru_cell(params, ad.constant(rand(2, 3, seed=0)), ad.constant(h_prev))


def test_gru_sequence_fused_backward_against_fd():
    params = GruParams(2, 3, np.random.default_rng(13))
    xs = ad.parameter(rand(5, 2, seed=14))
    h0 = ad.parameter(rand(3, seed=15))
    w = ad.constant(rand(3, seed=16))
    named = params.named("g") + [("xs", xs), ("h0", h0)]
    for reverse in (False, True):
        ad.zero_grad([n for _, n in named])
        fd_against(named, lambda: ad.matmul(
            ad.mean(gru_sequence(params, xs, h0=h0, reverse=reverse), axis=0), w))


def test_gru_cell_with_zero_weights_halves_previous_state():
    params = GruParams(2, 3, np.random.default_rng(0))
    for _, node in params.named("g"):
        node.value[...] = 0.0
    h_prev = rand(3, seed=41)
    got = gru_cell(params, ad.constant(rand(2, seed=42)), ad.constant(h_prev))
    np.testing.assert_allclose(got.value, 0.5 * h_prev, rtol=1e-12)


def test_gru_sequence_rejects_empty_or_flat_input():
    params = GruParams(2, 3, np.random.default_rng(0))
    with pytest.raises(ad.ShapeError):
        gru_sequence(params, ad.constant(np.zeros((0, 2))))
    with pytest.raises(ad.ShapeError):
        gru_sequence(params, ad.constant(np.zeros(2)))


def test_attention_pool_degenerate_cases():
    rng = np.random.default_rng(43)
    W, b, u = rng.standard_normal((3, 3)), rng.standard_normal(3), rng.standard_normal(3)
    one = rand(1, 3, seed=44)
    pooled, alpha = attention_pool(ad.constant(one), ad.constant(W),
                                   ad.constant(b), ad.constant(u))
    np.testing.assert_allclose(alpha.value, [1.0], atol=1e-15)
    np.testing.assert_allclose(pooled.value, one[0], rtol=1e-12)
    same = np.tile(rand(3, seed=45), (4, 1))
    _, alpha = attention_pool(ad.constant(same), ad.constant(W),
                              ad.constant(b), ad.constant(u))
    np.testing.assert_allclose(alpha.value, np.full(4, 0.25), atol=1e-12)


def test_attention_pool_matches_reference_and_normalizes():
    rng = np.random.default_rng(17)
    h = rand(5, 4, seed=18)
    W, b, u = rng.standard_normal((4, 4)), rng.standard_normal(4), rng.standard_normal(4)
    pooled, alpha = attention_pool(ad.constant(h), ad.constant(W),
                                   ad.constant(b), ad.constant(u))
    want_pooled, want_alpha = attention_ref(h, W, b, u)
    np.testing.assert_allclose(pooled.value, want_pooled, rtol=1e-12)
    np.testing.assert_allclose(alpha.value, want_alpha, rtol=1e-12)
    np.testing.assert_allclose(alpha.value.sum(), 1.0, atol=1e-12)
    with pytest.raises(ad.ShapeError):
        attention_pool(ad.constant(np.zeros((0, 4))), ad.constant(W),
                       ad.constant(b), ad.constant(u))


# -- cnn -----------------------------------------------------------------------

def test_cnn_forward_matches_window_reference():
    ext = CnnExtractor(4, 8, np.random.default_rng(19), widths=(2, 3), maps=5)
    rows = rand(8, 4, seed=20)
    out = ext.forward(doc(list("abcdefgh")), ad.constant(rows))
    want = np.concatenate([conv_maxpool_ref(rows, W.value, b.value, h)
                           for h, W, b in ext.banks])
    np.testing.assert_allclose(out.value, want, rtol=1e-12)
    assert out.value.shape == (ext.feature_dim,) == (10,)


def test_cnn_hand_convolution():
    ext = CnnExtractor(2, 4, np.random.default_rng(0), widths=(3,), maps=1)
    _, W, b = ext.banks[0]
    W.value[...] = 1.0
    rows = np.array([[1.0, 0.0], [2.0, 0.0], [3.0, 0.0], [0.0, 0.0]])
    out = ext.forward(doc(list("abcd")), ad.constant(rows))
    np.testing.assert_allclose(out.value, [6.0], rtol=1e-12)  # max of [6, 5, 3]
    zero = ext.forward(doc(list("abcd")), ad.constant(np.zeros((4, 2))))
    np.testing.assert_array_equal(zero.value, [0.0])


def test_cnn_ignores_extra_trailing_padding():
    rng = np.random.default_rng(46)
    short = CnnExtractor(3, 6, rng, widths=(2, 3), maps=4)
    long = CnnExtractor(3, 9, np.random.default_rng(0), widths=(2, 3), maps=4)
    for (_, Ws, bs), (_, Wl, bl) in zip(short.banks, long.banks):
        Wl.value[...] = Ws.value = np.abs(Ws.value)  # keep activations >= 0
        bl.value[...] = bs.value
    rows = np.abs(rand(4, 3, seed=47))
    pad = lambda n: np.vstack([rows, np.zeros((n - 4, 3))])
    a = short.forward(doc(list("abcdef")), ad.constant(pad(6))).value
    b = long.forward(doc(list("abcdefghi")), ad.constant(pad(9))).value
    np.testing.assert_allclose(a, b, rtol=1e-12)


def test_cnn_shape_and_construction_errors():
    ext = CnnExtractor(4, 8, np.random.default_rng(0), widths=(2, 3), maps=5)
    with pytest.raises(ad.ShapeError):
        ext.forward(doc(list("abc")), ad.constant(rand(3, 4, seed=0)))
    with pytest.raises(ValueError, match="shorter than widest"):
        CnnExtractor(4, 2, np.random.default_rng(0), widths=(3,))


def test_cnn_dropout_only_at_train_time():
    ext = CnnExtractor(3, 6, np.random.default_rng(21), widths=(2,), maps=40,
                       dropout_rate=0.5)
    rows = np.abs(rand(6, 3, seed=22)) + 0.1
    embedded = ad.constant(rows)
    d = doc(list("abcdef"))
    clean = ext.forward(d, embedded).value
    np.testing.assert_array_equal(ext.forward(d, embedded).value, clean)
    dropped = ext.forward(d, embedded, dropout_rng=np.random.default_rng(4)).value
    again = ext.forward(d, embedded, dropout_rng=np.random.default_rng(4)).value
    np.testing.assert_array_equal(dropped, again)
    zeroed = dropped == 0.0
    assert zeroed.any() and not zeroed.all()
    np.testing.assert_allclose(dropped[~zeroed], 2.0 * clean[~zeroed], rtol=1e-12)


def test_max_norm_rescale_caps_class_columns():
    w = np.array([[3.0, 0.1], [4.0, 0.2]])   # column norms 5 and ~0.22
    node = ad.parameter(w.copy())
    buf = node.value
    max_norm_rescale(node, 3.0)
    assert node.value is buf
    np.testing.assert_allclose(np.linalg.norm(node.value[:, 0]), 3.0, rtol=1e-12)
    np.testing.assert_array_equal(node.value[:, 1], w[:, 1])
    np.testing.assert_allclose(node.value[:, 0], w[:, 0] * 3.0 / 5.0, rtol=1e-12)
    with pytest.raises(ValueError):
        max_norm_rescale(node, 0.0)


# -- han -----------------------------------------------------------------------

def han_doc():
    return Document(list("abcde"), [(0, 2), (2, 5)], 0, label=0)


def test_han_attention_weights_are_distributions():
    ext = HanExtractor(3, np.random.default_rng(23), units=2)
    embedded = ad.constant(rand(5, 3, seed=24))
    v, word_alphas, sent_alpha = ext.forward_with_attention(han_doc(), embedded)
    assert v.value.shape == (ext.feature_dim,) == (4,)
    assert [len(a) for a in word_alphas] == [2, 3]
    for a in word_alphas + [sent_alpha]:
        np.testing.assert_allclose(np.sum(a), 1.0, atol=1e-12)
        assert np.all(a >= 0.0)
    np.testing.assert_array_equal(ext.forward(han_doc(), embedded).value, v.value)


def test_han_feature_matches_manual_two_level_composition():
    ext = HanExtractor(3, np.random.default_rng(25), units=2)
    rows = rand(5, 3, seed=26)
    svecs = []
    for a, b in han_doc().sentences:
        h = np.concatenate([gru_sequence_ref(rows[a:b], pdict(ext.word_f)),
                            gru_sequence_ref(rows[a:b], pdict(ext.word_b), reverse=True)],
                           axis=1)
        s, _ = attention_ref(h, ext.Ww.value, ext.bw.value, ext.uw.value)
        svecs.append(s)
    hs = np.concatenate([gru_sequence_ref(np.stack(svecs), pdict(ext.sent_f)),
                         gru_sequence_ref(np.stack(svecs), pdict(ext.sent_b), reverse=True)],
                        axis=1)
    want, _ = attention_ref(hs, ext.Ws.value, ext.bs.value, ext.us.value)
    got = ext.forward(han_doc(), ad.constant(rows))
    np.testing.assert_allclose(got.value, want, rtol=1e-10, atol=1e-12)


def test_han_end_to_end_gradients_against_fd():
    ext = HanExtractor(3, np.random.default_rng(27), units=2)
    embedded = ad.parameter(rand(5, 3, seed=28))
    w = ad.constant(rand(4, seed=29))
    named = ext.named_params() + [("embedded", embedded)]
    fd_against(named, lambda: ad.matmul(ext.forward(han_doc(), embedded), w),
               tol=5e-5)


def test_han_requires_sentences():
    ext = HanExtractor(3, np.random.default_rng(0), units=2)
    bad = Document(list("ab"), [], 0, label=0)
    with pytest.raises(ValueError, match="no sentences"):
        ext.forward(bad, ad.constant(rand(2, 3, seed=0)))


def test_han_single_token_document_has_unit_attention():
    ext = HanExtractor(3, np.random.default_rng(48), units=2)
    one = Document(["hi"], [(0, 1)], 0, label=0)
    _, word_alphas, sent_alpha = ext.forward_with_attention(one, ad.constant(rand(1, 3, seed=49)))
    np.testing.assert_allclose(word_alphas[0], [1.0], atol=1e-15)
    np.testing.assert_allclose(sent_alpha, [1.0], atol=1e-15)


# -- shared contract -----------------------------------------------------------

def test_default_feature_dimensions():
    rng = np.random.default_rng(50)
    assert AvgExtractor(12, rng).feature_dim == 100
    assert TfidfExtractor(12, {}, rng).feature_dim == 100
    assert CnnExtractor(12, 20, rng).feature_dim == 300
    assert HanExtractor(12, rng).feature_dim == 200


@pytest.mark.parametrize("make", [
    lambda rng: AvgExtractor(4, rng, hidden=6),
    lambda rng: TfidfExtractor(4, {0: fit_idf([doc(["a", "b"])])}, rng, hidden=6),
    lambda rng: CnnExtractor(4, 6, rng, widths=(2, 3), maps=3),
    lambda rng: HanExtractor(4, rng, units=2),
])
def test_named_params_are_unique_trainable_and_complete(make):
    ext = make(np.random.default_rng(30))
    named = ext.named_params()
    names = [n for n, _ in named]
    assert len(names) == len(set(names))
    assert all(node.requires_grad for _, node in named)

    embedded = ad.parameter(rand(6, 4, seed=31))
    d = Document(list("abcdef"), [(0, 3), (3, 6)], 0, label=0)
    out = ext.forward(d, embedded)
    grads = ad.backward(ad.mean(out))
    missing = [n for n, node in named if node not in grads]
    assert not missing, f"no gradient reached {missing}"
