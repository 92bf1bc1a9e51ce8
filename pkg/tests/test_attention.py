import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import expit

from tandem import autodiff as ad
from tandem.attention import StreamAttention, attend_final, attend_stream, attention_scores


def block(d_in=3, d_h=4, heads=2, seed=0, axis="time"):
    return StreamAttention(d_in, d_h, heads, np.random.default_rng(seed), axis=axis)


def test_worked_example():
    att = StreamAttention(1, 1, 1, np.random.default_rng(0))
    for w in (att.w_q[0], att.w_k[0], att.w_v[0], att.w_o):
        w.data[:] = 1.0
    out = attend_stream(np.array([[1.0], [2.0]]), att).data
    weights = attention_scores(np.array([[1.0], [2.0]]), att)[0]
    np.testing.assert_allclose(weights[0], [0.2689414213699951, 0.7310585786300049], atol=1e-12)
    assert out[0, 0] == pytest.approx(expit(1 * 0.2689414213699951 + 2 * 0.7310585786300049), abs=1e-12)
    assert out[0, 0] == pytest.approx(0.8495, abs=5e-5)


def test_single_token():
    att = block()
    x = np.random.default_rng(1).normal(size=(1, 3))
    cat = np.concatenate([x @ att.w_v[h].data for h in range(2)], axis=-1)
    np.testing.assert_allclose(attend_stream(x, att).data, expit(cat @ att.w_o.data), atol=1e-15)
    assert attention_scores(x, att)[0][0, 0] == 1.0


def test_identical_tokens_give_uniform_rows():
    att = block()
    x = np.tile([[0.3, -1.0, 2.0]], (5, 1))
    for w in attention_scores(x, att):
        np.testing.assert_allclose(w, 0.2, atol=1e-15)
    out = attend_stream(x, att).data
    assert np.allclose(out, out[0])


def test_shapes_and_bounds():
    att = block(d_h=8, heads=4)
    x = np.random.default_rng(2).normal(size=(2, 7, 3))
    out = attend_stream(x, att).data
    assert out.shape == (2, 7, 8)
    assert np.all((out > 0) & (out < 1))
    scores = attention_scores(x, att)
    assert len(scores) == 4 and scores[0].shape == (2, 7, 7)


def test_final_row_matches_full_sequence():
    att = block()
    x = np.random.default_rng(3).normal(size=(4, 6, 3))
    np.testing.assert_allclose(attend_final(x, att).data, attend_stream(x, att).data[:, -1],
                               rtol=0, atol=1e-15)


def test_scores_replay_attend_stream():
    att = block()
    x = np.random.default_rng(4).normal(size=(5, 3))
    scores = attention_scores(x, att)
    heads = [scores[h] @ (x @ att.w_v[h].data) for h in range(2)]
    replay = expit(np.concatenate(heads, axis=-1) @ att.w_o.data)
    np.testing.assert_allclose(replay, attend_stream(x, att).data, atol=1e-14)


def test_input_dim_mismatch():
    with pytest.raises(ad.ShapeError):
        attend_stream(np.zeros((4, 2)), block(d_in=3))
    with pytest.raises(ValueError):
        StreamAttention(3, 5, 2, np.random.default_rng(0))


def test_feature_axis_option():
    att = block(axis="feature")
    x = np.random.default_rng(5).normal(size=(2, 6, 3))
    out = attend_stream(x, att).data
    assert out.shape == (2, 6, 4)
    scores = attention_scores(x, att)
    assert scores[0].shape == (2, 6, 3, 3)
    np.testing.assert_allclose(scores[0].sum(-1), 1.0, atol=1e-12)
    np.testing.assert_allclose(attend_final(x, att).data, out[:, -1], atol=1e-15)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), T=st.integers(1, 9))
def test_rows_are_stochastic(seed, T):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(T, 3)) * 3
    for w in attention_scores(x, block(seed=seed)):
        assert np.all(w >= 0)
        np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-9)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), T=st.integers(2, 9))
def test_permutation_equivariance(seed, T):
    rng = np.random.default_rng(seed)
    att = block(seed=seed)
    x = rng.normal(size=(T, 3))
    perm = rng.permutation(T)
    np.testing.assert_allclose(attend_stream(x[perm], att).data, attend_stream(x, att).data[perm],
                               atol=1e-13)


def test_gradient_check():
    att = block()
    x = ad.tensor(np.random.default_rng(6).normal(size=(2, 4, 3)))
    w = np.random.default_rng(7).normal(size=(2, 4, 4))
    params = [x] + list(att.named_parameters().values())

    def build():
        return ad.sum_(ad.mul(attend_stream(x, att), ad.constant(w)))

    with ad.Tape() as tape:
        out = build()
    grads = ad.grad(out, params, tape)
    h = 1e-6
    for p, g in zip(params, grads):
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = build().item()
            flat[i] = old - h
            down = build().item()
            flat[i] = old
            num = (up - down) / (2 * h)
            assert abs(num - g.reshape(-1)[i]) <= 1e-4 * max(1.0, abs(num))
