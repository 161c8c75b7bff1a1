import numpy as np
import pytest
from hypothesis import given, strategies as st

from radlab import model as M
from radlab import tensor as T
from radlab.tensor import ContractError
from radlab.tokenizer import EOS, PAD

from oracles import central_difference, closed_form_params, rel_error


def random_ids(rng, cfg, n):
    return rng.integers(3, cfg.vocab_size, n)


def test_init_is_deterministic(tiny_config):
    a, b = M.init(tiny_config, 3).arrays(), M.init(tiny_config, 3).arrays()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    c = M.init(tiny_config, 4).arrays()
    assert not np.array_equal(a["shared.embedding"], c["shared.embedding"])


def test_head_dim():
    assert M.ModelConfig(vocab_size=10, d_model=8, n_heads=2, d_ff=4, n_enc_layers=1, n_dec_layers=1).head_dim == 4
    with pytest.raises(ContractError):
        M.ModelConfig(vocab_size=10, d_model=8, n_heads=3, d_ff=4, n_enc_layers=1, n_dec_layers=1)


def test_context_cap():
    with pytest.raises(ContractError):
        M.preset("toy", max_context=1024)


def test_toy_param_count_matches_closed_form():
    cfg = M.preset("toy")
    assert (cfg.vocab_size, cfg.d_model, cfg.d_ff, cfg.n_heads, cfg.n_enc_layers, cfg.n_dec_layers) == (4096, 64, 256, 4, 2, 2)
    expected = closed_form_params(4096, 64, 4, 256, 2, 2, cfg.rel_pos_buckets)
    assert M.count_params(cfg) == expected
    assert M.init(cfg, 0).num_params() == expected


@pytest.mark.parametrize("name,nominal", [("220m", 220e6), ("770m", 770e6), ("3b", 3e9)])
def test_published_scales(name, nominal):
    cfg = M.preset(name)
    n = M.count_params(cfg)
    assert n == closed_form_params(cfg.vocab_size, cfg.d_model, cfg.n_heads, cfg.d_ff, cfg.n_enc_layers,
                                   cfg.n_dec_layers, cfg.rel_pos_buckets)
    assert abs(n - nominal) / nominal < 0.1


def test_forward_shapes(tiny_config):
    p = M.init(tiny_config, 0)
    rng = np.random.default_rng(0)
    assert M.forward(p, random_ids(rng, tiny_config, 5), random_ids(rng, tiny_config, 7)).shape == (7, 40)
    src = random_ids(rng, tiny_config, 10).reshape(2, 5)
    tgt = random_ids(rng, tiny_config, 6).reshape(2, 3)
    assert M.forward(p, src, tgt).shape == (2, 3, 40)


def test_oversized_input_rejected(tiny_config):
    p = M.init(tiny_config.replace(max_context=8), 0)
    with pytest.raises(ContractError):
        M.forward(p, np.full(9, 5), np.full(3, 5))


@pytest.mark.parametrize("layers", [1, 2, 3])
def test_decoder_causality(layers, tiny_config):
    cfg = tiny_config.replace(n_enc_layers=layers, n_dec_layers=layers)
    p = M.init(cfg, layers)
    rng = np.random.default_rng(layers)
    src, tgt = random_ids(rng, cfg, 9), random_ids(rng, cfg, 16)
    base = M.forward(p, src, tgt).numpy()
    for j in range(16):
        edited = tgt.copy()
        edited[j] = 3 + (edited[j] - 2) % (cfg.vocab_size - 3)
        out = M.forward(p, src, edited).numpy()
        np.testing.assert_array_equal(out[:j], base[:j])
        assert not np.allclose(out[j:], base[j:])


def test_source_padding_invariance(tiny_config):
    p = M.init(tiny_config, 1)
    rng = np.random.default_rng(1)
    src, tgt = random_ids(rng, tiny_config, 6), random_ids(rng, tiny_config, 5)
    base = M.forward(p, src, tgt).numpy()
    padded = np.concatenate([src, np.full(4, PAD)])
    np.testing.assert_allclose(M.forward(p, padded, tgt).numpy(), base, atol=1e-5)
    mask = np.concatenate([np.ones(6, bool), np.zeros(4, bool)])[None]
    np.testing.assert_allclose(M.forward(p, padded, tgt, src_mask=mask).numpy(), base, atol=1e-5)


def test_target_padding_invariance(tiny_config):
    p = M.init(tiny_config, 2)
    rng = np.random.default_rng(2)
    src, tgt = random_ids(rng, tiny_config, 6), random_ids(rng, tiny_config, 5)
    base = M.forward(p, src, tgt).numpy()
    padded = M.forward(p, src, np.concatenate([tgt, np.full(3, PAD)])).numpy()
    np.testing.assert_allclose(padded[:5], base, atol=1e-5)


def test_batch_matches_single_examples(tiny_config):
    p = M.init(tiny_config, 5)
    rng = np.random.default_rng(5)
    pairs = [(random_ids(rng, tiny_config, n).tolist(), random_ids(rng, tiny_config, m).tolist()) for n, m in [(4, 3), (7, 5)]]
    batch = M.collate(pairs)
    single = [M.nll(p, s, t).item() for s, t in pairs]
    tokens = [len(t) + 1 for _, t in pairs]
    expected = sum(l * n for l, n in zip(single, tokens)) / sum(tokens)
    assert M.batch_loss(p, batch).item() == pytest.approx(expected, rel=1e-4)


def test_collate_layout():
    b = M.collate([([5, 6], [7, 8, 9])])
    assert b.dec_in.tolist() == [[PAD, 7, 8, 9]]
    assert b.labels.tolist() == [[7, 8, 9, EOS]]


def test_zeroed_embedding_gives_uniform_loss(tiny_config):
    arrays = {k: v.copy() for k, v in M.init(tiny_config, 0).arrays().items()}
    arrays["shared.embedding"][:] = 0
    p = M.ModelParams.from_arrays(tiny_config, arrays)
    assert M.nll(p, [5, 6, 7], [8, 9]).item() == pytest.approx(np.log(tiny_config.vocab_size), abs=1e-5)


@pytest.mark.parametrize("seed", range(5))
def test_nll_gradient_matches_finite_differences(seed, tiny_config):
    rng = np.random.default_rng(seed)
    src, tgt = random_ids(rng, tiny_config, 5).tolist(), random_ids(rng, tiny_config, 4).tolist()
    with T.precision(np.float64):
        p = M.init(tiny_config, seed)
        with T.Tape() as tape:
            loss = M.nll(p, src, tgt)
        grads = T.backward(tape, loss)
        arrays = p.arrays()
        for name, t in p.items():
            def f(x, name=name):
                q = M.ModelParams.from_arrays(tiny_config, {**arrays, name: x}, requires_grad=False)
                return M.nll(q, src, tgt).item()

            numeric = central_difference(f, arrays[name])
            analytic = grads.get(t, np.zeros_like(numeric))
            assert rel_error(analytic, numeric) < 1e-3, name


@given(st.integers(-200, 200), st.integers(-200, 200), st.integers(1, 300), st.booleans())
def test_relative_buckets_translation_invariant(q, k, shift, bidirectional):
    a = M.relative_position_bucket(np.array([k - q]), bidirectional, 32, 128)
    b = M.relative_position_bucket(np.array([(k + shift) - (q + shift)]), bidirectional, 32, 128)
    assert a.tolist() == b.tolist()
    assert 0 <= a[0] < 32


def test_bucket_matrix_depends_only_on_offset():
    m = M._bucket_matrix(20, 20, True, 32, 128)
    for d in range(-19, 20):
        assert len(set(np.diagonal(m, offset=d).tolist())) == 1


def test_decoder_buckets_ignore_future():
    rel = np.arange(1, 10)
    assert set(M.relative_position_bucket(rel, False, 32, 128).tolist()) == {0}
