import numpy as np
import pytest

from hmtpf import nn
from hmtpf import tensor as tn
from hmtpf.tensor import Tensor

from oracles import galerkin_bruteforce


def _attn(width, seed):
    p = nn.Params()
    nn.init_attention(p, np.random.default_rng(seed), "a", width)
    return p


@pytest.mark.parametrize("n,m,heads", [(4, 4, 1), (5, 3, 2), (8, 1, 4), (2, 6, 2)])
def test_galerkin_matches_bruteforce(n, m, heads):
    rng = np.random.default_rng(n * 10 + m)
    p = _attn(8, n)
    keys, queries = rng.normal(size=(n, 8)), rng.normal(size=(m, 8))
    got = nn.galerkin_attention(p, "a", Tensor(queries), Tensor(keys), heads).data
    W = [p[f"a.{w}"].data for w in ("Wq", "Wk", "Wv", "Wo")]
    ref = galerkin_bruteforce(queries, keys, *W, heads, 1e-5)
    np.testing.assert_allclose(got, ref, rtol=0, atol=1e-12)


def test_galerkin_zero_values_is_residual():
    p = _attn(4, 0)
    p["a.Wv"].data[:] = 0
    x = np.random.default_rng(0).normal(size=(6, 4))
    np.testing.assert_array_equal(nn.galerkin_attention(p, "a", Tensor(x), Tensor(x), 2).data, x)


def test_galerkin_heads_must_divide():
    with pytest.raises(tn.DimensionError):
        nn.galerkin_attention(_attn(6, 0), "a", Tensor(np.ones((2, 6))), Tensor(np.ones((2, 6))), 4)


def test_galerkin_output_magnitude_independent_of_n():
    # the 1/n factor keeps per-row attention output O(1) as n grows
    for seed in range(3):
        p = _attn(8, seed)
        p["a.Wo"].data[:] = np.eye(8)
        rng = np.random.default_rng(seed)
        q = rng.normal(size=(16, 8))
        mags = []
        for n in (64, 128, 256, 512):
            keys = rng.normal(size=(n, 8))
            att = nn.galerkin_attention(p, "a", Tensor(q), Tensor(keys), 2).data - q
            mags.append(np.abs(att).mean())
        assert max(mags) / min(mags) < 3.0


def test_galerkin_gradcheck():
    rng = np.random.default_rng(4)
    p = _attn(4, 4)
    x = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
    w = rng.normal(size=(5, 4))
    params = [x] + [p[f"a.{k}"] for k in ("Wq", "Wk", "Wv", "Wo")]
    assert tn.grad_check(lambda: (nn.galerkin_attention(p, "a", x, x, 2) * w).sum(), params) < 1e-5


def test_mlp_structure_and_zero_last():
    p = nn.Params()
    nn.init_mlp(p, np.random.default_rng(0), "m", [3, 5, 2], zero_last=True)
    assert nn.mlp_width(p, "m") == (3, 2)
    assert not p["m.1.W"].data.any()
    out = nn.mlp(p, "m", Tensor(np.ones((4, 3))))
    assert out.shape == (4, 2) and not out.data.any()
    with pytest.raises(KeyError):
        nn.mlp(p, "missing", Tensor(np.ones((1, 3))))


def test_truncated_normal_bound_and_determinism():
    a = nn.truncated_normal(np.random.default_rng(0), (1000,))
    b = nn.truncated_normal(np.random.default_rng(0), (1000,))
    assert np.abs(a).max() <= nn.TRUNC_STD
    assert a.tobytes() == b.tobytes()


def test_params_frozen_shares_buffers_and_copy_does_not():
    p = _attn(4, 0)
    f, c = p.frozen(), p.copy()
    assert all(not t.requires_grad for t in f.values())
    assert np.shares_memory(f["a.Wq"].data, p["a.Wq"].data)
    c["a.Wq"].data[0, 0] += 1
    assert c.to_bytes() != p.to_bytes()
    assert p.sub("a").keys() == {"Wq", "Wk", "Wv", "Wo"}
    assert p.num_values() == 4 * 16
