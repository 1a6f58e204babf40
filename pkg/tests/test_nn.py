import numpy as np
import pytest

from vidtext import autodiff as ad
from vidtext import nn
from vidtext.errors import LengthError


def cfg8(layers=1, max_len=16):
    return nn.StackConfig(width=8, heads=2, layers=layers, mlp_ratio=4, max_len=max_len)


def weighted(y, rng):
    return ad.sum(ad.mul(y, ad.Tensor(rng.uniform(-1, 1, y.shape))))


def closed_form_count(d, r, layers):
    # per layer: 2 LNs, 4 affine d->d maps, MLP d->rd->d; plus the final LN
    per_layer = 2 * 2 * d + 4 * (d * d + d) + (d * r * d + r * d) + (r * d * d + d)
    return layers * per_layer + 2 * d


class TestInit:
    def test_param_count_matches_closed_form(self):
        params = nn.init_stack(cfg8(), 0)
        assert nn.param_count(params) == closed_form_count(8, 4, 1) == 888

    @pytest.mark.parametrize("layers", [1, 2, 3])
    def test_count_is_function_of_config(self, layers):
        c = nn.StackConfig(16, 4, layers, 2)
        assert nn.param_count(nn.init_stack(c, 1)) == closed_form_count(16, 2, layers)

    def test_deterministic(self):
        a, b = nn.init_stack(cfg8(2), 42), nn.init_stack(cfg8(2), 42)
        assert a.keys() == b.keys()
        for k in a:
            assert a[k].data.tobytes() == b[k].data.tobytes()

    def test_seed_matters(self):
        a, b = nn.init_stack(cfg8(), 1), nn.init_stack(cfg8(), 2)
        assert not np.array_equal(a["layers.0.attn.q.weight"].data, b["layers.0.attn.q.weight"].data)

    def test_shapes_follow_config(self):
        for name, t in nn.init_stack(cfg8(2), 0).items():
            assert t.shape == nn.stack_param_shapes(cfg8(2))[name]

    @pytest.mark.parametrize("kw", [dict(width=7, heads=2, layers=1), dict(width=8, heads=2, layers=0),
                                    dict(width=8, heads=2, layers=1, max_len=0)])
    def test_invalid_config(self, kw):
        with pytest.raises(ValueError):
            nn.StackConfig(**kw)


class TestEmbedding:
    def test_row_zero(self):
        table = ad.Tensor(np.arange(12.0).reshape(4, 3))
        np.testing.assert_array_equal(nn.embed_tokens([0], table).data, [[0, 1, 2]])

    def test_repeated_id_doubles_gradient(self):
        table = ad.Tensor(np.arange(12.0).reshape(4, 3), requires_grad=True)
        out = nn.embed_tokens([2, 2], table)
        np.testing.assert_array_equal(out.data[0], out.data[1])
        ad.sum(out).backward()
        np.testing.assert_array_equal(table.grad[2], [2, 2, 2])
        assert np.all(table.grad[[0, 1, 3]] == 0)

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            nn.embed_tokens([4], ad.Tensor(np.zeros((4, 3))))

    def test_zero_positions_are_identity(self, rng):
        x = ad.Tensor(rng.normal(size=(3, 4)))
        np.testing.assert_array_equal(nn.add_position_embedding(x, ad.Tensor(np.zeros((5, 4)))).data, x.data)

    def test_too_long(self, rng):
        with pytest.raises(LengthError):
            nn.add_position_embedding(ad.Tensor(rng.normal(size=(6, 4))), ad.Tensor(np.zeros((5, 4))))

    def test_gradient_reaches_both(self, rng):
        x = ad.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        pos = ad.Tensor(rng.normal(size=(5, 4)), requires_grad=True)
        f = lambda x, pos: weighted(ad.mul(nn.add_position_embedding(x, pos), nn.add_position_embedding(x, pos)),  # noqa: E731
                                    np.random.default_rng(0))
        assert ad.grad_check(f, [x, pos], 1e-5) < 1e-6
        f(x, pos).backward()
        assert np.abs(x.grad).sum() > 0 and np.abs(pos.grad[:3]).sum() > 0


def attn_params(rng, d=8):
    p = {}
    for proj in ("q", "k", "v", "out"):
        p[f"{proj}.weight"] = ad.Tensor(rng.normal(0, 0.5, (d, d)), requires_grad=True)
        p[f"{proj}.bias"] = ad.Tensor(rng.normal(0, 0.5, d), requires_grad=True)
    return p


class TestAttention:
    def test_single_token(self, backend, rng):
        p = attn_params(rng)
        x = rng.normal(size=(1, 8))
        out = nn.multi_head_attention(ad.Tensor(x), p, heads=2).data
        v = x @ p["v.weight"].data + p["v.bias"].data
        expect = v @ p["out.weight"].data + p["out.bias"].data
        np.testing.assert_allclose(out, expect, rtol=0, atol=1e-12)

    def test_single_valid_key(self, backend, rng):
        p = attn_params(rng)
        x = rng.normal(size=(4, 8))
        mask = np.array([False, False, True, False])
        out = nn.multi_head_attention(ad.Tensor(x), p, heads=2, mask=mask).data
        v = x[2] @ p["v.weight"].data + p["v.bias"].data
        expect = v @ p["out.weight"].data + p["out.bias"].data
        np.testing.assert_allclose(out, np.tile(expect, (4, 1)), rtol=0, atol=1e-12)

    def test_masked_keys_do_not_matter(self, backend, rng):
        p = attn_params(rng)
        x = rng.normal(size=(2, 5, 8))
        mask = np.array([[1, 1, 1, 0, 0], [1, 1, 1, 1, 0]], dtype=bool)
        base = nn.multi_head_attention(ad.Tensor(x), p, 2, mask).data
        x2 = x.copy()
        x2[~mask] = rng.normal(size=(int((~mask).sum()), 8)) * 100
        moved = nn.multi_head_attention(ad.Tensor(x2), p, 2, mask).data
        np.testing.assert_allclose(base[mask], moved[mask], rtol=0, atol=1e-12)

    def test_batched_matches_single(self, rng):
        p = attn_params(rng)
        x = rng.normal(size=(3, 4, 8))
        batched = nn.multi_head_attention(ad.Tensor(x), p, 2).data
        for i in range(3):
            np.testing.assert_allclose(batched[i], nn.multi_head_attention(ad.Tensor(x[i]), p, 2).data, atol=1e-14)

    def test_gradient(self, backend, rng):
        p = attn_params(rng)
        x = ad.Tensor(rng.normal(size=(3, 8)))
        names = list(p)
        w = rng.uniform(-1, 1, (3, 8))

        def f(x, *ts):
            return ad.sum(ad.mul(nn.multi_head_attention(x, dict(zip(names, ts)), 2), ad.Tensor(w)))

        # k.bias has an identically zero gradient (softmax shift invariance)
        assert ad.grad_check(f, [x] + [p[n] for n in names], 1e-5, abs_tol=1e-8) < 1e-5


class TestStack:
    def test_zeroed_residual_gives_final_ln(self, backend, rng):
        c = cfg8()
        params = nn.init_stack(c, 3)
        for name in ("layers.0.attn.out.weight", "layers.0.attn.out.bias", "layers.0.mlp.fc2.weight", "layers.0.mlp.fc2.bias"):
            params[name].data[...] = 0.0
        params["ln_final.gain"].data[:] = rng.uniform(0.5, 2, 8)
        params["ln_final.bias"].data[:] = rng.normal(size=8)
        x = rng.normal(size=(5, 8))
        out = nn.transformer_forward(ad.Tensor(x), params, c).data
        mu, var = x.mean(1, keepdims=True), x.var(1, keepdims=True)
        expect = (x - mu) / np.sqrt(var + nn.LN_EPS) * params["ln_final.gain"].data + params["ln_final.bias"].data
        np.testing.assert_allclose(out, expect, rtol=0, atol=1e-12)

    def test_permutation_equivariance(self, backend, rng):
        c = cfg8(2)
        params = nn.init_stack(c, 5)
        x = rng.normal(size=(6, 8))
        perm = rng.permutation(6)
        a = nn.transformer_forward(ad.Tensor(x), params, c).data
        b = nn.transformer_forward(ad.Tensor(x[perm]), params, c).data
        np.testing.assert_allclose(a[perm], b, rtol=0, atol=1e-12)

    def test_too_long(self, rng):
        with pytest.raises(LengthError):
            nn.transformer_forward(ad.Tensor(rng.normal(size=(5, 8))), nn.init_stack(cfg8(max_len=4), 0), cfg8(max_len=4))

    def test_gradient(self, backend, rng):
        c = cfg8(2)
        params = nn.init_stack(c, 9)
        # init is near-degenerate (biases zero, small weights); perturb for a generic point
        for t in params.values():
            t.data = t.data + rng.normal(0, 0.3, t.shape)
        names = list(params)
        x = ad.Tensor(rng.normal(size=(4, 8)))
        w = rng.uniform(-1, 1, (4, 8))

        def f(x, *ts):
            return ad.sum(ad.mul(nn.transformer_forward(x, dict(zip(names, ts)), c), ad.Tensor(w)))

        assert ad.grad_check(f, [x] + [params[n] for n in names], 1e-5, max_coords=12, abs_tol=1e-8) < 1e-4
