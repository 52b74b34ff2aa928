import numpy as np
import pytest

from sqswin import autodiff as ad
from sqswin.errors import ConfigError
from sqswin.model import (PatchEmbed, PatchMerge, QSwinBlock, QSwinConfig, QSwinModel, count_params,
                          cyclic_shift, linear_twin, macs, merge_neighbourhoods, patch_embed, patch_merge,
                          qkv_weight_count, qswin_block, shift_attention_mask, window_attention,
                          window_partition, window_reverse)

from oracles import attention_loops, gelu_scalar, layer_norm_row, linear_loops, quadratic_loops


@pytest.fixture(scope="module")
def tiny():
    return QSwinModel(QSwinConfig.tiny(), seed=0)


def images(n, res=32, seed=0):
    return np.random.default_rng(seed).uniform(size=(n, res, res, 3)).astype(np.float32)


class TestConfig:
    def test_defaults(self):
        c = QSwinConfig()
        assert (c.input_resolution, c.patch_size, c.embed_dim, c.depths, c.window_size, c.feature_dim) == \
            (224, 4, 96, (2, 2, 6, 2), 7, 100)
        assert [c.stage_resolution(s) for s in range(4)] == [56, 28, 14, 7]
        assert [c.stage_dim(s) for s in range(4)] == [96, 192, 384, 768]

    @pytest.mark.parametrize("bad", [dict(input_resolution=30), dict(num_heads=(2,)), dict(feature_dim=0),
                                     dict(shift_policy="diagonal"), dict(window_size=3)])
    def test_invalid(self, bad):
        with pytest.raises(ConfigError):
            QSwinConfig.tiny(**bad)

    def test_shift_policies(self):
        assert QSwinConfig().stage_shift(0) == 3
        assert QSwinConfig(shift_policy="quarter_map").stage_shift(0) == 14
        assert QSwinConfig(shift_policy="none").stage_shift(0) == 0
        assert QSwinConfig().stage_shift(3) == 0  # one window covers the whole map


class TestPatchEmbed:
    def test_default_token_grid(self):
        embed = PatchEmbed(4, 3, 96, np.random.default_rng(0))
        assert patch_embed(embed, np.zeros((224, 224, 3))).shape == (3136, 96)

    def test_tiny_token_count(self):
        embed = PatchEmbed(4, 3, 16, np.random.default_rng(0))
        assert patch_embed(embed, np.zeros((32, 32, 3))).shape == (64, 16)

    def test_zero_image_zero_tokens(self):
        embed = PatchEmbed(4, 3, 16, np.random.default_rng(0))
        assert not patch_embed(embed, np.zeros((32, 32, 3))).data.any()

    def test_patch_flattening_order(self):
        rng = np.random.default_rng(1)
        embed = PatchEmbed(2, 3, 5, rng)
        img = rng.normal(size=(4, 4, 3))
        with ad.precision(np.float64):
            embed.proj.W = ad.Tensor(embed.proj.W.data)
            embed.proj.b = ad.Tensor(embed.proj.b.data)
            tokens = patch_embed(embed, img).data
        flat = img[2:4, 0:2].reshape(-1)  # token (1, 0) in row-major order is index 2
        np.testing.assert_allclose(tokens[2], linear_loops(flat, embed.proj.W.data, embed.proj.b.data), rtol=1e-10)

    def test_indivisible(self):
        with pytest.raises(ConfigError):
            PatchEmbed(4, 3, 8, np.random.default_rng(0))(np.zeros((1, 30, 30, 3)))


class TestWindows:
    def test_counts(self):
        assert window_partition(np.zeros((8, 8, 5)), 4).shape == (4, 16, 5)
        assert window_partition(np.zeros((8, 8, 5)), 8).shape == (1, 64, 5)

    def test_roundtrip(self):
        g = np.random.default_rng(0).normal(size=(2, 8, 8, 3)).astype(np.float32)
        back = window_reverse(window_partition(g, 4), 4, 8, 8).data
        assert back.tobytes() == g.tobytes()

    def test_window_contents(self):
        g = np.arange(16.0).reshape(4, 4, 1)
        w = window_partition(g, 2).data[..., 0]
        np.testing.assert_array_equal(w[1], [2, 3, 6, 7])

    def test_indivisible(self):
        with pytest.raises(ConfigError):
            window_partition(np.zeros((6, 6, 1)), 4)


class TestCyclicShift:
    def test_index_map(self):
        g = np.arange(16.0).reshape(4, 4, 1)
        out = cyclic_shift(g, 1).data[..., 0]
        assert out[0, 0] == g[3, 3, 0]
        for i in range(4):
            for j in range(4):
                assert out[i, j] == g[(i - 1) % 4, (j - 1) % 4, 0]

    def test_identity_and_inverse(self):
        g = np.random.default_rng(0).normal(size=(6, 6, 2)).astype(np.float32)
        assert cyclic_shift(g, 0).data.tobytes() == g.tobytes()
        for o in range(-5, 6):
            assert cyclic_shift(cyclic_shift(g, o), -o).data.tobytes() == g.tobytes()


def swin_reference_mask(res, window, shift):
    """Region-label mask built with the usual slice construction."""
    img = np.zeros((res, res))
    cnt = 0
    for hs in (slice(0, -window), slice(-window, -shift), slice(-shift, None)):
        for ws in (slice(0, -window), slice(-window, -shift), slice(-shift, None)):
            img[hs, ws] = cnt
            cnt += 1
    nw = res // window
    win = img.reshape(nw, window, nw, window).transpose(0, 2, 1, 3).reshape(-1, window * window)
    return win[:, None, :] != win[:, :, None]


@pytest.mark.parametrize("res,window,shift", [(8, 4, 2), (8, 2, 1), (12, 4, 3), (8, 4, 1)])
def test_shift_mask_matches_reference(res, window, shift):
    np.testing.assert_array_equal(shift_attention_mask(res, window, shift), swin_reference_mask(res, window, shift))


class TestWindowAttention:
    def test_single_token(self):
        v = ad.Tensor(np.random.default_rng(0).normal(size=(2, 3, 1, 4)))
        rec = []
        out = window_attention(ad.Tensor(np.ones((2, 3, 1, 4))), ad.Tensor(np.ones((2, 3, 1, 4))), v, recorder=rec)
        np.testing.assert_allclose(out.data, v.data, rtol=1e-6)
        assert all(r.matrix.shape == (1, 1) and r.matrix[0, 0] == 1 for r in rec)

    def test_identical_keys_average_values(self):
        rng = np.random.default_rng(1)
        q = ad.Tensor(rng.normal(size=(1, 1, 4, 3)))
        k = ad.Tensor(np.broadcast_to(rng.normal(size=3), (1, 1, 4, 3)))
        v = ad.Tensor(rng.normal(size=(1, 1, 4, 3)))
        out = window_attention(q, k, v).data
        np.testing.assert_allclose(out[0, 0], np.broadcast_to(v.data[0, 0].mean(0), (4, 3)), rtol=1e-5)

    def test_two_tokens_against_loops(self):
        Q = [[0.5, -1.0], [2.0, 0.3]]
        K = [[1.0, 0.2], [-0.7, 0.9]]
        V = [[1.0, 2.0], [3.0, -4.0]]
        t = lambda m: ad.Tensor(np.array(m)[None, None])  # noqa: E731
        out = window_attention(t(Q), t(K), t(V)).data[0, 0]
        np.testing.assert_allclose(out, attention_loops(Q, K, V), atol=1e-6)

    def test_window_locality(self):
        rng = np.random.default_rng(2)
        q, k, v = (rng.normal(size=(3, 2, 4, 5)) for _ in range(3))
        base = window_attention(ad.Tensor(q), ad.Tensor(k), ad.Tensor(v)).data
        v2 = v.copy()
        v2[0] = v2[0][:, ::-1]
        other = window_attention(ad.Tensor(q), ad.Tensor(k), ad.Tensor(v2)).data
        np.testing.assert_array_equal(base[1:], other[1:])

    def test_mask_blocks_cross_region(self):
        rng = np.random.default_rng(3)
        mask = shift_attention_mask(4, 2, 1)
        rec = []
        q, k, v = (ad.Tensor(rng.normal(size=(4, 1, 4, 2))) for _ in range(3))
        window_attention(q, k, v, mask, recorder=rec, num_windows=4)
        for r in rec:
            assert (r.matrix[mask[r.window]] == 0).all()
            np.testing.assert_allclose(r.matrix.sum(1), 1, atol=1e-6)


def block_loops(block, tokens):
    """One unshifted window covering all tokens, single head, scalar arithmetic."""
    p = {n: t.data.astype(np.float64).tolist() for n, t in block.named_parameters()}
    eps = block.norm1.eps
    rows = tokens.tolist()

    def quad(prefix, x):
        return quadratic_loops(x, p[f"{prefix}.W_r"], p[f"{prefix}.b_r"], p[f"{prefix}.W_g"],
                               p[f"{prefix}.b_g"], p[f"{prefix}.W_b"], p[f"{prefix}.b_b"])

    Q = [quad("q", x) for x in rows]
    K = [quad("k", x) for x in rows]
    V = [quad("v", x) for x in rows]
    att = attention_loops(Q, K, V)
    att = [linear_loops(a, p["proj.W"], p["proj.b"]) for a in att]
    t1 = [[a + x for a, x in zip(layer_norm_row(a, p["norm1.gain"], p["norm1.bias"], eps), row)]
          for a, row in zip(att, rows)]
    out = []
    for row in t1:
        h = [gelu_scalar(v) for v in linear_loops(row, p["mlp.fc1.W"], p["mlp.fc1.b"])]
        m = linear_loops(h, p["mlp.fc2.W"], p["mlp.fc2.b"])
        out.append([a + b for a, b in zip(layer_norm_row(m, p["norm2.gain"], p["norm2.bias"], eps), row)])
    return np.array(out)


def test_tiny_block_against_scalar_loops():
    rng = np.random.default_rng(4)
    with ad.precision(np.float64):
        block = QSwinBlock(2, 1, 2, 2, 0, QSwinConfig.tiny(), rng)
        for t in block.parameters().values():
            t.data[...] = rng.normal(size=t.shape)
        tokens = rng.normal(size=(4, 2))
        out = qswin_block(block, ad.Tensor(tokens[None]), shifted=False).data[0]
    np.testing.assert_allclose(out, block_loops(block, tokens), atol=1e-6)


class TestBlock:
    def test_shape_preserved(self):
        rng = np.random.default_rng(5)
        block = QSwinBlock(8, 2, 4, 2, 1, QSwinConfig.tiny(), rng)
        x = ad.Tensor(rng.normal(size=(3, 16, 8)))
        assert block(x).shape == x.shape and block(x, shifted=False).shape == x.shape

    def test_relinear_block_equals_linear_block(self):
        rng = np.random.default_rng(6)
        cfg = QSwinConfig.tiny()
        qblock = QSwinBlock(8, 2, 4, 2, 1, cfg, rng)
        lblock = QSwinBlock(8, 2, 4, 2, 1, QSwinConfig.tiny(quadratic=False), rng)
        for name, t in lblock.named_parameters():
            src = name.replace(".W", ".W_r").replace(".b", ".b_r") if name[0] in "qkv" else name
            t.data[...] = qblock.parameters()[src].data
        x = ad.Tensor(rng.normal(size=(2, 16, 8)))
        for shifted in (False, True):
            np.testing.assert_allclose(qblock(x, shifted).data, lblock(x, shifted).data, atol=1e-6)

    def test_unshifted_attention_is_window_local(self):
        rng = np.random.default_rng(7)
        block = QSwinBlock(4, 1, 4, 2, 1, QSwinConfig.tiny(), rng)
        x = rng.normal(size=(1, 4, 4, 4))
        y = x.copy()
        y[0, :2, :2] += 1.0  # perturb window 0 only
        flat = lambda g: ad.Tensor(g.reshape(1, 16, 4))  # noqa: E731
        a = block.attention(flat(x), 0).data.reshape(4, 4, 4)
        b = block.attention(flat(y), 0).data.reshape(4, 4, 4)
        np.testing.assert_array_equal(a[2:], b[2:])
        np.testing.assert_array_equal(a[:2, 2:], b[:2, 2:])
        assert not np.array_equal(a[:2, :2], b[:2, :2])


class TestPatchMerge:
    def test_default_stage_shape(self):
        merge = PatchMerge(96, np.random.default_rng(0))
        assert patch_merge(merge, np.zeros((56, 56, 96))).shape == (28, 28, 192)

    def test_hand_oracle(self):
        merge = PatchMerge(1, np.random.default_rng(0))
        merge.reduction.W.data[...] = [[1, 0], [10, 0], [100, 0], [1000, 1]]
        grid = np.array([[[1.0], [2.0]], [[3.0], [4.0]]])  # a=1 b=2 / c=3 d=4
        np.testing.assert_array_equal(merge_neighbourhoods(grid).data[0, 0], [1, 3, 2, 4])
        np.testing.assert_array_equal(patch_merge(merge, grid).data[0, 0], [1 + 30 + 200 + 4000, 4])

    def test_repeated_merges_reach_one_cell(self):
        g = ad.Tensor(np.ones((8, 8, 1)))
        for _ in range(3):
            g = merge_neighbourhoods(g)
        assert g.shape == (1, 1, 64)

    def test_odd(self):
        with pytest.raises(ConfigError):
            merge_neighbourhoods(np.zeros((3, 4, 2)))


class TestForward:
    def test_tiny_shapes(self, tiny):
        f, s = tiny.forward(images(3))
        assert f.shape == (3, 8) and s.shape == (3,)

    def test_default_shapes(self):
        model = QSwinModel(QSwinConfig(), seed=0)
        f, s = model.forward(images(1, 224))
        assert f.shape == (1, 100) and s.shape == (1,)

    def test_deterministic(self):
        a = QSwinModel(QSwinConfig.tiny(), seed=3).forward(images(2))[1].data
        b = QSwinModel(QSwinConfig.tiny(), seed=3).forward(images(2))[1].data
        assert a.tobytes() == b.tobytes()

    def test_batch_independence(self, tiny):
        x = images(4)
        both = tiny.predict(x)
        np.testing.assert_allclose([tiny.predict(x[i:i + 1])[0] for i in range(4)], both, rtol=1e-5, atol=1e-6)

    def test_resolution_mismatch(self, tiny):
        with pytest.raises(ConfigError):
            tiny.forward(images(1, 64))

    def test_relinear_equivalence(self, tiny):
        x = images(10, seed=5)
        diff = np.abs(tiny.predict(x) - linear_twin(tiny).predict(x)).max()
        assert diff <= 1e-5

    def test_attention_records(self, tiny):
        with tiny.recording() as rec:
            tiny.forward(images(1))
        assert {(r.stage, r.block) for r in rec} == {(0, 0), (1, 0)}
        for r in rec:
            assert (r.matrix >= 0).all()
            np.testing.assert_allclose(r.matrix.sum(1), 1, atol=1e-6)
        assert tiny.recorder is None


class TestAccounting:
    def test_counts_add_up(self, tiny):
        total, quad, base = count_params(tiny)
        assert total == quad + base == sum(t.size for t in tiny.parameters().values())

    def test_linear_model_smaller(self, tiny):
        lin = QSwinModel(QSwinConfig.tiny(quadratic=False))
        assert count_params(lin)[0] < count_params(tiny)[0]
        assert count_params(lin)[0] == count_params(tiny)[2]

    @pytest.mark.parametrize("cfg", [QSwinConfig.tiny(), QSwinConfig()], ids=["tiny", "default"])
    def test_qkv_weights_tripled(self, cfg):
        import dataclasses
        q = qkv_weight_count(QSwinModel(cfg))
        lin = qkv_weight_count(QSwinModel(dataclasses.replace(cfg, quadratic=False)))
        assert q == 3 * lin
        assert lin == sum(3 * d * cfg.stage_dim(s) ** 2 for s, d in enumerate(cfg.depths))

    def test_macs_exceed_linear(self):
        import dataclasses
        cfg = QSwinConfig()
        assert macs(cfg) > macs(dataclasses.replace(cfg, quadratic=False))
