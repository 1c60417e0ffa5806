import math
from dataclasses import replace

import numpy as np
import pytest

from phg2st import model as Mdl
from phg2st import tensor as T
from phg2st.data import SynthConfig, generate_synthetic_slide
from phg2st.model import CheckpointError, ConfigError, ModelConfig, Tensor, forward, init_params, prepare_slide
from phg2st.tensor import make_rng

SMALL = ModelConfig(d_model=8, d_prompt=6, d_attn=4, n_heads=2, cross_heads=2, n_blocks=1, dropout=0.0)


def small_slide(seed=0, rows=5, cols=6, d=5, m=4):
    b = generate_synthetic_slide(SynthConfig(n_rows=rows, n_cols=cols, d=d, m=m), seed)
    return prepare_slide(b, np.arange(m))


class TestMask:
    def test_full(self):
        y = make_rng(0).uniform(size=(10, 3))
        out, kept = Mdl.mask_expression(y, 1.0, make_rng(1))
        np.testing.assert_array_equal(out, y)
        assert kept.all()

    def test_empty(self):
        out, kept = Mdl.mask_expression(np.ones((10, 3)), 0.0, make_rng(1))
        assert not out.any() and not kept.any()

    def test_partial(self):
        y = make_rng(0).uniform(0.1, 1.0, size=(10, 3))
        out, kept = Mdl.mask_expression(y, 0.3, make_rng(2))
        assert kept.sum() == 3
        assert np.all(out[~kept] == 0)
        np.testing.assert_array_equal(out[kept], y[kept])

    @pytest.mark.parametrize("n", [1, 7, 10, 23, 100])
    @pytest.mark.parametrize("ratio", [0.0, 0.1, 0.29, 0.3, 0.5, 0.77, 1.0])
    def test_floor_count(self, n, ratio):
        _, kept = Mdl.mask_expression(np.ones((n, 2)), ratio, make_rng(3))
        assert kept.sum() == math.floor(round(ratio * n, 9))

    def test_rejects_bad_ratio(self):
        with pytest.raises(ValueError):
            Mdl.mask_expression(np.ones((3, 2)), 1.5, make_rng(0))

    def test_seeded(self):
        a = Mdl.mask_expression(np.ones((50, 2)), 0.3, make_rng(9))[1]
        b = Mdl.mask_expression(np.ones((50, 2)), 0.3, make_rng(9))[1]
        np.testing.assert_array_equal(a, b)


class TestPromptEncoder:
    def test_zero_input(self):
        params = init_params(SMALL, 5, 4, 0)
        out = Mdl.encode_prompt(np.zeros((3, 4)), params)
        assert out.shape == (3, 6)
        np.testing.assert_array_equal(out.data, np.zeros((3, 6)))

    def test_gradient_wrt_projection(self):
        params = init_params(SMALL, 5, 4, 0)
        y = make_rng(1).uniform(size=(3, 4))
        w = params["prompt.proj.w"]
        probe = make_rng(2).normal(size=(3, 6))

        def fn(weight):
            local = dict(params)
            local["prompt.proj.w"] = weight
            return T.tsum(T.mul(Mdl.encode_prompt(y, local), probe))

        assert T.gradcheck(fn, [w]) < 1e-4


class TestTransformerBlock:
    def test_single_token(self):
        params = init_params(SMALL, 5, 4, 3)
        x = Tensor(make_rng(4).normal(size=(1, 8)))
        out = Mdl.transformer_block(x, params, "spot.block0", 2).data
        p = {k: v.data for k, v in params.items()}
        pre = "spot.block0"
        h = T.layer_norm(x, params[f"{pre}.ln1.g"], params[f"{pre}.ln1.b"]).data
        v = h @ p[f"{pre}.attn.v.w"] + p[f"{pre}.attn.v.b"]
        mid = x.data + v @ p[f"{pre}.attn.o.w"] + p[f"{pre}.attn.o.b"]
        h2 = T.layer_norm(Tensor(mid), params[f"{pre}.ln2.g"], params[f"{pre}.ln2.b"]).data
        mlp = T.gelu(Tensor(h2 @ p[f"{pre}.mlp1.w"] + p[f"{pre}.mlp1.b"])).data @ p[f"{pre}.mlp2.w"] + p[f"{pre}.mlp2.b"]
        np.testing.assert_allclose(out, mid + mlp, atol=1e-12)

    def test_zero_projections_identity(self):
        params = init_params(SMALL, 5, 4, 3)
        for name in ("spot.block0.attn.o.w", "spot.block0.mlp2.w"):
            params[name].data[:] = 0.0
        x = Tensor(make_rng(5).normal(size=(6, 8)))
        np.testing.assert_array_equal(Mdl.transformer_block(x, params, "spot.block0", 2).data, x.data)

    def test_permutation_equivariance(self):
        params = init_params(SMALL, 5, 4, 3)
        x = make_rng(6).normal(size=(7, 8))
        perm = make_rng(7).permutation(7)
        a = Mdl.transformer_block(Tensor(x), params, "spot.block0", 2).data
        b = Mdl.transformer_block(Tensor(x[perm]), params, "spot.block0", 2).data
        np.testing.assert_allclose(b, a[perm], atol=1e-12)

    def test_head_divisibility(self):
        params = init_params(SMALL, 5, 4, 3)
        with pytest.raises(ConfigError):
            Mdl.transformer_block(Tensor(np.ones((2, 8))), params, "spot.block0", 3)


class TestPooling:
    def test_equal_tokens(self):
        v = make_rng(0).normal(size=4)
        out = Mdl.neighbor_pool(Tensor(np.broadcast_to(v, (2, 25, 4)).copy()), np.ones((2, 25), bool))
        np.testing.assert_allclose(out.data, np.stack([v, v]), atol=1e-15)

    def test_masked(self):
        tokens = make_rng(1).normal(size=(1, 25, 3))
        valid = np.zeros((1, 25), bool)
        valid[0, 12] = True
        np.testing.assert_allclose(Mdl.neighbor_pool(Tensor(tokens), valid).data[0], tokens[0, 12])
        valid[0, 3] = True
        np.testing.assert_allclose(Mdl.neighbor_pool(Tensor(tokens), valid).data[0], (tokens[0, 12] + tokens[0, 3]) / 2)


def _cross_params(d=2, dp=2, da=1):
    rng = make_rng(11)
    p = {}
    for name, shape in (("q", (dp, da)), ("k", (d, da)), ("v", (d, d)), ("o", (d, d))):
        p[f"cross.{name}.w"] = Tensor(rng.normal(size=shape))
        p[f"cross.{name}.b"] = Tensor(np.zeros(shape[1]))
    return p


class TestCrossAttention:
    def test_identical_values(self):
        p = _cross_params()
        tokens = Tensor(np.tile([[0.3, -1.2]], (4, 1)))
        prompt = Tensor(make_rng(0).normal(size=(4, 2)))
        out = Mdl.cross_attention(prompt, tokens, p)
        expected = (tokens.data[0] @ p["cross.v.w"].data) @ p["cross.o.w"].data
        np.testing.assert_allclose(out.data, np.tile(expected, (4, 1)), atol=1e-14)

    def test_hand_instance(self):
        p = {
            "cross.q.w": Tensor([[1.0]]),
            "cross.k.w": Tensor([[1.0], [0.0]]),
            "cross.v.w": Tensor(np.eye(2)),
            "cross.o.w": Tensor(np.eye(2)),
        }
        prompt = Tensor([[1.0], [2.0]])
        tokens = Tensor([[1.0, 0.0], [3.0, 1.0]])
        out, w = Mdl.cross_attention(prompt, tokens, p, heads=1, return_weights=True)
        # scores q_i * k_j with k = first token column, scale 1/sqrt(1)
        scores = np.array([[1.0, 3.0], [2.0, 6.0]])
        ref_w = np.exp(scores) / np.exp(scores).sum(axis=1, keepdims=True)
        np.testing.assert_allclose(w.data[0], ref_w, atol=1e-14)
        np.testing.assert_allclose(out.data, ref_w @ tokens.data, atol=1e-14)

    def test_zero_queries_uniform(self):
        p = _cross_params(d=4, dp=3, da=2)
        p["cross.q.w"] = Tensor(np.zeros((3, 2)))
        _, w = Mdl.cross_attention(Tensor(np.ones((5, 3))), Tensor(make_rng(2).normal(size=(5, 4))), p, return_weights=True)
        np.testing.assert_allclose(w.data, np.full((1, 5, 5), 0.2), atol=1e-15)

    def test_local_scope_is_own_value(self):
        p = _cross_params()
        tokens = Tensor(make_rng(3).normal(size=(3, 2)))
        out = Mdl.cross_attention(Tensor(np.zeros((3, 2))), tokens, p, scope="local")
        np.testing.assert_allclose(out.data, tokens.data @ p["cross.v.w"].data @ p["cross.o.w"].data, atol=1e-14)


class TestFuse:
    def test_zero_spot(self):
        a = Tensor(make_rng(0).normal(size=(3, 2)))
        np.testing.assert_array_equal(Mdl.fuse(a, Tensor(np.zeros((3, 2)))).data, a.data)

    def test_commutative(self):
        a, b = Tensor(make_rng(1).normal(size=(3, 2))), Tensor(make_rng(2).normal(size=(3, 2)))
        np.testing.assert_array_equal(Mdl.fuse(a, b).data, Mdl.fuse(b, a).data)

    def test_gradient_split(self):
        a = Tensor(np.ones((2, 2)), requires_grad=True)
        b = Tensor(np.ones((2, 2)), requires_grad=True)
        T.backward(T.tsum(Mdl.fuse(a, b)))
        np.testing.assert_array_equal(a.grad, b.grad)

    def test_shape_mismatch(self):
        with pytest.raises(T.DimensionError):
            Mdl.fuse(Tensor(np.ones((2, 2))), Tensor(np.ones((2, 3))))


class TestForward:
    def test_shapes(self):
        slide = prepare_slide(generate_synthetic_slide(SynthConfig(), 0), np.arange(20))
        cfg = replace(SMALL, d_model=16, n_heads=4, d_prompt=16, d_attn=16)
        out = forward(slide, init_params(cfg, 16, 20, 0), cfg, 0.1, False, make_rng(0))
        for p in (out.p_fused, out.p_spot, out.p_neighbor):
            assert p.shape == (100, 20)
        assert out.t_s.shape == out.t_n_g.shape == out.z.shape == (100, 16)

    def test_prompt_isolation(self):
        slide = small_slide()
        params = init_params(SMALL, 5, 4, 1)
        a = forward(slide, params, SMALL, 0.0, False, make_rng(2))
        b = forward(slide, params, SMALL, 0.5, False, make_rng(2))
        np.testing.assert_array_equal(a.t_s.data, b.t_s.data)
        np.testing.assert_array_equal(a.p_spot.data, b.p_spot.data)
        assert not np.array_equal(a.p_fused.data, b.p_fused.data)

    def test_spot_branch_ignores_expression(self):
        slide = small_slide()
        params = init_params(SMALL, 5, 4, 1)
        a = forward(slide, params, SMALL, 1.0, False, make_rng(2))
        slide.expr = slide.expr * 3.0 + 1.0
        b = forward(slide, params, SMALL, 1.0, False, make_rng(2))
        np.testing.assert_array_equal(a.p_spot.data, b.p_spot.data)

    def test_masked_rows_share_cross_attention_output(self):
        slide = small_slide()
        out = forward(slide, init_params(SMALL, 5, 4, 1), SMALL, 0.3, False, make_rng(2))
        masked = out.t_n_g.data[~out.kept]
        np.testing.assert_allclose(masked, np.broadcast_to(masked[0], masked.shape), atol=1e-13)

    def test_deterministic(self):
        slide = small_slide()
        params = init_params(replace(SMALL, dropout=0.2), 5, 4, 1)
        a = forward(slide, params, replace(SMALL, dropout=0.2), 0.3, True, make_rng(5))
        b = forward(slide, params, replace(SMALL, dropout=0.2), 0.3, True, make_rng(5))
        np.testing.assert_array_equal(a.p_fused.data, b.p_fused.data)

    @pytest.mark.parametrize("flags,missing", [({"use_spot_branch": False}, "p_spot"), ({"use_neighbor_branch": False}, "p_neighbor")])
    def test_branch_flags(self, flags, missing):
        cfg = replace(SMALL, **flags)
        out = forward(small_slide(), init_params(cfg, 5, 4, 1), cfg, 0.3, False, make_rng(2))
        assert getattr(out, missing) is None and out.p_fused.shape == (30, 4)

    def test_no_branch_rejected(self):
        with pytest.raises(ConfigError):
            replace(SMALL, use_spot_branch=False, use_neighbor_branch=False).validate()

    def test_cross_residual(self):
        cfg = replace(SMALL, cross_residual=True)
        slide = small_slide()
        params = init_params(cfg, 5, 4, 1)
        out = forward(slide, params, cfg, 0.3, False, make_rng(2))
        plain = forward(slide, params, SMALL, 0.3, False, make_rng(2))
        np.testing.assert_allclose(out.t_n_g.data, plain.t_n_g.data + plain.t_n.data, atol=1e-13)

    def test_permutation_equivariance_of_spot_branch(self):
        b = generate_synthetic_slide(SynthConfig(n_rows=5, n_cols=6, d=5, m=4), 3)
        perm = make_rng(4).permutation(b.n)
        permuted = type(b)(b.slide_id, b.patient_id, b.coords[perm], b.grid[perm], b.spot_features[perm], b.counts[perm], b.gene_names)
        params = init_params(SMALL, 5, 4, 1)
        a = forward(prepare_slide(b, np.arange(4)), params, SMALL, 0.0, False, make_rng(0))
        c = forward(prepare_slide(permuted, np.arange(4)), params, SMALL, 0.0, False, make_rng(0))
        np.testing.assert_allclose(c.t_s.data, a.t_s.data[perm], atol=1e-10)


def twelve_spot_slide(seed=0):
    """The top-left 3x4 block of a synthetic 5x5 slide."""
    b = generate_synthetic_slide(SynthConfig(n_rows=5, n_cols=5, d=3, m=3), seed)
    keep = (b.grid[:, 0] < 3) & (b.grid[:, 1] < 4)
    sub = type(b)(b.slide_id, b.patient_id, b.coords[keep], b.grid[keep], b.spot_features[keep], b.counts[keep], b.gene_names)
    return prepare_slide(sub, np.arange(3))


def end_to_end_gradcheck(seed=0, cfg=SMALL):
    """Relative finite-difference error of the full loss on a 12-spot slide."""
    slide = twelve_spot_slide(seed)
    params = init_params(cfg, 3, 3, seed)
    names = list(params)

    def fn(*tensors):
        local = dict(zip(names, tensors))
        out = forward(slide, local, cfg, 0.5, False, make_rng(seed))
        return Mdl.compute_loss(out, slide.expr, 0.3)

    return T.gradcheck(fn, list(params.values()))


class TestEndToEnd:
    def test_gradcheck(self):
        assert twelve_spot_slide().n == 12
        assert end_to_end_gradcheck() < 1e-3


class TestLoss:
    def _outs(self, g, offset):
        t = lambda: Tensor(g + offset)  # noqa: E731
        return Mdl.ForwardOutputs(t(), t(), t(), None, None, None, None, np.zeros(len(g), bool))

    def test_perfect(self):
        g = make_rng(0).normal(size=(5, 3))
        assert float(Mdl.compute_loss(self._outs(g, 0.0), g, 0.3).data) == 0.0

    def test_unit_offset(self):
        g = make_rng(0).normal(size=(5, 3))
        out = self._outs(g, 1.0)
        terms = Mdl.loss_terms(out, g, 0.3)
        assert all(float(v.data) == pytest.approx(1.0) for v in terms.values())
        assert float(Mdl.compute_loss(out, g, 0.3).data) == pytest.approx(3.0)

    @pytest.mark.parametrize("lam", [0.0, 0.1, 0.3, 0.5, 0.9, 1.0])
    def test_lambda_degeneracy(self, lam):
        rng = make_rng(1)
        g = rng.normal(size=(6, 4))
        out = Mdl.ForwardOutputs(Tensor(rng.normal(size=(6, 4))), Tensor(rng.normal(size=(6, 4))), Tensor(rng.normal(size=(6, 4))), None, None, None, None, None)
        ref = Mdl.loss_terms(out, g, 0.0)
        terms = Mdl.loss_terms(out, g, lam)
        assert float(terms["spot"].data) == float(ref["spot"].data)
        assert float(terms["neighbor"].data) == float(ref["neighbor"].data)
        assert float(terms["spot"].data) == float(Mdl.mse(out.p_spot, g).data)

    def test_bad_lambda(self):
        g = np.zeros((2, 2))
        with pytest.raises(ValueError):
            Mdl.compute_loss(self._outs(g, 0.0), g, 1.5)

    def test_missing_head_skipped(self):
        g = make_rng(0).normal(size=(5, 3))
        out = self._outs(g, 1.0)
        out.p_neighbor = None
        assert float(Mdl.compute_loss(out, g, 0.3).data) == pytest.approx(2.0)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        params = init_params(SMALL, 5, 4, 0)
        extra = {"adam.t": np.array([3.0])}
        path = Mdl.save_checkpoint(tmp_path / "m.phgc", params, {"epoch": 4}, extra)
        loaded, meta, ex = Mdl.load_checkpoint(path)
        assert list(loaded) == list(params) and meta["epoch"] == 4
        for k in params:
            np.testing.assert_array_equal(loaded[k].data, params[k].data)
        np.testing.assert_array_equal(ex["adam.t"], [3.0])

    def test_layout(self, tmp_path):
        import struct, json

        params = {"a": Tensor(np.array([1.5, -2.0]))}
        raw = Mdl.save_checkpoint(tmp_path / "m.phgc", params, {}).read_bytes()
        assert raw[:4] == b"PHGC"
        version, hlen = struct.unpack("<IQ", raw[4:16])
        header = json.loads(raw[16 : 16 + hlen])
        assert version == 1 and header["tensors"][0]["shape"] == [2]
        assert np.frombuffer(raw[16 + hlen :], "<f8").tolist() == [1.5, -2.0]

    @pytest.mark.parametrize(
        "corrupt",
        [lambda b: b"XXXX" + b[4:], lambda b: b[:-3], lambda b: b + b"\0", lambda b: b[:4] + b"\x09" + b[5:], lambda b: b[:20]],
    )
    def test_corruption(self, tmp_path, corrupt):
        path = Mdl.save_checkpoint(tmp_path / "m.phgc", init_params(SMALL, 5, 4, 0), {})
        path.write_bytes(corrupt(path.read_bytes()))
        with pytest.raises(CheckpointError):
            Mdl.load_checkpoint(path)

    def test_missing(self, tmp_path):
        with pytest.raises(CheckpointError):
            Mdl.load_checkpoint(tmp_path / "nope.phgc")
