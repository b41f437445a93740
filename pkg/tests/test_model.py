import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from tdml.errors import DegenerateInputError, InvalidArgumentError
from tdml.model import (
    ModelConfig,
    ParamSet,
    backward,
    forward,
    gap,
    init_params,
    param_shapes,
)


class Rec:
    def __init__(self, rid, payload):
        self.id = rid
        self.payload = payload


def make_batch(rng, config, n, h=5, w=4):
    recs = []
    for i in range(n):
        if config.input_kind == "vector":
            p = rng.normal(size=config.input_dim)
        else:
            p = rng.normal(size=(h, w, config.in_channels))
        recs.append(Rec(f"r{i}", p))
    return recs


VECTOR_CFG = ModelConfig("vector", input_dim=6, dense_dims=(5, 4))
MAP_CFG = ModelConfig("map", in_channels=2, conv_channels=3, dense_dims=(4, 3))
REDUCE_CFG = ModelConfig("vector", input_dim=5, dense_dims=(6, 4), fc_reduction=2)
ALL_CFGS = [VECTOR_CFG, MAP_CFG, REDUCE_CFG]


class TestConfig:
    def test_embedding_dim(self):
        assert VECTOR_CFG.embedding_dim == 4
        assert REDUCE_CFG.embedding_dim == 2

    def test_rejects_bad_configs(self):
        with pytest.raises(InvalidArgumentError):
            ModelConfig("vector", input_dim=4, dense_dims=())
        with pytest.raises(InvalidArgumentError):
            ModelConfig("vector", dense_dims=(4,))
        with pytest.raises(InvalidArgumentError):
            ModelConfig("map", in_channels=2, input_dim=3, dense_dims=(4,))
        with pytest.raises(InvalidArgumentError):
            ModelConfig("vector", input_dim=4, conv_channels=2, dense_dims=(4,))
        with pytest.raises(InvalidArgumentError):
            ModelConfig("vector", input_dim=4, dense_dims=(4,), fc_reduction=4)
        with pytest.raises(InvalidArgumentError):
            ModelConfig("audio", input_dim=4, dense_dims=(4,))


class TestParamSet:
    def test_flatten_unflatten_identity(self):
        for cfg in ALL_CFGS:
            params = init_params(cfg, seed=11)
            flat = params.flatten()
            back = params.unflatten(flat)
            for name in params.keys():
                assert_array_equal(back[name], params[name])
            assert_array_equal(back.flatten(), flat)

    def test_shape_mismatch_rejected(self):
        params = init_params(VECTOR_CFG, seed=0)
        arrays = {k: v.copy() for k, v in params.items()}
        arrays["dense0.w"] = np.zeros((2, 2))
        with pytest.raises(InvalidArgumentError):
            ParamSet(VECTOR_CFG, arrays)
        with pytest.raises(InvalidArgumentError):
            params.unflatten(np.zeros(3))


class TestInit:
    def test_deterministic_per_seed(self):
        a = init_params(MAP_CFG, seed=3)
        b = init_params(MAP_CFG, seed=3)
        c = init_params(MAP_CFG, seed=4)
        assert_array_equal(a.flatten(), b.flatten())
        assert np.any(a.flatten() != c.flatten())

    def test_bounds_and_zero_biases(self):
        params = init_params(MAP_CFG, seed=5)
        shapes = param_shapes(MAP_CFG)
        assert shapes["conv.w"] == (3, 3, 2, 3)
        for name, arr in params.items():
            if name.endswith(".b"):
                assert_array_equal(arr, np.zeros(arr.shape))
            else:
                fan_in = 9 * arr.shape[2] if name == "conv.w" else arr.shape[0]
                limit = np.sqrt(6.0 / fan_in)
                assert np.all(np.abs(arr) <= limit)
                assert np.any(arr != 0.0)


class TestGap:
    def test_hand_example(self):
        m = np.array([[[1.0], [2.0]], [[3.0], [4.0]]])
        assert_array_equal(gap(m), [2.5])

    def test_per_channel(self):
        rng = np.random.default_rng(0)
        m = rng.normal(size=(7, 3, 4))
        assert_allclose(gap(m), m.reshape(-1, 4).mean(axis=0), rtol=0, atol=1e-15)

    def test_rejects_non_map(self):
        with pytest.raises(InvalidArgumentError):
            gap(np.ones((2, 2)))


def naive_conv3x3(x, w, b):
    # Independent oracle: direct quadruple loop, zero padding of one cell.
    h, wd, cin = x.shape
    cout = w.shape[3]
    xp = np.zeros((h + 2, wd + 2, cin))
    xp[1:-1, 1:-1] = x
    out = np.zeros((h, wd, cout))
    for i in range(h):
        for j in range(wd):
            for dh in range(3):
                for dw in range(3):
                    for co in range(cout):
                        out[i, j, co] += float(xp[i + dh, j + dw] @ w[dh, dw, :, co])
    return out + b


class TestForward:
    def test_unit_rows(self):
        rng = np.random.default_rng(1)
        for cfg in ALL_CFGS:
            params = init_params(cfg, seed=2)
            emb, _ = forward(params, make_batch(rng, cfg, 6))
            assert emb.shape == (6, cfg.embedding_dim)
            assert_allclose(np.linalg.norm(emb, axis=1), np.ones(6), rtol=0, atol=1e-9)

    def test_conv_matches_naive_oracle(self):
        rng = np.random.default_rng(2)
        params = init_params(MAP_CFG, seed=7)
        x = rng.normal(size=(4, 6, 2))
        pre = naive_conv3x3(x, params["conv.w"], params["conv.b"])
        pooled = np.maximum(pre, 0.0).mean(axis=(0, 1))
        z = pooled @ params["dense0.w"] + params["dense0.b"]
        z = np.maximum(z, 0.0) @ params["dense1.w"] + params["dense1.b"]
        expected = z / np.linalg.norm(z)
        emb, _ = forward(params, [Rec("a", x)])
        assert_allclose(emb[0], expected, rtol=0, atol=1e-12)

    def test_variable_map_sizes_in_one_batch(self):
        rng = np.random.default_rng(3)
        params = init_params(MAP_CFG, seed=9)
        recs = [Rec("a", rng.normal(size=(3, 3, 2))), Rec("b", rng.normal(size=(6, 2, 2)))]
        emb, _ = forward(params, recs)
        assert emb.shape == (2, 3)

    def test_batch_order_does_not_change_rows(self):
        rng = np.random.default_rng(4)
        params = init_params(VECTOR_CFG, seed=9)
        recs = make_batch(rng, VECTOR_CFG, 8)
        emb, _ = forward(params, recs)
        perm = [5, 2, 7, 0, 1, 6, 3, 4]
        emb_p, _ = forward(params, [recs[i] for i in perm])
        assert_allclose(emb_p, emb[perm], rtol=0, atol=1e-12)

    def test_payload_mismatch_names_record(self):
        params = init_params(VECTOR_CFG, seed=0)
        with pytest.raises(InvalidArgumentError, match="bad-rec"):
            forward(params, [Rec("bad-rec", np.ones(3))])

    def test_zero_embedding_names_record(self):
        cfg = ModelConfig("vector", input_dim=2, dense_dims=(2,))
        params = init_params(cfg, seed=0)
        zeros = ParamSet(cfg, {k: np.zeros_like(v) for k, v in params.items()})
        with pytest.raises(DegenerateInputError, match="dead"):
            forward(zeros, [Rec("dead", np.ones(2))])


def fd_param_grad(params, batch, weight, h=1e-5):
    # Central differences on L(theta) = sum(weight * forward(theta, batch)).
    flat = params.flatten()
    fd = np.zeros_like(flat)
    for i in range(flat.size):
        up, dn = flat.copy(), flat.copy()
        up[i] += h
        dn[i] -= h
        e_up, _ = forward(params.unflatten(up), batch)
        e_dn, _ = forward(params.unflatten(dn), batch)
        fd[i] = (np.sum(weight * e_up) - np.sum(weight * e_dn)) / (2 * h)
    return fd


class TestBackward:
    @pytest.mark.parametrize("cfg", ALL_CFGS, ids=["vector", "map", "reduce"])
    def test_param_grads_match_finite_differences(self, cfg):
        rng = np.random.default_rng(10)
        params = init_params(cfg, seed=13)
        batch = make_batch(rng, cfg, 4, h=3, w=3)
        emb, trace = forward(params, batch)
        weight = rng.normal(size=emb.shape)
        grads, _ = backward(trace, weight)
        analytic = grads.flatten()
        fd = fd_param_grad(params, batch, weight)
        rel = np.abs(analytic - fd) / np.maximum(1e-8, np.abs(fd))
        assert float(rel.max()) < 1e-4

    @pytest.mark.parametrize("cfg", ALL_CFGS, ids=["vector", "map", "reduce"])
    def test_input_grads_match_finite_differences(self, cfg):
        rng = np.random.default_rng(11)
        params = init_params(cfg, seed=14)
        batch = make_batch(rng, cfg, 2, h=3, w=3)
        emb, trace = forward(params, batch)
        weight = rng.normal(size=emb.shape)
        _, input_grads = backward(trace, weight)
        h = 1e-5
        for j, rec in enumerate(batch):
            flatp = rec.payload.ravel()
            for i in range(flatp.size):
                up = flatp.copy()
                up[i] += h
                dn = flatp.copy()
                dn[i] -= h
                b_up = list(batch)
                b_dn = list(batch)
                b_up[j] = Rec(rec.id, up.reshape(rec.payload.shape))
                b_dn[j] = Rec(rec.id, dn.reshape(rec.payload.shape))
                e_up, _ = forward(params, b_up)
                e_dn, _ = forward(params, b_dn)
                fd = (np.sum(weight * e_up) - np.sum(weight * e_dn)) / (2 * h)
                an = input_grads[j].ravel()[i]
                assert abs(an - fd) / max(1e-8, abs(fd)) < 1e-4

    def test_norm_backward_orthogonal_to_embedding(self):
        # The L2-normalize Jacobian projects out the radial direction, so
        # embedding-space gradients map to pre-norm gradients orthogonal
        # to the embedding itself. Check via a rank-1 probe.
        rng = np.random.default_rng(12)
        params = init_params(VECTOR_CFG, seed=15)
        batch = make_batch(rng, VECTOR_CFG, 3)
        emb, trace = forward(params, batch)
        g = emb.copy()  # purely radial upstream gradient
        grads, input_grads = backward(trace, g)
        assert_allclose(grads.flatten(), np.zeros(grads.flatten().size), rtol=0, atol=1e-12)
        for gi in input_grads:
            assert_allclose(gi, np.zeros_like(gi), rtol=0, atol=1e-12)

    def test_zero_upstream_gives_zero_grads(self):
        rng = np.random.default_rng(13)
        params = init_params(MAP_CFG, seed=16)
        batch = make_batch(rng, MAP_CFG, 3)
        emb, trace = forward(params, batch)
        grads, input_grads = backward(trace, np.zeros_like(emb))
        assert_array_equal(grads.flatten(), np.zeros(grads.flatten().size))
        for gi in input_grads:
            assert_array_equal(gi, np.zeros_like(gi))

    def test_shape_mismatch_rejected(self):
        rng = np.random.default_rng(14)
        params = init_params(VECTOR_CFG, seed=17)
        _, trace = forward(params, make_batch(rng, VECTOR_CFG, 3))
        with pytest.raises(InvalidArgumentError):
            backward(trace, np.zeros((3, 9)))
