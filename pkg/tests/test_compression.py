import hashlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedconv import compression as C
from fedconv import dilation as D
from fedconv import models as M
from fedconv import tensor as T
from fedconv.data import gen_synthetic
from fedconv.errors import ConfigurationError, UsageError
from fedconv.models import LayerSpec, ModelSpec

SR_GRID = (0.25, 0.5, 0.75, 1.0)


def toy_spec():
    return ModelSpec(
        (
            LayerSpec("conv1", "conv2d", 1, 16, (3, 3)),
            LayerSpec("conv2", "conv2d", 16, 32, (3, 3)),
            LayerSpec("fc", "dense", 32 * 4 * 4, 10, activation="none"),
        ),
        (1, 8, 8),
        10,
    )


def digest(params):
    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params[k]).tobytes())
    return h.hexdigest()


class TestPlan:
    def test_paper_layer_kernel(self):
        spec = toy_spec()
        plan = C.derive_plan(spec, 0.75)
        cfg = plan.layers[1]
        assert cfg.global_slice == (32, 16)
        assert cfg.slice_count == 9
        assert cfg.kernel == (9, 5)
        assert cfg.sub_slice == (24, 12)

    def test_identity_ratio(self):
        spec = toy_spec()
        plan = C.derive_plan(spec, 1.0)
        assert all(c.kernel == (1, 1) for c in plan.layers)
        assert plan.sub_spec == spec

    @pytest.mark.parametrize("sr", SR_GRID)
    def test_shape_law_holds(self, sr):
        for cfg in C.derive_plan(toy_spec(), sr).layers:
            for d_in, d_out, k in zip(cfg.global_slice, cfg.sub_slice, cfg.kernel):
                assert (d_in + 2 * cfg.padding - k) // cfg.stride + 1 == d_out
                assert (d_in + 2 * cfg.padding - k) % cfg.stride == 0

    @pytest.mark.parametrize("sr", SR_GRID)
    def test_first_input_and_last_output_preserved(self, sr):
        sub = C.derive_plan(toy_spec(), sr).sub_spec
        assert sub.layers[0].in_channels == 1
        assert sub.layers[-1].out_channels == 10

    def test_solve_padding_paper_sweep(self):
        assert C.solve_padding(64, 48, 23, 1) == 3

    def test_padding_policy_gives_larger_kernels(self):
        plan = C.derive_plan(toy_spec(), 0.75, stride=1, padding=3)
        assert plan.layers[1].kernel == (15, 11)

    def test_rounding(self):
        assert C.round_channels(16, 0.25) == 4
        assert C.round_channels(10, 0.25) == 3  # 2.5 rounds up
        assert C.round_channels(2, 0.1) == 1

    @pytest.mark.parametrize("sr", [0.0, -0.5, 1.5])
    def test_bad_ratio(self, sr):
        with pytest.raises(ConfigurationError):
            C.derive_plan(toy_spec(), sr)

    def test_impossible_policy(self):
        with pytest.raises(ConfigurationError):
            C.derive_plan(toy_spec(), 0.5, stride=4, padding=0)


class TestReshape:
    def test_conv_slices(self):
        w = np.random.default_rng(0).normal(size=(32, 16, 3, 3))
        s = C.reshape_for_compression(w)
        assert s.shape == (9, 1, 32, 16)
        np.testing.assert_array_equal(s[5, 0], w[:, :, 1, 2])  # row-major kernel position 1*3+2

    def test_dense_slice(self):
        assert C.reshape_for_compression(np.zeros((4, 2))).shape == (1, 1, 4, 2)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 3), st.integers(1, 3), st.integers(0, 10**6))
    def test_roundtrip(self, o, i, k1, k2, seed):
        w = np.random.default_rng(seed).normal(size=(o, i, k1, k2))
        back = C.restore_from_slices(C.reshape_for_compression(w), (k1, k2))
        assert np.array_equal(back, w)

    def test_bad_rank(self):
        with pytest.raises(ConfigurationError):
            C.reshape_for_compression(np.zeros((2, 2, 2)))


class TestCompressModel:
    def setup_method(self):
        self.spec = toy_spec()
        self.params = M.init_params(self.spec, np.random.default_rng(0))

    def test_identity_pipeline_exact(self):
        plan = C.derive_plan(self.spec, 1.0)
        opts = C.PipelineOptions(s_p=1.0, s_n=1.0)
        out = C.compress_model(self.params, plan, C.identity_pipeline_params(plan), opts)
        for k in self.params:
            assert np.array_equal(out[k], self.params[k])

    def test_identity_pipeline_scales_positives_by_s_p(self):
        plan = C.derive_plan(self.spec, 1.0)
        opts = C.PipelineOptions(s_p=0.85, s_n=1.0)
        out = C.compress_model(self.params, plan, C.identity_pipeline_params(plan), opts)
        w = self.params["conv2.weight"]
        np.testing.assert_allclose(out["conv2.weight"], np.where(w >= 0, 0.85 * w, w), rtol=1e-15)
        # biases skip the activation
        np.testing.assert_array_equal(out["conv2.bias"], self.params["conv2.bias"])

    @pytest.mark.parametrize("sr", SR_GRID)
    def test_output_matches_sub_spec(self, sr):
        plan = C.derive_plan(self.spec, sr)
        cp = C.init_pipeline_params(plan, np.random.default_rng(1))
        out = C.compress_model(self.params, plan, cp)
        M.validate_params(plan.sub_spec, out)

    def test_paper_layer_shape(self):
        plan = C.derive_plan(self.spec, 0.75)
        cp = C.init_pipeline_params(plan, np.random.default_rng(1))
        assert C.compress_model(self.params, plan, cp)["conv2.weight"].shape == (24, 12, 3, 3)

    def test_negative_branch(self):
        plan = C.derive_plan(self.spec, 1.0)
        cp = C.identity_pipeline_params(plan)
        params = {k: -np.abs(v) - 0.1 for k, v in self.params.items()}
        out = C.compress_model(params, plan, cp, C.PipelineOptions(s_n=0.001))
        np.testing.assert_allclose(out["fc.weight"], 0.001 * params["fc.weight"], rtol=1e-14)

    def test_negatives_suppressed_not_eliminated(self):
        plan = C.derive_plan(self.spec, 0.5)
        cp = C.init_pipeline_params(plan, np.random.default_rng(2), C.PipelineOptions(kernel_init="uniform"))
        with_mlr = C.compress_model(self.params, plan, cp)
        raw = C.compress_model(self.params, plan, cp, C.PipelineOptions(use_mlr=False))
        w, pre = with_mlr["conv2.weight"], raw["conv2.weight"]
        assert pre.min() < 0 and w.min() < 0
        assert w.min() >= 0.001 * pre.min() - 1e-15

    def test_missing_params(self):
        plan = C.derive_plan(self.spec, 0.5)
        cp = C.init_pipeline_params(plan, np.random.default_rng(1))
        del cp["conv1.direction"]
        with pytest.raises(ConfigurationError):
            C.compress_model(self.params, plan, cp)

    def test_mismatched_kernel(self):
        plan = C.derive_plan(self.spec, 0.5)
        cp = C.init_pipeline_params(plan, np.random.default_rng(1))
        cp["conv2.direction"] = np.ones((9, 1, 2, 2))
        with pytest.raises(ConfigurationError):
            C.compress_model(self.params, plan, cp)

    def test_pipeline_gradients(self):
        plan = C.derive_plan(self.spec, 0.5)
        cp = C.init_pipeline_params(plan, np.random.default_rng(3))
        leaves = {k: T.Tensor(v, requires_grad=True) for k, v in cp.items()}
        x = np.random.default_rng(4).normal(size=(3, 1, 8, 8))
        loss = T.cross_entropy(M.forward(plan.sub_spec, C.compress_model(self.params, plan, leaves), x), [0, 1, 2])
        grads = T.grad(loss, leaves)
        # pre2 starts at zero so pre1 has zero gradient on the first step; everything else moves
        for name in ("conv2.pre2.weight", "conv2.direction", "conv2.magnitude", "conv2.bias_direction", "fc.bias_magnitude"):
            assert np.abs(grads[name]).sum() > 0


class TestCosine:
    def test_endpoints(self):
        assert C.cosine_lr(0, 4, 1e-5, 1e-3) == 1e-3
        assert C.cosine_lr(4, 4, 1e-5, 1e-3) == 1e-5

    def test_midpoint(self):
        assert C.cosine_lr(2, 4, 1e-5, 1e-3) == pytest.approx(5.05e-4, rel=1e-12)

    def test_restart_period(self):
        assert C.cosine_lr(8, 4, 1e-5, 1e-3) == pytest.approx(1e-3, rel=1e-12)
        assert C.cosine_lr(6, 4, 1e-5, 1e-3) == pytest.approx(C.cosine_lr(2, 4, 1e-5, 1e-3), rel=1e-12)

    def test_bad_range(self):
        with pytest.raises(ConfigurationError):
            C.cosine_lr(0, 4, 1e-3, 1e-5)

    @given(st.integers(0, 1000), st.integers(1, 50))
    def test_bounded(self, e, t_max):
        lr = C.cosine_lr(e, t_max, 1e-5, 1e-3)
        assert 1e-5 - 1e-18 <= lr <= 1e-3 + 1e-18


def _toy_problem(seed=0):
    spec = ModelSpec((LayerSpec("conv1", "conv2d", 1, 8, (3, 3), pool=2),
                      LayerSpec("fc", "dense", 8 * 3 * 3, 4, activation="none")), (1, 8, 8), 4)
    data = gen_synthetic(4, 50, (1, 8, 8), 4.0, seed)
    params = M.init_params(spec, np.random.default_rng(seed))
    params = M.local_train(spec, params, data, 5, 0.003, seed, optimizer="adam")
    return spec, params, data


class TestFinetune:
    def test_zero_epochs(self):
        spec, params, data = _toy_problem()
        plan = C.derive_plan(spec, 0.5)
        cp = C.init_pipeline_params(plan, np.random.default_rng(1))
        out = C.finetune_compression(params, plan, cp, data, 0)
        assert all(np.array_equal(out[k], cp[k]) for k in cp)

    def test_global_frozen_and_loss_drops(self):
        spec, params, data = _toy_problem()
        before = digest(params)
        plan = C.derive_plan(spec, 0.5)
        cp = C.init_pipeline_params(plan, np.random.default_rng(1))
        loss0 = M.evaluate(plan.sub_spec, C.compress_model(params, plan, cp), data)["loss"]
        cp = C.finetune_compression(params, plan, cp, data, 20, seed=0)
        loss1 = M.evaluate(plan.sub_spec, C.compress_model(params, plan, cp), data)["loss"]
        assert digest(params) == before
        assert loss1 < loss0

    def test_deterministic(self):
        spec, params, data = _toy_problem()
        plan = C.derive_plan(spec, 0.5)
        cp = C.init_pipeline_params(plan, np.random.default_rng(1))
        a = C.finetune_compression(params, plan, cp, data, 2, seed=5, optimizer="adam")
        b = C.finetune_compression(params, plan, cp, data, 2, seed=5, optimizer="adam")
        assert digest(a) == digest(b)

    def test_empty_data(self):
        spec, params, data = _toy_problem()
        plan = C.derive_plan(spec, 0.5)
        cp = C.init_pipeline_params(plan, np.random.default_rng(1))
        with pytest.raises(UsageError):
            C.finetune_compression(params, plan, cp, [], 1)


class TestDilation:
    def test_paper_layer(self):
        plan = C.derive_plan(toy_spec(), 0.75)
        tc = D.derive_tc_plan(plan)
        assert tc.layers[1].kernel == (9, 5)
        y = T.transposed_conv2d(T.Tensor(np.zeros((1, 1, 24, 12))), T.Tensor(np.zeros((1, 1, 9, 5))))
        assert y.shape == (1, 1, 32, 16)

    def test_identity_kernels(self):
        tc = D.derive_tc_plan(C.derive_plan(toy_spec(), 1.0))
        assert all(c.kernel == (1, 1) for c in tc.layers)

    @pytest.mark.parametrize("sr", SR_GRID)
    def test_roundtrip_shapes(self, sr):
        spec = toy_spec()
        rng = np.random.default_rng(0)
        plan = C.derive_plan(spec, sr)
        sub = C.compress_model(M.init_params(spec, rng), plan, C.init_pipeline_params(plan, rng))
        tc = D.derive_tc_plan(plan)
        big = D.dilate_model(sub, tc, D.init_tc_params(tc, rng))
        M.validate_params(spec, big)

    def test_identity_dilation(self):
        spec = toy_spec()
        params = M.init_params(spec, np.random.default_rng(0))
        tc = D.derive_tc_plan(C.derive_plan(spec, 1.0))
        out = D.dilate_model(params, tc, D.identity_tc_params(tc), C.PipelineOptions(s_p=1.0, s_n=1.0))
        assert all(np.array_equal(out[k], params[k]) for k in params)

    def test_wrong_client_shape(self):
        spec = toy_spec()
        tc = D.derive_tc_plan(C.derive_plan(spec, 0.5))
        with pytest.raises(ConfigurationError):
            D.dilate_model(M.init_params(spec, np.random.default_rng(0)), tc,
                           D.init_tc_params(tc, np.random.default_rng(0)))

    def test_finetune_frozen_client_and_loss_drops(self):
        spec, params, data = _toy_problem()
        plan = C.derive_plan(spec, 0.5)
        rng = np.random.default_rng(1)
        sub = C.compress_model(params, plan, C.init_pipeline_params(plan, rng))
        sub = M.local_train(plan.sub_spec, sub, data, 3, 0.003, 0, optimizer="adam")
        before = digest(sub)
        tc = D.derive_tc_plan(plan)
        tp = D.init_tc_params(tc, rng)
        assert D.finetune_dilation(sub, tc, tp, data, 0) == tp
        loss0 = M.evaluate(spec, D.dilate_model(sub, tc, tp), data)["loss"]
        tp2 = D.finetune_dilation(sub, tc, tp, data, 20, seed=0)
        loss1 = M.evaluate(spec, D.dilate_model(sub, tc, tp2), data)["loss"]
        assert digest(sub) == before
        assert loss1 < loss0

    def test_clients_on_disjoint_labels_dilate_differently(self):
        spec, params, data = _toy_problem()
        plan = C.derive_plan(spec, 0.5)
        tc = D.derive_tc_plan(plan)
        sub = C.compress_model(params, plan, C.init_pipeline_params(plan, np.random.default_rng(1)))
        low, high = data.subset(np.flatnonzero(data.y < 2)), data.subset(np.flatnonzero(data.y >= 2))
        tp = D.init_tc_params(tc, np.random.default_rng(2))
        a = D.dilate_model(M.local_train(plan.sub_spec, sub, low, 2, 0.003, 0, optimizer="adam"), tc, tp)
        b = D.dilate_model(M.local_train(plan.sub_spec, sub, high, 2, 0.003, 0, optimizer="adam"), tc, tp)
        dist = np.sqrt(sum(np.sum((a[k] - b[k]) ** 2) for k in a))
        assert dist > 0
