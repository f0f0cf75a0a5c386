import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mapnet import tensor as T
from mapnet import zoo
from mapnet.errors import DataError, NumericalAbort
from mapnet.losses import (AlignmentWarning, LossBundle, alignment_literal, alignment_loss, exact_jacobian,
                           objective, plan_assembler, smoothness_loss, stability_loss, task_loss,
                           task_loss_mse, total_loss, unit_alignment, unit_smoothness)
from mapnet.mapping import MappingState, build_plan, generate_all, init_orthogonal, make_state
from conftest import central_diff, rel_err


def _state(P=200, d=8, alpha=0.1, activation="tanh", seed=0, z=None):
    with T.default_dtype(np.float64):
        s = make_state(P, d, seed, alpha=alpha, activation=activation, out_scale=1.0, z_scale=1.0,
                       dtype=np.float64)
    if z is not None:
        s.assign("z", z)
    return s


class TestTask:
    def test_uniform_logits(self):
        loss = task_loss(T.Tensor(np.zeros((4, 10)), dtype=np.float64), np.arange(4))
        assert float(loss.data) == pytest.approx(2.302585, abs=1e-6)

    def test_confident_correct(self):
        logits = np.full((2, 3), -50.0)
        logits[[0, 1], [2, 0]] = 50.0
        assert float(task_loss(T.Tensor(logits, dtype=np.float64), np.array([2, 0])).data) < 1e-30

    def test_label_out_of_range(self):
        with pytest.raises(DataError):
            task_loss(T.Tensor(np.zeros((2, 3))), np.array([0, 3]))

    def test_mse_self(self):
        x = T.Tensor(np.random.default_rng(0).standard_normal((5, 2)))
        assert float(task_loss_mse(x, x.data).data) == 0.0


class TestStability:
    def _plan(self, activation="tanh"):
        with T.default_dtype(np.float64):
            return build_plan(zoo.mlp([3, 10, 2]), "slvt", 4, 0, activation=activation, out_scale=1.0,
                              z_scale=1.0, dtype=np.float64)

    def test_zero_sigma_exact_zero(self):
        x = np.random.default_rng(0).standard_normal((4, 3))
        assert float(stability_loss(self._plan(), x, 0.0).data) == 0.0

    @settings(max_examples=10, deadline=None)
    @given(st.floats(1e-4, 1.0), st.integers(0, 1000))
    def test_non_negative(self, sigma, seed):
        x = np.random.default_rng(seed).standard_normal((4, 3))
        assert float(stability_loss(self._plan(), x, sigma, seed=seed).data) >= 0.0

    def test_quadratic_in_sigma(self):
        # linear generator and linear target: the loss scales like sigma^2
        with T.default_dtype(np.float64):
            plan = build_plan(zoo.mlp([3, 2]), "slvt", 1, 0, alpha=0.0, activation="linear", max_ratio=None,
                              out_scale=1.0, z_scale=1.0, dtype=np.float64)
        x = np.random.default_rng(1).standard_normal((16, 3))
        sig = np.array([1e-3, 1e-2, 1e-1])
        vals = [np.mean([float(stability_loss(plan, x, s, seed=k).data) for k in range(200)]) for s in sig]
        slope = np.polyfit(np.log(sig), np.log(vals), 1)[0]
        assert slope == pytest.approx(2.0, abs=0.05)


class TestSmoothness:
    def test_exact_matches_dense_jacobian(self):
        s = _state(z=np.random.default_rng(0).standard_normal(8) * 0.3)
        J = exact_jacobian(s)
        assert float(unit_smoothness(s).data) == pytest.approx(float((J ** 2).sum()), rel=1e-10)

    def test_dense_jacobian_matches_fd(self):
        s = _state(z=np.random.default_rng(1).standard_normal(8) * 0.3)
        W, z = s.W0.data.astype(np.float64), s.z.data
        J = exact_jacobian(s)
        for j in (0, 50, 199):
            fd = central_diff(lambda v: float(np.tanh(W[j] @ v + 0.1 * v @ v)), z)
            assert rel_err(J[j], fd) < 1e-7

    def test_linear_unmodulated_equals_d(self):
        s = _state(alpha=0.0, activation="linear", z=np.ones(8))
        assert float(unit_smoothness(s).data) == pytest.approx(8.0, rel=1e-6)

    def test_hutchinson_within_ten_percent(self):
        s = _state(z=np.random.default_rng(2).standard_normal(8) * 0.3)
        exact = float(unit_smoothness(s).data)
        est = float(unit_smoothness(s, probes=64, rng=np.random.default_rng(3)).data)
        assert abs(est - exact) / exact < 0.10

    def test_hutchinson_unbiased_over_many_probes(self):
        s = _state(z=np.random.default_rng(4).standard_normal(8) * 0.3)
        exact = float(unit_smoothness(s).data)
        est = float(unit_smoothness(s, probes=4000, rng=np.random.default_rng(5)).data)
        assert abs(est - exact) / exact < 0.03

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.0, 1.0))
    def test_non_negative(self, seed, alpha):
        s = _state(alpha=alpha, z=np.random.default_rng(seed).standard_normal(8))
        assert float(unit_smoothness(s).data) >= 0.0

    def test_latent_units_scale(self):
        # the value is taken w.r.t. z / z_scale
        s = _state(z=np.random.default_rng(6).standard_normal(8) * 0.3)
        base = float(unit_smoothness(s).data)
        s.z_scale = 0.5
        assert float(unit_smoothness(s).data) == pytest.approx(0.25 * base, rel=1e-12)

    def test_wmap_variant_matches_dense(self):
        s = _state(z=np.random.default_rng(7).standard_normal(8) * 0.3)
        s.wmap = T.Tensor._wrap(np.random.default_rng(8).standard_normal(8) * 0.3, requires_grad=True)
        J = exact_jacobian(s)
        assert float(unit_smoothness(s).data) == pytest.approx(float((J ** 2).sum()), rel=1e-10)


class TestAlignment:
    def test_parallel_antiparallel_orthogonal(self):
        W = T.Tensor(np.tile([1.0, 0.0], (5, 1)), dtype=np.float64)
        assert float(alignment_loss(T.Tensor([2.0, 0.0], dtype=np.float64), W).data) == pytest.approx(0.0)
        assert float(alignment_loss(T.Tensor([-2.0, 0.0], dtype=np.float64), W).data) == pytest.approx(2.0)
        assert float(alignment_loss(T.Tensor([0.0, 3.0], dtype=np.float64), W).data) == pytest.approx(1.0)

    def test_zero_latent_neutral(self):
        W = T.Tensor(np.ones((5, 2)))
        with pytest.warns(AlignmentWarning):
            assert float(alignment_loss(T.Tensor(np.zeros(2)), W).data) == 1.0

    def test_fast_path_matches_literal(self):
        s = _state(z=np.random.default_rng(9).standard_normal(8))
        assert float(unit_alignment(s).data) == pytest.approx(float(alignment_literal(s).data), rel=1e-10)


def _small_problem(mask=("stab", "smooth", "align"), s_vals=None):
    """d=8 generator for a P=200 MLP, batch of 4."""
    arch = zoo.mlp([2, 28, 4])
    with T.default_dtype(np.float64):
        plan = build_plan(arch, "slvt", 8, 0, out_scale=1.0, z_scale=1.0, dtype=np.float64)
    assert plan.spec.flat_size == 200
    st_ = plan.units[0].state
    st_.assign("z", np.random.default_rng(10).standard_normal(8) * 0.2)
    bundle = LossBundle(mask=mask, sigma=0.05)
    for k, v in (s_vals or {}).items():
        bundle.assign(k, v)
    rng = np.random.default_rng(11)
    x, y = rng.standard_normal((4, 2)), rng.integers(0, 4, 4)
    asm = plan_assembler(plan)
    fwd = lambda params, inp: zoo.forward(arch, params, inp)
    return plan, st_, bundle, asm, fwd, x, y


class TestCombined:
    def test_zero_s_plain_sum(self):
        plan, st_, bundle, asm, fwd, x, y = _small_problem()
        total, vals, _ = objective([st_], asm, bundle, x, y, np.random.default_rng(0), fwd)
        assert float(total.data) == pytest.approx(vals["task"] + vals["stab"] + vals["smooth"] + vals["align"],
                                                  rel=1e-12)

    def test_task_only_mask_equals_task_loss(self):
        plan, st_, bundle, asm, fwd, x, y = _small_problem(mask=())
        total, _, _ = objective([st_], asm, bundle, x, y, np.random.default_rng(0), fwd)
        ref = task_loss(zoo.forward(plan.arch, generate_all(plan), x), y)
        assert float(total.data) == float(ref.data)

    def test_lambdas_positive(self):
        b = LossBundle()
        for v in (-30.0, 0.0, 30.0):
            b.assign("smooth", v)
            assert all(l > 0 for l in b.lambdas().values())

    def test_lambda_cap(self):
        b = LossBundle(max_lambda=2.0)
        b.assign("stab", -10.0)
        assert b.lambdas()["stab"] == pytest.approx(2.0)
        b.assign("stab", 3.0)
        assert b.lambdas()["stab"] == pytest.approx(np.exp(-3.0))
        free = LossBundle(max_lambda=None)
        free.assign("stab", -10.0)
        assert free.lambdas()["stab"] == pytest.approx(np.exp(10.0))

    def test_non_finite_aborts_with_dump(self):
        b = LossBundle(mask=("smooth",))
        with pytest.raises(NumericalAbort) as exc:
            total_loss(b, {"task": T.Tensor(1.0), "smooth": T.Tensor(np.inf)})
        assert "smooth" in exc.value.dump["terms"]

    def test_per_unit_keys(self):
        b = LossBundle(per_unit=True, n_units=3)
        assert b.keys() == ["stab", "smooth.0", "smooth.1", "smooth.2", "align.0", "align.1", "align.2"]


def test_smoothness_sum_over_units():
    arch = zoo.mlp([4, 30, 3])
    plan = build_plan(arch, "lwt", 16, 0, max_ratio=None)
    parts = [float(unit_smoothness(u.state).data) for u in plan.units]
    assert float(smoothness_loss(plan).data) == pytest.approx(sum(parts), rel=1e-6)
