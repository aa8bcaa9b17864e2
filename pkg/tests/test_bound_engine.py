import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from noisygen.bound_engine import (
    BoundSpec,
    PreconditionError,
    bound_curve,
    bound_ordering_check,
    decay_factors,
    decay_product,
    dp_sgd_bound_gaussian,
    dp_sgd_bound_laplace,
    dp_sgd_q,
    effective_diameter,
    evaluate,
    generic_bound,
    sgld_bound,
    sgld_mi_surrogate,
    sgld_trajectory_bound,
)
from noisygen.learning_core import LogisticModel, MLPModel, synth_blobs
from noisygen.noise_channels import Divergence, NoiseModel
from noisygen.optimizers import (
    DomainSpec,
    GradientStats,
    IterationConfig,
    LearningRate,
    ScheduleKind,
    TrainConfig,
    gradient_stats,
    run_training,
)
from noisygen.stat_estimators import LossAssumption, SampleSource

KL, TV, CHI2 = Divergence.KL, Divergence.TV, Divergence.CHI2
BOUNDED1 = LossAssumption.bounded(1.0)


def _stats(**kw):
    base = dict(n_samples=10, source=SampleSource.IN_BATCH, variance=0.0, mmae=0.0, mean_l2_dev=0.0,
                mean_sqrt_l1_dev=0.0, exp_l2sq=0.0, exp_l1=0.0, max_norm=0.0)
    base.update(kw)
    return GradientStats(**base)


def _record(stats, *, eta=1.0, m=None, b=10, noise=NoiseModel(), domain=DomainSpec(), clip=None,
            schedule=ScheduleKind.WITHOUT_REPLACEMENT, n=100, dim=1, algorithm="dp_sgd",
            betas=None, batch_index=None, partition=None):
    from noisygen.optimizers import TrajectoryRecord
    its = []
    for t in range(1, len(stats) + 1):
        its.append(IterationConfig(
            t, eta, eta if m is None else m, b, tuple(range((t - 1) * b, t * b)),
            None if betas is None else betas[t - 1],
            None if batch_index is None else batch_index[t - 1]))
    return TrajectoryRecord(its, list(stats), schedule, noise, domain, clip, n, dim, algorithm, partition)


def _sgld_record(var_list, *, b=10, n=100, beta=1.0, eta=1.0, batch_index=None):
    T = len(var_list)
    batch_index = batch_index or list(range(T))
    n_batches = n // b
    partition = [np.arange(j * b, (j + 1) * b) for j in range(n_batches)]
    return _record([_stats(variance=v) for v in var_list], eta=eta, b=b, n=n,
                   schedule=ScheduleKind.WITH_REPLACEMENT, algorithm="sgld",
                   betas=[beta] * T, batch_index=batch_index, partition=partition)


class TestBoundSpec:
    def test_mismatched_assumption(self):
        with pytest.raises(PreconditionError):
            BoundSpec(TV, LossAssumption.sub_gaussian(1.0), 10)
        with pytest.raises(PreconditionError):
            BoundSpec(CHI2, LossAssumption.sub_gaussian(1.0), 10)

    def test_constants(self):
        assert BoundSpec(KL, BOUNDED1, 10).constant == 0.5
        assert BoundSpec(TV, BOUNDED1, 10).constant == 1.0
        assert BoundSpec(CHI2, LossAssumption.finite_variance(0.04), 10).constant == pytest.approx(0.2)

    def test_label(self):
        assert BoundSpec(KL, BOUNDED1, 10, use_decay=False, method="dp_sgd").label == "dp_sgd_kl_nodecay"


class TestDecay:
    def _half_record(self):
        # uniform noise: delta = min(1, A / (2m)); D = 1, K = 0 gives delta = 0.5
        return _record([_stats()] * 3, noise=NoiseModel.uniform(), domain=DomainSpec.l2_ball(0.5),
                       clip=1e-300)

    def test_constant_half(self):
        rec = self._half_record()
        assert decay_product(rec, 1) == pytest.approx(0.25)
        assert decay_product(rec, 2) == pytest.approx(0.5)
        assert decay_product(rec, 3) == 1.0

    def test_unbounded_domain(self):
        rec = _record([_stats()] * 4, clip=1.0)
        assert all(decay_product(rec, t) == 1.0 for t in range(1, 5))

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            decay_product(self._half_record(), 0)

    @settings(max_examples=30)
    @given(st.lists(st.floats(0.01, 5.0), min_size=1, max_size=12), st.floats(0.1, 3.0))
    def test_in_unit_interval_and_nonincreasing_backwards(self, etas, D):
        rec = _record([_stats()] * len(etas), domain=DomainSpec.l2_ball(D / 2), clip=1.0)
        rec.iterations[:] = [IterationConfig(t, e, e, 10, tuple(range(10)))
                             for t, e in enumerate(etas, start=1)]
        Q = decay_factors(rec)
        assert np.all((Q >= 0) & (Q <= 1))
        assert np.all(np.diff(Q) >= 0)
        assert Q[-1] == 1.0

    def test_norm_conversion(self):
        rec = _record([_stats()], noise=NoiseModel.laplace(), domain=DomainSpec.l2_ball(1.0), dim=9)
        assert effective_diameter(rec) == pytest.approx(6.0)


class TestGeneric:
    def test_tv_example(self):
        rec = _record([_stats(pair_cost={TV: 0.2})])
        assert generic_bound(rec, BoundSpec(TV, BOUNDED1, 100)).total == pytest.approx(0.02)

    def test_identical_gradients_zero(self):
        rec = _record([_stats(pair_cost={KL: 0.0, TV: 0.0, CHI2: 0.0})] * 3)
        for f, a in ((KL, BOUNDED1), (TV, BOUNDED1), (CHI2, BOUNDED1)):
            assert generic_bound(rec, BoundSpec(f, a, 100)).total == 0.0

    def test_uniform_kl_infinite(self):
        # the uniform cost table is one-dimensional
        G = np.array([[0.0], [0.0], [0.5]])
        st_ = gradient_stats(G, noise=NoiseModel.uniform(), m_eff=1.0)
        rec = _record([st_], noise=NoiseModel.uniform(), b=3)
        assert math.isinf(generic_bound(rec, BoundSpec(KL, BOUNDED1, 40)).total)
        assert generic_bound(rec, BoundSpec(TV, BOUNDED1, 40)).total > 0

    def test_with_replacement_rejected(self):
        with pytest.raises(PreconditionError):
            generic_bound(_sgld_record([1.0]), BoundSpec(KL, BOUNDED1, 100))

    def test_pair_cost_matches_closed_form_kl(self):
        # with every pair enumerated: generic KL * sqrt(2 (b-1)/b) == closed-form DP-SGD KL
        data = synth_blobs(60, 3, 2, 3.0, 1)
        b = 6
        cfg = TrainConfig(algorithm="dp_sgd", iterations=8, batch_size=b, clip=1.0,
                          domain=DomainSpec.l2_ball(1.0), learning_rate=LearningRate(0.5), pair_costs=True)
        _, rec = run_training(LogisticModel(3), data, cfg, 4)
        spec = BoundSpec(KL, BOUNDED1, 60)
        g = generic_bound(rec, spec).total
        d = dp_sgd_bound_gaussian(rec, spec).total
        assert g * math.sqrt(2 * (b - 1) / b) == pytest.approx(d, rel=1e-10)


class TestDPSGD:
    def test_gaussian_kl_example(self):
        rec = _record([_stats(variance=4.0)])
        spec = BoundSpec(KL, LossAssumption.sub_gaussian(0.5), 100)
        assert dp_sgd_bound_gaussian(rec, spec).total == pytest.approx(0.02)

    def test_laplace_kl_example(self):
        rec = _record([_stats(mmae=1.0)], b=4, noise=NoiseModel.laplace())
        spec = BoundSpec(KL, LossAssumption.sub_gaussian(1.0), 100)
        assert dp_sgd_bound_laplace(rec, spec).total == pytest.approx(0.04)

    def test_identical_gradients_zero(self):
        for noise, fn in ((NoiseModel(), dp_sgd_bound_gaussian), (NoiseModel.laplace(), dp_sgd_bound_laplace)):
            rec = _record([_stats()] * 4, noise=noise)
            for f in Divergence:
                assert fn(rec, BoundSpec(f, BOUNDED1, 100)).total == 0.0

    def test_huge_noise_keeps_last_term(self):
        # tiny q: only the final iteration survives
        rec = _record([_stats(variance=1.0), _stats(variance=9.0)], domain=DomainSpec.l2_ball(1e-9),
                      clip=1e-9, eta=1.0)
        assert dp_sgd_q(rec) < 1e-8
        tot = dp_sgd_bound_gaussian(rec, BoundSpec(KL, BOUNDED1, 100)).total
        assert tot == pytest.approx(2 * 0.5 / 100 * 3.0, rel=1e-3)

    def test_laplace_q_in_open_interval(self):
        rec = _record([_stats()], noise=NoiseModel.laplace(), domain=DomainSpec.l1_ball(1.0), clip=1.0)
        assert 0.0 < dp_sgd_q(rec) < 1.0

    def test_wrong_noise_kind(self):
        with pytest.raises(PreconditionError):
            dp_sgd_bound_laplace(_record([_stats()]), BoundSpec(KL, BOUNDED1, 10))
        with pytest.raises(PreconditionError):
            dp_sgd_bound_gaussian(_record([_stats()], noise=NoiseModel.laplace()), BoundSpec(KL, BOUNDED1, 10))

    def test_varying_lr_rejected(self):
        rec = _record([_stats()] * 2)
        rec.iterations[1] = IterationConfig(2, 0.5, 0.5, 10, tuple(range(10)))
        with pytest.raises(PreconditionError):
            dp_sgd_bound_gaussian(rec, BoundSpec(KL, BOUNDED1, 10))

    def test_ordering_identical(self):
        rep = bound_ordering_check(_record([_stats()] * 2), 1.0, 100)
        assert rep.tv == rep.kl == rep.chi2 == 0.0

    def test_ordering_sigma_hat_too_large(self):
        with pytest.raises(PreconditionError):
            bound_ordering_check(_record([_stats()]), 1.0, 100, sigma_hat=0.6)


class TestSGLD:
    def test_example(self):
        # per-example variance b makes the batch term beta * eta * Var_batch = 1
        rec = _sgld_record([10.0] * 10)
        spec = BoundSpec(KL, LossAssumption.sub_gaussian(0.5), 100)
        assert sgld_bound(rec, spec).total == pytest.approx(math.sqrt(20) * 0.5 / 200 * 10)
        assert sgld_bound(rec, spec).total == pytest.approx(0.1118, abs=1e-4)

    def test_zero_variance(self):
        spec = BoundSpec(KL, BOUNDED1, 100)
        assert sgld_bound(_sgld_record([0.0] * 5), spec).total == 0.0
        assert sgld_trajectory_bound(_sgld_record([0.0] * 5), spec).total == 0.0

    def test_sigma_linear(self):
        rec = _sgld_record([1.0, 2.0, 3.0], batch_index=[0, 1, 0])
        a = sgld_bound(rec, BoundSpec(KL, LossAssumption.sub_gaussian(0.5), 100)).total
        b = sgld_bound(rec, BoundSpec(KL, LossAssumption.sub_gaussian(1.0), 100)).total
        assert b == pytest.approx(2 * a, rel=1e-15)

    def test_trajectory_example(self):
        # n=100, b=10, sigma=1, beta*eta*Var = 4: min{0.02, 0.0632} = 0.02
        rec = _sgld_record([4.0])
        rep = sgld_trajectory_bound(rec, BoundSpec(KL, LossAssumption.sub_gaussian(1.0), 100))
        first = math.sqrt(4.0) / 100
        second = math.sqrt(4.0 / 1000)
        assert min(first, second) == pytest.approx(0.02)
        assert second == pytest.approx(0.0632, abs=1e-4)
        assert rep.total == pytest.approx(math.sqrt(2) / 2 * 0.02)

    def test_mi_surrogate_hand(self):
        assert sgld_mi_surrogate(2.0, 0.5, 3.0, 2) == pytest.approx(2.0 * 0.5 * 3.0 / 16)

    @settings(max_examples=40)
    @given(st.lists(st.floats(0.0, 50.0), min_size=1, max_size=20),
           st.lists(st.integers(0, 9), min_size=20, max_size=20), st.floats(0.1, 2.0))
    def test_equals_mi_surrogate_form(self, variances, idx, sigma):
        # sqrt(2) sigma / (2n) sum_j sqrt(sum_t 4 b^2 MI_t) reproduces the mini-batch bound
        b, n = 10, 100
        idx = idx[:len(variances)]
        rec = _sgld_record(variances, batch_index=idx, beta=3.0, eta=0.5)
        spec = BoundSpec(KL, LossAssumption.sub_gaussian(sigma), n)
        per = {}
        for j, v in zip(idx, variances):
            per[j] = per.get(j, 0.0) + 4 * b * b * sgld_mi_surrogate(3.0, 0.5, v, b)
        per_iteration_form = math.sqrt(2) * sigma / (2 * n) * sum(math.sqrt(s) for s in per.values())
        assert sgld_bound(rec, spec).total == pytest.approx(per_iteration_form, rel=1e-12, abs=1e-300)
        assert sgld_bound(rec, spec).total <= sgld_trajectory_bound(rec, spec).total * (1 + 1e-12)

    def test_needs_partition(self):
        with pytest.raises(PreconditionError):
            sgld_bound(_record([_stats()]), BoundSpec(KL, BOUNDED1, 100))

    def test_needs_kl(self):
        with pytest.raises(PreconditionError):
            sgld_bound(_sgld_record([1.0]), BoundSpec(TV, BOUNDED1, 100))


def _dp_run(seed, noise=NoiseModel(), domain=DomainSpec.l2_ball(1.0), lr=0.5, T=10):
    data = synth_blobs(80, 3, 2, 3.0, seed)
    cfg = TrainConfig(algorithm="dp_sgd", iterations=T, batch_size=4, clip=1.0, noise=noise,
                      domain=domain, learning_rate=LearningRate(lr), pair_costs=True)
    return run_training(LogisticModel(3), data, cfg, seed)[1]


class TestProperties:
    @pytest.mark.parametrize("seed", range(3))
    def test_decay_never_increases(self, seed):
        rec = _dp_run(seed, lr=2.0)
        for f in Divergence:
            for method in ("dp_sgd", "generic"):
                on = evaluate(rec, BoundSpec(f, BOUNDED1, 80, True, method)).total
                off = evaluate(rec, BoundSpec(f, BOUNDED1, 80, False, method)).total
                assert on <= off * (1 + 1e-12)

    def test_decay_strict_when_q_below_one(self):
        rec = _dp_run(0, lr=2.0)
        assert dp_sgd_q(rec) < 1.0
        on = evaluate(rec, BoundSpec(TV, BOUNDED1, 80, True, "dp_sgd")).total
        off = evaluate(rec, BoundSpec(TV, BOUNDED1, 80, False, "dp_sgd")).total
        assert on < off

    @given(st.floats(0.1, 10.0))
    @settings(max_examples=10, deadline=None)
    def test_scaling(self, c):
        rec = _dp_run(1)
        for f in (KL, TV):
            a = evaluate(rec, BoundSpec(f, LossAssumption.bounded(1.0), 80)).total
            b = evaluate(rec, BoundSpec(f, LossAssumption.bounded(c), 80)).total
            assert b == pytest.approx(c * a, rel=1e-12)

    @pytest.mark.parametrize("seed", range(3))
    def test_ordering(self, seed):
        rep = bound_ordering_check(_dp_run(seed), 1.0, 80)
        assert rep.tv <= rep.kl <= rep.chi2

    def test_laplace_bounds_nonnegative(self):
        rec = _dp_run(2, noise=NoiseModel.laplace(), domain=DomainSpec.l1_ball(1.0))
        for f in Divergence:
            assert evaluate(rec, BoundSpec(f, BOUNDED1, 80)).total > 0.0

    def test_curve_matches_prefix(self):
        rec = _dp_run(0)
        spec = BoundSpec(KL, BOUNDED1, 80)
        curve = bound_curve(rec, spec, [0, 3, 10])
        assert curve[0] == 0.0
        assert curve[1] == evaluate(rec.prefix(3), spec).total

    def test_sgld_curve_matches_prefix(self):
        data = synth_blobs(60, 3, 2, 3.0, 0)
        cfg = TrainConfig(algorithm="sgld", schedule="with_replacement", batch_size=10, epochs=3)
        _, rec = run_training(MLPModel(3, (4,), 2), data, cfg, 0)
        spec = BoundSpec(KL, BOUNDED1, 60)
        curve = bound_curve(rec, spec, [6, 12, 18])
        for t, v in zip((6, 12, 18), curve):
            assert v == pytest.approx(sgld_bound(rec.prefix(t), spec).total, rel=1e-12)
        assert np.all(np.diff(curve) >= 0)
