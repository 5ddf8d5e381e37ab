import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import linear_net, random_net
from mladv import attacks, kernels
from mladv.attacks import (AttackConfig, AttackResult, attack_fg, attack_fgs, attack_loss,
                           attack_mlcw, attack_mldp, attack_rank, box_inverse, box_transform,
                           fast_gradient, fg_step, fgs_step, mlcw_objective, mldp_step,
                           rank1_full_loss, rank1_loss, rank2_loss, run_attack, select_best)
from mladv.errors import PreconditionError, UsageError
from mladv.netcore import classify, forward
from mladv.targets import AttackSpec, build_constraints, divide
from oracles import central_diff, min_norm_solution, rel_close

FAST = AttackConfig(binary_search_steps=4, max_iter=200)


def constant_net(scores, d=2):
    """Scores independent of the input."""
    logits = [math.log(s / (1 - s)) for s in scores]
    return linear_net(np.zeros((len(scores), d)), logits)


def planted(d=12, l=4, seed=0, scale=4.0):
    """Single-layer net plus a point and its predicted labels."""
    rng = np.random.default_rng(seed)
    p = linear_net(rng.normal(scale=scale / math.sqrt(d), size=(l, d)), rng.normal(size=l))
    x = rng.uniform(0.2, 0.8, size=d)
    return p, x, classify(p, x)


def fake(count, rmsd, tau=0.0):
    return AttackResult("x", np.zeros(1), np.ones(2), None, np.zeros(1), np.zeros(2), count, 4,
                        tau, rmsd)


class TestBox:
    def test_centre_and_limits(self):
        assert box_transform(0.0) == 0.5
        assert box_transform(40.0) == pytest.approx(1.0)
        assert box_transform(-40.0, (-1, 3)) == pytest.approx(-1.0)

    @settings(max_examples=200, deadline=None)
    @given(st.floats(-5, 5))
    def test_round_trip(self, w):
        assert box_inverse(box_transform(w)) == pytest.approx(w, abs=1e-9)

    @settings(max_examples=100, deadline=None)
    @given(st.floats(-1e6, 1e6))
    def test_strictly_inside(self, w):
        x = float(box_transform(w, (0.0, 1.0)))
        assert 0.0 <= x <= 1.0


class TestObjectives:
    def test_mlcw_examples(self):
        cs = build_constraints([1, 1], AttackSpec((0,)), 0.5)
        assert mlcw_objective(np.zeros(2), np.zeros(2), cs, 1.0, constant_net([0.7, 0.9])) == \
            pytest.approx(0.2)
        assert mlcw_objective(np.zeros(2), np.zeros(2), cs, 1.0, constant_net([0.3, 0.9])) == 0.0
        assert mlcw_objective([0.1, 0.0], np.zeros(2), cs, 0.0, constant_net([0.7, 0.9])) == \
            pytest.approx(0.01)

    def test_rank1_examples(self):
        div = divide([1, 1], AttackSpec((0,), (1,), "empty"))
        assert (div.omega_minus, div.omega_plus) == ((0,), (1,))
        p = constant_net([0.6, 0.4])
        expect = math.exp(0.6) - math.exp(0.4)
        assert expect == pytest.approx(0.330294, abs=1e-6)
        assert rank1_full_loss(np.zeros(2), np.zeros(2), div, p) == pytest.approx(expect)
        assert rank1_loss(np.zeros(2), np.zeros(2), div, p, 1.0) == pytest.approx(expect)
        q = constant_net([0.4, 0.6])
        assert rank1_full_loss(np.zeros(2), np.zeros(2), div, q) == 0.0
        assert rank1_loss(np.zeros(2), np.zeros(2), div, q, 1.0) == 0.0

    def test_rank1_with_mid_set(self):
        div = divide([1, 1, 1], AttackSpec((0,), (1,), "C"))
        assert div.omega_mid == (2,)
        p = constant_net([0.4, 0.6, 0.5])
        assert rank1_loss(np.zeros(2), np.zeros(2), div, p, 1.0) == 0.0

    def test_empty_low_set_keeps_mid_high_term(self):
        div = divide([-1, 1], AttackSpec((0,), (), "C"))
        assert div.omega_minus == ()
        p = constant_net([0.4, 0.9])  # mid label 1 above high label 0
        expect = math.exp(0.9) - math.exp(0.4)
        assert rank1_full_loss(np.zeros(2), np.zeros(2), div, p) == pytest.approx(expect)

    def test_rank2_motivating_case(self):
        div = divide([-1, 1, 1], AttackSpec((1,), (0, 2)))
        p = constant_net([0.01, 0.98, 0.99])
        assert rank1_loss(np.zeros(2), np.zeros(2), div, p, 1.0) == 0.0
        extra = math.exp(0.98) - math.exp(0.01)
        assert extra == pytest.approx(1.654406, abs=1e-6)
        assert rank2_loss(np.zeros(2), np.zeros(2), div, p, 1.0) == pytest.approx(extra)
        q = constant_net([0.98, 0.01, 0.99])
        assert rank2_loss(np.zeros(2), np.zeros(2), div, q, 1.0) == pytest.approx(
            rank1_loss(np.zeros(2), np.zeros(2), div, q, 1.0))

    def test_rank2_equals_rank1_without_extra_sets(self):
        div = divide([-1, -1, -1], AttackSpec((0, 1, 2)))
        p = constant_net([0.3, 0.8, 0.5])
        assert rank2_loss(np.zeros(2), np.zeros(2), div, p, 2.0) == \
            rank1_loss(np.zeros(2), np.zeros(2), div, p, 2.0)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 10**6), st.floats(0.0, 10.0))
    def test_rank2_dominates_rank1(self, seed, lam):
        rng = np.random.default_rng(seed)
        p = random_net(4, (3,), 5, seed=seed % 97)
        y = np.where(rng.random(5) < 0.5, 1, -1)
        roles = rng.choice(list("ABC"), size=5)
        roles[rng.integers(5)] = "A"
        spec = AttackSpec(np.flatnonzero(roles == "A"), np.flatnonzero(roles == "B"),
                          rng.choice(["C", "C1", "Cneg1", "empty"]))
        div = divide(y, spec)
        x, r = rng.uniform(size=4), rng.normal(scale=0.1, size=4)
        assert rank2_loss(r, x, div, p, lam) >= rank1_loss(r, x, div, p, lam)

    @pytest.mark.parametrize("kind", ["mlcw", "rank1", "rank2"])
    def test_kernel_value_matches_numpy_form(self, kind):
        p = random_net(6, (5,), 4, seed=2)
        x = np.full(6, 0.4)
        r = np.random.default_rng(0).normal(scale=0.3, size=6)
        y = np.array([1, -1, 1, -1])
        spec = AttackSpec((0, 1), (2,))
        cs, div = build_constraints(y, spec), divide(y, spec)
        value, grad = attack_loss(kind, r, x, p, 3.0, cs=cs, div=div)
        ref = {"mlcw": lambda v: mlcw_objective(v, x, cs, 3.0, p),
               "rank1": lambda v: rank1_loss(v, x, div, p, 3.0),
               "rank2": lambda v: rank2_loss(v, x, div, p, 3.0)}[kind]
        assert value == pytest.approx(ref(r), rel=1e-12)
        assert rel_close(grad, central_diff(ref, r))


class TestMldpStep:
    def test_examples(self):
        dr, deg = mldp_step([[1.0], [0.0]], [0.5])
        assert np.allclose(dr, [0.5, 0.0]) and not deg
        dr, _ = mldp_step(np.eye(2), [1.0, 2.0])
        assert np.allclose(dr, [1.0, 2.0])

    @pytest.mark.parametrize("seed", range(10))
    def test_minimum_norm(self, seed):
        rng = np.random.default_rng(seed)
        P, q = rng.normal(size=(8, 3)), rng.normal(size=3)
        dr, deg = mldp_step(P, q)
        assert not deg
        assert np.max(np.abs(P.T @ dr - q)) < 1e-10
        assert np.allclose(dr, min_norm_solution(P, q), atol=1e-12)
        # any other solution is longer: move along the null space of P.T
        null = np.linalg.svd(P.T)[2][3:]
        for v in null:
            for t in (1e-3, -1e-3):
                assert np.linalg.norm(dr + t * v) > np.linalg.norm(dr)

    def test_rank_deficient_is_flagged(self):
        P = np.array([[1.0, 2.0], [0.0, 0.0], [1.0, 2.0]])
        dr, deg = mldp_step(P, [1.0, 2.0])
        assert deg and np.all(np.isfinite(dr))
        assert np.allclose(P.T @ dr, [1.0, 2.0], atol=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(UsageError):
            mldp_step(np.eye(3), [1.0, 2.0])


class TestSelection:
    def test_examples(self):
        a, b = fake(3, 2.0), fake(3, 1.0)
        assert select_best([a, b]) is b
        a, b = fake(4, 9.0), fake(3, 0.1)
        assert select_best([a, b]) is a
        a, b = fake(0, 1.0, 0.9), fake(0, 1.0, 0.9)
        assert select_best([a, b], "tau") is a

    def test_errors(self):
        with pytest.raises(UsageError):
            select_best([])
        with pytest.raises(UsageError):
            select_best([fake(1, 1.0)], "other")

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 4), st.floats(0, 1)), min_size=1, max_size=8))
    def test_best_dominates(self, items):
        cands = [fake(c, r) for c, r in items]
        best = select_best(cands)
        for c in cands:
            assert (best.satisfied_count, -best.rmsd) >= (c.satisfied_count, -c.rmsd)


class TestFastGradient:
    def test_steps(self):
        assert fgs_step([0.2], [2.0], 0.1).tolist() == pytest.approx([0.1])
        assert fg_step([0.2], [2.0], 0.1).tolist() == pytest.approx([0.1])
        assert fgs_step([0.2], [2.0], 0.0).tolist() == [0.2]
        assert fgs_step([0.05], [1.0], 0.1).tolist() == [0.0]
        assert fg_step([0.2], [0.0], 0.1) is None

    def test_gradient_matches_cross_entropy(self):
        p = random_net(5, (4,), 3, seed=1)
        x = np.full(5, 0.5)
        y = classify(p, x)
        cs = build_constraints(y, AttackSpec((0,), (2,)))
        b = (1 - cs.y_prime) / 2

        def bce(v):
            s = forward(p, v)[cs.indices]
            return -np.sum(b * np.log(s) + (1 - b) * np.log(1 - s))

        assert rel_close(fast_gradient(p, x, cs), central_diff(bce, x))

    def test_zero_gradient_flag(self):
        p = constant_net([0.9, 0.2])
        res = attack_fg(np.full(2, 0.5), [1, -1], AttackSpec((0,)), p)
        assert "zero_gradient" in res.flags
        assert res.rmsd == 0.0

    def test_grid_and_cap(self):
        p, x, y = planted()
        res = attack_fgs(x, y, AttackSpec((0,)), p, AttackConfig(epsilon_grid=(0.0, 0.05, 0.3)))
        assert res.param_name == "epsilon" and res.param_value in (0.0, 0.05, 0.3)
        capped = attack_fgs(x, y, AttackSpec((0,)), p,
                            AttackConfig(epsilon_grid=(0.0, 0.05, 0.3), rmsd_cap=0.06))
        assert capped.rmsd <= 0.06


class TestMlcw:
    def test_two_label_flip_beats_fgs(self):
        p = linear_net([[3.0, -1.0], [-1.0, 2.0]], [-1.0, 0.2])
        x = np.array([0.6, 0.4])
        y = classify(p, x)
        spec = AttackSpec((0,), (1,))
        res = attack_mlcw(x, y, spec, p)
        assert res.satisfied_count == 2
        fgs = attack_fgs(x, y, spec, p)
        assert res.rmsd < fgs.rmsd

    def test_already_satisfied_returns_clean(self):
        p = constant_net([0.5, 0.2])  # label 0 sits at the threshold, classified -1
        res = attack_mlcw(np.full(2, 0.3), [-1, -1], AttackSpec((0,), (1,)), p)
        # score 0.5 on a label to lift: -0.5 <= -0.5 holds, nothing to do
        assert res.satisfied_count == 2 and res.rmsd == 0.0

    def test_lambda_schedule(self, monkeypatch):
        seen = []
        real = kernels.descend

        def spy(*args):
            seen.append(args[8])
            return real(*args)

        monkeypatch.setattr(kernels, "descend", spy)
        p, x, y = planted(seed=4)
        attack_mlcw(x, y, AttackSpec((0,)), p, AttackConfig(binary_search_steps=4, max_iter=300))
        assert seen[0] == 1e5
        for a, b in zip(seen, seen[1:]):
            assert b in (a / 2, a * 10)
        # an easy single flip succeeds every time: halving throughout
        assert seen == [1e5, 5e4, 2.5e4, 1.25e4]

    def test_misclassified_input_rejected(self):
        p, x, y = planted()
        bad = y.copy()
        bad[0] *= -1
        with pytest.raises(PreconditionError):
            attack_mlcw(x, bad, AttackSpec((0,)), p)

    @pytest.mark.parametrize("opt", ["normalized", "adam", "gd"])
    def test_optimizers(self, opt):
        p, x, y = planted(seed=5)
        res = attack_mlcw(x, y, AttackSpec((0, 1)), p,
                          AttackConfig(binary_search_steps=3, max_iter=300, optimizer=opt))
        assert res.satisfied_count >= 1
        assert np.all((res.x_star >= 0) & (res.x_star <= 1))

    def test_unknown_optimizer(self):
        with pytest.raises(UsageError):
            AttackConfig(optimizer="sgd")


class TestMldp:
    def test_linear_flip_converges_fast(self):
        p = linear_net([[2.0, -1.0, 0.5], [0.3, 0.3, 0.3]], [-0.5, 0.0])
        x = np.array([0.6, 0.3, 0.5])
        y = classify(p, x)
        res = attack_mldp(x, y, AttackSpec((0,)), p)
        assert res.satisfied_count == 1
        assert 1 <= res.iterations <= 3

    def test_pre_satisfied(self):
        p = constant_net([0.2, 0.5])
        res = attack_mldp(np.full(2, 0.5), [-1, -1], AttackSpec((1,), (0,)), p)
        assert res.iterations == 0 and res.satisfied_count == 2 and res.rmsd == 0.0

    def test_infeasible_runs_to_the_limit(self):
        # two labels with identical weights cannot be pushed apart
        p = linear_net([[1.0, -1.0], [1.0, -1.0]], [-0.5, -0.5])
        x = np.array([0.3, 0.5])
        res = attack_mldp(x, [-1, -1], AttackSpec((0,), (1,)), p, AttackConfig(mldp_max_iter=20))
        assert res.satisfied_count == 1
        assert "degenerate" in res.flags
        assert res.iterations <= 20

    def test_update_modes_differ(self):
        p, x, y = planted(seed=2)
        spec = AttackSpec((0, 1))
        a = attack_mldp(x, y, spec, p, AttackConfig(mldp_update="printed"))
        b = attack_mldp(x, y, spec, p, AttackConfig(mldp_update="accumulate"))
        for res in (a, b):
            assert np.all((res.x_star >= 0) & (res.x_star <= 1))
        with pytest.raises(UsageError):
            AttackConfig(mldp_update="other")


class TestRank:
    def test_rank2_demotes_where_rank1_stalls(self):
        rng = np.random.default_rng(3)
        d = 20
        W = rng.normal(size=(3, d))
        x = rng.uniform(0.3, 0.7, size=d)
        target = np.array([0.05, 0.96, 0.98])
        b = np.log(target / (1 - target)) - W @ x
        p = linear_net(W, b)
        y = np.array([-1, 1, 1])
        spec = AttackSpec((1,), (0, 2))
        r1 = attack_rank(x, y, spec, p, FAST, "I")
        r2 = attack_rank(x, y, spec, p, FAST, "II")
        s0 = forward(p, x)
        assert np.argsort(r1.scores).tolist() == np.argsort(s0).tolist()
        assert r2.scores[1] < r2.scores[0]

    def test_clean_optimum_returns_zero(self):
        p = constant_net([0.1, 0.9, 0.6])
        res = attack_rank(np.full(2, 0.5), [-1, 1, -1], AttackSpec((1,), (0,), "empty"), p, FAST)
        assert res.rmsd == 0.0

    def test_variant_names(self):
        p, x, y = planted()
        with pytest.raises(UsageError):
            attack_rank(x, y, AttackSpec((0,)), p, FAST, "III")


class TestRunAttack:
    def test_unknown_method(self):
        p, x, y = planted()
        with pytest.raises(UsageError):
            run_attack("pgd", x, y, AttackSpec((0,)), p)

    @pytest.mark.parametrize("method", attacks.METHODS)
    def test_box_and_bookkeeping(self, method):
        p = random_net(8, (6,), 4, seed=1, scale=3.0)
        x = np.random.default_rng(1).uniform(size=8)
        y = classify(p, x)
        spec = AttackSpec((0, 1), (2,))
        res = run_attack(method, x, y, spec, p, FAST)
        assert np.all((res.x_star >= 0) & (res.x_star <= 1))
        assert res.rmsd == pytest.approx(math.sqrt(np.mean((res.x_star - x) ** 2)))
        assert res.n_constraints == 3
        assert np.allclose(res.scores, forward(p, res.x_star))
