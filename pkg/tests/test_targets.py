import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mladv.errors import UsageError
from mladv.targets import (AttackSpec, attainable_tau_b, build_constraints,
                           constraint_satisfaction, criterion_vector, divide, parse_spec,
                           target_labels)

CELLS = ("A1", "Aneg1", "B1", "Bneg1", "C1", "Cneg1")


@st.composite
def labelled_specs(draw, max_l=8):
    l = draw(st.integers(2, max_l))
    y = np.array(draw(st.lists(st.sampled_from([-1, 1]), min_size=l, max_size=l)))
    role = draw(st.lists(st.sampled_from("ABC"), min_size=l, max_size=l))
    if "A" not in role:
        role[draw(st.integers(0, l - 1))] = "A"
    flip = [i for i, r in enumerate(role) if r == "A"]
    hold = [i for i, r in enumerate(role) if r == "B"]
    omega = draw(st.sampled_from(["C", "C1", "Cneg1", "empty"]))
    return y, AttackSpec(flip, hold, omega)


class TestAttackSpec:
    def test_normalises_and_validates(self):
        s = AttackSpec((3, 0), (2,))
        assert s.flip == (0, 3) and s.hold == (2,)
        with pytest.raises(UsageError):
            AttackSpec((), (1,))
        with pytest.raises(UsageError):
            AttackSpec((1,), (1,))
        with pytest.raises(UsageError):
            AttackSpec((1,), omega="D")
        with pytest.raises(UsageError):
            AttackSpec((1, 1))

    def test_whole_label_set_allowed(self):
        divide([1, -1], AttackSpec((0, 1)))

    def test_text_form_round_trip(self):
        s = parse_spec("0,3", "1,2", "C")
        assert s == AttackSpec((0, 3), (1, 2), "C")
        assert s.to_text() == "--flip 0,3 --hold 1,2 --omega C"
        with pytest.raises(UsageError):
            parse_spec("0,x")

    def test_out_of_range(self):
        with pytest.raises(UsageError):
            divide([1, -1], AttackSpec((2,)))


class TestDivide:
    def test_examples(self):
        d = divide([1, -1, 1], AttackSpec((0,), (1,)))
        assert (d.A1, d.Aneg1, d.B1, d.Bneg1, d.C1, d.Cneg1) == ((0,), (), (), (1,), (2,), ())
        d = divide([1, -1], AttackSpec((0, 1)))
        assert (d.A1, d.Aneg1) == ((0,), (1,))
        assert d.B1 == d.Bneg1 == d.C1 == d.Cneg1 == ()
        d = divide([-1, -1, 1], AttackSpec((2,), (0, 1)))
        assert d.A1 == (2,) and d.Bneg1 == (0, 1) and d.C == ()

    def test_omega_sets(self):
        d = divide([1, -1, 1, -1, 1], AttackSpec((0, 1), (2,)))
        assert d.omega_minus == (0,)
        assert d.omega_plus == (1, 2)
        for mode, expect in (("C", (3, 4)), ("C1", (4,)), ("Cneg1", (3,)), ("empty", ())):
            assert divide([1, -1, 1, -1, 1], AttackSpec((0, 1), (2,), mode)).omega_mid == expect

    def test_rejects_bad_labels(self):
        with pytest.raises(UsageError):
            divide([1, 0], AttackSpec((0,)))

    @settings(max_examples=200, deadline=None)
    @given(labelled_specs())
    def test_partition(self, case):
        y, spec = case
        d = divide(y, spec)
        cells = [set(getattr(d, k)) for k in CELLS]
        assert sum(len(c) for c in cells) == len(y)
        assert set().union(*cells) == set(range(len(y)))
        assert set(d.A1) | set(d.Aneg1) == set(spec.flip)
        assert set(d.B1) | set(d.Bneg1) == set(spec.hold)
        for k in CELLS:
            sign = -1 if k.endswith("neg1") else 1
            assert all(y[i] == sign for i in getattr(d, k))


class TestConstraints:
    def test_examples(self):
        cs = build_constraints([1, -1, 1], AttackSpec((0,), (1,)), 0.5)
        assert cs.indices.tolist() == [0, 1]
        assert cs.y_prime.tolist() == [1, 1]
        assert cs.c.tolist() == [0.5, 0.5]
        cs = build_constraints([-1, 1], AttackSpec((0,)), 0.5)
        assert cs.y_prime.tolist() == [-1] and cs.c.tolist() == [-0.5]

    def test_linear_mode(self):
        cs = build_constraints([1, -1, 1], AttackSpec((0, 2), (1,)), linear=True)
        assert not cs.c.any()

    @pytest.mark.parametrize("yp,c,score,count", [
        (1, 0.5, 0.4, 1), (1, 0.5, 0.5, 1), (-1, -0.5, 0.4, 0)])
    def test_satisfaction(self, yp, c, score, count):
        cs = build_constraints([yp, 1], AttackSpec((0,)), 0.5)
        assert cs.c[0] == c
        assert constraint_satisfaction(cs, [score])[1] == count

    def test_length_mismatch(self):
        cs = build_constraints([1, -1], AttackSpec((0,), (1,)))
        with pytest.raises(UsageError):
            constraint_satisfaction(cs, [0.1])

    @pytest.mark.parametrize("l", [2, 3])
    def test_all_satisfied_iff_flipped(self, l):
        # every spec and label vector on l labels, every score vector on a grid
        # that avoids the threshold itself
        grid = [0.05, 0.3, 0.49, 0.51, 0.7, 0.95]
        for y in itertools.product([-1, 1], repeat=l):
            y = np.array(y)
            for roles in itertools.product("ABC", repeat=l):
                if "A" not in roles:
                    continue
                spec = AttackSpec([i for i, r in enumerate(roles) if r == "A"],
                                  [i for i, r in enumerate(roles) if r == "B"])
                cs = build_constraints(y, spec, 0.5)
                want = target_labels(y, spec)
                idx = list(spec.flip + spec.hold)
                for s in itertools.product(grid, repeat=l):
                    s = np.array(s)
                    ok = constraint_satisfaction(cs, s[cs.indices])[1] == len(cs)
                    h = np.where(s > 0.5, 1, -1)
                    assert ok == bool(np.all(h[idx] == want[idx]))

    def test_threshold_boundary(self):
        # a score exactly at the threshold satisfies both kinds of constraint
        # and classifies negative
        down = build_constraints([1, -1], AttackSpec((0,)), 0.5)
        up = build_constraints([-1, 1], AttackSpec((0,)), 0.5)
        assert constraint_satisfaction(down, [0.5])[1] == 1
        assert constraint_satisfaction(up, [0.5])[1] == 1


class TestCriterion:
    def test_examples(self):
        assert criterion_vector(divide([1, -1, 1], AttackSpec((0,), (1,)))).tolist() == [-2, -1, 0]
        assert criterion_vector(divide([1, -1], AttackSpec((0, 1)))).tolist() == [-2, 2]
        assert criterion_vector(divide([-1, 1, 1], AttackSpec((2,), (0, 1)))).tolist() == [-1, 1, -2]

    @settings(max_examples=200, deadline=None)
    @given(labelled_specs())
    def test_plus_above_minus(self, case):
        y, spec = case
        d = divide(y, spec)
        v = criterion_vector(d)
        for hi in d.omega_plus:
            for lo in d.omega_minus:
                assert v[hi] > v[lo]

    def test_attainable_tau_b(self):
        # no ties in the criterion -> a perfect ordering reaches 1
        assert attainable_tau_b([-2, 2]) == pytest.approx(1.0)
        # ties in the criterion cap tau_b below 1
        t = attainable_tau_b([-2, 0, 0, 0, 2])
        assert 0 < t < 1
        assert np.isnan(attainable_tau_b([0, 0, 0]))
