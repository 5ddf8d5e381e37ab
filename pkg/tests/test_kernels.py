import os
import subprocess
import sys

import numpy as np
import pytest

from conftest import random_net
from mladv import kernels
from mladv.attacks import METHODS, AttackConfig, _mlcw_problem, _rank_problem, run_attack
from mladv.netcore import classify
from mladv.targets import AttackSpec, build_constraints, divide

needs_ext = pytest.mark.skipif("cython" not in kernels.available_backends(),
                               reason="compiled extension not built")


def test_fallback_selected_by_environment():
    env = dict(os.environ, MLADV_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "from mladv import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


def test_use_backend_restores():
    before = kernels.BACKEND
    with kernels.use_backend("python"):
        assert kernels.BACKEND == "python"
    assert kernels.BACKEND == before
    with pytest.raises(ValueError):
        kernels.load_backend("fortran")


@needs_ext
class TestEquivalence:
    py = kernels.load_backend("python")

    @property
    def cy(self):
        return kernels.load_backend("cython")

    @pytest.mark.parametrize("act", ["relu", "tanh", "sigmoid", "identity"])
    def test_forward_and_vjp(self, act):
        p = random_net(9, (7, 5), 4, seed=4, activation=act)
        rng = np.random.default_rng(0)
        for _ in range(5):
            x, cot = rng.uniform(size=9), rng.normal(size=4)
            assert np.allclose(self.cy.forward(*p.packed, x), self.py.forward(*p.packed, x),
                               rtol=0, atol=1e-14)
            a, b = self.cy.input_vjp(*p.packed, x, cot), self.py.input_vjp(*p.packed, x, cot)
            assert np.allclose(a[0], b[0], atol=1e-14)
            assert np.allclose(a[1], b[1], atol=1e-13)

    @pytest.mark.parametrize("kind", ["mlcw", "rank1", "rank2"])
    def test_objective(self, kind):
        p = random_net(6, (5,), 5, seed=1)
        y = np.array([1, -1, 1, -1, 1])
        spec = AttackSpec((0, 1), (2, 3))
        prob = (_mlcw_problem(build_constraints(y, spec)) if kind == "mlcw"
                else _rank_problem(divide(y, spec), kind))
        rng = np.random.default_rng(3)
        x = rng.uniform(size=6)
        xs = x + rng.normal(scale=0.2, size=6)
        args = (*p.packed, x, xs, prob.dist_kind, 7.0, prob.hinge_idx, prob.hinge_sign,
                prob.hinge_c, prob.term_ptr, prob.term_idx)
        a, b = self.cy.objective(*args), self.py.objective(*args)
        assert a[0] == pytest.approx(b[0], rel=1e-13)
        assert np.allclose(a[1], b[1], rtol=1e-11, atol=1e-13)

    def test_tau_b(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            u = rng.integers(0, 4, size=8).astype(float)
            v = rng.integers(-2, 3, size=8).astype(float)
            assert self.cy.tau_b(u, v) == self.py.tau_b(u, v)

    @pytest.mark.parametrize("method,opt", [(m, "normalized") for m in METHODS]
                             + [("mlcw", "adam"), ("mlcw", "gd"), ("rank2", "adam"),
                                ("rank2", "gd")])
    def test_attacks_agree(self, method, opt):
        p = random_net(10, (8,), 5, seed=6, activation="relu", scale=3.0)
        x = np.random.default_rng(6).uniform(size=10)
        y = classify(p, x)
        spec = AttackSpec((0, 3), (1,))
        cfg = AttackConfig(binary_search_steps=3, max_iter=150, optimizer=opt)
        out = {}
        for name in ("cython", "python"):
            with kernels.use_backend(name):
                out[name] = run_attack(method, x, y, spec, p, cfg)
        a, b = out["cython"], out["python"]
        assert a.satisfied_count == b.satisfied_count
        assert np.allclose(a.x_star, b.x_star, atol=1e-9)
        assert a.iterations == b.iterations
