"""Targeted multi-label attacks.

Six methods share one result type:

* ``fgs`` / ``fg``: one gradient step on the per-label sigmoid cross-entropy
  towards the target labels, sign or L2 normalised, over a grid of step sizes.
* ``mlcw``: hinge-penalised constraints plus squared L2 distortion, optimised in
  tanh space with a binary search over the penalty weight.
* ``mldp``: greedy minimum-norm solves of the linearised constraints.
* ``rank1`` / ``rank2``: hinge losses on exponentiated scores that enforce the
  target label ordering, selected by Kendall tau-b against the criterion vector.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels, metrics
from .errors import PreconditionError, UsageError
from .netcore import classify, forward, input_jacobian
from .targets import (attainable_tau_b, build_constraints, constraint_satisfaction,
                      criterion_vector, divide)

METHODS = ("fgs", "fg", "mlcw", "mldp", "rank1", "rank2")

# "normalized": fixed-length steps lr * sqrt(d) along -g / |g| in tanh space
OPTIMIZERS = {"normalized": kernels.OPT_NORMALIZED, "adam": kernels.OPT_ADAM,
              "gd": kernels.OPT_GD}

# interior margin for the tanh change of variables, relative to the box width
_BOX_MARGIN = 1e-6


@dataclass(frozen=True)
class AttackConfig:
    lambda_init: float = 1e5
    binary_search_steps: int = 10
    max_iter: int = 1000
    learning_rate: float = 1e-2
    mldp_max_iter: int = 20
    epsilon_grid: tuple = None
    rmsd_cap: float = None
    box: tuple = (0.0, 1.0)
    threshold: float = 0.5
    optimizer: str = "normalized"
    mldp_update: str = "printed"

    def __post_init__(self):
        if self.lambda_init <= 0 or self.learning_rate <= 0:
            raise UsageError("lambda_init and learning_rate must be positive")
        if self.binary_search_steps < 1 or self.max_iter < 0 or self.mldp_max_iter < 1:
            raise UsageError("iteration counts must be positive")
        lo, hi = self.box
        if not lo < hi:
            raise UsageError("box must satisfy x_min < x_max")
        if self.epsilon_grid is None:
            grid = tuple(float(e) for e in np.linspace(0.0, 0.5 * (hi - lo), 21))
            object.__setattr__(self, "epsilon_grid", grid)
        else:
            object.__setattr__(self, "epsilon_grid", tuple(float(e) for e in self.epsilon_grid))
        if not self.epsilon_grid or min(self.epsilon_grid) < 0:
            raise UsageError("epsilon_grid must be a non-empty list of nonnegative values")
        if self.rmsd_cap is not None and self.rmsd_cap <= 0:
            raise UsageError("rmsd_cap must be positive")
        if self.optimizer not in OPTIMIZERS:
            raise UsageError(f"optimizer must be one of {OPTIMIZERS}")
        if self.mldp_update not in ("printed", "accumulate"):
            raise UsageError("mldp_update must be 'printed' or 'accumulate'")

    def as_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class AttackResult:
    method: str
    x: np.ndarray
    y: np.ndarray
    spec: object
    x_star: np.ndarray
    scores: np.ndarray
    satisfied_count: int
    n_constraints: int
    tau_b: float
    rmsd: float
    param_name: str = "none"
    param_value: float = float("nan")
    iterations: int = 0
    flags: tuple = field(default_factory=tuple)

    @property
    def r(self):
        return self.x_star - self.x

    @property
    def success(self):
        return self.satisfied_count == self.n_constraints


def box_transform(w, box=(0.0, 1.0)):
    lo, hi = box
    return (lo + hi) / 2.0 + (hi - lo) / 2.0 * np.tanh(np.asarray(w, dtype=np.float64))


def box_inverse(x, box=(0.0, 1.0)):
    """Inverse of :func:`box_transform`; ``x`` is pulled slightly inside the box first."""
    lo, hi = box
    mid, half = (lo + hi) / 2.0, (hi - lo) / 2.0
    u = (np.asarray(x, dtype=np.float64) - mid) / half
    return np.arctanh(np.clip(u, -1.0 + _BOX_MARGIN, 1.0 - _BOX_MARGIN))


# ---------------------------------------------------------------------------
# objectives (direct numpy forms; the descent kernel computes the same values)

def mlcw_objective(r, x, cs, lam, p):
    r = np.asarray(r, dtype=np.float64)
    s = forward(p, np.asarray(x) + r)
    hinge = np.maximum(0.0, cs.y_prime * s[cs.indices] - cs.c)
    return float(r @ r + lam * hinge.sum())


def _lams(lam, n):
    lam = np.atleast_1d(np.asarray(lam, dtype=np.float64))
    return np.full(n, lam[0]) if lam.size == 1 else lam


def _set_hinge(es, low, high):
    if not low or not high:
        return 0.0
    return max(0.0, float(np.max(es[list(low)]) - np.min(es[list(high)])))


def _pair_hinge(es, low, high):
    if not low or not high:
        return 0.0
    diff = es[list(low)][:, None] - es[list(high)][None, :]
    return float(np.maximum(diff, 0.0).sum() / diff.size)


def rank1_full_loss(r, x, div, p):
    """Distortion plus the averaged pairwise hinges over every label pair."""
    r = np.asarray(r, dtype=np.float64)
    es = np.exp(forward(p, np.asarray(x) + r))
    lo, hi, mid = div.omega_minus, div.omega_plus, div.omega_mid
    return float(np.linalg.norm(r) + _pair_hinge(es, lo, hi) + _pair_hinge(es, lo, mid)
                 + _pair_hinge(es, mid, hi))


def rank1_loss(r, x, div, p, lam):
    r = np.asarray(r, dtype=np.float64)
    es = np.exp(forward(p, np.asarray(x) + r))
    terms = rank_terms(div, "rank1")
    lams = _lams(lam, len(terms))
    return float(np.linalg.norm(r) + sum(w * _set_hinge(es, lo, hi)
                                         for w, (lo, hi) in zip(lams, terms)))


def rank2_loss(r, x, div, p, lam):
    r = np.asarray(r, dtype=np.float64)
    es = np.exp(forward(p, np.asarray(x) + r))
    terms = rank_terms(div, "rank2")
    lams = _lams(lam, len(terms))
    return float(np.linalg.norm(r) + sum(w * _set_hinge(es, lo, hi)
                                         for w, (lo, hi) in zip(lams, terms)))


def rank_terms(div, variant):
    """``(low, high)`` index-set pairs whose hinges make up a ranking loss.

    Always five (rank2) or three (rank1) entries, possibly with empty sets;
    empty pairs contribute nothing.
    """
    lo, hi, mid = div.omega_minus, div.omega_plus, div.omega_mid
    terms = [(lo, hi), (lo, mid), (mid, hi)]
    if variant == "rank2":
        terms += [(div.A1, div.Bneg1), (div.B1, div.Aneg1)]
    return terms


def _pack_terms(terms):
    ptr, idx = [], []
    for low, high in terms:
        if not low or not high:
            continue
        ptr.append(len(idx))
        idx.extend(low)
        ptr.append(len(idx))
        idx.extend(high)
    if ptr:
        ptr.append(len(idx))
    return np.array(ptr, dtype=np.int64), np.array(idx, dtype=np.int64)


_EMPTY_I = np.zeros(0, dtype=np.int64)
_EMPTY_F = np.zeros(0, dtype=np.float64)


@dataclass(frozen=True)
class _Problem:
    dist_kind: int
    hinge_idx: np.ndarray = _EMPTY_I
    hinge_sign: np.ndarray = _EMPTY_F
    hinge_c: np.ndarray = _EMPTY_F
    term_ptr: np.ndarray = _EMPTY_I
    term_idx: np.ndarray = _EMPTY_I


def _mlcw_problem(cs):
    return _Problem(kernels.DIST_SQUARED, np.asarray(cs.indices, dtype=np.int64),
                    np.asarray(cs.y_prime, dtype=np.float64), np.asarray(cs.c, dtype=np.float64))


def _rank_problem(div, variant):
    ptr, idx = _pack_terms(rank_terms(div, variant))
    return _Problem(kernels.DIST_L2, term_ptr=ptr, term_idx=idx)


def attack_loss(kind, r, x, p, lam, cs=None, div=None):
    """Value and input gradient of an attack objective through the kernel.

    ``kind`` is ``"mlcw"`` (needs ``cs``), ``"rank1"`` or ``"rank2"`` (need ``div``).
    """
    prob = _mlcw_problem(cs) if kind == "mlcw" else _rank_problem(div, kind)
    x = np.asarray(x, dtype=np.float64)
    value, grad, _ = kernels.objective(*p.packed, x, x + np.asarray(r, dtype=np.float64),
                                       prob.dist_kind, float(lam), prob.hinge_idx,
                                       prob.hinge_sign, prob.hinge_c, prob.term_ptr,
                                       prob.term_idx)
    return value, grad


# ---------------------------------------------------------------------------
# helpers

def _check_premise(p, x, y, spec, threshold):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if x.shape != (p.input_dim,) or y.shape != (p.output_dim,):
        raise UsageError("instance dimensions do not match the predictor")
    spec.check_labels(len(y))
    targeted = list(spec.flip + spec.hold)
    if np.any(classify(p, x, threshold)[targeted] != y[targeted]):
        raise PreconditionError("the clean input is misclassified on the targeted labels")
    return x, y


def _result(method, p, x, y, spec, cs, crit, x_star, cfg, param_name="none",
            param_value=float("nan"), iterations=0, flags=(), scores=None):
    x_star = np.clip(np.asarray(x_star, dtype=np.float64), *cfg.box)
    if scores is None:
        scores = forward(p, x_star)
    _, count = constraint_satisfaction(cs, scores[cs.indices])
    return AttackResult(
        method=method, x=x, y=y, spec=spec, x_star=x_star, scores=np.asarray(scores),
        satisfied_count=count, n_constraints=len(cs),
        tau_b=metrics.kendall_tau_b(scores, crit), rmsd=metrics.rmsd(x_star - x),
        param_name=param_name, param_value=float(param_value), iterations=int(iterations),
        flags=tuple(flags))


def _primary(result, mode):
    if mode == "constraints":
        return float(result.satisfied_count)
    return -math.inf if metrics.is_undefined(result.tau_b) else result.tau_b


def select_best(candidates, mode="constraints"):
    """Lexicographic best by (primary score, -rmsd); the earliest wins exact ties."""
    if not candidates:
        raise UsageError("no candidates to select from")
    if mode not in ("constraints", "tau"):
        raise UsageError("mode must be 'constraints' or 'tau'")
    best = candidates[0]
    for cand in candidates[1:]:
        a, b = _primary(cand, mode), _primary(best, mode)
        if a > b or (a == b and cand.rmsd < best.rmsd):
            best = cand
    return best


def _cap(cfg):
    return math.inf if cfg.rmsd_cap is None else float(cfg.rmsd_cap)


def _optimizer_code(cfg):
    return OPTIMIZERS[cfg.optimizer]


def _binary_search(method, p, x, y, spec, cs, crit, cfg, prob, sel_mode, success):
    lo, hi = cfg.box
    w0 = box_inverse(x, cfg.box)
    lam = float(cfg.lambda_init)
    candidates = []
    for _ in range(cfg.binary_search_steps):
        out = kernels.descend(*p.packed, x, w0, (lo + hi) / 2.0, (hi - lo) / 2.0,
                              prob.dist_kind, lam, prob.hinge_idx, prob.hinge_sign,
                              prob.hinge_c, prob.term_ptr, prob.term_idx, sel_mode,
                              np.asarray(crit, dtype=np.float64), cfg.learning_rate,
                              cfg.max_iter, _optimizer_code(cfg), _cap(cfg))
        x_best, s_best, _, _, k_best = out
        cand = _result(method, p, x, y, spec, cs, crit, x_best, cfg, "lambda", lam, k_best,
                       scores=s_best)
        candidates.append(cand)
        lam = lam / 2.0 if success(cand) else lam * 10.0
    return select_best(candidates, "constraints" if sel_mode == kernels.SELECT_COUNT else "tau")


# ---------------------------------------------------------------------------
# attacks

def attack_mlcw(x, y, spec, p, cfg=None):
    cfg = cfg or AttackConfig()
    x, y = _check_premise(p, x, y, spec, cfg.threshold)
    cs = build_constraints(y, spec, cfg.threshold)
    crit = criterion_vector(divide(y, spec))
    clean = _result("mlcw", p, x, y, spec, cs, crit, x, cfg)
    if clean.success:
        return clean
    return _binary_search("mlcw", p, x, y, spec, cs, crit, cfg, _mlcw_problem(cs),
                          kernels.SELECT_COUNT, lambda c: c.success)


def attack_rank(x, y, spec, p, cfg=None, variant="rank2"):
    if variant in ("I", "1"):
        variant = "rank1"
    elif variant in ("II", "2"):
        variant = "rank2"
    if variant not in ("rank1", "rank2"):
        raise UsageError("variant must be rank1 or rank2")
    cfg = cfg or AttackConfig()
    x, y = _check_premise(p, x, y, spec, cfg.threshold)
    cs = build_constraints(y, spec, cfg.threshold)
    div = divide(y, spec)
    crit = criterion_vector(div)
    tau_max = attainable_tau_b(crit)
    clean = _result(variant, p, x, y, spec, cs, crit, x, cfg)

    def reached(c):
        return not metrics.is_undefined(c.tau_b) and c.tau_b >= tau_max - 1e-12

    if metrics.is_undefined(tau_max) or reached(clean):
        return clean
    return _binary_search(variant, p, x, y, spec, cs, crit, cfg, _rank_problem(div, variant),
                          kernels.SELECT_TAU, reached)


def attack_rank1(x, y, spec, p, cfg=None):
    return attack_rank(x, y, spec, p, cfg, "rank1")


def attack_rank2(x, y, spec, p, cfg=None):
    return attack_rank(x, y, spec, p, cfg, "rank2")


def target_bits(cs):
    """1 where the constrained label should end up positive."""
    return (1.0 - np.asarray(cs.y_prime)) / 2.0


def fast_gradient(p, x, cs):
    """Input gradient of the summed sigmoid cross-entropy towards the target bits."""
    s = forward(p, x)
    sel = s[cs.indices]
    b = target_bits(cs)
    cot = np.zeros(p.output_dim)
    cot[cs.indices] = (sel - b) / np.maximum(sel * (1.0 - sel), 1e-300)
    return kernels.input_vjp(*p.packed, np.asarray(x, dtype=np.float64), cot)[1]


def fgs_step(x, grad, eps, box=(0.0, 1.0)):
    return np.clip(np.asarray(x) - eps * np.sign(grad), *box)


def fg_step(x, grad, eps, box=(0.0, 1.0)):
    norm = float(np.linalg.norm(grad))
    if norm == 0.0:
        return None
    return np.clip(np.asarray(x) - eps * np.asarray(grad) / norm, *box)


def _attack_fast(method, step, x, y, spec, p, cfg):
    cfg = cfg or AttackConfig()
    x, y = _check_premise(p, x, y, spec, cfg.threshold)
    cs = build_constraints(y, spec, cfg.threshold)
    crit = criterion_vector(divide(y, spec))
    grad = fast_gradient(p, x, cs)
    cap = _cap(cfg)
    candidates, flags = [], []
    for eps in cfg.epsilon_grid:
        x_star = step(x, grad, eps, cfg.box)
        if x_star is None:
            flags.append("zero_gradient")
            continue
        cand = _result(method, p, x, y, spec, cs, crit, x_star, cfg, "epsilon", eps)
        if cand.rmsd <= cap:
            candidates.append(cand)
    if not candidates:
        return _result(method, p, x, y, spec, cs, crit, x, cfg, "epsilon", 0.0,
                       flags=sorted(set(flags)))
    best = select_best(candidates, "constraints")
    best.flags = tuple(sorted(set(flags)))
    return best


def attack_fgs(x, y, spec, p, cfg=None):
    return _attack_fast("fgs", fgs_step, x, y, spec, p, cfg)


def attack_fg(x, y, spec, p, cfg=None):
    return _attack_fast("fg", fg_step, x, y, spec, p, cfg)


def mldp_step(P, q, ridge=1e-10):
    """Minimum-norm ``dr`` with ``P.T @ dr == q``; returns ``(dr, degenerate)``.

    A rank-deficient Gram matrix is solved with a small ridge and flagged.
    """
    P = np.atleast_2d(np.asarray(P, dtype=np.float64))
    q = np.asarray(q, dtype=np.float64)
    if P.shape[1] != q.shape[0]:
        raise UsageError("P must have one column per entry of q")
    G = P.T @ P
    degenerate = P.shape[1] > P.shape[0] or np.linalg.matrix_rank(P) < P.shape[1]
    if degenerate:
        G = G + ridge * np.eye(len(q))
    return P @ np.linalg.solve(G, q), bool(degenerate)


def attack_mldp(x, y, spec, p, cfg=None):
    cfg = cfg or AttackConfig()
    x, y = _check_premise(p, x, y, spec, cfg.threshold)
    cs = build_constraints(y, spec, cfg.threshold)
    crit = criterion_vector(divide(y, spec))
    idx = list(cs.indices)

    def count(xx):
        return constraint_satisfaction(cs, forward(p, xx)[idx])[1]

    best_x, best_count, best_norm, best_iter = x, count(x), 0.0, 0
    xi, ri = x, np.zeros_like(x)
    degenerate = False
    for i in range(cfg.mldp_max_iter):
        P = input_jacobian(p, xi, idx) * cs.y_prime[None, :]
        q = cs.c - cs.y_prime * forward(p, xi)[idx]
        dr, deg = mldp_step(P, q)
        degenerate |= deg
        if cfg.mldp_update == "printed":
            x_next = np.clip(xi + ri, *cfg.box)
        else:
            x_next = np.clip(xi + dr, *cfg.box)
        ri = ri + dr
        n_next = count(x_next)
        norm_next = float(np.linalg.norm(x_next - x))
        if n_next > best_count or (n_next == best_count and norm_next < best_norm):
            best_x, best_count, best_norm, best_iter = x_next, n_next, norm_next, i + 1
        xi = x_next
    flags = ("degenerate",) if degenerate else ()
    return _result("mldp", p, x, y, spec, cs, crit, best_x, cfg, "none", float("nan"),
                   best_iter, flags)


ATTACKS = {
    "fgs": attack_fgs,
    "fg": attack_fg,
    "mlcw": attack_mlcw,
    "mldp": attack_mldp,
    "rank1": attack_rank1,
    "rank2": attack_rank2,
}


def run_attack(method, x, y, spec, p, cfg=None):
    try:
        fn = ATTACKS[method]
    except KeyError:
        raise UsageError(f"unknown method {method!r}; choose from {', '.join(METHODS)}") from None
    return fn(x, y, spec, p, cfg)
