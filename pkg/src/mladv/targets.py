"""Label-set algebra for targeted attacks.

``A`` holds the labels to flip, ``B`` the labels to hold and ``C`` the rest.
Crossing (A, B, C) with the sign of the ground truth gives six cells; the
ranking attacks want ``low = A1 | B-1`` scored below ``high = A-1 | B1`` with
the ``mid`` set (a choice of C, C1, C-1 or nothing) in between.
"""

from dataclasses import dataclass

import numpy as np

from . import metrics
from .errors import UsageError

OMEGA_MODES = ("C", "C1", "Cneg1", "empty")


def _index_tuple(values, name):
    out = tuple(sorted(int(v) for v in values))
    if any(v < 0 for v in out):
        raise UsageError(f"{name} contains a negative index")
    if len(set(out)) != len(out):
        raise UsageError(f"{name} contains duplicates")
    return out


@dataclass(frozen=True)
class AttackSpec:
    flip: tuple
    hold: tuple = ()
    omega: str = "C"

    def __post_init__(self):
        flip = _index_tuple(self.flip, "flip set")
        hold = _index_tuple(self.hold, "hold set")
        if not flip:
            raise UsageError("flip set must be non-empty")
        if set(flip) & set(hold):
            raise UsageError("flip and hold sets overlap")
        if self.omega not in OMEGA_MODES:
            raise UsageError(f"omega must be one of {OMEGA_MODES}")
        object.__setattr__(self, "flip", flip)
        object.__setattr__(self, "hold", hold)

    def check_labels(self, l):
        top = max(self.flip + self.hold)
        if top >= l:
            raise UsageError(f"label index {top} out of range for {l} labels")

    def to_text(self):
        return (f"--flip {','.join(map(str, self.flip))} "
                f"--hold {','.join(map(str, self.hold))} --omega {self.omega}")


def parse_index_list(text):
    text = (text or "").strip()
    if not text:
        return ()
    try:
        return tuple(int(t) for t in text.split(","))
    except ValueError:
        raise UsageError(f"bad label index list {text!r}") from None


def parse_spec(flip, hold="", omega="C"):
    return AttackSpec(parse_index_list(flip), parse_index_list(hold), omega)


@dataclass(frozen=True)
class DivisionTable:
    A1: tuple
    Aneg1: tuple
    B1: tuple
    Bneg1: tuple
    C1: tuple
    Cneg1: tuple
    omega_mode: str = "C"

    @property
    def C(self):
        return tuple(sorted(self.C1 + self.Cneg1))

    @property
    def omega_minus(self):
        return tuple(sorted(self.A1 + self.Bneg1))

    @property
    def omega_plus(self):
        return tuple(sorted(self.Aneg1 + self.B1))

    @property
    def omega_mid(self):
        return {"C": self.C, "C1": self.C1, "Cneg1": self.Cneg1, "empty": ()}[self.omega_mode]


def _check_labels(y):
    y = np.asarray(y)
    if y.ndim != 1 or not np.all(np.abs(y) == 1):
        raise UsageError("label vector must contain only -1 and +1")
    return y


def divide(y, spec):
    y = _check_labels(y)
    spec.check_labels(len(y))
    A, B = set(spec.flip), set(spec.hold)
    cells = {key: [] for key in ("A1", "Aneg1", "B1", "Bneg1", "C1", "Cneg1")}
    for i, yi in enumerate(y):
        col = "A" if i in A else "B" if i in B else "C"
        cells[col + ("1" if yi == 1 else "neg1")].append(i)
    return DivisionTable(**{k: tuple(v) for k, v in cells.items()}, omega_mode=spec.omega)


@dataclass(frozen=True)
class ConstraintSystem:
    """``y_prime * F'(x) <= c`` over the labels in ``indices`` (A first, then B)."""

    indices: np.ndarray
    y_prime: np.ndarray
    c: np.ndarray
    threshold: float

    def __len__(self):
        return len(self.indices)


def build_constraints(y, spec, threshold=0.5, linear=False):
    """Constraint system for flipping ``spec.flip`` and holding ``spec.hold``.

    With ``linear=True`` the classifier is ``sign(F)`` and ``c = 0``.
    """
    y = _check_labels(y)
    spec.check_labels(len(y))
    indices = np.array(spec.flip + spec.hold, dtype=np.int64)
    y_prime = np.concatenate([y[list(spec.flip)], -y[list(spec.hold)]]).astype(np.float64)
    c = np.zeros(len(indices)) if linear else threshold * y_prime
    for arr in (indices, y_prime, c):
        arr.setflags(write=False)
    return ConstraintSystem(indices, y_prime, c, 0.0 if linear else float(threshold))


def constraint_satisfaction(cs, scores):
    """``scores`` are the selected outputs ``F'(x*)``, ordered like ``cs.indices``."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (len(cs),):
        raise UsageError("scores must match the constraint system length")
    satisfied = cs.y_prime * scores <= cs.c
    return satisfied, int(np.count_nonzero(satisfied))


def satisfied_count(cs, full_scores):
    return constraint_satisfaction(cs, np.asarray(full_scores)[cs.indices])[1]


def target_labels(y, spec):
    """Desired labels after the attack: flipped on A, unchanged elsewhere."""
    t = np.array(y, dtype=np.int64)
    t[list(spec.flip)] *= -1
    return t


_CRITERION = {"A1": -2, "Bneg1": -1, "C1": 0, "Cneg1": 0, "B1": 1, "Aneg1": 2}


def criterion_vector(div):
    l = sum(len(getattr(div, k)) for k in _CRITERION)
    out = np.zeros(l, dtype=np.int64)
    for key, val in _CRITERION.items():
        out[list(getattr(div, key))] = val
    return out


def attainable_tau_b(criterion):
    """Best tau_b a tie-free score vector can reach against ``criterion``."""
    crit = np.asarray(criterion, dtype=np.float64)
    # strictly increasing within each criterion level, groups kept in order
    order = np.lexsort((np.arange(len(crit)), crit))
    ideal = np.empty(len(crit))
    ideal[order] = np.arange(len(crit), dtype=np.float64)
    return metrics.kendall_tau_b(ideal, crit)
