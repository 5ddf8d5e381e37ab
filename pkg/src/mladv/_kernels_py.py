"""Pure numpy implementation of the hot kernels.

Every function here has a twin with the same signature in the compiled
``_kernels`` extension. The network is passed in packed form:

``dims``
    int64 array ``[d, h1, ..., l]``.
``acts``
    int32 array of activation codes, one per layer.
``params``
    float64 array; per layer the row-major weight ``(out, in)`` followed by
    the bias ``(out,)``.

Attack objectives are ``distortion + lam * (constraint hinges + rank hinges)``.
Constraint hinges are ``max(0, sign[k] * s[idx[k]] - c[k])``. Rank hinges
are stored CSR-style: term ``t`` compares the index sets
``term_idx[term_ptr[2t]:term_ptr[2t+1]]`` (should score low) and
``term_idx[term_ptr[2t+1]:term_ptr[2t+2]]`` (should score high) through
``max(0, max exp(s_low) - min exp(s_high))``.
"""

import math

import numpy as np

ACT_IDENTITY = 0
ACT_SIGMOID = 1
ACT_RELU = 2
ACT_TANH = 3

DIST_SQUARED = 0
DIST_L2 = 1

SELECT_COUNT = 0
SELECT_TAU = 1

OPT_GD = 0
OPT_ADAM = 1
OPT_NORMALIZED = 2

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# stand-in for an undefined tau_b during selection; below every valid value
TAU_UNDEFINED = -2.0


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _activate(z, code):
    if code == ACT_SIGMOID:
        return _sigmoid(z)
    if code == ACT_RELU:
        return np.maximum(z, 0.0)
    if code == ACT_TANH:
        return np.tanh(z)
    return z


def _dactivate(a, code):
    """Derivative of an activation expressed through its output."""
    if code == ACT_SIGMOID:
        return a * (1.0 - a)
    if code == ACT_RELU:
        return (a > 0.0).astype(np.float64)
    if code == ACT_TANH:
        return 1.0 - a * a
    return np.ones_like(a)


def _layers(dims, acts, params):
    off = 0
    for k in range(len(acts)):
        n_in, n_out = int(dims[k]), int(dims[k + 1])
        W = params[off:off + n_in * n_out].reshape(n_out, n_in)
        off += n_in * n_out
        b = params[off:off + n_out]
        off += n_out
        yield W, b, int(acts[k])


def _forward_all(dims, acts, params, x):
    outs = [np.asarray(x, dtype=np.float64)]
    for W, b, code in _layers(dims, acts, params):
        outs.append(_activate(W @ outs[-1] + b, code))
    return outs


def _backward(dims, acts, params, outs, cot):
    layers = list(_layers(dims, acts, params))
    delta = cot * _dactivate(outs[-1], layers[-1][2])
    for k in range(len(layers) - 1, -1, -1):
        g = layers[k][0].T @ delta
        if k > 0:
            delta = g * _dactivate(outs[k], layers[k - 1][2])
    return g


def forward(dims, acts, params, x):
    return _forward_all(dims, acts, params, x)[-1]


def input_vjp(dims, acts, params, x, cot):
    """Return ``(F(x), J(x)^T cot)``."""
    outs = _forward_all(dims, acts, params, x)
    return outs[-1], _backward(dims, acts, params, outs, np.asarray(cot, dtype=np.float64))


def _objective_terms(s, r, dist_kind, lam, hinge_idx, hinge_sign, hinge_c,
                     term_ptr, term_idx):
    sq = float(r @ r)
    if dist_kind == DIST_SQUARED:
        value = sq
        g_r = 2.0 * r
    else:
        value = math.sqrt(sq)
        g_r = r / value if value > 0.0 else np.zeros_like(r)
    g_s = np.zeros_like(s)
    for k in range(len(hinge_idx)):
        j = hinge_idx[k]
        v = hinge_sign[k] * s[j] - hinge_c[k]
        if v > 0.0:
            value += lam * v
            g_s[j] += lam * hinge_sign[k]
    es = np.exp(s)
    for t in range(len(term_ptr) // 2):
        lo = term_idx[term_ptr[2 * t]:term_ptr[2 * t + 1]]
        hi = term_idx[term_ptr[2 * t + 1]:term_ptr[2 * t + 2]]
        if len(lo) == 0 or len(hi) == 0:
            continue
        amax = lo[int(np.argmax(es[lo]))]
        amin = hi[int(np.argmin(es[hi]))]
        v = es[amax] - es[amin]
        if v > 0.0:
            value += lam * v
            g_s[amax] += lam * es[amax]
            g_s[amin] -= lam * es[amin]
    return value, g_r, g_s


def objective(dims, acts, params, x_orig, x, dist_kind, lam, hinge_idx,
              hinge_sign, hinge_c, term_ptr, term_idx):
    """Attack objective at ``x``; returns ``(value, d value / d x, F(x))``."""
    outs = _forward_all(dims, acts, params, x)
    s = outs[-1]
    r = np.asarray(x, dtype=np.float64) - x_orig
    value, g_r, g_s = _objective_terms(s, r, dist_kind, lam, hinge_idx, hinge_sign,
                                       hinge_c, term_ptr, term_idx)
    return value, g_r + _backward(dims, acts, params, outs, g_s), s


def tau_b(u, v):
    """Kendall tau-b; ``nan`` when either vector is entirely tied."""
    n = len(u)
    C = D = n1 = n2 = 0
    for i in range(n):
        for j in range(i + 1, n):
            du = u[i] - u[j]
            dv = v[i] - v[j]
            if du == 0.0:
                n1 += 1
            if dv == 0.0:
                n2 += 1
            if du != 0.0 and dv != 0.0:
                if (du > 0.0) == (dv > 0.0):
                    C += 1
                else:
                    D += 1
    n0 = n * (n - 1) // 2
    den = (n0 - n1) * (n0 - n2)
    if den == 0:
        return float("nan")
    return (C - D) / math.sqrt(den)


def _primary(s, sel_mode, hinge_idx, hinge_sign, hinge_c, crit):
    if sel_mode == SELECT_COUNT:
        return float(np.count_nonzero(hinge_sign * s[hinge_idx] <= hinge_c))
    t = tau_b(s, crit)
    return TAU_UNDEFINED if math.isnan(t) else t


def descend(dims, acts, params, x_orig, w0, mid, half, dist_kind, lam,
            hinge_idx, hinge_sign, hinge_c, term_ptr, term_idx, sel_mode, crit,
            lr, max_iter, optimizer, rmsd_cap):
    """Descend the objective over the tanh-space variable ``w``.

    Iterate 0 is the clean input itself. Every iterate is scored by
    ``(primary, -rmsd)`` and the lexicographic best (first one on exact
    ties) is returned as ``(x, scores, primary, rmsd, iteration)``.
    """
    d = len(x_orig)
    w = np.array(w0, dtype=np.float64)
    m = np.zeros(d)
    v = np.zeros(d)
    best = None
    best_key = (-math.inf, 0.0)
    for k in range(max_iter + 1):
        th = np.tanh(w)
        x = x_orig.copy() if k == 0 else mid + half * th
        outs = _forward_all(dims, acts, params, x)
        s = outs[-1]
        r = x - x_orig
        rmsd = math.sqrt(float(r @ r) / d)
        if rmsd <= rmsd_cap:
            prim = _primary(s, sel_mode, hinge_idx, hinge_sign, hinge_c, crit)
            if prim > best_key[0] or (prim == best_key[0] and rmsd < best_key[1]):
                best_key = (prim, rmsd)
                best = (x, s.copy(), prim, rmsd, k)
        if k == max_iter:
            break
        _, g_r, g_s = _objective_terms(s, r, dist_kind, lam, hinge_idx, hinge_sign,
                                       hinge_c, term_ptr, term_idx)
        g = (g_r + _backward(dims, acts, params, outs, g_s)) * half * (1.0 - th * th)
        if optimizer == OPT_ADAM:
            t = k + 1
            m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g
            v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * g * g
            mhat = m / (1.0 - ADAM_BETA1 ** t)
            vhat = v / (1.0 - ADAM_BETA2 ** t)
            w = w - lr * mhat / (np.sqrt(vhat) + ADAM_EPS)
        elif optimizer == OPT_NORMALIZED:
            norm = math.sqrt(float(g @ g))
            if norm > 0.0:
                w = w - lr * math.sqrt(d) * g / norm
        else:
            w = w - lr * g
    return best
