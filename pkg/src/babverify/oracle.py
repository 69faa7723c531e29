"""Exact desk-scale references: a dense simplex LP solver, the Planet LP
bound and an activation-pattern enumeration verifier."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _kernels
from .errors import SizeCapError
from .relax import ACTIVE, INACTIVE, check_splits, relu_params, AMBIGUOUS, PASSING

MAX_LP_VARIABLES = 500
MAX_EXHAUSTIVE_RELUS = 24
PIVOT_TOL = 1e-10
FEAS_TOL = 1e-9


@dataclass
class LpProblem:
    """``min c.x`` s.t. ``A_ub x <= b_ub``, ``A_eq x = b_eq``, ``lb <= x <= ub``."""

    c: np.ndarray
    A_ub: Optional[np.ndarray] = None
    b_ub: Optional[np.ndarray] = None
    A_eq: Optional[np.ndarray] = None
    b_eq: Optional[np.ndarray] = None
    lb: Optional[np.ndarray] = None
    ub: Optional[np.ndarray] = None

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=np.float64).reshape(-1)
        n = self.c.shape[0]
        self.A_ub = np.zeros((0, n)) if self.A_ub is None else np.asarray(self.A_ub, dtype=np.float64).reshape(-1, n)
        self.b_ub = np.zeros(0) if self.b_ub is None else np.asarray(self.b_ub, dtype=np.float64).reshape(-1)
        self.A_eq = np.zeros((0, n)) if self.A_eq is None else np.asarray(self.A_eq, dtype=np.float64).reshape(-1, n)
        self.b_eq = np.zeros(0) if self.b_eq is None else np.asarray(self.b_eq, dtype=np.float64).reshape(-1)
        self.lb = np.zeros(n) if self.lb is None else np.asarray(self.lb, dtype=np.float64).reshape(-1)
        self.ub = np.full(n, np.inf) if self.ub is None else np.asarray(self.ub, dtype=np.float64).reshape(-1)
        for name in ("A_ub", "b_ub", "A_eq", "b_eq", "c"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} has non-finite entries")
        if self.A_ub.shape[0] != self.b_ub.shape[0] or self.A_eq.shape[0] != self.b_eq.shape[0]:
            raise ValueError("constraint matrix and right-hand side disagree")

    @property
    def num_vars(self):
        return self.c.shape[0]


@dataclass
class LpResult:
    status: str  # "optimal" | "infeasible" | "unbounded"
    x: Optional[np.ndarray]
    value: float
    reduced_costs: Optional[np.ndarray] = field(default=None, repr=False)


def solve_lp(p: LpProblem, max_vars=MAX_LP_VARIABLES) -> LpResult:
    """Two-phase dense tableau simplex."""
    n = p.num_vars
    if n > max_vars:
        raise SizeCapError(f"LP has {n} variables, cap is {max_vars}")
    if np.any(p.lb > p.ub):
        return LpResult("infeasible", None, np.inf)

    # x = offset + M y with y >= 0
    cols, offset = [], np.zeros(n)
    extra_rows = []  # (column index in y, upper limit) for doubly bounded variables
    for i in range(n):
        lo, hi = p.lb[i], p.ub[i]
        if np.isfinite(lo):
            offset[i] = lo
            cols.append((i, 1.0))
            if np.isfinite(hi):
                extra_rows.append((len(cols) - 1, hi - lo))
        elif np.isfinite(hi):
            offset[i] = hi
            cols.append((i, -1.0))
        else:
            cols.append((i, 1.0))
            cols.append((i, -1.0))
    ny = len(cols)
    M = np.zeros((n, ny))
    for j, (i, s) in enumerate(cols):
        M[i, j] = s
    c_y = p.c @ M
    A_ub = p.A_ub @ M
    b_ub = p.b_ub - p.A_ub @ offset
    if extra_rows:
        B = np.zeros((len(extra_rows), ny))
        for r, (j, lim) in enumerate(extra_rows):
            B[r, j] = 1.0
        A_ub = np.vstack([A_ub, B])
        b_ub = np.concatenate([b_ub, [lim for _, lim in extra_rows]])
    A_eq = p.A_eq @ M
    b_eq = p.b_eq - p.A_eq @ offset

    m_ub, m_eq = A_ub.shape[0], A_eq.shape[0]
    m = m_ub + m_eq
    # slack per inequality row; rows with negative rhs are negated and get an artificial
    flip = b_ub < 0
    needs_art = np.concatenate([flip, np.ones(m_eq, dtype=bool)])
    n_art = int(needs_art.sum())
    ncols = ny + m_ub + n_art
    T = np.zeros((m + 1, ncols + 1))
    sign = np.where(flip, -1.0, 1.0)
    T[:m_ub, :ny] = A_ub * sign[:, None]
    T[:m_ub, ny:ny + m_ub] = np.diag(sign)
    T[:m_ub, -1] = b_ub * sign
    eq_sign = np.where(b_eq < 0, -1.0, 1.0)
    T[m_ub:m, :ny] = A_eq * eq_sign[:, None]
    T[m_ub:m, -1] = b_eq * eq_sign
    basis = np.empty(m, dtype=np.int64)
    a = ny + m_ub
    for r in range(m):
        if needs_art[r]:
            T[r, a] = 1.0
            basis[r] = a
            a += 1
        else:
            basis[r] = ny + r
    # phase I: minimize the sum of artificials
    art_rows = np.nonzero(needs_art)[0]
    T[m, ny + m_ub:ncols] = 1.0
    T[m, :] -= T[art_rows, :].sum(axis=0)
    if n_art:
        status = _kernels.simplex_pivots(T, basis, tol=PIVOT_TOL)
        if status != _kernels.OPTIMAL or -T[m, -1] > FEAS_TOL * max(1.0, np.abs(T[:m, -1]).max()):
            return LpResult("infeasible", None, np.inf)
        # drive zero-level artificials out of the basis
        keep = np.ones(m, dtype=bool)
        for r in range(m):
            if basis[r] >= ny + m_ub:
                cand = np.nonzero(np.abs(T[r, :ny + m_ub]) > 1e-9)[0]
                if cand.size == 0:
                    keep[r] = False
                else:
                    j = cand[0]
                    _kernels._pivot_py(T, r, j)
                    basis[r] = j
        rows = np.concatenate([np.nonzero(keep)[0], [m]])
        T = np.ascontiguousarray(np.delete(T[rows], np.s_[ny + m_ub:ncols], axis=1))
        basis = np.ascontiguousarray(basis[keep])
        m = basis.shape[0]
        ncols = ny + m_ub
    cost = np.concatenate([c_y, np.zeros(m_ub)])
    T[m, :ncols] = cost
    T[m, -1] = 0.0
    T[m, :] -= cost[basis] @ T[:m, :]
    status = _kernels.simplex_pivots(T, basis, tol=PIVOT_TOL)
    if status == _kernels.UNBOUNDED:
        return LpResult("unbounded", None, -np.inf)
    if status != _kernels.OPTIMAL:
        raise RuntimeError("simplex iteration limit reached")
    y = np.zeros(ncols)
    y[basis] = T[:m, -1]
    x = offset + M @ y[:ny]
    return LpResult("optimal", x, float(p.c @ x), T[m, :ncols].copy())


# ---------------------------------------------------------------- Planet LP

def planet_lp(net, stack, splits=None):
    """Assemble the Planet relaxation LP over ``(z0, z_0 .. z_{L-2})``.

    Pre-activations are substituted out: ``zhat_k = W_k z_{k-1} + b_k``.
    Returns ``(problem, slices)`` or ``None`` when the bounds are empty.
    """
    splits = check_splits(net, splits)
    if stack.infeasible:
        return None
    sizes = [net.input_dim] + net.hidden_sizes
    starts = np.cumsum([0] + sizes)
    nv = int(starts[-1])
    lb = np.empty(nv)
    ub = np.empty(nv)
    lb[:sizes[0]] = stack.input_lower
    ub[:sizes[0]] = stack.input_upper
    rows_ub, rhs_ub, rows_eq, rhs_eq = [], [], [], []
    for k in range(net.depth - 1):
        W, b = net.layers[k].linear()
        lo, up = stack.lower[k].copy(), stack.upper[k].copy()
        lo = np.where(splits[k] == ACTIVE, np.maximum(lo, 0.0), lo)
        up = np.where(splits[k] == INACTIVE, np.minimum(up, 0.0), up)
        if np.any(lo > up):
            return None
        state, alpha, _ = relu_params(lo, up)
        prev = slice(starts[k], starts[k + 1])
        cur = starts[k + 1]
        for j in range(sizes[k + 1]):
            v = cur + j
            row = np.zeros(nv)
            row[prev] = W[j]
            if state[j] == AMBIGUOUS:
                lb[v], ub[v] = 0.0, up[j]
                r1 = row.copy()
                r1[v] = -1.0
                rows_ub.append(r1)  # zhat - z <= 0
                rhs_ub.append(-b[j])
                r2 = -alpha[j] * row
                r2[v] = 1.0
                rows_ub.append(r2)  # z - alpha*zhat <= -alpha*l
                rhs_ub.append(alpha[j] * (b[j] - lo[j]))
            elif state[j] == PASSING:
                lb[v], ub[v] = lo[j], up[j]
                r = -row
                r[v] = 1.0
                rows_eq.append(r)
                rhs_eq.append(b[j])
            else:
                lb[v], ub[v] = 0.0, 0.0
                rows_ub.append(row.copy())
                rhs_ub.append(up[j] - b[j])
                rows_ub.append(-row)
                rhs_ub.append(b[j] - lo[j])
    Wl, bl = net.layers[-1].linear()
    c = np.zeros(nv)
    c[starts[-2]:starts[-1]] = Wl[0]
    prob = LpProblem(c, np.array(rows_ub).reshape(-1, nv), np.array(rhs_ub),
                     np.array(rows_eq).reshape(-1, nv), np.array(rhs_eq), lb, ub)
    return prob, float(bl[0]), [slice(starts[i], starts[i + 1]) for i in range(len(sizes))]


def planet_lp_solve(net, stack, splits=None):
    """Planet LP optimum and the input part of its minimizer (``None`` if empty)."""
    built = planet_lp(net, stack, splits)
    if built is None:
        return np.inf, None
    prob, const, slices = built
    res = solve_lp(prob)
    if res.status == "infeasible":
        return np.inf, None
    if res.status != "optimal":
        raise RuntimeError(f"Planet LP is {res.status}")
    return res.value + const, res.x[slices[0]]


def planet_lp_bound(net, stack, splits=None):
    return planet_lp_solve(net, stack, splits)[0]


# ---------------------------------------------------------------- exhaustive

@dataclass
class ExhaustiveResult:
    status: str  # "SAT" | "UNSAT"
    minimum: float
    witness: Optional[np.ndarray]
    lp_calls: int = 0


def _box_interval(A, c, lo, up):
    mid = (lo + up) / 2.0
    rad = (up - lo) / 2.0
    center = A @ mid + c
    radius = np.abs(A) @ rad
    return center - radius, center + radius


def exhaustive_verify(net, domain, max_relus=MAX_EXHAUSTIVE_RELUS, splits=None):
    """Global minimum of the network by enumerating activation patterns.

    Neurons fixed by interval bounds on the current pattern's affine map are
    not enumerated, and partial patterns with an empty region are pruned.
    ``splits`` (per-layer arrays of +1 active, -1 inactive, 0 free)
    restricts the search to the matching subdomain; if that subdomain is
    empty the minimum is ``inf``.
    """
    if net.num_relus > max_relus:
        raise SizeCapError(f"network has {net.num_relus} ReLUs, cap is {max_relus}")
    lo, up = np.asarray(domain.lower, dtype=np.float64), np.asarray(domain.upper, dtype=np.float64)
    n0 = net.input_dim
    best = {"value": np.inf, "x": None, "lps": 0}

    def region_lp(c, G, h):
        prob = LpProblem(c, G if G else None, h if h else None, lb=lo, ub=up)
        best["lps"] += 1
        return solve_lp(prob)

    def recurse(k, A, c, G, h):
        W, b = net.layers[k].linear()
        A2, c2 = W @ A, W @ c + b
        if k == net.depth - 1:
            res = region_lp(A2[0], G, h)
            if res.status == "optimal":
                val = float(res.x @ A2[0] + c2[0])
                if val < best["value"]:
                    best["value"], best["x"] = val, res.x
            return
        forced = np.zeros(A2.shape[0], dtype=np.int8) if splits is None else np.asarray(splits[k])
        i_lo, i_up = _box_interval(A2, c2, lo, up)
        free = forced == 0
        amb = np.nonzero((i_lo < 0.0) & (i_up > 0.0) & free)[0]
        active = np.where(free, i_lo >= 0.0, forced > 0)
        fixed = [(j, forced[j] > 0) for j in np.nonzero(~free)[0]]
        for pattern in itertools.product((True, False), repeat=len(amb)):
            act = active.copy()
            act[amb] = pattern
            G2, h2 = list(G), list(h)
            for j, on in fixed + list(zip(amb, pattern)):
                if on:  # zhat >= 0
                    G2.append(-A2[j])
                    h2.append(c2[j])
                else:
                    G2.append(A2[j])
                    h2.append(-c2[j])
            if (len(amb) or fixed) and k < net.depth - 2:
                if region_lp(np.zeros(n0), G2, h2).status != "optimal":
                    continue
            mask = act.astype(np.float64)
            recurse(k + 1, A2 * mask[:, None], c2 * mask, G2, h2)

    recurse(0, np.eye(n0), np.zeros(n0), [], [])
    status = "SAT" if best["value"] < 0.0 else "UNSAT"
    return ExhaustiveResult(status, best["value"], best["x"], best["lps"])
