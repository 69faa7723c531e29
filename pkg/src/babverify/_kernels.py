"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly and the environment
variable ``BABVERIFY_NUMBA`` is not set to ``0``.  Both paths share one
calling convention so the rest of the package never branches on the backend.
"""

import logging
import os

import numpy as np

logger = logging.getLogger(__name__)

_flag = os.environ.get("BABVERIFY_NUMBA", "1").strip().lower()
_WANT_NUMBA = _flag not in ("0", "false", "no", "off")

try:
    if not _WANT_NUMBA:
        raise ImportError("numba disabled by BABVERIFY_NUMBA")
    import numba

    njit = numba.njit
    HAVE_NUMBA = True
except ImportError as exc:  # pragma: no cover - depends on environment
    logger.debug("numba unavailable (%s); using numpy kernels", exc)
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(func):
            return func

        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return wrap


# Simplex status codes shared with oracle.py
OPTIMAL = 0
UNBOUNDED = 1
ITERATION_LIMIT = 2


def _simplex_pivots_py(T, basis, max_iter, tol, bland_after):
    m = T.shape[0] - 1
    ncols = T.shape[1] - 1
    degenerate = 0
    for _ in range(max_iter):
        obj = T[m, :ncols]
        if degenerate >= bland_after:
            neg = np.nonzero(obj < -tol)[0]
            if neg.size == 0:
                return OPTIMAL
            j = neg[0]
        else:
            j = int(np.argmin(obj))
            if obj[j] >= -tol:
                return OPTIMAL
        col = T[:m, j]
        rows = np.nonzero(col > tol)[0]
        if rows.size == 0:
            return UNBOUNDED
        ratios = T[rows, ncols] / col[rows]
        best = ratios.min()
        ties = rows[ratios <= best + tol]
        r = ties[np.argmin(basis[ties])]
        _pivot_py(T, r, j)
        basis[r] = j
        degenerate = degenerate + 1 if best <= tol else 0
    return ITERATION_LIMIT


def _pivot_py(T, r, j):
    T[r, :] /= T[r, j]
    f = T[:, j].copy()
    f[r] = 0.0
    T -= np.outer(f, T[r, :])


@njit(cache=True)
def _simplex_pivots_nb(T, basis, max_iter, tol, bland_after):  # pragma: no cover - compiled
    m = T.shape[0] - 1
    ncols = T.shape[1] - 1
    degenerate = 0
    for _ in range(max_iter):
        j = -1
        if degenerate >= bland_after:
            for k in range(ncols):
                if T[m, k] < -tol:
                    j = k
                    break
        else:
            best_obj = -tol
            for k in range(ncols):
                if T[m, k] < best_obj:
                    best_obj = T[m, k]
                    j = k
        if j < 0:
            return OPTIMAL
        best = np.inf
        for i in range(m):
            if T[i, j] > tol:
                ratio = T[i, ncols] / T[i, j]
                if ratio < best:
                    best = ratio
        if best == np.inf:
            return UNBOUNDED
        r = -1
        for i in range(m):
            if T[i, j] > tol:
                ratio = T[i, ncols] / T[i, j]
                if ratio <= best + tol and (r < 0 or basis[i] < basis[r]):
                    r = i
        piv = T[r, j]
        for k in range(ncols + 1):
            T[r, k] /= piv
        for i in range(m + 1):
            if i != r:
                f = T[i, j]
                if f != 0.0:
                    for k in range(ncols + 1):
                        T[i, k] -= f * T[r, k]
        basis[r] = j
        if best <= tol:
            degenerate += 1
        else:
            degenerate = 0
    return ITERATION_LIMIT


def _triangle_argmin_py(c, d, lo, up):
    """Vectorized vertex scan; see :func:`triangle_argmin`."""
    amb = (lo < 0.0) & (up > 0.0)
    passing = ~amb & (up > 0.0)
    # candidate vertices (zhat, z) for the three shapes
    v_l = np.where(passing, (c + d) * lo, c * lo)
    v_u = np.where(passing | amb, (c + d) * up, c * up)
    zh = np.where(v_u < v_l, up, lo)
    val = np.minimum(v_l, v_u)
    zz = np.where(passing, zh, np.where(amb & (zh == up), up, 0.0))
    # ambiguous neurons also have the origin; ties go to it
    origin = amb & (val >= 0.0)
    zh = np.where(origin, 0.0, zh)
    zz = np.where(origin, 0.0, zz)
    val = np.where(origin, 0.0, val)
    return zh, zz, val


@njit(cache=True)
def _triangle_argmin_nb(c, d, lo, up):  # pragma: no cover - compiled
    n = c.shape[0]
    zh = np.empty(n)
    zz = np.empty(n)
    val = np.empty(n)
    for i in range(n):
        l = lo[i]
        u = up[i]
        if l < 0.0 and u > 0.0:
            a = c[i] * l
            b = (c[i] + d[i]) * u
            if a < 0.0 or b < 0.0:
                if b < a:
                    zh[i] = u
                    zz[i] = u
                    val[i] = b
                else:
                    zh[i] = l
                    zz[i] = 0.0
                    val[i] = a
            else:
                zh[i] = 0.0
                zz[i] = 0.0
                val[i] = 0.0
        elif u > 0.0:
            s = c[i] + d[i]
            if s * u < s * l:
                zh[i] = u
                zz[i] = u
                val[i] = s * u
            else:
                zh[i] = l
                zz[i] = l
                val[i] = s * l
        else:
            if c[i] * u < c[i] * l:
                zh[i] = u
                val[i] = c[i] * u
            else:
                zh[i] = l
                val[i] = c[i] * l
            zz[i] = 0.0
    return zh, zz, val


def triangle_argmin(c, d, lo, up):
    """Minimize ``c*zhat + d*z`` per neuron over its relaxed ReLU graph.

    Ambiguous neurons (``lo < 0 < up``) scan the triangle vertices
    ``(lo, 0), (up, up), (0, 0)``; passing neurons the segment endpoints
    ``(lo, lo), (up, up)``; blocked neurons ``(lo, 0), (up, 0)``.  Ties go to
    the origin, then to the lower endpoint.  Inputs are broadcast-compatible
    float arrays of any shape; returns ``(zhat, z, value)`` of that shape.
    """
    c, d, lo, up = (np.array(a) for a in np.broadcast_arrays(
        np.asarray(c, dtype=np.float64), np.asarray(d, dtype=np.float64),
        np.asarray(lo, dtype=np.float64), np.asarray(up, dtype=np.float64)))
    shape = c.shape
    if HAVE_NUMBA:
        out = _triangle_argmin_nb(np.ascontiguousarray(c).ravel(), np.ascontiguousarray(d).ravel(),
                                  np.ascontiguousarray(lo).ravel(), np.ascontiguousarray(up).ravel())
        return tuple(a.reshape(shape) for a in out)
    return _triangle_argmin_py(c, d, lo, up)


def simplex_pivots(T, basis, max_iter=50_000, tol=1e-11, bland_after=50):
    """Run primal simplex pivots on a canonical tableau in place.

    ``T`` holds constraint rows with the right-hand side in the last column
    and the reduced-cost row last; ``basis`` lists the basic column of each
    row.  Dantzig pricing is used until ``bland_after`` consecutive
    degenerate pivots, then Bland's rule takes over.
    """
    if HAVE_NUMBA:
        return int(_simplex_pivots_nb(T, basis, max_iter, tol, bland_after))
    return _simplex_pivots_py(T, basis, max_iter, tol, bland_after)


def backend_name():
    return "numba" if HAVE_NUMBA else "numpy"
