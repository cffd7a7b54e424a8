"""Discrete optimal transport between finite histograms.

Two solvers live here: ``exact_ot``, a transportation simplex that returns a
vertex of the coupling polytope, and ``sinkhorn``, the entropic-regularized
scaling solver. Everything is a pure function of its inputs.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

MEASURE_TOL = 1e-9
EXACT_OT_CAP = 4096
LOG_DOMAIN_THRESHOLD = 50.0


class NumericalError(FloatingPointError):
    """Raised when scaling vectors stop being finite."""


class ExactOTSizeError(ValueError):
    """Raised when an instance exceeds the exact solver's size cap."""


@dataclass(frozen=True)
class SinkhornConfig:
    """Settings for the entropic solver.

    ``lam`` is the inverse regularization strength (1/epsilon). Log-domain
    updates are always used when ``lam`` exceeds 50, whatever ``log_domain``
    says.
    """

    lam: float = 25.0
    max_iter: int = 10_000
    tol: float = 1e-9
    log_domain: bool = False
    newton_after: int | None = 50

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError(f"lam must be positive, got {self.lam}")
        if not self.tol > 0:
            raise ValueError(f"tol must be positive, got {self.tol}")
        if self.max_iter < 1:
            raise ValueError(f"max_iter must be >= 1, got {self.max_iter}")

    @property
    def use_log_domain(self) -> bool:
        return self.log_domain or self.lam > LOG_DOMAIN_THRESHOLD


@dataclass
class SinkhornResult:
    plan: np.ndarray
    converged: bool
    n_iter: int
    marginal_error: float


def check_measure(a, name: str = "a") -> np.ndarray:
    """Return ``a`` as a float vector, raising if it is not a histogram."""
    a = np.asarray(a, dtype=float)
    if a.ndim != 1 or a.size == 0:
        raise ValueError(f"{name} must be a non-empty vector")
    if not np.all(np.isfinite(a)) or np.any(a < 0):
        raise ValueError(f"{name} must have finite nonnegative weights")
    if abs(a.sum() - 1.0) > MEASURE_TOL:
        raise ValueError(f"{name} must sum to 1 (sum={a.sum():.12g})")
    return a


def check_cost(C, shape=None) -> np.ndarray:
    C = np.asarray(C, dtype=float)
    if C.ndim != 2:
        raise ValueError("cost matrix must be 2-D")
    if shape is not None and C.shape != tuple(shape):
        raise ValueError(f"cost matrix shape {C.shape} does not match marginals {tuple(shape)}")
    if not np.all(np.isfinite(C)):
        raise ValueError("cost matrix has non-finite entries")
    return C


def validate_coupling(Q, a, b, tol: float = 1e-6) -> bool:
    """True iff ``Q`` is nonnegative with row sums ``a`` and column sums ``b``."""
    Q = np.asarray(Q, dtype=float)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if Q.ndim != 2 or Q.shape != (a.size, b.size):
        raise ValueError(f"coupling shape {Q.shape} does not match marginals ({a.size}, {b.size})")
    if np.any(Q < 0) or not np.all(np.isfinite(Q)):
        return False
    return bool(
        np.max(np.abs(Q.sum(axis=1) - a)) <= tol and np.max(np.abs(Q.sum(axis=0) - b)) <= tol
    )


def transport_cost(Q, C) -> float:
    """Frobenius dot product of a coupling and a cost matrix."""
    Q = np.asarray(Q, dtype=float)
    C = np.asarray(C, dtype=float)
    if Q.shape != C.shape:
        raise ValueError(f"shape mismatch: {Q.shape} vs {C.shape}")
    return float(np.sum(Q * C))


def entropy(Q) -> float:
    """Discrete entropy ``-sum Q log Q`` with ``0 log 0 = 0``."""
    Q = np.asarray(Q, dtype=float)
    if np.any(Q < 0):
        raise ValueError("entropy is undefined for negative entries")
    nz = Q[Q > 0]
    return float(-np.sum(nz * np.log(nz)))


def _marginal_error(P, a, b) -> float:
    return float(max(np.max(np.abs(P.sum(axis=1) - a)), np.max(np.abs(P.sum(axis=0) - b))))


def _dual_objective(logP, f, g, a, b):
    with np.errstate(over="ignore"):
        return float(f @ a + g @ b - np.exp(logP).sum())


def _floored_solve(S, rhs, floor):
    # the dual is concave, so S is PSD; flooring near-null eigenvalues lets
    # the capped step move along almost decoupled blocks
    w, V = np.linalg.eigh(S)
    return V @ ((V.T @ rhs) / np.maximum(w, floor))


def _newton_step(B, r, c, grad_f, grad_g):
    """Solve ``[[diag(r), B], [B^T, diag(c)]] x = grad`` through the smaller Schur complement."""
    r = np.maximum(r, 1e-300)
    c = np.maximum(c, 1e-300)
    floor = 1e-14 * max(r.max(), c.max())
    if r.size <= c.size:
        S = np.diag(r) - (B / c) @ B.T
        df = _floored_solve(S, grad_f - B @ (grad_g / c), floor)
        dg = (grad_g - B.T @ df) / c
    else:
        S = np.diag(c) - (B.T / r) @ B
        dg = _floored_solve(S, grad_g - B.T @ (grad_f / r), floor)
        df = (grad_f - B @ dg) / r
    return np.concatenate([df, dg])


def _newton_dual(logK, a, b, f, g, max_iter, tol, max_step=5.0):
    """Damped Newton ascent on the entropic dual, fixing the last column potential.

    Used once plain scaling stalls: on degenerate marginals the scaling
    iteration contracts at a rate exponentially close to 1, while Newton
    steps reach the same optimum in a few dozen iterations.
    """
    n = a.size
    f, g = f + g[-1], g - g[-1]
    logP = f[:, None] + logK + g[None, :]
    P = np.exp(logP)
    obj = _dual_objective(logP, f, g, a, b)
    err = _marginal_error(P, a, b)
    for it in range(1, max_iter + 1):
        if err <= tol:
            return P, True, it - 1, err
        r = P.sum(axis=1)
        c = P.sum(axis=0)
        grad_f, grad_g = a - r, (b - c)[:-1]
        grad = np.concatenate([grad_f, grad_g])
        step = _newton_step(P[:, :-1], r, c[:-1], grad_f, grad_g)
        step *= min(1.0, max_step / max(np.abs(step).max(), 1e-300))
        df, dg = step[:n], np.append(step[n:], 0.0)
        slope = float(grad @ step)
        res = float(np.linalg.norm(grad))
        t = 1.0
        while t > 1e-12:
            f_new, g_new = f + t * df, g + t * dg
            logP_new = f_new[:, None] + logK + g_new[None, :]
            obj_new = _dual_objective(logP_new, f_new, g_new, a, b)
            if np.isfinite(obj_new):
                if obj_new >= obj + 1e-4 * t * slope:
                    break
                # near the optimum the objective change drowns in rounding; fall back to the residual
                P_new = np.exp(logP_new)
                res_new = np.hypot(
                    np.linalg.norm(a - P_new.sum(axis=1)), np.linalg.norm((b - P_new.sum(axis=0))[:-1])
                )
                if res_new <= (1 - 1e-4 * t) * res:
                    break
            t *= 0.5
        else:
            # no ascent possible at working precision
            return P, err <= tol, it, err
        f, g, logP, obj = f_new, g_new, logP_new, obj_new
        P = np.exp(logP)
        err = _marginal_error(P, a, b)
    return P, err <= tol, max_iter, err


def _sinkhorn_plain(C, a, b, lam, max_iter, tol, newton_after):
    # row/column shifts of C leave the solution unchanged but keep exp() away from underflow
    Cs = C - C.min(axis=1, keepdims=True)
    Cs = Cs - Cs.min(axis=0, keepdims=True)
    K = np.exp(-lam * Cs)
    v = np.ones(b.size)
    Kv = K @ v
    for it in range(1, max_iter + 1):
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            u = a / Kv
            v = b / (K.T @ u)
            Kv = K @ v
        if not np.isfinite(u.sum() + v.sum()):
            raise NumericalError(
                f"non-finite scaling vector at iteration {it} (lam={lam}); retry with log_domain=True"
            )
        # columns match b right after the v update, so only rows can be off
        if np.max(np.abs(u * Kv - a)) <= tol:
            P = u[:, None] * K * v[None, :]
            err = _marginal_error(P, a, b)
            if err <= tol:
                return P, True, it, err
        if it == newton_after:
            P, ok, extra, err = _newton_dual(
                -lam * Cs, a, b, np.log(u), np.log(v), max_iter - it, tol
            )
            return P, ok, it + extra, err
    P = u[:, None] * K * v[None, :]
    return P, False, max_iter, _marginal_error(P, a, b)


def _logsumexp(x, axis):
    top = x.max(axis=axis, keepdims=True)
    # all -inf slices stay -inf instead of producing nan
    top = np.where(np.isfinite(top), top, 0.0)
    return np.log(np.exp(x - top).sum(axis=axis)) + np.squeeze(top, axis=axis)


def _sinkhorn_log(C, a, b, lam, max_iter, tol, newton_after):
    logK = -lam * C
    log_a = np.log(a)
    log_b = np.log(b)
    f = np.zeros(a.size)
    g = np.zeros(b.size)
    row_lse = _logsumexp(logK + g[None, :], axis=1)
    for it in range(1, max_iter + 1):
        f = log_a - row_lse
        g = log_b - _logsumexp(logK + f[:, None], axis=0)
        row_lse = _logsumexp(logK + g[None, :], axis=1)
        if not np.isfinite(f.sum() + g.sum()):
            raise NumericalError(f"non-finite log-scaling vector at iteration {it} (lam={lam})")
        if np.max(np.abs(np.exp(f + row_lse) - a)) <= tol:
            P = np.exp(f[:, None] + logK + g[None, :])
            err = _marginal_error(P, a, b)
            if err <= tol:
                return P, True, it, err
        if it == newton_after:
            P, ok, extra, err = _newton_dual(logK, a, b, f, g, max_iter - it, tol)
            return P, ok, it + extra, err
    P = np.exp(f[:, None] + logK + g[None, :])
    return P, False, max_iter, _marginal_error(P, a, b)


def sinkhorn(C, a, b, cfg: SinkhornConfig | None = None) -> SinkhornResult:
    """Entropic OT: minimize ``<Q, C> - H(Q) / lam`` over couplings of ``a`` and ``b``.

    Zero-mass rows or columns are dropped before scaling and come back as
    zero rows/columns. Convergence means the L-infinity violation of both
    marginals is at most ``cfg.tol``; otherwise the result carries
    ``converged=False``.
    """
    cfg = cfg or SinkhornConfig()
    a = check_measure(a, "a")
    b = check_measure(b, "b")
    C = check_cost(C, (a.size, b.size))

    rows = np.flatnonzero(a > 0)
    cols = np.flatnonzero(b > 0)
    Cr = C[np.ix_(rows, cols)]
    solve = _sinkhorn_log if cfg.use_log_domain else _sinkhorn_plain
    P, converged, n_iter, err = solve(
        Cr, a[rows], b[cols], cfg.lam, cfg.max_iter, cfg.tol, cfg.newton_after or 0
    )

    plan = np.zeros_like(C)
    plan[np.ix_(rows, cols)] = P
    return SinkhornResult(plan=plan, converged=converged, n_iter=n_iter, marginal_error=err)


def _northwest_corner(supply, demand):
    n, m = supply.size, demand.size
    x = np.zeros((n, m))
    s = supply.copy()
    d = demand.copy()
    basis = []
    i = j = 0
    while True:
        q = min(s[i], d[j])
        x[i, j] = q
        s[i] -= q
        d[j] -= q
        basis.append((i, j))
        if i == n - 1 and j == m - 1:
            break
        if i == n - 1:
            j += 1
        elif j == m - 1 or s[i] <= d[j]:
            i += 1
        else:
            j += 1
    return x, basis


def _potentials(C, basis, n, m):
    # rows are nodes 0..n-1, columns are nodes n..n+m-1
    adj = [[] for _ in range(n + m)]
    for i, j in basis:
        adj[i].append(n + j)
        adj[n + j].append(i)
    pot = np.full(n + m, np.nan)
    pot[0] = 0.0
    queue = deque([0])
    while queue:
        node = queue.popleft()
        for nb in adj[node]:
            if np.isnan(pot[nb]):
                i, j = (node, nb - n) if node < n else (nb, node - n)
                pot[nb] = C[i, j] - pot[node]
                queue.append(nb)
    return pot[:n], pot[n:], adj


def _tree_path(adj, start, goal, n):
    """Cells on the tree path between two nodes, in walking order."""
    parent = {start: None}
    queue = deque([start])
    while queue:
        node = queue.popleft()
        if node == goal:
            break
        for nb in adj[node]:
            if nb not in parent:
                parent[nb] = node
                queue.append(nb)
    cells = []
    node = goal
    while parent[node] is not None:
        prev = parent[node]
        cells.append((node, prev - n) if node < n else (prev, node - n))
        node = prev
    cells.reverse()
    return cells


def transport_simplex(C, supply, demand, tol: float = 1e-12):
    """Solve the balanced transportation LP with the tableau (MODI) simplex.

    ``supply`` and ``demand`` must have equal totals. Entering and leaving
    cells follow Bland's rule (lowest row-major index) so the method cannot
    cycle on degenerate instances. Returns the optimal vertex plan.
    """
    C = np.asarray(C, dtype=float)
    supply = np.asarray(supply, dtype=float)
    demand = np.asarray(demand, dtype=float)
    n, m = C.shape
    if supply.shape != (n,) or demand.shape != (m,):
        raise ValueError(f"supply/demand shapes {supply.shape}/{demand.shape} do not match cost {C.shape}")
    if np.any(supply < 0) or np.any(demand < 0):
        raise ValueError("supply and demand must be nonnegative")
    if abs(supply.sum() - demand.sum()) > 1e-9 * max(1.0, supply.sum()):
        raise ValueError(f"unbalanced problem: supply {supply.sum()} != demand {demand.sum()}")
    x, basis = _northwest_corner(supply, demand)
    in_basis = np.zeros((n, m), dtype=bool)
    for cell in basis:
        in_basis[cell] = True

    rc_tol = 1e-11 * (1.0 + np.abs(C).max())
    mass_tol = tol * max(1.0, supply.sum())
    # Bland's rule terminates in finitely many pivots; the bound is a safety net
    for _ in range(50 * (n * m + 1) ** 2):
        u, v, adj = _potentials(C, basis, n, m)
        reduced = C - u[:, None] - v[None, :]
        reduced[in_basis] = 0.0
        candidates = np.flatnonzero(reduced.ravel() < -rc_tol)
        if candidates.size == 0:
            return x
        ei, ej = divmod(int(candidates[0]), m)
        cycle = [(ei, ej)] + _tree_path(adj, n + ej, ei, n)
        minus = cycle[1::2]
        theta = min(x[c] for c in minus)
        leaving = min(c for c in minus if x[c] <= theta + mass_tol)
        for k, c in enumerate(cycle):
            x[c] += theta if k % 2 == 0 else -theta
        x[leaving] = 0.0
        in_basis[leaving] = False
        in_basis[ei, ej] = True
        basis.remove(leaving)
        basis.append((ei, ej))
    raise RuntimeError("transportation simplex exceeded its pivot budget")


def exact_ot(C, a, b, cap: int = EXACT_OT_CAP) -> tuple[np.ndarray, float]:
    """Exact Kantorovich OT. Returns an optimal vertex coupling and its cost.

    Ties between equal-cost vertices are resolved by the deterministic pivot
    order, so only the returned cost is stable across implementations.
    """
    a = check_measure(a, "a")
    b = check_measure(b, "b")
    C = check_cost(C, (a.size, b.size))
    if a.size * b.size > cap:
        raise ExactOTSizeError(
            f"instance {a.size}x{b.size} has {a.size * b.size} cells, exact cap is {cap}"
        )
    rows = np.flatnonzero(a > 0)
    cols = np.flatnonzero(b > 0)
    # renormalize so the reduced problem stays exactly balanced
    sub_a = a[rows] / a[rows].sum()
    sub_b = b[cols] / b[cols].sum()
    P = transport_simplex(C[np.ix_(rows, cols)], sub_a, sub_b)
    plan = np.zeros_like(C)
    plan[np.ix_(rows, cols)] = P
    return plan, transport_cost(plan, C)


def wasserstein_p(D, p: float, a, b) -> float:
    """p-Wasserstein distance between histograms on a common finite metric space."""
    if not p >= 1:
        raise ValueError(f"p must be >= 1, got {p}")
    D = check_cost(D)
    if D.shape[0] != D.shape[1]:
        raise ValueError("distance matrix must be square")
    if np.any(D < 0):
        raise ValueError("distance matrix has negative entries")
    if not np.allclose(D, D.T, rtol=0, atol=1e-12):
        raise ValueError("distance matrix is not symmetric")
    if np.any(np.abs(np.diag(D)) > 1e-12):
        raise ValueError("distance matrix must have a zero diagonal")
    _, cost = exact_ot(D**p, a, b)
    return max(cost, 0.0) ** (1.0 / p)
