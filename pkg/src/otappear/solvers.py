"""Discrete Kantorovich solvers: entropic Sinkhorn and an exact transportation
simplex for small instances."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from otappear.features import WeightedPointCloud

COST_KINDS = ("sqeuclidean", "euclidean")
LOG_DOMAIN_BELOW = 0.01
EXACT_MAX_SIZE = 64
BLAND_AFTER = 20


class SolverError(RuntimeError):
    """Numerical failure inside a solver (NaN/inf during iteration)."""


@dataclass(frozen=True)
class CostMatrix:
    entries: np.ndarray
    cost_kind: str = "sqeuclidean"

    @property
    def shape(self) -> tuple[int, int]:
        return self.entries.shape


@dataclass(frozen=True)
class TransportPlan:
    coupling: np.ndarray
    row_marginal_error: float
    col_marginal_error: float
    iterations_used: int
    converged: bool = True

    @property
    def marginal_error(self) -> float:
        return max(self.row_marginal_error, self.col_marginal_error)


def _as_matrix(C) -> np.ndarray:
    return C.entries if isinstance(C, CostMatrix) else np.asarray(C, dtype=np.float64)


def _weights(w) -> np.ndarray:
    if isinstance(w, WeightedPointCloud):
        return w.weights
    w = np.asarray(w, dtype=np.float64).ravel()
    if w.min() < 0 or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and nonnegative")
    return w


def cost_matrix(a, b, cost_kind: str = "sqeuclidean") -> CostMatrix:
    """Pairwise ground cost between the support points of two clouds."""
    if cost_kind not in COST_KINDS:
        raise ValueError(f"cost_kind must be one of {COST_KINDS}, got {cost_kind!r}")
    pa = a.points if isinstance(a, WeightedPointCloud) else np.atleast_2d(np.asarray(a, float))
    pb = b.points if isinstance(b, WeightedPointCloud) else np.atleast_2d(np.asarray(b, float))
    if pa.shape[1] != pb.shape[1]:
        raise ValueError(f"dimension mismatch: {pa.shape[1]} vs {pb.shape[1]}")
    diff = pa[:, None, :] - pb[None, :, :]
    sq = np.einsum("ijk,ijk->ij", diff, diff)
    entries = sq if cost_kind == "sqeuclidean" else np.sqrt(sq)
    return CostMatrix(entries, cost_kind)


def plan_cost(plan, C) -> float:
    P = plan.coupling if isinstance(plan, TransportPlan) else np.asarray(plan, dtype=np.float64)
    M = _as_matrix(C)
    if P.shape != M.shape:
        raise ValueError(f"plan shape {P.shape} does not match cost shape {M.shape}")
    return float(np.sum(P * M))


def marginal_errors(P: np.ndarray, a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    """L1 violation of the row and column marginals."""
    return float(np.abs(P.sum(1) - a).sum()), float(np.abs(P.sum(0) - b).sum())


def _logsumexp(x: np.ndarray, axis: int) -> np.ndarray:
    m = x.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = np.log(np.exp(x - m).sum(axis=axis, keepdims=True)) + m
    return np.squeeze(out, axis=axis)


def sinkhorn(
    C,
    a_weights,
    b_weights,
    epsilon: float = 0.05,
    max_iter: int = 10_000,
    tol: float = 1e-9,
    check_every: int = 1,
) -> TransportPlan:
    """Entropy-regularized OT by alternating marginal scaling.

    Below ``epsilon = 0.01`` the updates run on log-potentials with a
    stabilized log-sum-exp; above it the plain multiplicative form is used.
    Running out of iterations is reported through ``converged`` and the
    marginal errors rather than raised.
    """
    M = _as_matrix(C)
    a, b = _weights(a_weights), _weights(b_weights)
    if M.shape != (a.size, b.size):
        raise ValueError(f"cost shape {M.shape} does not match weights ({a.size}, {b.size})")
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if epsilon < LOG_DOMAIN_BELOW:
        return _sinkhorn_log(M, a, b, epsilon, max_iter, tol, check_every)
    return _sinkhorn_scaling(M, a, b, epsilon, max_iter, tol, check_every)


def _sinkhorn_scaling(M, a, b, eps, max_iter, tol, check_every) -> TransportPlan:
    K = np.exp(-M / eps)
    u = np.ones_like(a)
    v = np.ones_like(b)
    err = np.inf
    it = 0
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        for it in range(1, max_iter + 1):
            u = a / (K @ v)
            v = b / (K.T @ u)
            if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
                raise SolverError(
                    f"non-finite scaling at iteration {it}; epsilon={eps} is too small "
                    "for multiplicative updates"
                )
            if it % check_every == 0:
                err = np.abs(u * (K @ v) - a).sum()
                if err < tol:
                    break
    P = u[:, None] * K * v[None, :]
    row, col = marginal_errors(P, a, b)
    return TransportPlan(P, row, col, it, converged=bool(err < tol))


def _sinkhorn_log(M, a, b, eps, max_iter, tol, check_every) -> TransportPlan:
    with np.errstate(divide="ignore"):
        log_a = np.log(a)
        log_b = np.log(b)
    S = -M / eps
    f = np.zeros_like(a)  # f = eps * log u
    g = np.zeros_like(b)
    err = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        f = log_a - _logsumexp(S + g[None, :], axis=1)
        g = log_b - _logsumexp(S + f[:, None], axis=0)
        if not (np.all(np.isfinite(f[a > 0])) and np.all(np.isfinite(g[b > 0]))):
            raise SolverError(f"non-finite log-potential at iteration {it}")
        if it % check_every == 0:
            row = np.exp(_logsumexp(S + f[:, None] + g[None, :], axis=1))
            err = np.abs(row - a).sum()
            if err < tol:
                break
    P = np.exp(S + f[:, None] + g[None, :])
    row, col = marginal_errors(P, a, b)
    return TransportPlan(P, row, col, it, converged=bool(err < tol))


def exact_ot_small(C, a_weights, b_weights) -> TransportPlan:
    """Exact optimal coupling by the transportation (network) simplex method.

    North-west-corner start, u/v potentials on the basis tree, most-negative
    reduced cost pricing. After a run of degenerate pivots the entering and
    leaving cells follow Bland's rule so the method cannot cycle.
    """
    M = _as_matrix(C)
    a, b = _weights(a_weights), _weights(b_weights)
    n, m = a.size, b.size
    if M.shape != (n, m):
        raise ValueError(f"cost shape {M.shape} does not match weights ({n}, {m})")
    if n > EXACT_MAX_SIZE or m > EXACT_MAX_SIZE:
        raise ValueError(f"exact solver is limited to {EXACT_MAX_SIZE}x{EXACT_MAX_SIZE}, got {n}x{m}")
    if abs(a.sum() - b.sum()) > 1e-9:
        raise ValueError(f"total masses differ: {a.sum()!r} vs {b.sum()!r}")

    X, basis = _northwest_corner(a, b)
    scale = max(1.0, float(np.abs(M).max()))
    pivots = 0
    degenerate_run = 0
    while True:
        u, v = _potentials(M, basis, n, m)
        reduced = M - u[:, None] - v[None, :]
        for cell in basis:
            reduced[cell] = 0.0
        if reduced.min() >= -1e-12 * scale:
            break
        if degenerate_run < BLAND_AFTER:
            entering = np.unravel_index(np.argmin(reduced), reduced.shape)
        else:
            # Bland's rule on long degenerate stretches guarantees termination
            entering = tuple(np.argwhere(reduced < -1e-12 * scale)[0])
        theta = _pivot(X, basis, (int(entering[0]), int(entering[1])), n)
        degenerate_run = degenerate_run + 1 if theta == 0.0 else 0
        pivots += 1

    row, col = marginal_errors(X, a, b)
    return TransportPlan(X, row, col, pivots)


def _northwest_corner(a, b):
    n, m = a.size, b.size
    X = np.zeros((n, m))
    ra, rb = a.astype(float).copy(), b.astype(float).copy()
    basis = set()
    i = j = 0
    while True:
        x = min(ra[i], rb[j])
        if i == n - 1 and j == m - 1:
            # last cell absorbs rounding so marginals close exactly
            x = max(ra[i], rb[j])
        X[i, j] = x
        basis.add((i, j))
        ra[i] -= x
        rb[j] -= x
        if i == n - 1 and j == m - 1:
            break
        if j == m - 1 or (i < n - 1 and ra[i] <= rb[j]):
            i += 1
        else:
            j += 1
    return X, basis


def _adjacency(basis, n, m):
    adj = [[] for _ in range(n + m)]
    for i, j in basis:
        adj[i].append(n + j)
        adj[n + j].append(i)
    return adj


def _potentials(M, basis, n, m):
    u = np.zeros(n)
    v = np.zeros(m)
    adj = _adjacency(basis, n, m)
    seen = np.zeros(n + m, dtype=bool)
    seen[0] = True
    queue = deque([0])
    while queue:
        node = queue.popleft()
        for nb in adj[node]:
            if seen[nb]:
                continue
            seen[nb] = True
            if node < n:
                v[nb - n] = M[node, nb - n] - u[node]
            else:
                u[nb] = M[nb, node - n] - v[node - n]
            queue.append(nb)
    if not seen.all():
        raise SolverError("basis is not a spanning tree")
    return u, v


def _tree_path(adj, start, goal):
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
    path = [goal]
    while parent[path[-1]] is not None:
        path.append(parent[path[-1]])
    return path[::-1]


def _pivot(X, basis, entering, n):
    i, j = entering
    m = X.shape[1]
    adj = _adjacency(basis, n, m)
    # path in the tree from column node j back to row node i closes the cycle
    path = _tree_path(adj, n + j, i)
    cells = []
    for p, q in zip(path[:-1], path[1:]):
        cells.append((q, p - n) if q < n else (p, q - n))
    # entering cell gets +theta; cycle cells alternate -, +, -, ...
    minus = cells[0::2]
    plus = cells[1::2]
    theta = min(X[c] for c in minus)
    leaving = min(c for c in minus if X[c] == theta)
    for c in minus:
        X[c] -= theta
    for c in plus:
        X[c] += theta
    X[entering] += theta
    X[leaving] = 0.0
    basis.remove(leaving)
    basis.add(entering)
    return theta
