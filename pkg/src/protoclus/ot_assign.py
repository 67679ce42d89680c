"""Local-aware prototype assignment over the transport polytope.

For one primitive we have ``K`` prototypes and ``N`` features. The plan
``L`` (K x N, nonnegative) must send unit mass from every feature and
``N / K`` mass to every prototype. Among such plans we minimize

    J(L) = <L, -log Q> + kappa * Omega(L),
    Omega(L) = -<S, (L * Q)^T (L * Q)>,

where ``Q`` is the column softmax of prototype/feature similarities and
``S`` the feature cosine-similarity matrix. ``Omega`` rewards putting
similar features on the same prototype.

The solver is a generalized conditional-gradient loop: linearize ``Omega``
at the current plan, solve the resulting entropic transport problem with
log-domain Sinkhorn scaling, then move toward that solution with an exact
line search (``J`` is quadratic along the segment).
"""

import warnings
from dataclasses import dataclass, field

import numba
import numpy as np

from .errors import ConvergenceWarning, ShapeError
from .numerics import as_matrix, check_finite, softmax_cols

LOG_FLOOR = 1e-30


@dataclass(frozen=True)
class AssignmentProblem:
    Q: np.ndarray
    S: np.ndarray
    kappa: float = 1.0
    epsilon: float = 0.05

    def __post_init__(self):
        Q = as_matrix(self.Q)
        S = as_matrix(self.S)
        if Q.size == 0:
            raise ShapeError("Q must have at least one row and one column")
        K, N = Q.shape
        if S.shape != (N, N):
            raise ShapeError(f"S must be {N}x{N} to match Q {K}x{N}, got {S.shape}")
        if np.any(Q < 0) or np.abs(Q.sum(axis=0) - 1.0).max() > 1e-9:
            raise ValueError("Q columns must be nonnegative and sum to 1")
        if np.abs(S - S.T).max() > 1e-9 or np.abs(np.diag(S) - 1.0).max() > 1e-9:
            raise ValueError("S must be symmetric with unit diagonal")
        if self.kappa < 0:
            raise ValueError("kappa must be >= 0")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "S", S)

    @property
    def shape(self):
        return self.Q.shape

    @property
    def neg_log_q(self):
        return -np.log(np.maximum(self.Q, LOG_FLOOR))


@dataclass
class AssignmentPlan:
    L: np.ndarray
    hard: np.ndarray
    objective_trace: list = field(default_factory=list)
    converged: bool = True

    @property
    def labels(self):
        """Index of the assigned prototype for every column."""
        return np.argmax(self.hard, axis=0)


def build_problem(P, F, kappa=1.0, epsilon=0.05):
    """Assemble an assignment problem from prototypes and features.

    Parameters
    ----------
    P : (K, D) array
        Unit-norm prototypes, one per row.
    F : (D, N) array
        Unit-norm features, one per column.
    """
    P = as_matrix(P)
    F = as_matrix(F)
    if P.shape[1] != F.shape[0]:
        raise ShapeError(f"prototype dim {P.shape[1]} != feature dim {F.shape[0]}")
    Q = softmax_cols(P @ F)
    S = F.T @ F
    # exact symmetry and unit diagonal; rounding leaves ~1e-16 residue
    S = 0.5 * (S + S.T)
    np.fill_diagonal(S, 1.0)
    return AssignmentProblem(Q=Q, S=S, kappa=kappa, epsilon=epsilon)


def _check_plan_shape(L, prob):
    L = as_matrix(L)
    if L.shape != prob.Q.shape:
        raise ShapeError(f"plan shape {L.shape} != problem shape {prob.Q.shape}")
    return L


def omega(L, prob):
    L = _check_plan_shape(L, prob)
    M = L * prob.Q
    return -float(np.sum(prob.S * (M.T @ M)))


def omega_grad(L, prob):
    L = _check_plan_shape(L, prob)
    M = L * prob.Q
    return (-2.0 * (M @ prob.S)) * prob.Q


def objective(L, prob):
    """Transport cost plus ``kappa``-weighted coherence term."""
    L = _check_plan_shape(L, prob)
    val = float(np.sum(L * prob.neg_log_q))
    if prob.kappa:
        val += prob.kappa * omega(L, prob)
    return val


@numba.njit(cache=True)
def _sinkhorn_kernel(logk, log_r, log_c, alpha, beta, max_iter, tol, check_every):
    K, N = logk.shape
    r = np.exp(log_r)
    viol = np.inf
    it = 0
    while it < max_iter:
        it += 1
        for i in range(K):
            m = -np.inf
            for j in range(N):
                m = max(m, logk[i, j] + beta[j])
            s = 0.0
            for j in range(N):
                s += np.exp(logk[i, j] + beta[j] - m)
            alpha[i] = log_r[i] - m - np.log(s)
        for j in range(N):
            m = -np.inf
            for i in range(K):
                m = max(m, logk[i, j] + alpha[i])
            s = 0.0
            for i in range(K):
                s += np.exp(logk[i, j] + alpha[i] - m)
            beta[j] = log_c[j] - m - np.log(s)
        if it % check_every == 0 or it == max_iter:
            # columns are exact after the beta update; only rows can drift
            viol = 0.0
            for i in range(K):
                s = 0.0
                for j in range(N):
                    s += np.exp(logk[i, j] + alpha[i] + beta[j])
                viol = max(viol, abs(s - r[i]))
            if viol < tol:
                break
    return viol


def round_to_polytope(L, row_marginal, col_marginal):
    """Map a nearly feasible plan onto the exact marginal constraints.

    Scales rows and then columns down where they overshoot, and spreads
    the remaining deficit as a rank-one correction. The output is
    nonnegative and differs from ``L`` by at most the input violation.
    """
    L = np.array(L, dtype=np.float64)
    r = np.broadcast_to(np.asarray(row_marginal, dtype=np.float64), (L.shape[0],))
    c = np.broadcast_to(np.asarray(col_marginal, dtype=np.float64), (L.shape[1],))
    rows = L.sum(axis=1)
    L *= np.minimum(r / np.where(rows > 0, rows, 1.0), 1.0)[:, None]
    cols = L.sum(axis=0)
    L *= np.minimum(c / np.where(cols > 0, cols, 1.0), 1.0)[None, :]
    err_r = np.maximum(r - L.sum(axis=1), 0.0)
    err_c = np.maximum(c - L.sum(axis=0), 0.0)
    total = err_r.sum()
    if total > 0:
        L += np.outer(err_r, err_c) / total
    return L


def sinkhorn_project(cost, epsilon=0.05, col_marginal=1.0, row_marginal=None,
                     max_iter=500, tol=1e-6, check_every=5):
    """Entropic transport plan for ``cost`` by log-domain Sinkhorn scaling.

    Solves ``min <L, cost> - epsilon * H(L)`` subject to every column of
    ``L`` summing to ``col_marginal`` and every row to ``row_marginal``
    (default ``N / K``). Iterates until the largest marginal violation is
    below ``tol``. The scaled plan is then rounded onto the constraint set,
    so the result is feasible to machine precision even when ``max_iter``
    runs out; in that case a ``ConvergenceWarning`` reports the violation
    seen before rounding.
    """
    cost = as_matrix(cost)
    check_finite(cost, "cost")
    if not epsilon > 0:
        raise ValueError("epsilon must be > 0")
    K, N = cost.shape
    if row_marginal is None:
        row_marginal = N / K * col_marginal
    r = np.broadcast_to(np.asarray(row_marginal, dtype=np.float64), (K,)).copy()
    c = np.broadcast_to(np.asarray(col_marginal, dtype=np.float64), (N,)).copy()
    logk = np.ascontiguousarray(-cost / epsilon)
    alpha = np.zeros(K)
    beta = np.zeros(N)
    viol = _sinkhorn_kernel(logk, np.log(r), np.log(c), alpha, beta,
                            int(max_iter), float(tol), int(check_every))
    L = np.exp(logk + alpha[:, None] + beta[None, :])
    if viol >= tol:
        warnings.warn(
            ConvergenceWarning(
                f"Sinkhorn stopped after {max_iter} iterations with marginal "
                f"violation {viol:.3e}", violation=float(viol)),
            stacklevel=2)
    return round_to_polytope(L, r, c)


def _line_search(L, D, prob):
    """Exact minimizer over [0, 1] of ``J(L + g * D)``."""
    E = D * prob.Q
    M = L * prob.Q
    b = float(np.sum(D * prob.neg_log_q))
    a = 0.0
    if prob.kappa:
        b -= 2.0 * prob.kappa * float(np.sum(prob.S * (M.T @ E)))
        a = -prob.kappa * float(np.sum(prob.S * (E.T @ E)))
    candidates = [0.0, 1.0]
    if a > 0:
        candidates.append(min(max(-b / (2.0 * a), 0.0), 1.0))
    return min(candidates, key=lambda g: a * g * g + b * g)


def harden(L):
    """One-hot matrix marking the argmax of each column (lowest index on ties)."""
    L = as_matrix(L)
    hard = np.zeros_like(L)
    hard[np.argmax(L, axis=0), np.arange(L.shape[1])] = 1.0
    return hard


def solve_gcg(prob, max_outer=10, tol=1e-7, inner_max_iter=500, inner_tol=1e-6):
    """Minimize the regularized assignment objective over the polytope.

    Returns an :class:`AssignmentPlan` whose ``objective_trace`` holds the
    objective at the initial plan and after every outer step. The trace is
    non-increasing because the line search may always pick a zero step.
    """
    K, N = prob.shape
    if K == 1:
        L = np.ones((1, N))
        return AssignmentPlan(L=L, hard=L.copy(), objective_trace=[objective(L, prob)])

    sink = dict(epsilon=prob.epsilon, max_iter=inner_max_iter, tol=inner_tol)
    base_cost = prob.neg_log_q
    L = sinkhorn_project(base_cost, **sink)
    trace = [objective(L, prob)]
    converged = prob.kappa == 0
    if not converged:
        for _ in range(max_outer):
            G = base_cost + prob.kappa * omega_grad(L, prob)
            D = sinkhorn_project(G, **sink) - L
            gamma = _line_search(L, D, prob)
            if gamma > 0:
                cand = L + gamma * D
                val = objective(cand, prob)
                # the quadratic model and the direct evaluation can disagree by rounding
                if val <= trace[-1]:
                    L = cand
                    trace.append(val)
                else:
                    trace.append(trace[-1])
            else:
                trace.append(trace[-1])
            if trace[-2] - trace[-1] < tol:
                converged = True
                break
        if not converged:
            warnings.warn(
                ConvergenceWarning(
                    f"GCG did not reach tol={tol:g} in {max_outer} outer steps",
                    violation=trace[-2] - trace[-1]),
                stacklevel=2)
    return AssignmentPlan(L=L, hard=harden(L), objective_trace=trace, converged=converged)
