"""Entropic optimal transport solved by log-domain Sinkhorn scaling.

The solver runs a fixed number of alternating dual updates (unrolled, so
gradients flow to the cost matrix through the tape) and returns the coupling
T = diag(u) K diag(v) with K = exp(-M / eps). A convergence mode iterates to
a marginal-residual tolerance instead; it is meant for tests, not training.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, as_tensor, logsumexp


@dataclass
class OtProblem:
    """Cost matrix plus marginals and regularization settings."""

    cost: Tensor          # n x t
    a: np.ndarray         # length-n probability vector
    b: np.ndarray         # length-t probability vector
    epsilon: float = 0.1
    iterations: int = 10

    def __post_init__(self):
        self.cost = as_tensor(self.cost)
        self.a = np.asarray(self.a, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        n, t = self.cost.shape
        if self.a.shape != (n,) or self.b.shape != (t,):
            raise ValueError("marginal shapes do not match the cost matrix")
        for m in (self.a, self.b):
            if np.any(m < 0) or abs(m.sum() - 1.0) > 1e-12:
                raise ValueError("marginals must be probability vectors")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not np.all(np.isfinite(self.cost.data)):
            raise ValueError("cost matrix contains non-finite entries")


@dataclass
class TransportPlan:
    """Coupling matrix with its worst marginal deviation."""

    T: Tensor
    marginal_residual: float = field(default=0.0)

    @property
    def matrix(self):
        return self.T.data


def uniform_marginals(n, t):
    return np.full(n, 1.0 / n), np.full(t, 1.0 / t)


def sinkhorn_solve(problem, converge_tol=None, max_iterations=10000):
    """Solve the entropic OT problem.

    With converge_tol=None, exactly `problem.iterations` alternating dual
    updates run and the result is differentiable w.r.t. the cost. With a
    tolerance, plain numpy iterations run until the marginal residual drops
    below it (test/diagnostic mode, no gradient graph).
    """
    M, a, b, eps = problem.cost, problem.a, problem.b, problem.epsilon
    n, t = M.shape
    log_a = np.log(a + (a == 0))  # zero-mass rows keep potential 0
    log_b = np.log(b + (b == 0))

    if converge_tol is not None:
        return _solve_to_tolerance(M.data, a, b, eps, log_a, log_b,
                                   converge_tol, max_iterations)

    # unrolled, on the tape; potentials f, g in the log domain
    scaled = M * (-1.0 / eps)           # log K
    g = Tensor(np.zeros(t))
    for _ in range(problem.iterations):
        f = logsumexp(scaled + g.reshape(1, t), axis=1)
        f = Tensor(log_a) - f
        g = logsumexp(scaled + f.reshape(n, 1), axis=0)
        g = Tensor(log_b) - g
    log_T = scaled + f.reshape(n, 1) + g.reshape(1, t)
    T = log_T.exp()
    res = _marginal_residual(T.data, a, b)
    return TransportPlan(T=T, marginal_residual=res)


def _solve_to_tolerance(M, a, b, eps, log_a, log_b, tol, max_iterations):
    scaled = -M / eps
    g = np.zeros(M.shape[1])
    for _ in range(max_iterations):
        f = log_a - _lse(scaled + g[None, :], axis=1)
        g = log_b - _lse(scaled + f[:, None], axis=0)
        T = np.exp(scaled + f[:, None] + g[None, :])
        res = _marginal_residual(T, a, b)
        if res < tol:
            break
    if not np.all(np.isfinite(T)):
        raise FloatingPointError("sinkhorn overflow: epsilon too small for cost scale")
    return TransportPlan(T=Tensor(T), marginal_residual=res)


def _lse(x, axis):
    m = np.max(x, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def _marginal_residual(T, a, b):
    return float(max(np.max(np.abs(T.sum(axis=1) - a)),
                     np.max(np.abs(T.sum(axis=0) - b))))


def entropy(plan):
    """-sum T_ij (log T_ij - 1), with 0 log 0 := 0."""
    T = plan.matrix if isinstance(plan, TransportPlan) else np.asarray(plan)
    if np.any(T < 0) or not np.all(np.isfinite(T)):
        raise ValueError("plan entries must be finite and nonnegative")
    pos = T[T > 0]
    return float(-np.sum(pos * (np.log(pos) - 1.0)))


def transport_cost(plan, M):
    """Frobenius inner product <T, M>."""
    T = plan.matrix if isinstance(plan, TransportPlan) else np.asarray(plan)
    M = M.data if isinstance(M, Tensor) else np.asarray(M)
    if T.shape != M.shape:
        raise ValueError(f"shape mismatch: {T.shape} vs {M.shape}")
    return float(np.sum(T * M))


def plan_to_csv_rows(plan):
    """(row, col, value) triples for the CLI inspect dump."""
    T = plan.matrix
    return [(i, j, T[i, j]) for i in range(T.shape[0]) for j in range(T.shape[1])]
