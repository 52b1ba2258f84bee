"""Walk through the entropic optimal-transport solver.

Shows how the regularization strength epsilon interpolates between the sharp
linear-programming solution (small epsilon) and the independent coupling
a b^T (large epsilon), and that the unrolled solver is differentiable.
"""

import numpy as np

from l2gnet.autodiff import Parameter, Rng, Tensor, grad_check
from l2gnet.sinkhorn import (OtProblem, entropy, sinkhorn_solve,
                             transport_cost, uniform_marginals)


def main():
    rng = Rng(0)
    n, t = 5, 4
    cost = rng.normal((n, t))
    cost = cost / np.abs(cost).max()
    a, b = uniform_marginals(n, t)

    print("cost matrix (max-abs normalized):")
    print(np.round(cost, 3))

    print("\nepsilon sweep: small -> sparse plan, large -> outer product")
    for eps in (0.01, 0.1, 1.0, 100.0):
        plan = sinkhorn_solve(OtProblem(cost=cost, a=a, b=b, epsilon=eps),
                              converge_tol=1e-10, max_iterations=200000)
        dev = np.abs(plan.matrix - np.outer(a, b)).max()
        print(f"  eps={eps:<6} cost={transport_cost(plan, cost):+.4f} "
              f"entropy={entropy(plan):.4f} "
              f"|T - ab^T|_max={dev:.2e}")

    print("\nthe plan for eps=0.1 (rows: codes, columns: bins):")
    plan = sinkhorn_solve(OtProblem(cost=cost, a=a, b=b, epsilon=0.1,
                                    iterations=50))
    print(np.round(plan.matrix, 4))
    print(f"row sums {np.round(plan.matrix.sum(axis=1), 4)} (target 1/{n})")
    print(f"col sums {np.round(plan.matrix.sum(axis=0), 4)} (target 1/{t})")

    print("\ngradients flow through the unrolled iterations:")
    M = Parameter(cost.copy(), "M")
    C = rng.normal((n, t))

    def objective():
        p = sinkhorn_solve(OtProblem(cost=M, a=a, b=b, epsilon=0.1,
                                     iterations=10))
        return (p.T * Tensor(C)).sum()

    rep = grad_check(objective, [M], rng=rng)
    print(f"  finite-difference check: "
          f"{'PASS' if rep['pass'] else 'FAIL'} "
          f"(max rel err {rep['M']['max_rel_err']:.2e})")


if __name__ == "__main__":
    main()
