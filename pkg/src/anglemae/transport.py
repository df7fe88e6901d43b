"""Entropic optimal transport between original and predicted crop patches.

Cost c[i, j] is the per-element mean of squared differences between target
patch i and predicted patch j, so costs are in pixel-value units regardless
of patch size.  Marginals are uniform: each of the N patches supplies or
demands mass 1/N, matching plans whose columns sum to 1/N and whose entries
total 1.

The solver is log-domain Sinkhorn-Knopp on the dual potentials

    f_i <- eps * (log u_i - logsumexp_j((g_j - c_ij) / eps))
    g_j <- eps * (log v_j - logsumexp_i((f_i - c_ij) / eps))

with the plan recovered as omega_ij = exp((f_i + g_j - c_ij) / eps).  The
iteration stops when the worst marginal violation drops to tol or the
budget runs out.  The returned plan is then rounded onto the transport
polytope exactly (scale rows and columns down to their marginals, then
spread the leftover mass as a rank-one patch).  Rounding makes the plan a
feasible point, so its cost can never undercut the unregularized optimum;
without it, small-epsilon runs that stall just above tol can carry a mass
deficit that does.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True)
class TransportProblem:
    cost: np.ndarray
    supply: np.ndarray  # row marginals, sums to 1
    demand: np.ndarray  # column marginals, sums to 1
    epsilon: float
    max_iters: int = 1000
    tol: float = 1e-6

    def validate(self) -> None:
        c = self.cost
        if c.ndim != 2 or c.size == 0:
            raise ValidationError("cost must be a non-empty 2D array")
        if not np.all(np.isfinite(c)) or c.min() < 0.0:
            raise ValidationError("cost entries must be finite and >= 0")
        for name, m, n in (("supply", self.supply, c.shape[0]),
                           ("demand", self.demand, c.shape[1])):
            if m.shape != (n,) or not np.all(np.isfinite(m)) or m.min() <= 0.0:
                raise ValidationError(f"{name} must be {n} positive finite weights")
            if abs(m.sum() - 1.0) > 1e-9:
                raise ValidationError(f"{name} must sum to 1")
        if not (self.epsilon > 0.0 and math.isfinite(self.epsilon)):
            raise ValidationError("epsilon must be positive and finite")
        if self.max_iters < 1 or self.tol <= 0.0:
            raise ValidationError("max_iters must be >= 1 and tol > 0")


@dataclass(frozen=True)
class TransportPlan:
    plan: np.ndarray
    f: np.ndarray
    g: np.ndarray
    iterations: int
    converged: bool
    marginal_error: float


def cost_matrix(targets: np.ndarray, preds: np.ndarray) -> np.ndarray:
    """(N, D) x (M, D) -> (N, M) of mean squared differences."""
    targets = np.asarray(targets, dtype=np.float64)
    preds = np.asarray(preds, dtype=np.float64)
    if targets.ndim != 2 or preds.ndim != 2 or targets.shape[1] != preds.shape[1]:
        raise ValidationError("targets and preds must be (N, D) and (M, D)")
    diff = targets[:, None, :] - preds[None, :, :]
    return np.mean(diff * diff, axis=2)


def epsilon_for(cost: np.ndarray, rel: float = 0.1) -> float:
    """Cost-relative regularization, floored so all-zero costs stay solvable."""
    if rel <= 0.0:
        raise ValidationError("epsilon factor must be > 0")
    return max(rel * float(np.mean(cost)), 1e-9)


def make_problem(
    cost: np.ndarray,
    epsilon_rel: float = 0.1,
    max_iters: int = 1000,
    tol: float = 1e-6,
) -> TransportProblem:
    """Uniform-marginal problem with epsilon scaled to the mean cost."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.size == 0:
        raise ValidationError("cost must be a non-empty 2D array")
    n, m = cost.shape
    return TransportProblem(
        cost=cost,
        supply=np.full(n, 1.0 / n),
        demand=np.full(m, 1.0 / m),
        epsilon=epsilon_for(cost, epsilon_rel),
        max_iters=max_iters,
        tol=tol,
    )


def _logsumexp(x: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def _round_to_polytope(
    plan: np.ndarray, supply: np.ndarray, demand: np.ndarray
) -> np.ndarray:
    rows = plan.sum(axis=1)
    plan = plan * np.minimum(1.0, supply / np.where(rows > 0, rows, 1.0))[:, None]
    cols = plan.sum(axis=0)
    plan = plan * np.minimum(1.0, demand / np.where(cols > 0, cols, 1.0))[None, :]
    du = supply - plan.sum(axis=1)
    dv = demand - plan.sum(axis=0)
    deficit = du.sum()
    if deficit > 0.0:
        plan = plan + np.outer(du, dv) / deficit
    return np.maximum(plan, 0.0)  # clamp float dust from the subtraction


def sinkhorn_solve(problem: TransportProblem) -> TransportPlan:
    problem.validate()
    c = problem.cost
    eps = problem.epsilon
    log_u = np.log(problem.supply)
    log_v = np.log(problem.demand)
    f = np.zeros(c.shape[0])
    g = np.zeros(c.shape[1])
    iterations = 0
    converged = False
    violation = np.inf
    for iterations in range(1, problem.max_iters + 1):
        f = eps * (log_u - _logsumexp((g[None, :] - c) / eps, axis=1))
        g = eps * (log_v - _logsumexp((f[:, None] - c) / eps, axis=0))
        plan = np.exp((f[:, None] + g[None, :] - c) / eps)
        violation = max(
            float(np.abs(plan.sum(axis=1) - problem.supply).max()),
            float(np.abs(plan.sum(axis=0) - problem.demand).max()),
        )
        if violation <= problem.tol:
            converged = True
            break
    plan = _round_to_polytope(plan, problem.supply, problem.demand)
    violation = max(
        float(np.abs(plan.sum(axis=1) - problem.supply).max()),
        float(np.abs(plan.sum(axis=0) - problem.demand).max()),
    )
    return TransportPlan(
        plan=plan,
        f=f,
        g=g,
        iterations=iterations,
        converged=converged,
        marginal_error=violation,
    )


def exact_ot_oracle(cost: np.ndarray) -> float:
    """Unregularized optimum with uniform marginals by brute force: the
    minimizer is a permutation vertex, so enumerate all N! of them.  Guarded
    to N <= 8."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ValidationError("oracle needs a square cost matrix")
    n = cost.shape[0]
    if n > 8:
        raise ValidationError("oracle is factorial; N must be <= 8")
    best = math.inf
    for perm in itertools.permutations(range(n)):
        total = sum(cost[i, perm[i]] for i in range(n))
        best = min(best, total / n)
    return best


def ot_loss(cost: np.ndarray, plan: np.ndarray) -> float:
    """Transport cost of a plan: sum_ij c_ij * omega_ij."""
    if cost.shape != plan.shape:
        raise ValidationError("cost and plan shapes differ")
    return float(np.sum(cost * plan))


def ot_loss_grad(
    targets: np.ndarray, preds: np.ndarray, plan: np.ndarray
) -> np.ndarray:
    """Analytic gradient of ot_loss wrt predictions with the plan held
    constant: dL/dpred_j = sum_i omega_ij * 2 (pred_j - target_i) / D."""
    targets = np.asarray(targets, dtype=np.float64)
    preds = np.asarray(preds, dtype=np.float64)
    if plan.shape != (targets.shape[0], preds.shape[0]):
        raise ValidationError("plan shape does not match targets x preds")
    d = targets.shape[1]
    col = plan.sum(axis=0)  # mass landing on each prediction
    return 2.0 / d * (col[:, None] * preds - plan.T @ targets)
