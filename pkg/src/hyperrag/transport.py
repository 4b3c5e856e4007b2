"""Discrete 2-Wasserstein machinery for the global-coherence loss.

Two solvers over empirical distributions with squared-Euclidean ground
cost: an exact linear program for small supports and a log-domain
entropic scaling iteration for everything else.  Both return the
transport cost in sqrt units, sqrt(sum_ij pi_ij * c_ij), together with a
plan whose marginals are feasible within tight tolerances.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog
from scipy.special import logsumexp

from .errors import ContractViolation, NumericalError

EXACT_SUPPORT_LIMIT = 64
WEIGHT_ATOL = 1e-9
PLAN_MARGINAL_ATOL = 1e-6
SINKHORN_TARGET = 1e-9


@dataclass(frozen=True)
class EmpiricalDistribution:
    """Weighted point cloud: support rows share a dimension, weights are a
    probability vector."""

    support: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        sup = np.asarray(self.support, dtype=float)
        if sup.ndim == 1:
            sup = sup[:, None]
        if sup.ndim != 2 or sup.shape[0] < 1:
            raise ContractViolation("support must be a nonempty 2-D array")
        if not np.all(np.isfinite(sup)):
            raise ContractViolation("support contains non-finite entries")
        w = np.asarray(self.weights, dtype=float)
        if w.shape != (sup.shape[0],):
            raise ContractViolation(
                f"weights shape {w.shape} does not match support size {sup.shape[0]}"
            )
        if not np.all(np.isfinite(w)) or w.min() < 0.0:
            raise ContractViolation("weights must be finite and nonnegative")
        if abs(float(w.sum()) - 1.0) > WEIGHT_ATOL:
            raise ContractViolation(f"weights sum to {w.sum():.12f}, expected 1")
        sup = sup.copy()
        w = w.copy()
        sup.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "support", sup)
        object.__setattr__(self, "weights", w)

    @property
    def size(self) -> int:
        return self.support.shape[0]

    @property
    def dim(self) -> int:
        return self.support.shape[1]

    @staticmethod
    def uniform(support) -> "EmpiricalDistribution":
        sup = np.asarray(support, dtype=float)
        n = sup.shape[0]
        return EmpiricalDistribution(sup, np.full(n, 1.0 / n))


@dataclass(frozen=True)
class TransportPlan:
    """Coupling matrix with prescribed marginals."""

    coupling: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.coupling, dtype=float)
        if arr.ndim != 2:
            raise ContractViolation("coupling must be a matrix")
        if not np.all(np.isfinite(arr)) or arr.min() < -1e-12:
            raise ContractViolation("coupling entries must be finite and nonnegative")
        arr = np.maximum(arr, 0.0)
        arr.setflags(write=False)
        object.__setattr__(self, "coupling", arr)

    def row_marginals(self) -> np.ndarray:
        return self.coupling.sum(axis=1)

    def col_marginals(self) -> np.ndarray:
        return self.coupling.sum(axis=0)

    def check_marginals(self, p: EmpiricalDistribution, q: EmpiricalDistribution) -> None:
        row_err = float(np.max(np.abs(self.row_marginals() - p.weights)))
        col_err = float(np.max(np.abs(self.col_marginals() - q.weights)))
        if max(row_err, col_err) > PLAN_MARGINAL_ATOL:
            raise NumericalError(
                f"transport plan marginal violation {max(row_err, col_err):.3e} "
                f"exceeds {PLAN_MARGINAL_ATOL}"
            )


def squared_cost_matrix(p: EmpiricalDistribution, q: EmpiricalDistribution) -> np.ndarray:
    """c(u, v) = |u - v|^2 between every pair of support points."""
    if p.dim != q.dim:
        raise ContractViolation(
            f"support dimensions differ: {p.dim} vs {q.dim}"
        )
    diff = p.support[:, None, :] - q.support[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def _sqrt_cost(coupling: np.ndarray, cost: np.ndarray) -> float:
    return math.sqrt(max(float(np.sum(coupling * cost)), 0.0))


def wasserstein2_exact(
    p: EmpiricalDistribution, q: EmpiricalDistribution
) -> tuple[float, TransportPlan]:
    """Exact W2 via the transport linear program (HiGHS).

    Combined support size must stay within the exact-solver budget;
    larger instances belong to wasserstein2_sinkhorn.
    """
    if p.size + q.size > EXACT_SUPPORT_LIMIT:
        raise ContractViolation(
            f"combined support {p.size + q.size} exceeds the exact budget "
            f"{EXACT_SUPPORT_LIMIT}; use wasserstein2_sinkhorn"
        )
    cost = squared_cost_matrix(p, q)
    m, k = cost.shape
    # Equality constraints: row sums = p, column sums = q (drop the last
    # column constraint, redundant since both marginals sum to 1).
    n_var = m * k
    rows = []
    rhs = []
    for i in range(m):
        coeff = np.zeros(n_var)
        coeff[i * k : (i + 1) * k] = 1.0
        rows.append(coeff)
        rhs.append(p.weights[i])
    for j in range(k - 1):
        coeff = np.zeros(n_var)
        coeff[j::k] = 1.0
        rows.append(coeff)
        rhs.append(q.weights[j])
    res = linprog(
        cost.ravel(),
        A_eq=np.array(rows),
        b_eq=np.array(rhs),
        bounds=(0.0, None),
        method="highs",
    )
    if not res.success:
        raise NumericalError(f"exact transport LP failed: {res.message}")
    coupling = res.x.reshape(m, k)
    plan = TransportPlan(_round_to_marginals(coupling, p.weights, q.weights))
    plan.check_marginals(p, q)
    return _sqrt_cost(plan.coupling, cost), plan


def _round_to_marginals(coupling: np.ndarray, p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Project an almost-feasible nonnegative coupling onto exact marginals
    (scale rows down, then columns, then patch the residual with a
    rank-one correction)."""
    pi = np.maximum(coupling, 0.0)
    row = pi.sum(axis=1)
    scale_r = np.where(row > 0, np.minimum(1.0, p / np.where(row > 0, row, 1.0)), 0.0)
    pi = pi * scale_r[:, None]
    col = pi.sum(axis=0)
    scale_c = np.where(col > 0, np.minimum(1.0, q / np.where(col > 0, col, 1.0)), 0.0)
    pi = pi * scale_c[None, :]
    err_r = p - pi.sum(axis=1)
    err_c = q - pi.sum(axis=0)
    total = err_r.sum()
    if total > 0:
        pi = pi + np.outer(err_r, err_c) / total
    return pi


def sinkhorn_potentials(
    p: EmpiricalDistribution,
    q: EmpiricalDistribution,
    epsilon: float,
    max_iter: int = 10000,
    target: float = SINKHORN_TARGET,
) -> tuple[np.ndarray, np.ndarray, bool, float]:
    """Log-domain scaling iterations for entropic OT.

    Returns dual potentials (f, g), the convergence flag, and the final
    marginal violation.  Uses epsilon scaling (warm starts from larger
    regularization) so small epsilon stays tractable.
    """
    if epsilon <= 0:
        raise ContractViolation(f"epsilon must be positive, got {epsilon}")
    if max_iter < 1:
        raise ContractViolation(f"max_iter must be >= 1, got {max_iter}")
    cost = squared_cost_matrix(p, q)
    pw, qw = p.weights, q.weights
    with np.errstate(divide="ignore"):
        log_p = np.where(pw > 0, np.log(np.where(pw > 0, pw, 1.0)), -np.inf)
        log_q = np.where(qw > 0, np.log(np.where(qw > 0, qw, 1.0)), -np.inf)
    f = np.zeros(p.size)
    g = np.zeros(q.size)
    # Annealing ladder: start at a coarse regularization and halve down to
    # the requested value, warm-starting the potentials at each stage.
    scale = max(float(cost.max(initial=0.0)), epsilon)
    ladder = [epsilon]
    eps_up = epsilon
    while eps_up < scale / 10.0:
        eps_up *= 2.0
        ladder.append(eps_up)
    ladder.reverse()
    iters_used = 0
    converged = False
    violation = math.inf
    for stage, eps in enumerate(ladder):
        last_stage = stage == len(ladder) - 1
        while iters_used < max_iter:
            f = -eps * logsumexp((g[None, :] - cost) / eps + log_q[None, :], axis=1)
            g = -eps * logsumexp((f[:, None] - cost) / eps + log_p[:, None], axis=0)
            iters_used += 1
            log_pi = (f[:, None] + g[None, :] - cost) / eps + log_p[:, None] + log_q[None, :]
            rows = np.exp(logsumexp(log_pi, axis=1))
            violation = float(np.max(np.abs(rows - pw)))
            if violation < target:
                break
            if not last_stage and violation < 1e-3:
                # Good enough to seed the next (smaller) epsilon stage.
                break
        if last_stage:
            converged = violation < target
    return f, g, converged, violation


def entropic_plan(
    p: EmpiricalDistribution,
    q: EmpiricalDistribution,
    epsilon: float,
    f: np.ndarray,
    g: np.ndarray,
) -> np.ndarray:
    cost = squared_cost_matrix(p, q)
    with np.errstate(divide="ignore"):
        log_p = np.where(p.weights > 0, np.log(np.where(p.weights > 0, p.weights, 1.0)), -np.inf)
        log_q = np.where(q.weights > 0, np.log(np.where(q.weights > 0, q.weights, 1.0)), -np.inf)
    log_pi = (f[:, None] + g[None, :] - cost) / epsilon + log_p[:, None] + log_q[None, :]
    # Normalize total mass to 1.  A no-op at convergence; with unconverged
    # potentials it keeps the matrix finite so rounding can proceed.
    log_pi = log_pi - logsumexp(log_pi)
    return np.exp(log_pi)


def wasserstein2_sinkhorn(
    p: EmpiricalDistribution,
    q: EmpiricalDistribution,
    epsilon: float,
    max_iter: int = 10000,
) -> tuple[float, TransportPlan, bool]:
    """Entropic-regularized W2: value in sqrt-cost units, a marginal-exact
    plan (scaled plan rounded onto the transport polytope), and the
    convergence flag."""
    f, g, converged, _ = sinkhorn_potentials(p, q, epsilon, max_iter)
    raw = entropic_plan(p, q, epsilon, f, g)
    coupling = _round_to_marginals(raw, p.weights, q.weights)
    plan = TransportPlan(coupling)
    plan.check_marginals(p, q)
    cost = squared_cost_matrix(p, q)
    return _sqrt_cost(plan.coupling, cost), plan, converged


def entropic_terms(
    p_weights: np.ndarray,
    q: EmpiricalDistribution,
    support: np.ndarray,
    epsilon: float,
    max_iter: int = 10000,
) -> tuple[float, np.ndarray, float]:
    """One entropic solve, three readings: the regularized objective
    OT_eps(p, q) = <pi, C> + eps * KL(pi | p x q), its gradient in the
    first marginal's weights (envelope property: the converged potential
    f, centered on the simplex), and the plan's transport cost in
    sqrt-cost units for reporting.
    """
    p = EmpiricalDistribution(support, p_weights)
    f, g, _, _ = sinkhorn_potentials(p, q, epsilon, max_iter)
    # Dual value at feasibility: <f, p> + <g, q>.
    value = float(f @ p.weights + g @ q.weights)
    # Center the gradient: only the simplex-tangential part is meaningful.
    grad = f - float(np.mean(f))
    plan = _round_to_marginals(entropic_plan(p, q, epsilon, f, g), p.weights, q.weights)
    sqrt_cost = _sqrt_cost(plan, squared_cost_matrix(p, q))
    return value, grad, sqrt_cost


def entropic_objective_and_grad(
    p_weights: np.ndarray,
    q: EmpiricalDistribution,
    support: np.ndarray,
    epsilon: float,
    max_iter: int = 10000,
) -> tuple[float, np.ndarray]:
    value, grad, _ = entropic_terms(p_weights, q, support, epsilon, max_iter)
    return value, grad
