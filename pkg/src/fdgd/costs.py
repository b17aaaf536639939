"""Per-agent steady-state costs, projected gradients, and curvature constants.

Costs are evaluated at arbitrary (u, y) pairs, decoupled from the plant:
the controller feeds the *measured* output rather than a model-predicted
steady state, which is what makes the scheme a feedback method.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import linalg
from .errors import DegenerateCostError, DimensionError, ParameterError


class AgentCost:
    """Interface for one agent's smooth convex cost of (u, y).

    Subclasses provide ``value``/``gradient`` plus a Lipschitz constant for
    the joint gradient.  ``optimal_value`` may return None, in which case
    the unconstrained minimum is located numerically when needed.
    """

    lipschitz: float = None

    def value(self, u, y) -> float:
        raise NotImplementedError

    def gradient(self, u, y):
        """Return (grad_u, grad_y) at the probe point."""
        raise NotImplementedError

    def optimal_value(self):
        return None


class QuadraticAgentCost(AgentCost):
    """0.5 * (alpha ||u||^2 + ||y - y_ref||^2): input effort plus output tracking."""

    def __init__(self, alpha: float, y_ref):
        if alpha <= 0:
            raise ParameterError(f"input weight alpha must be positive, got {alpha}")
        self.alpha = float(alpha)
        self.y_ref = linalg.as_vector(y_ref, "y_ref")
        self.lipschitz = max(self.alpha, 1.0)

    def value(self, u, y) -> float:
        u = np.asarray(u, dtype=float)
        dy = np.asarray(y, dtype=float) - self.y_ref
        return 0.5 * (self.alpha * float(u @ u) + float(dy @ dy))

    def gradient(self, u, y):
        u = np.asarray(u, dtype=float)
        dy = np.asarray(y, dtype=float) - self.y_ref
        return self.alpha * u, dy

    def optimal_value(self):
        return 0.0


class CostModel:
    """Collection of N agent costs with optional declared joint curvature.

    ``modulus`` is the restricted-strong-convexity modulus of the summed
    cost in the joint variable (u, y); pass 0 for merely convex costs,
    which disables the error-bound certificates (convergence-only mode).
    """

    def __init__(self, agents, m: int, p: int, modulus: float = 0.0):
        self.agents = list(agents)
        if not self.agents:
            raise ParameterError("at least one agent cost is required")
        self.m = int(m)
        self.p = int(p)
        if modulus < 0:
            raise ParameterError(f"convexity modulus must be >= 0, got {modulus}")
        self.modulus = float(modulus)
        for i, agent in enumerate(self.agents):
            if agent.lipschitz is None or agent.lipschitz <= 0:
                raise ParameterError(f"agent {i} must declare a positive Lipschitz constant")

    @property
    def N(self) -> int:
        return len(self.agents)

    def total_value(self, u, y) -> float:
        return float(sum(a.value(u, y) for a in self.agents))

    def total_gradient(self, u, y):
        gu = np.zeros(self.m)
        gy = np.zeros(self.p)
        for a in self.agents:
            au, ay = a.gradient(u, y)
            gu += au
            gy += ay
        return gu, gy

    def optimal_value(self) -> float:
        """Sum of the agents' unconstrained minima over (u, y)."""
        total = 0.0
        for i, a in enumerate(self.agents):
            v = a.optimal_value()
            if v is None:
                v = _minimize_agent(a, self.m, self.p)
            if not np.isfinite(v):
                raise DegenerateCostError(f"agent {i} cost is unbounded below")
            total += v
        return float(total)


class QuadraticTrackingCost(CostModel):
    """Quadratic tracking instance: agent i pays 0.5(alpha_i ||u||^2 + ||y - y_ref||^2).

    The output weight is the identity.  All curvature constants are exact:
    per-agent Lipschitz constants are max(alpha_i, 1) and the joint modulus
    of the summed cost is min(sum_i alpha_i, N).
    """

    def __init__(self, alphas, y_ref, m: int):
        alphas = np.asarray(alphas, dtype=float)
        y_ref = linalg.as_vector(y_ref, "y_ref")
        if np.any(alphas <= 0):
            raise ParameterError("all input weights alpha_i must be positive")
        agents = [QuadraticAgentCost(a, y_ref) for a in alphas]
        modulus = float(min(alphas.sum(), len(alphas)))
        super().__init__(agents, m=m, p=y_ref.shape[0], modulus=modulus)
        self.alphas = alphas
        self.y_ref = y_ref

    def optimal_value(self) -> float:
        return 0.0

    def gradient_stack_batch(self, G, u_mats, ys):
        """Vectorized projected-gradient stacks for a batch of recorded steps.

        ``u_mats`` has shape (T, N, m) and ``ys`` shape (T, p); returns the
        (T, N, m) array of per-agent projected gradients.  Matches the
        per-agent loop to rounding error.
        """
        gy = (ys - self.y_ref[None, :]) @ G
        return self.alphas[None, :, None] * u_mats + gy[:, None, :]


@dataclass(frozen=True)
class ProjectedGradientContext:
    """Projection data shared by all projected-gradient evaluations.

    Holds the input-to-output DC gain G, the stacked projection matrix
    [I_m | G^T], its operator norm, and the aggregate Lipschitz constant
    L = ||Pi|| * sum_i L_i.
    """

    G: np.ndarray
    Pi_T: np.ndarray
    norm_Pi: float
    L_total: float

    @classmethod
    def build(cls, G, costs: CostModel) -> "ProjectedGradientContext":
        G = linalg.as_matrix(G, "G")
        p, m = G.shape
        if m != costs.m or p != costs.p:
            raise DimensionError(
                f"G is {G.shape} but costs expect m={costs.m}, p={costs.p}"
            )
        Pi_T = np.hstack([np.eye(m), G.T])
        norm_Pi = linalg.spectral_norm(Pi_T)
        L_total = norm_Pi * float(sum(a.lipschitz for a in costs.agents))
        return cls(G=G, Pi_T=Pi_T, norm_Pi=norm_Pi, L_total=L_total)


def projected_gradient(ctx: ProjectedGradientContext, agent: AgentCost, u, y):
    """Measured composite gradient grad_u + G^T grad_y for one agent."""
    u = linalg.as_vector(u, "u")
    y = linalg.as_vector(y, "y")
    if u.shape[0] != ctx.G.shape[1] or y.shape[0] != ctx.G.shape[0]:
        raise DimensionError("probe point does not match the context dimensions")
    gu, gy = agent.gradient(u, y)
    return gu + ctx.G.T @ gy


def gradient_stack(ctx: ProjectedGradientContext, costs: CostModel, u_stack, y):
    """Stack of per-agent projected gradients at each agent's own input copy."""
    u_stack = linalg.as_vector(u_stack, "u_stack")
    m = costs.m
    if u_stack.shape[0] != costs.N * m:
        raise DimensionError(
            f"stack length {u_stack.shape[0]} != N*m = {costs.N * m}"
        )
    out = np.empty_like(u_stack)
    for i, agent in enumerate(costs.agents):
        out[i * m : (i + 1) * m] = projected_gradient(
            ctx, agent, u_stack[i * m : (i + 1) * m], y
        )
    return out


def total_lipschitz(ctx: ProjectedGradientContext, costs: CostModel) -> float:
    """Aggregate Lipschitz constant ||Pi|| * sum_i L_i of the projected gradient."""
    return ctx.norm_Pi * float(sum(a.lipschitz for a in costs.agents))


def convexity_modulus(costs: CostModel) -> float:
    """Joint restricted-strong-convexity modulus of the summed cost."""
    return costs.modulus


def optimal_value(costs: CostModel) -> float:
    """Sum of per-agent unconstrained minima."""
    return costs.optimal_value()


def _minimize_agent(agent: AgentCost, m: int, p: int, tol: float = 1e-9) -> float:
    """Locate an unconstrained minimum of one agent cost by descent.

    Gradient descent with Armijo backtracking on the joint variable (u, y),
    run to gradient norm below ``tol``.  Deterministic: starts from zero.
    """
    z = np.zeros(m + p)

    def val(z):
        return agent.value(z[:m], z[m:])

    def grad(z):
        gu, gy = agent.gradient(z[:m], z[m:])
        return np.concatenate([gu, gy])

    f = val(z)
    step = 1.0 / max(agent.lipschitz, 1e-12)
    for _ in range(200_000):
        g = grad(z)
        gnorm = float(np.linalg.norm(g))
        if gnorm < tol:
            return float(f)
        t = step
        for _ in range(60):
            z_new = z - t * g
            f_new = val(z_new)
            if f_new <= f - 0.5 * t * gnorm * gnorm:
                break
            t *= 0.5
        else:
            return float(f)
        z, f = z_new, f_new
        if not np.isfinite(f):
            return float("-inf")
    raise DegenerateCostError("descent did not reach a stationary point")


def quadratic_cost_to_json(cost: QuadraticTrackingCost) -> str:
    return json.dumps(
        {
            "alpha": cost.alphas.tolist(),
            "y_ref": cost.y_ref.tolist(),
            "Q_out": "identity",
        }
    )


def quadratic_cost_from_json(text: str, m: int) -> QuadraticTrackingCost:
    payload = json.loads(text)
    if payload.get("Q_out", "identity") != "identity":
        raise ParameterError("only the identity output weight is supported")
    return QuadraticTrackingCost(
        alphas=payload["alpha"], y_ref=payload["y_ref"], m=m
    )
