"""Analytic certificates for the distributed feedback gradient loop.

Computes the stepsize ceiling (three bounds and their minimum), the uniform
gradient bound for zero-start runs, geometric rate and error-floor
constants, the storage-function diagnostics, and the optimizer used to
measure control error.  A chunked verifier replays closed-loop runs against
every certificate without retaining full trajectories.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import costs as costs_mod, linalg
from .controller import Selector, run_closed_loop, step_diagnostics
from .costs import CostModel, ProjectedGradientContext, QuadraticTrackingCost
from .errors import (
    CertificateError,
    DegenerateCostError,
    DimensionError,
    ParameterError,
)
from .network import MixingMatrix
from .plant import NetworkedPlant, SteadyStateMaps, validate

MODE_RESTRICTED = "restricted"
MODE_STRONG = "strongly-convex"
MODE_CONVERGENCE = "convergence-only"

#: Per-step slack allowed when checking storage monotonicity.
STORAGE_TOL = 1e-12


@dataclass
class CertificateReport:
    """All analytic constants for one plant/network/cost configuration.

    Stepsize fields are always populated; the error-bound fields (sigma,
    c1..c4, delta, error_floor) are populated by the full pipeline when the
    cost has positive curvature and an initial output is known.
    """

    L_h: float
    L_Phi: float
    P: np.ndarray
    Q_lyap: np.ndarray
    mu: float
    eta_1: float
    eta_2: float
    eta_3: float
    eta_bar: float
    beta: float
    lambda_min_W: float
    lambda1_P: float
    lambda_min_Q: float
    norm_AtP: float
    mode: str
    nu_Phi: float
    nu: float | None = None  # nu_Phi / N
    d: float = 0.5
    theta: float | None = None
    sigma: float | None = None
    eta: float | None = None
    c1: float | None = None
    c2: float | None = None
    c3: float | None = None
    c4: float | None = None
    delta: float | None = None
    error_floor: float | None = None

    def consensus_bound(self) -> float:
        if self.eta is None or self.sigma is None:
            raise CertificateError("consensus bound needs eta and sigma")
        return self.eta * self.sigma / (1.0 - self.beta)

    def to_json(self) -> str:
        payload = {}
        for key, value in self.__dict__.items():
            if isinstance(value, np.ndarray):
                payload[key] = value.tolist()
            else:
                payload[key] = value
        return json.dumps(payload, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "CertificateReport":
        payload = json.loads(text)
        payload["P"] = np.asarray(payload["P"], dtype=float)
        payload["Q_lyap"] = np.asarray(payload["Q_lyap"], dtype=float)
        return cls(**payload)

    def table(self) -> str:
        """Human-readable summary of the certificate constants."""
        rows = [
            ("mode", self.mode),
            ("beta", self.beta),
            ("lambda_min(W)", self.lambda_min_W),
            ("L_h", self.L_h),
            ("L_Phi", self.L_Phi),
            ("lambda_1(P)", self.lambda1_P),
            ("lambda_min(Q)", self.lambda_min_Q),
            ("||A^T P||", self.norm_AtP),
            ("mu", self.mu),
            ("eta_1", self.eta_1),
            ("eta_2", self.eta_2),
            ("eta_3", self.eta_3),
            ("eta_bar", self.eta_bar),
            ("nu_Phi", self.nu_Phi),
            ("nu (= nu_Phi/N)", self.nu),
            ("theta", self.theta),
            ("sigma", self.sigma),
            ("eta", self.eta),
            ("c1", self.c1),
            ("c2", self.c2),
            ("c3", self.c3),
            ("c4", self.c4),
            ("delta", self.delta),
            ("error_floor", self.error_floor),
        ]
        width = max(len(name) for name, _ in rows)
        lines = []
        for name, value in rows:
            if value is None:
                text = "-"
            elif isinstance(value, str):
                text = value
            else:
                text = f"{value:.12g}"
            lines.append(f"{name.ljust(width)}  {text}")
        return "\n".join(lines)


def _input_gain_norm(plant: NetworkedPlant) -> float:
    """L_h = ||(I - A)^-1 B S||: gain from stacked copies to the equilibrium state."""
    selector = Selector.from_dims(plant.input_dims)
    M = linalg.solve_linear(np.eye(plant.n) - plant.A, plant.B)
    return linalg.spectral_norm(M @ selector.matrix())


def stepsize_bound(
    plant: NetworkedPlant,
    maps: SteadyStateMaps,
    W: MixingMatrix,
    costs: CostModel,
    Q_lyap=None,
    ctx: ProjectedGradientContext | None = None,
) -> CertificateReport:
    """Compute the three stepsize ceilings and their minimum.

    The free constant mu starts at (1 + lambda_min(W))/4 and is halved until
    the coupled feasibility range holds at the resulting ceiling (the first
    try already succeeds whenever the ceiling is attained by the first
    bound, since that bound encodes the range itself).
    """
    validate(plant)
    if ctx is None:
        ctx = ProjectedGradientContext.build(maps.G, costs)
    L_Phi = ctx.L_total
    lam_min_W = W.lambda_min()
    if lam_min_W <= -1.0 + 1e-10:
        raise CertificateError(
            f"no feasible mu: lambda_min(W) = {lam_min_W:.12g} is too close to -1"
        )
    n = plant.n
    Q = np.eye(n) if Q_lyap is None else linalg.require_square(Q_lyap, "Q_lyap")
    P = linalg.solve_discrete_lyapunov(plant.A, Q)
    L_h = _input_gain_norm(plant)
    lam1_P = float(linalg.sym_eigenvalues(P)[0])
    lam_min_Q = float(linalg.sym_eigenvalues(Q)[-1])
    norm_AtP = linalg.spectral_norm(plant.A.T @ P)

    mu = (1.0 + lam_min_W) / 4.0
    for _ in range(200):
        eta_1 = (1.0 - 2.0 * mu + lam_min_W) / L_Phi
        eta_2 = mu / (lam1_P * L_h * L_h)
        eta_3 = (mu * lam_min_Q) / (
            L_Phi * L_Phi / 4.0
            + L_h * L_h * (norm_AtP * norm_AtP + lam_min_Q * lam1_P)
            + L_h * L_Phi * norm_AtP
        )
        eta_bar = min(eta_1, eta_2, eta_3)
        in_range = mu <= 1.0 - ((1.0 - lam_min_W) + eta_bar * L_Phi) / 2.0 + 1e-12
        if eta_bar > 0 and in_range:
            break
        mu *= 0.5
    else:
        raise CertificateError("could not find a feasible mu for the stepsize bounds")

    nu_Phi = costs_mod.convexity_modulus(costs)
    if nu_Phi > 0:
        mode = MODE_STRONG if getattr(costs, "strongly_convex", False) else MODE_RESTRICTED
    else:
        mode = MODE_CONVERGENCE
    return CertificateReport(
        L_h=L_h,
        L_Phi=L_Phi,
        P=P,
        Q_lyap=Q,
        mu=mu,
        eta_1=eta_1,
        eta_2=eta_2,
        eta_3=eta_3,
        eta_bar=eta_bar,
        beta=W.beta,
        lambda_min_W=lam_min_W,
        lambda1_P=lam1_P,
        lambda_min_Q=lam_min_Q,
        norm_AtP=norm_AtP,
        mode=mode,
        nu_Phi=nu_Phi,
        nu=(nu_Phi / costs.N) if nu_Phi > 0 else None,
    )


def sigma(
    ctx: ProjectedGradientContext,
    costs: CostModel,
    y0,
    u0_stack=None,
) -> float:
    """Uniform gradient bound sqrt(2 L (sum_i cost_i(0, y0) - optimum)).

    Valid only for zero initial controller copies; nonzero copies are
    rejected because the bound has no closed form in that case
    (convergence-only mode still applies).
    """
    y0 = linalg.as_vector(y0, "y0")
    if u0_stack is not None:
        u0 = np.asarray(u0_stack, dtype=float)
        if np.any(u0 != 0.0):
            raise ParameterError(
                "the gradient bound requires zero initial controller copies; "
                "use convergence-only mode for nonzero starts"
            )
    zero_u = np.zeros(costs.m)
    initial = float(sum(agent.value(zero_u, y0) for agent in costs.agents))
    gap = initial - costs_mod.optimal_value(costs)
    if gap < 0:
        gap = 0.0
    return float(np.sqrt(2.0 * ctx.L_total * gap))


def rate_constants(
    nu_Phi: float, N: int, L_Phi: float, mode: str = MODE_RESTRICTED, theta: float = 0.5
):
    """Geometric-rate pair (c1, c2) for the averaged iterate.

    Both curvature and smoothness are scaled to the per-agent average
    (nu_f = nu_Phi/N, L_f = L_Phi/N).  Restricted mode trades c1 against c2
    through theta in [0, 1]; strongly convex costs get the sharper pair.
    """
    if nu_Phi <= 0:
        raise CertificateError(
            "no rate constants for zero curvature (convergence-only mode)"
        )
    if L_Phi <= 0:
        raise ParameterError("L_Phi must be positive")
    nu_f = nu_Phi / N
    L_f = L_Phi / N
    if mode == MODE_STRONG:
        c1 = 1.0 / (nu_f + L_f)
        c2 = nu_f * L_f / (nu_f + L_f)
    elif mode == MODE_RESTRICTED:
        if not (0.0 <= theta <= 1.0):
            raise ParameterError(f"theta must be in [0, 1], got {theta}")
        c1 = theta / L_f
        c2 = (1.0 - theta) * nu_f
    else:
        raise ParameterError(f"unknown mode {mode!r}")
    return float(c1), float(c2)


def error_constants(
    eta: float,
    c1: float,
    c2: float,
    L_Phi: float,
    sigma_value: float,
    beta: float,
    delta: float | None = None,
):
    """Contraction factor c3, noise gain c4, and total predicted error floor.

    With the default delta = c2 / (2 (1 - eta c2)) the contraction is
    exactly c3 = sqrt(1 - eta c2 / 2) and the floor is O(eta / (1 - beta)).
    """
    if eta > c1:
        raise CertificateError(
            f"stepsize {eta:g} exceeds the rate ceiling c1 = {c1:g}"
        )
    if eta <= 0:
        raise ParameterError("eta must be positive for the error constants")
    if eta * c2 >= 1.0:
        raise CertificateError(f"eta*c2 = {eta * c2:g} must be < 1")
    if delta is None:
        delta = c2 / (2.0 * (1.0 - eta * c2))
        c3_sq = 1.0 - eta * c2 / 2.0
    else:
        if delta <= 0:
            raise ParameterError("delta must be positive")
        c3_sq = 1.0 - eta * c2 + eta * delta - eta * eta * delta * c2
    if not (0.0 < c3_sq < 1.0):
        raise CertificateError(
            f"contraction failed: c3^2 = {c3_sq:g} (delta={delta:g}, eta={eta:g})"
        )
    c3 = float(np.sqrt(c3_sq))
    c4 = float(
        np.sqrt(eta**3 * (eta + 1.0 / delta)) * L_Phi * sigma_value / (1.0 - beta)
    )
    floor = c4 / np.sqrt(1.0 - c3_sq) + eta * sigma_value / (1.0 - beta)
    return c3, c4, float(floor), float(delta)


def optimizer(
    plant: NetworkedPlant,
    maps: SteadyStateMaps,
    costs: CostModel,
    q,
):
    """Optimal steady-state input and the equilibrium state it induces.

    Quadratic tracking costs are solved in closed form from the normal
    equations; generic smooth costs run the centralized iteration with
    exact steady-state feedback to a 1e-9 stationarity residual.  The
    returned input is verified stationary for the reduced problem.
    """
    q = np.asarray(q, dtype=float).reshape(-1)
    G, H = maps.G, maps.H
    hq = H @ q
    if isinstance(costs, QuadraticTrackingCost):
        N = costs.N
        normal = float(costs.alphas.sum()) * np.eye(costs.m) + N * (G.T @ G)
        rhs = N * (G.T @ (costs.y_ref - hq))
        try:
            u_star = linalg.solve_linear(normal, rhs)
        except linalg.SingularMatrixError as exc:  # pragma: no cover - guarded by alpha > 0
            raise DegenerateCostError(f"normal matrix is singular: {exc}") from exc
        tol = 1e-10 * (1.0 + float(np.linalg.norm(rhs)))
    else:
        ctx = ProjectedGradientContext.build(G, costs)
        u_star = _descend_reduced(ctx, costs, hq)
        tol = 1e-9 * (1.0 + float(np.linalg.norm(u_star)))
    ctx = ProjectedGradientContext.build(G, costs)
    y_star = G @ u_star + hq
    gu, gy = costs.total_gradient(u_star, y_star)
    residual = float(np.linalg.norm(gu + G.T @ gy))
    if residual > tol:
        raise CertificateError(
            f"optimizer stationarity residual too large: {residual:.3e}"
        )
    x_star = linalg.solve_linear(
        np.eye(plant.n) - plant.A, plant.B @ u_star + plant.E @ q
    )
    return u_star, x_star


def _descend_reduced(ctx, costs, hq, tol: float = 1e-9, max_iter: int = 500_000):
    """Gradient descent with exact steady-state feedback, to stationarity."""
    u = np.zeros(costs.m)

    def grad(u):
        y = ctx.G @ u + hq
        gu, gy = costs.total_gradient(u, y)
        return gu + ctx.G.T @ gy

    def value(u):
        return costs.total_value(u, ctx.G @ u + hq)

    f = value(u)
    base = 1.0 / max(ctx.L_total, 1e-12)
    for _ in range(max_iter):
        g = grad(u)
        gnorm = float(np.linalg.norm(g))
        if gnorm < tol:
            return u
        t = base
        for _ in range(60):
            u_new = u - t * g
            f_new = value(u_new)
            if f_new <= f - 0.5 * t * gnorm * gnorm:
                break
            t *= 0.5
        u, f = u_new, f_new
    raise DegenerateCostError("reduced-problem descent did not reach stationarity")


def error_to_optimizer(trajectory_or_mats, u_star) -> np.ndarray:
    """Per-step mean distance of the agent copies to the optimal input."""
    u_star = linalg.as_vector(u_star, "u_star")
    if hasattr(trajectory_or_mats, "u_mats"):
        mats = trajectory_or_mats.u_mats()
    else:
        mats = np.asarray(trajectory_or_mats, dtype=float)
    if mats.ndim != 3 or mats.shape[2] != u_star.shape[0]:
        raise DimensionError("expected stacked copies of shape (T, N, m)")
    return np.linalg.norm(mats - u_star[None, None, :], axis=2).mean(axis=1)


@dataclass
class StorageDiagnostics:
    """Storage-function values along a trajectory with monotonicity flags."""

    d: float
    eta: float
    V_u: np.ndarray
    V_x: np.ndarray
    U: np.ndarray
    violations: np.ndarray  # step indices k with U[k+1] > U[k] + tol
    max_increase: float

    @property
    def monotone(self) -> bool:
        return self.violations.size == 0


class _StorageEvaluator:
    """Vectorized storage-function evaluation over recorded chunks.

    The controller potential is evaluated in its centered form
    0.5 (sum_i ||d_i||^2 - sum_ij w_ij d_i . d_j) with d_i the deviation
    from the stack average, which is algebraically identical to the
    pairwise form but free of the catastrophic cancellation that the
    1/eta scaling would otherwise amplify near consensus.
    """

    def __init__(self, plant, maps, W, costs, ctx, P, q, eta, d):
        if not (0.0 < d < 1.0):
            raise ParameterError(f"storage weight d must be in (0, 1), got {d}")
        if eta <= 0:
            raise ParameterError("storage diagnostics need a positive stepsize")
        self.W = W.W
        self.P = P
        self.G = ctx.G
        self.costs = costs
        self.eta = float(eta)
        self.d = float(d)
        q = np.asarray(q, dtype=float).reshape(-1)
        ImA = np.eye(plant.n) - plant.A
        self.IAB = linalg.solve_linear(ImA, plant.B)  # (I-A)^-1 B
        self.hq_state = linalg.solve_linear(ImA, plant.E @ q)
        self.hq_out = maps.H @ q
        self.owner = Selector.from_dims(plant.input_dims).owner
        self.m = plant.m

    def cost_sum(self, U_mats):
        """sum_i cost_i(u_i, G u_i + Hq) per step."""
        T, N, m = U_mats.shape
        if isinstance(self.costs, QuadraticTrackingCost):
            V = np.matmul(U_mats, self.G.T) + self.hq_out[None, None, :]
            dy = V - self.costs.y_ref[None, None, :]
            return 0.5 * (
                (self.costs.alphas[None, :] * (U_mats**2).sum(axis=2)).sum(axis=1)
                + (dy**2).sum(axis=(1, 2))
            )
        out = np.empty(T)
        for t in range(T):
            total = 0.0
            for i, agent in enumerate(self.costs.agents):
                u_i = U_mats[t, i]
                total += agent.value(u_i, self.G @ u_i + self.hq_out)
            out[t] = total
        return out

    def values(self, XS, U_mats):
        """Return (V_u, V_x, U) arrays for the recorded states."""
        avg = U_mats.mean(axis=1)
        D = U_mats - avg[:, None, :]
        t1 = (D * D).sum(axis=(1, 2))
        WD = np.matmul(self.W, D)
        t2 = (D * WD).sum(axis=(1, 2))
        spread = 0.5 * (t1 - t2)  # 0.5 sum||u_i||^2 - 0.5 sum w_ij u_i.u_j
        phis = self.cost_sum(U_mats)
        V_u = spread + self.eta * phis
        su = U_mats[:, self.owner, np.arange(self.m)]
        xt = XS - su @ self.IAB.T - self.hq_state[None, :]
        V_x = (xt * (xt @ self.P)).sum(axis=1)
        U = self.d * (spread / self.eta + phis) + (1.0 - self.d) * V_x
        return V_u, V_x, U


def storage_diagnostics(
    trajectory,
    plant: NetworkedPlant,
    maps: SteadyStateMaps,
    W: MixingMatrix,
    costs: CostModel,
    ctx: ProjectedGradientContext,
    report: CertificateReport,
    d: float = 0.5,
) -> StorageDiagnostics:
    """Evaluate the storage function along a recorded trajectory.

    Flags every step where the storage value increases by more than the
    monotonicity slack.  Requires the Lyapunov matrix from a prior
    stepsize certificate.
    """
    if report is None or report.P is None:
        raise CertificateError(
            "storage diagnostics need the Lyapunov matrix; compute the stepsize bound first"
        )
    ev = _StorageEvaluator(
        plant, maps, W, costs, ctx, report.P, trajectory.q, trajectory.eta, d
    )
    V_u, V_x, U = ev.values(trajectory.xs, trajectory.u_mats())
    diff = np.diff(U)
    violations = np.nonzero(diff > STORAGE_TOL)[0]
    max_increase = float(diff.max()) if diff.size else 0.0
    return StorageDiagnostics(
        d=d, eta=trajectory.eta, V_u=V_u, V_x=V_x, U=U,
        violations=violations, max_increase=max_increase,
    )


def optimal_storage_weight(report: CertificateReport) -> float:
    """Storage weight maximizing the second decrease bound.

    Equal to sqrt(b) / (sqrt(a) + sqrt(b)) with a = L^2/4 and b = L_h^2 rho,
    rho = ||A^T P||^2 + lambda_min(Q) lambda_1(P); this is the closed-form
    argmax of the d-dependent ceiling.
    """
    rho = report.norm_AtP**2 + report.lambda_min_Q * report.lambda1_P
    sqrt_a = report.L_Phi / 2.0
    sqrt_b = report.L_h * np.sqrt(rho)
    return float(sqrt_b / (sqrt_a + sqrt_b))


def stepsize_bound_for_weight(report: CertificateReport, d: float):
    """The two d-dependent decrease ceilings evaluated at an arbitrary weight."""
    if not (0.0 < d < 1.0):
        raise ParameterError(f"storage weight d must be in (0, 1), got {d}")
    rho = report.norm_AtP**2 + report.lambda_min_Q * report.lambda1_P
    bar1 = (d * report.mu) / ((1.0 - d) * report.lambda1_P * report.L_h**2)
    denom = (
        d * d * report.L_Phi**2 / 4.0
        + (1.0 - d) ** 2 * report.L_h**2 * rho
        + d * (1.0 - d) * report.L_h * report.L_Phi * report.norm_AtP
    )
    bar2 = d * (1.0 - d) * report.mu * report.lambda_min_Q / denom
    return bar1, bar2


def finalize_certificate(
    report: CertificateReport,
    ctx: ProjectedGradientContext,
    costs: CostModel,
    y0,
    eta: float | None = None,
    theta: float = 0.5,
    delta: float | None = None,
) -> CertificateReport:
    """Populate the error-bound fields of a stepsize certificate.

    ``y0`` is the output measured at the zero-start initial condition.  When
    ``eta`` is omitted the largest certified stepsize min(eta_bar, c1) is
    used.  Convergence-only costs keep the error fields empty.
    """
    report.sigma = sigma(ctx, costs, y0)
    if report.mode == MODE_CONVERGENCE:
        report.eta = eta if eta is not None else report.eta_bar
        return report
    report.theta = theta if report.mode == MODE_RESTRICTED else None
    c1, c2 = rate_constants(
        report.nu_Phi, costs.N, report.L_Phi, mode=report.mode, theta=theta
    )
    report.c1, report.c2 = c1, c2
    if eta is None:
        eta = min(report.eta_bar, c1)
    report.eta = float(eta)
    if eta <= c1 and eta > 0:
        c3, c4, floor, delta_used = error_constants(
            eta, c1, c2, report.L_Phi, report.sigma, report.beta, delta
        )
        report.c3, report.c4 = c3, c4
        report.delta = delta_used
        report.error_floor = floor
    return report


@dataclass
class RunCheck:
    """Certificate-vs-trajectory comparison from a chunked closed-loop run."""

    eta: float
    steps_requested: int
    steps_done: int
    converged_at: int | None
    diverged_at: int | None
    max_gamma_norm: float
    gamma_bound: float
    gamma_violations: int
    max_consensus: float
    consensus_bound: float
    consensus_violations: int
    storage_violations: int
    max_storage_increase: float
    envelope_violations: int
    max_envelope_excess: float
    err0: float
    final_err: float
    plateau: float
    final_x: np.ndarray = field(repr=False, default=None)
    final_u_stack: np.ndarray = field(repr=False, default=None)
    samples: dict = field(repr=False, default_factory=dict)

    @property
    def all_bounds_hold(self) -> bool:
        return (
            self.diverged_at is None
            and self.gamma_violations == 0
            and self.consensus_violations == 0
            and self.storage_violations == 0
            and self.envelope_violations == 0
        )


def verify_closed_loop(
    plant: NetworkedPlant,
    maps: SteadyStateMaps,
    W: MixingMatrix,
    selector: Selector,
    costs: CostModel,
    ctx: ProjectedGradientContext,
    report: CertificateReport,
    q,
    x0,
    steps: int,
    *,
    eta: float | None = None,
    d: float = 0.5,
    du_tol: float = 0.0,
    stride: int | None = None,
    u_star=None,
    chunk_size: int = 16384,
) -> RunCheck:
    """Run the zero-start closed loop and check every certificate per step.

    Verifies, at every visited step: the gradient-norm bound, the consensus
    deviation bound, storage monotonicity, and (when the error constants
    and optimizer are available) the geometric error envelope.  Memory use
    is bounded by the chunk size; ``stride`` collects subsampled rows for
    CSV export.  The trailing 5% of the requested steps feed the plateau
    estimate.
    """
    if report.sigma is None:
        raise CertificateError("verification needs sigma; finalize the certificate first")
    eta = float(report.eta if eta is None else eta)
    if eta <= 0:
        raise ParameterError("verification needs a positive stepsize")
    sig = report.sigma
    cons_bound = eta * sig / (1.0 - report.beta)
    check_envelope = (
        u_star is not None
        and report.c3 is not None
        and report.c4 is not None
        and report.eta is not None
        and abs(eta - report.eta) <= 1e-15 * max(1.0, eta)
    )
    if check_envelope:
        floor = report.c4 / np.sqrt(1.0 - report.c3**2) + cons_bound
        log_c3 = np.log(report.c3)
    ev = _StorageEvaluator(plant, maps, W, costs, ctx, report.P, q, eta, d)

    state = {
        "max_gamma": 0.0, "gamma_viol": 0,
        "max_cons": 0.0, "cons_viol": 0,
        "storage_viol": 0, "max_storage_inc": -np.inf, "prev_U": None,
        "env_viol": 0, "max_env_excess": -np.inf,
        "err0": np.nan, "final_err": np.nan,
        "plateau_sum": 0.0, "plateau_count": 0,
    }
    samples = {k: [] for k in ("k", "y", "applied", "consensus", "grad_norm", "storage", "err")}
    window_start = int(np.floor(0.95 * steps))

    def consume(k0, XS, US, YS):
        T = XS.shape[0]
        ks = np.arange(k0, k0 + T)
        gnorms, cons, _ = step_diagnostics(ctx, costs, US, YS)
        _, _, U_store = ev.values(XS, US)
        state["max_gamma"] = max(state["max_gamma"], float(gnorms.max()))
        state["gamma_viol"] += int((gnorms > sig).sum())
        state["max_cons"] = max(state["max_cons"], float(cons.max()))
        state["cons_viol"] += int((cons > cons_bound).sum())
        if state["prev_U"] is not None:
            full = np.concatenate([[state["prev_U"]], U_store])
        else:
            full = U_store
        diff = np.diff(full)
        if diff.size:
            state["storage_viol"] += int((diff > STORAGE_TOL).sum())
            state["max_storage_inc"] = max(state["max_storage_inc"], float(diff.max()))
        state["prev_U"] = float(U_store[-1])
        if u_star is not None:
            errs = error_to_optimizer(US, u_star)
            if k0 == 0:
                state["err0"] = float(errs[0])
            state["final_err"] = float(errs[-1])
            in_window = ks >= window_start
            state["plateau_sum"] += float(errs[in_window].sum())
            state["plateau_count"] += int(in_window.sum())
            if check_envelope:
                envelope = state["err0"] * np.exp(log_c3 * ks) + floor
                excess = errs - envelope
                state["env_viol"] += int((excess > 0).sum())
                state["max_env_excess"] = max(state["max_env_excess"], float(excess.max()))
        else:
            errs = None
        if stride:
            keep = np.nonzero(ks % stride == 0)[0]
            if keep.size:
                samples["k"].append(ks[keep])
                samples["y"].append(YS[keep].copy())
                m = plant.m
                samples["applied"].append(
                    US[keep][:, selector.owner, np.arange(m)].copy()
                )
                samples["consensus"].append(cons[keep])
                samples["grad_norm"].append(gnorms[keep])
                samples["storage"].append(U_store[keep])
                if errs is not None:
                    samples["err"].append(errs[keep])

    outcome = run_closed_loop(
        plant, W, selector, costs, ctx, eta, q, x0,
        np.zeros(plant.m * costs.N), steps,
        chunk_size=chunk_size, du_tol=du_tol, consumer=consume,
    )
    packed = {
        key: (np.concatenate(chunks) if chunks else np.array([]))
        for key, chunks in samples.items()
    }
    plateau = (
        state["plateau_sum"] / state["plateau_count"]
        if state["plateau_count"]
        else np.nan
    )
    return RunCheck(
        eta=eta,
        steps_requested=steps,
        steps_done=outcome.steps_done,
        converged_at=outcome.converged_at,
        diverged_at=outcome.diverged_at,
        max_gamma_norm=state["max_gamma"],
        gamma_bound=sig,
        gamma_violations=state["gamma_viol"],
        max_consensus=state["max_cons"],
        consensus_bound=cons_bound,
        consensus_violations=state["cons_viol"],
        storage_violations=state["storage_viol"],
        max_storage_increase=(
            state["max_storage_inc"] if np.isfinite(state["max_storage_inc"]) else 0.0
        ),
        envelope_violations=state["env_viol"],
        max_envelope_excess=(
            state["max_env_excess"] if np.isfinite(state["max_env_excess"]) else 0.0
        ),
        err0=state["err0"],
        final_err=state["final_err"],
        plateau=plateau,
        final_x=outcome.final_x,
        final_u_stack=outcome.final_u_stack,
        samples=packed,
    )
