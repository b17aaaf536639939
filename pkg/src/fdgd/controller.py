"""Distributed feedback gradient controller and the closed-loop simulation.

Each agent keeps a full local copy of the input vector and updates it with
a mixing-weighted average of its neighbors' copies minus a stepsize times
the measured projected gradient of its own cost.  Only the agent's own
block of its own copy actuates the plant.

Update ordering within one step is fixed: measure y(k) from (x(k), u(k)),
update the controller, then advance the plant, all with step-k quantities.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _fast, costs as costs_mod, linalg, network
from .costs import CostModel, ProjectedGradientContext, QuadraticTrackingCost
from .errors import DimensionError, DivergenceError, ParameterError
from .network import MixingMatrix, kron_apply
from .plant import NetworkedPlant, validate

#: Any state entry beyond this magnitude aborts a run as divergent.
DIVERGENCE_LIMIT = 1e12


@dataclass(frozen=True)
class Selector:
    """Extractor of each agent's own block from its own input copy.

    Row l of the (m x mN) selector matrix has a single 1 picking component
    l of the copy held by the agent that owns component l, so that
    S (1_N kron v) = v for any v.
    """

    input_dims: tuple
    owner: np.ndarray  # owner[l] = agent holding global input component l

    @classmethod
    def from_dims(cls, input_dims) -> "Selector":
        input_dims = tuple(int(d) for d in input_dims)
        owner = np.concatenate(
            [np.full(d, i, dtype=np.int64) for i, d in enumerate(input_dims)]
        )
        return cls(input_dims=input_dims, owner=owner)

    @property
    def N(self) -> int:
        return len(self.input_dims)

    @property
    def m(self) -> int:
        return int(self.owner.shape[0])

    def apply(self, u_stack) -> np.ndarray:
        """S u_stack: agent i's own block of its own copy, stacked."""
        u = np.asarray(u_stack, dtype=float)
        if u.shape[0] != self.N * self.m:
            raise DimensionError(
                f"stack length {u.shape[0]} != N*m = {self.N * self.m}"
            )
        return u.reshape(self.N, self.m)[self.owner, np.arange(self.m)]

    def matrix(self) -> np.ndarray:
        """Materialized m x (mN) selector (used by norm computations only)."""
        m, N = self.m, self.N
        S = np.zeros((m, m * N))
        for l in range(m):
            S[l, self.owner[l] * m + l] = 1.0
        return S


@dataclass(frozen=True)
class ControllerState:
    """Stacked local input copies at step ``k``."""

    u_stack: np.ndarray
    k: int = 0

    def __post_init__(self):
        object.__setattr__(self, "u_stack", linalg.as_vector(self.u_stack, "u_stack"))


def fdgd_step(
    state: ControllerState,
    W: MixingMatrix,
    ctx: ProjectedGradientContext,
    costs: CostModel,
    y,
    eta: float,
) -> ControllerState:
    """One distributed update: consensus average minus a measured gradient step.

    eta = 0 is allowed and reduces to pure consensus.
    """
    if not np.isfinite(eta) or eta < 0:
        raise ParameterError(f"stepsize must be >= 0, got {eta}")
    mixed = kron_apply(W.W, state.u_stack, costs.m)
    gam = costs_mod.gradient_stack(ctx, costs, state.u_stack, y)
    return ControllerState(u_stack=mixed - eta * gam, k=state.k + 1)


def centralized_step(u, ctx: ProjectedGradientContext, costs: CostModel, y, eta: float):
    """Centralized baseline: u - eta * (grad_u + G^T grad_y) of the summed cost."""
    if not np.isfinite(eta) or eta < 0:
        raise ParameterError(f"stepsize must be >= 0, got {eta}")
    u = linalg.as_vector(u, "u")
    g = np.zeros(costs.m)
    for agent in costs.agents:
        g = g + costs_mod.projected_gradient(ctx, agent, u, y)
    return u - eta * g


def apply_input(state: ControllerState, selector: Selector) -> np.ndarray:
    """Input actually applied to the plant: S u_stack."""
    return selector.apply(state.u_stack)


def average_and_consensus(u_stack, m: int):
    """Blockwise average and the worst deviation of any copy from it."""
    u = linalg.as_vector(u_stack, "u_stack")
    if u.shape[0] % m != 0:
        raise DimensionError(f"stack length {u.shape[0]} not a multiple of m={m}")
    mats = u.reshape(-1, m)
    avg = mats.mean(axis=0)
    err = float(np.linalg.norm(mats - avg[None, :], axis=1).max())
    return avg, err


@dataclass
class RunOutcome:
    """Terminal information from a chunked closed-loop run."""

    steps_done: int
    final_x: np.ndarray
    final_u_stack: np.ndarray
    diverged_at: int | None = None
    converged_at: int | None = None


@dataclass
class ClosedLoopTrajectory:
    """Time-indexed record of a closed-loop run.

    Row k holds the state visited at step k together with the output
    measured there and derived per-step diagnostics.  ``final_x`` and
    ``final_u_stack`` hold the state reached after the last recorded step.
    """

    eta: float
    q: np.ndarray
    input_dims: tuple
    xs: np.ndarray  # (T, n)
    u_stacks: np.ndarray  # (T, m*N)
    ys: np.ndarray  # (T, p)
    applied: np.ndarray  # (T, m)
    averages: np.ndarray  # (T, m)
    consensus_errors: np.ndarray  # (T,)
    gamma_norms: np.ndarray  # (T,)
    final_x: np.ndarray
    final_u_stack: np.ndarray
    diverged_at: int | None = None
    converged_at: int | None = None

    @property
    def steps(self) -> int:
        return self.xs.shape[0]

    @property
    def N(self) -> int:
        return len(self.input_dims)

    @property
    def m(self) -> int:
        return int(sum(self.input_dims))

    def u_mats(self) -> np.ndarray:
        return self.u_stacks.reshape(self.steps, self.N, self.m)


def _prepare_run(plant, W, selector, costs, ctx, eta, q, x0, u0_stack, steps):
    if not np.isfinite(eta) or eta < 0:
        raise ParameterError(f"stepsize must be >= 0, got {eta}")
    if steps < 0:
        raise ParameterError("steps must be >= 0")
    validate(plant)
    q = np.asarray(q, dtype=float).reshape(-1)
    if q.shape[0] != plant.r:
        raise DimensionError(f"q has length {q.shape[0]}, expected {plant.r}")
    x = np.array(x0, dtype=float).reshape(-1).copy()
    if x.shape[0] != plant.n:
        raise DimensionError(f"x0 has length {x.shape[0]}, expected {plant.n}")
    u = np.array(u0_stack, dtype=float).reshape(-1).copy()
    if u.shape[0] != plant.m * costs.N:
        raise DimensionError(
            f"u0_stack has length {u.shape[0]}, expected {plant.m * costs.N}"
        )
    if selector.input_dims != plant.input_dims:
        raise DimensionError("selector partition does not match the plant")
    if W.N != costs.N:
        raise DimensionError("mixing matrix size does not match the cost model")
    return q, x, u


def run_closed_loop(
    plant: NetworkedPlant,
    W: MixingMatrix,
    selector: Selector,
    costs: CostModel,
    ctx: ProjectedGradientContext,
    eta: float,
    q,
    x0,
    u0_stack,
    steps: int,
    *,
    chunk_size: int = 16384,
    du_tol: float = 0.0,
    consumer=None,
    force_generic: bool = False,
) -> RunOutcome:
    """Drive the interconnection for ``steps`` steps in record-and-consume chunks.

    ``consumer(k0, XS, US, YS)`` receives views of the states visited in each
    chunk (valid only during the call).  Set ``du_tol`` > 0 to stop early once
    the controller update norm falls below it.  Divergence does not raise
    here; it is reported through the outcome.
    """
    q, x, u = _prepare_run(plant, W, selector, costs, ctx, eta, q, x0, u0_stack, steps)
    N, m, n, p = costs.N, plant.m, plant.n, plant.p
    U = u.reshape(N, m).copy()
    eqc = plant.E @ q
    has_D = bool(np.any(plant.D != 0.0))
    fast = isinstance(costs, QuadraticTrackingCost) and not force_generic

    K = max(1, min(chunk_size, steps)) if steps > 0 else 1
    XS = np.empty((K, n))
    US = np.empty((K, N, m))
    YS = np.empty((K, p))
    Gt = np.ascontiguousarray(ctx.G.T)

    done_total = 0
    diverged_at = None
    converged_at = None
    remaining = steps
    while remaining > 0:
        k = min(K, remaining)
        if fast:
            status, done = _fast.quad_chunk(
                x, U, plant.A, plant.B, plant.C, plant.D, has_D, Gt,
                costs.y_ref, W.W, costs.alphas, selector.owner, eqc, eta,
                k, XS, US, YS, DIVERGENCE_LIMIT, du_tol,
            )
        else:
            status, done = _generic_chunk(
                x, U, plant, selector, costs, ctx, W, eqc, has_D, eta,
                k, XS, US, YS, du_tol,
            )
        if consumer is not None and done > 0:
            consumer(done_total, XS[:done], US[:done], YS[:done])
        done_total += done
        remaining -= done
        if status == _fast.DIVERGED:
            diverged_at = done_total
            break
        if status == _fast.CONVERGED:
            converged_at = done_total
            break
    return RunOutcome(
        steps_done=done_total,
        final_x=x,
        final_u_stack=U.reshape(-1),
        diverged_at=diverged_at,
        converged_at=converged_at,
    )


def _generic_chunk(x, U, plant, selector, costs, ctx, W, eqc, has_D, eta, K, XS, US, YS, du_tol):
    """Reference step loop for arbitrary cost models; mirrors the fast kernel."""
    m = plant.m
    for t in range(K):
        su = U[selector.owner, np.arange(m)]
        y = plant.C @ x
        if has_D:
            y = y + plant.D @ su
        XS[t] = x
        US[t] = U
        YS[t] = y
        gam = costs_mod.gradient_stack(ctx, costs, U.reshape(-1), y)
        U_new = (W.W @ U) - eta * gam.reshape(U.shape)
        x_new = plant.A @ x + plant.B @ su + eqc
        du2 = float(((U_new - U) ** 2).sum())
        x[:] = x_new
        U[:] = U_new
        if not (
            np.all(np.abs(x) <= DIVERGENCE_LIMIT)
            and np.all(np.abs(U) <= DIVERGENCE_LIMIT)
        ):
            return _fast.DIVERGED, t + 1
        if du_tol > 0.0 and du2 < du_tol * du_tol:
            return _fast.CONVERGED, t + 1
    return _fast.RAN_FULL, K


def step_diagnostics(ctx: ProjectedGradientContext, costs: CostModel, U_mats, YS):
    """Per-step gradient norms, consensus errors, and stack averages.

    ``U_mats`` has shape (T, N, m) and ``YS`` shape (T, p).  Uses the
    vectorized gradient for the quadratic cost, an agent loop otherwise.
    """
    T = U_mats.shape[0]
    if isinstance(costs, QuadraticTrackingCost):
        gams = costs.gradient_stack_batch(ctx.G, U_mats, YS)
        gamma_norms = np.sqrt((gams * gams).sum(axis=(1, 2)))
    else:
        gamma_norms = np.empty(T)
        for t in range(T):
            g = costs_mod.gradient_stack(ctx, costs, U_mats[t].reshape(-1), YS[t])
            gamma_norms[t] = np.linalg.norm(g)
    averages = U_mats.mean(axis=1)
    devs = np.linalg.norm(U_mats - averages[:, None, :], axis=2)
    consensus = devs.max(axis=1) if U_mats.shape[1] > 0 else np.zeros(T)
    return gamma_norms, consensus, averages


def simulate(
    plant: NetworkedPlant,
    W: MixingMatrix,
    selector: Selector,
    costs: CostModel,
    ctx: ProjectedGradientContext,
    eta: float,
    q,
    x0,
    u0_stack,
    steps: int,
    *,
    du_tol: float = 0.0,
    force_generic: bool = False,
    warn=None,
) -> ClosedLoopTrajectory:
    """Simulate the full interconnection, recording every step.

    Raises :class:`DivergenceError` (with the partial trajectory attached)
    when iterates blow past the divergence limit.  For runs beyond a few
    hundred thousand steps prefer :func:`run_closed_loop` with a consumer.
    """
    if np.any(np.asarray(u0_stack, dtype=float) != 0.0) and warn is not None:
        warn(
            "nonzero initial controller copies: gradient-bound diagnostics "
            "based on the zero-start certificate do not apply"
        )
    chunks_x, chunks_u, chunks_y = [], [], []

    def keep(k0, XS, US, YS):
        chunks_x.append(XS.copy())
        chunks_u.append(US.copy())
        chunks_y.append(YS.copy())

    outcome = run_closed_loop(
        plant, W, selector, costs, ctx, eta, q, x0, u0_stack, steps,
        du_tol=du_tol, consumer=keep, force_generic=force_generic,
    )
    T = outcome.steps_done
    n, p, N, m = plant.n, plant.p, costs.N, plant.m
    xs = np.concatenate(chunks_x) if chunks_x else np.zeros((0, n))
    U_mats = np.concatenate(chunks_u) if chunks_u else np.zeros((0, N, m))
    ys = np.concatenate(chunks_y) if chunks_y else np.zeros((0, p))
    gamma_norms, consensus, averages = step_diagnostics(ctx, costs, U_mats, ys)
    applied = (
        U_mats[:, selector.owner, np.arange(m)] if T else np.zeros((0, m))
    )
    traj = ClosedLoopTrajectory(
        eta=float(eta),
        q=np.asarray(q, dtype=float).reshape(-1),
        input_dims=plant.input_dims,
        xs=xs,
        u_stacks=U_mats.reshape(T, N * m),
        ys=ys,
        applied=applied,
        averages=averages,
        consensus_errors=consensus,
        gamma_norms=gamma_norms,
        final_x=outcome.final_x,
        final_u_stack=outcome.final_u_stack,
        diverged_at=outcome.diverged_at,
        converged_at=outcome.converged_at,
    )
    if outcome.diverged_at is not None:
        err = DivergenceError(
            f"closed loop diverged at step {outcome.diverged_at} "
            f"(stepsize {eta:g} too large)",
            step=outcome.diverged_at,
        )
        err.trajectory = traj
        raise err
    return traj


def simulate_centralized(
    plant: NetworkedPlant,
    costs: CostModel,
    ctx: ProjectedGradientContext,
    eta: float,
    q,
    x0,
    u0,
    steps: int,
) -> ClosedLoopTrajectory:
    """Closed loop under the centralized gradient controller (baseline)."""
    validate(plant)
    q = np.asarray(q, dtype=float).reshape(-1)
    x = np.array(x0, dtype=float).reshape(-1).copy()
    u = np.array(u0, dtype=float).reshape(-1).copy()
    n, m, p = plant.n, plant.m, plant.p
    eqc = plant.E @ q
    has_D = bool(np.any(plant.D != 0.0))
    xs = np.empty((steps, n))
    us = np.empty((steps, m))
    ys = np.empty((steps, p))
    diverged_at = None
    T = steps
    for t in range(steps):
        y = plant.C @ x
        if has_D:
            y = y + plant.D @ u
        xs[t], us[t], ys[t] = x, u, y
        u_new = centralized_step(u, ctx, costs, y, eta)
        x_new = plant.A @ x + plant.B @ u + eqc
        x, u = x_new, u_new
        if not (
            np.all(np.abs(x) <= DIVERGENCE_LIMIT)
            and np.all(np.abs(u) <= DIVERGENCE_LIMIT)
        ):
            diverged_at = t + 1
            T = t + 1
            break
    xs, us, ys = xs[:T], us[:T], ys[:T]
    gamma_norms = np.empty(T)
    for t in range(T):
        g = np.zeros(m)
        for agent in costs.agents:
            g = g + costs_mod.projected_gradient(ctx, agent, us[t], ys[t])
        gamma_norms[t] = np.linalg.norm(g)
    traj = ClosedLoopTrajectory(
        eta=float(eta),
        q=q,
        input_dims=plant.input_dims,
        xs=xs,
        u_stacks=us.copy(),
        ys=ys,
        applied=us.copy(),
        averages=us.copy(),
        consensus_errors=np.zeros(T),
        gamma_norms=gamma_norms,
        final_x=x,
        final_u_stack=u,
        diverged_at=diverged_at,
        converged_at=None,
    )
    if diverged_at is not None:
        err = DivergenceError(
            f"centralized loop diverged at step {diverged_at}", step=diverged_at
        )
        err.trajectory = traj
        raise err
    return traj


def format_float(v: float) -> str:
    """17-significant-digit decimal used by all CSV artifacts (exact round trip)."""
    return format(float(v), ".17g")


def trajectory_to_csv(
    traj: ClosedLoopTrajectory,
    path,
    storage=None,
    err_to_opt=None,
    stride: int = 1,
    ks=None,
) -> None:
    """Write the trajectory as CSV with the standard diagnostic columns.

    Columns: k, y_1..y_p, input_1..input_m, consensus_err, grad_norm,
    storage_U, err_to_opt.  ``stride`` subsamples rows (row 0 always kept);
    ``ks`` overrides the recorded step indices (used by strided runners).
    """
    T = traj.steps
    p = traj.ys.shape[1] if T else (traj.ys.shape[1] if traj.ys.ndim == 2 else 0)
    m = traj.applied.shape[1] if traj.applied.ndim == 2 else 0
    if ks is None:
        ks = np.arange(T)
    rows = range(0, T, max(1, int(stride)))
    header = (
        ["k"]
        + [f"y_{j + 1}" for j in range(p)]
        + [f"input_{j + 1}" for j in range(m)]
        + ["consensus_err", "grad_norm", "storage_U", "err_to_opt"]
    )
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for t in rows:
            vals = [str(int(ks[t]))]
            vals += [format_float(v) for v in traj.ys[t]]
            vals += [format_float(v) for v in traj.applied[t]]
            vals.append(format_float(traj.consensus_errors[t]))
            vals.append(format_float(traj.gamma_norms[t]))
            vals.append(format_float(storage[t]) if storage is not None else "nan")
            vals.append(
                format_float(err_to_opt[t]) if err_to_opt is not None else "nan"
            )
            fh.write(",".join(vals) + "\n")
