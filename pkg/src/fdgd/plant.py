"""Networked discrete-time LTI plant with steady-state input/disturbance maps.

The plant is a block-structured system of N subsystems

    x_i(k+1) = sum_j A_ij x_j(k) + B_i u_i(k) + E_i q_i,
    y(k)     = sum_i C_i x_i(k) + D_i u_i(k),

held in stacked form.  Each local input actuates only its own subsystem,
so the stacked B is block-diagonal with respect to the agent partition.
Instances are immutable snapshots; stepping returns new state objects.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import linalg
from .errors import DimensionError, StabilityError


def _blocks(dims):
    """Cumulative (start, stop) offsets of a block partition."""
    off = np.concatenate([[0], np.cumsum(dims)])
    return [(int(off[i]), int(off[i + 1])) for i in range(len(dims))]


@dataclass(frozen=True)
class PlantState:
    """Plant state snapshot at step ``k``."""

    x: np.ndarray
    k: int = 0

    def __post_init__(self):
        object.__setattr__(self, "x", linalg.as_vector(self.x, "x"))


@dataclass(frozen=True)
class ValidationReport:
    """Outcome of the structural/analytic plant checks."""

    stable: bool
    spectral_radius: float
    controllable: bool
    observable: bool
    warnings: tuple = ()


@dataclass(frozen=True)
class SteadyStateMaps:
    """DC gains from input and disturbance to output: y_inf = G u + H q."""

    G: np.ndarray
    H: np.ndarray


@dataclass(frozen=True)
class NetworkedPlant:
    """Stacked networked LTI plant with a consistent agent partition."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    E: np.ndarray
    state_dims: tuple
    input_dims: tuple
    disturbance_dims: tuple

    def __post_init__(self):
        object.__setattr__(self, "A", linalg.require_square(self.A, "A"))
        object.__setattr__(self, "B", linalg.as_matrix(self.B, "B"))
        object.__setattr__(self, "C", linalg.as_matrix(self.C, "C"))
        object.__setattr__(self, "D", linalg.as_matrix(self.D, "D"))
        object.__setattr__(self, "E", linalg.as_matrix(self.E, "E"))
        object.__setattr__(self, "state_dims", tuple(int(d) for d in self.state_dims))
        object.__setattr__(self, "input_dims", tuple(int(d) for d in self.input_dims))
        object.__setattr__(
            self, "disturbance_dims", tuple(int(d) for d in self.disturbance_dims)
        )
        if not (
            len(self.state_dims) == len(self.input_dims) == len(self.disturbance_dims)
        ):
            raise DimensionError("per-agent dimension lists must have equal length")
        if min(self.state_dims) < 1 or min(self.input_dims) < 1:
            raise DimensionError("state and input block sizes must be >= 1")
        if min(self.disturbance_dims) < 0:
            raise DimensionError("disturbance block sizes must be >= 0")
        n, m, r, p = self.n, self.m, self.r, self.p
        if self.A.shape != (n, n):
            raise DimensionError(f"A must be {n}x{n}, got {self.A.shape}")
        if self.B.shape != (n, m):
            raise DimensionError(f"B must be {n}x{m}, got {self.B.shape}")
        if self.C.shape != (p, n):
            raise DimensionError(f"C must be px{n}, got {self.C.shape}")
        if self.D.shape != (p, m):
            raise DimensionError(f"D must be {p}x{m}, got {self.D.shape}")
        if self.E.shape != (n, r):
            raise DimensionError(f"E must be {n}x{r}, got {self.E.shape}")
        self._check_block_diagonal_B()

    def _check_block_diagonal_B(self):
        # each u_i drives only subsystem i
        mask = np.ones_like(self.B, dtype=bool)
        for (r0, r1), (c0, c1) in zip(
            _blocks(self.state_dims), _blocks(self.input_dims)
        ):
            mask[r0:r1, c0:c1] = False
        if np.any(self.B[mask] != 0.0):
            raise DimensionError(
                "B must be block-diagonal with respect to the agent partition"
            )

    @property
    def N(self) -> int:
        return len(self.state_dims)

    @property
    def n(self) -> int:
        return int(sum(self.state_dims))

    @property
    def m(self) -> int:
        return int(sum(self.input_dims))

    @property
    def r(self) -> int:
        return int(sum(self.disturbance_dims))

    @property
    def p(self) -> int:
        return int(self.C.shape[0])


def validate(plant: NetworkedPlant) -> ValidationReport:
    """Check stability (hard gate) plus controllability/observability (warnings).

    An unstable ``A`` raises :class:`StabilityError`; rank deficiencies in the
    Kalman matrices only produce warnings since the convergence analysis uses
    stability alone.
    """
    stable, rho = linalg.is_schur(plant.A)
    if not stable:
        raise StabilityError(
            f"plant matrix A is not Schur stable (spectral radius {rho:.6g})",
            spectral_radius=rho,
        )
    n = plant.n
    ctrb = np.hstack([np.linalg.matrix_power(plant.A, k) @ plant.B for k in range(n)])
    obsv = np.vstack([plant.C @ np.linalg.matrix_power(plant.A, k) for k in range(n)])
    controllable = np.linalg.matrix_rank(ctrb, tol=1e-8) == n
    observable = np.linalg.matrix_rank(obsv, tol=1e-8) == n
    warnings = []
    if not controllable:
        warnings.append("plant is not controllable (Kalman rank deficient)")
    if not observable:
        warnings.append("plant is not observable (Kalman rank deficient)")
    return ValidationReport(
        stable=True,
        spectral_radius=rho,
        controllable=bool(controllable),
        observable=bool(observable),
        warnings=tuple(warnings),
    )


def steady_state_maps(plant: NetworkedPlant) -> SteadyStateMaps:
    """Compute the DC gains G = C (I-A)^-1 B + D and H = C (I-A)^-1 E.

    Solves against (I - A) columnwise rather than forming an inverse, and
    verifies the solve residuals to 1e-10 before returning.
    """
    validate(plant)
    ImA = np.eye(plant.n) - plant.A
    XB = linalg.solve_linear(ImA, plant.B)
    XE = linalg.solve_linear(ImA, plant.E) if plant.r > 0 else np.zeros((plant.n, 0))
    for X, M, name in ((XB, plant.B, "B"), (XE, plant.E, "E")):
        if M.size == 0:
            continue
        res = np.linalg.norm(ImA @ X - M)
        if res > 1e-10 * (1.0 + np.linalg.norm(M)):
            raise ValueError(f"steady-state solve residual too large for {name}: {res:.3e}")
    G = plant.C @ XB + plant.D
    H = plant.C @ XE
    return SteadyStateMaps(G=G, H=H)


def step(plant: NetworkedPlant, state: PlantState, u, q) -> PlantState:
    """Advance one step: x(k+1) = A x(k) + B u(k) + E q."""
    u = linalg.as_vector(u, "u")
    q = np.asarray(q, dtype=float).reshape(-1)
    if u.shape[0] != plant.m:
        raise DimensionError(f"u has length {u.shape[0]}, expected {plant.m}")
    if q.shape[0] != plant.r:
        raise DimensionError(f"q has length {q.shape[0]}, expected {plant.r}")
    x_next = plant.A @ state.x + plant.B @ u + plant.E @ q
    return PlantState(x=x_next, k=state.k + 1)


def output(plant: NetworkedPlant, state: PlantState, u) -> np.ndarray:
    """Measured global output y(k) = C x(k) + D u(k)."""
    u = linalg.as_vector(u, "u")
    if u.shape[0] != plant.m:
        raise DimensionError(f"u has length {u.shape[0]}, expected {plant.m}")
    return plant.C @ state.x + plant.D @ u


def equilibrium_shift(plant: NetworkedPlant, selector, u_stack, q) -> np.ndarray:
    """Equilibrium state h(u) = (I-A)^-1 (B S u_stack + E q).

    The closed-loop storage diagnostics measure the plant state relative to
    this input-dependent equilibrium.
    """
    u_stack = linalg.as_vector(u_stack, "u_stack")
    q = np.asarray(q, dtype=float).reshape(-1)
    applied = selector.apply(u_stack)
    rhs = plant.B @ applied + plant.E @ q
    return linalg.solve_linear(np.eye(plant.n) - plant.A, rhs)


def to_json(plant: NetworkedPlant) -> str:
    """Serialize the plant to JSON with exact-round-trip float encoding."""
    payload = {
        "A": plant.A.tolist(),
        "B": plant.B.tolist(),
        "C": plant.C.tolist(),
        "D": plant.D.tolist(),
        "E": plant.E.tolist(),
        "n_i": list(plant.state_dims),
        "m_i": list(plant.input_dims),
        "r_i": list(plant.disturbance_dims),
    }
    return json.dumps(payload)


def from_json(text: str) -> NetworkedPlant:
    """Inverse of :func:`to_json`; tolerates a missing ``r_i`` by assuming one block."""
    payload = json.loads(text)
    E = np.asarray(payload["E"], dtype=float)
    n_i = payload["n_i"]
    r_i = payload.get("r_i")
    if r_i is None:
        r_i = [E.shape[1]] + [0] * (len(n_i) - 1)
    return NetworkedPlant(
        A=np.asarray(payload["A"], dtype=float),
        B=np.asarray(payload["B"], dtype=float),
        C=np.asarray(payload["C"], dtype=float),
        D=np.asarray(payload["D"], dtype=float),
        E=E,
        state_dims=tuple(n_i),
        input_dims=tuple(payload["m_i"]),
        disturbance_dims=tuple(r_i),
    )
