"""Waypoint-to-control conversion via Tikhonov-regularized least squares.

A ground-truth waypoint sequence is turned into per-step (acceleration,
curvature) controls in two stages:

1. a decoupled linear stage: the longitudinal block fits accelerations to
   the speed profile implied by inter-waypoint arc lengths, the lateral
   block fits curvatures to the headings implied by waypoint displacement
   directions (using that same speed profile). Both blocks share a
   second-difference smoother scaled by ``lam``.
2. an optional Gauss-Newton stage that polishes the linear solution
   against the exact nonlinear rollout residual, keeping the same
   regularization term.

Curvature is unobservable while the vehicle is (nearly) stationary, so
those unknowns are anchored to zero in the linear stage; without the
anchors the normal matrix can lose rank when the vehicle stops inside the
horizon.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .errors import InvalidInput, SingularSystem
from .kinematics import ControlSequence, KinematicState, Trajectory, rollout_states

DEFAULT_KAPPA_MAX = 0.3
# Segments shorter than this carry the previous heading forward; the
# matching speed (length / 0.5 s) is where curvature anchoring kicks in.
MIN_HEADING_SEGMENT = 0.05


@dataclass(frozen=True)
class RidgeProblem:
    """``min ||matrix @ u - rhs||^2 + lam * ||regularizer @ u||^2``."""

    matrix: np.ndarray
    rhs: np.ndarray
    regularizer: np.ndarray
    lam: float
    degenerate: bool = False

    def __post_init__(self) -> None:
        a = np.asarray(self.matrix, dtype=float)
        b = np.asarray(self.rhs, dtype=float).reshape(-1)
        reg = np.asarray(self.regularizer, dtype=float)
        if a.ndim != 2 or reg.ndim != 2:
            raise InvalidInput("matrix and regularizer must be 2-D")
        if a.shape[1] != reg.shape[1]:
            raise InvalidInput(
                f"column mismatch: matrix has {a.shape[1]}, regularizer has {reg.shape[1]}"
            )
        if a.shape[0] != b.shape[0]:
            raise InvalidInput(f"matrix has {a.shape[0]} rows but rhs has {b.shape[0]}")
        if self.lam < 0 or not math.isfinite(self.lam):
            raise InvalidInput(f"lam must be a finite non-negative scalar, got {self.lam}")
        for name, arr in (("matrix", a), ("rhs", b), ("regularizer", reg)):
            if not np.all(np.isfinite(arr)):
                raise InvalidInput(f"{name} contains non-finite entries")
        object.__setattr__(self, "matrix", a)
        object.__setattr__(self, "rhs", b)
        object.__setattr__(self, "regularizer", reg)

    def objective(self, u: np.ndarray) -> float:
        """Evaluate the regularized objective at ``u``."""
        fit = self.matrix @ u - self.rhs
        reg = self.regularizer @ u
        return float(fit @ fit + self.lam * (reg @ reg))


@dataclass(frozen=True)
class FitResult:
    """Fitted controls plus round-trip reconstruction fidelity."""

    controls: ControlSequence
    rollout_rmse: float
    endpoint_error: float
    iterations: int
    converged: bool
    degenerate: bool = False


def second_difference(n: int) -> np.ndarray:
    """The (n-2) x n operator with stencil rows (..., 1, -2, 1, ...)."""
    if n < 3:
        raise InvalidInput(f"second difference needs n >= 3, got {n}")
    op = np.zeros((n - 2, n))
    for i in range(n - 2):
        op[i, i : i + 3] = (1.0, -2.0, 1.0)
    return op


def ridge_solve(problem: RidgeProblem) -> np.ndarray:
    """Solve the regularized normal equations with a Cholesky factorization."""
    a, b, reg = problem.matrix, problem.rhs, problem.regularizer
    normal = a.T @ a + problem.lam * (reg.T @ reg)
    rhs = a.T @ b
    try:
        factor = linalg.cho_factor(normal)
        u = linalg.cho_solve(factor, rhs)
    except linalg.LinAlgError as exc:
        raise SingularSystem(str(exc)) from exc
    if not np.all(np.isfinite(u)):
        raise SingularSystem("solution contains non-finite entries")
    return u


def _implied_profile(
    traj: Trajectory, init: KinematicState
) -> tuple[np.ndarray, np.ndarray]:
    """Speeds and headings the waypoints imply under the rollout scheme.

    Returns ``(speeds, headings)`` of length T each: ``speeds[t]`` is the
    speed used during step t (segment length over dt), ``headings[t]`` the
    direction of the step-t displacement, carried forward over segments
    shorter than ``MIN_HEADING_SEGMENT`` and unwrapped to stay continuous
    with the initial heading.
    """
    full = np.vstack((np.asarray(init.position, dtype=float), traj.points))
    deltas = np.diff(full, axis=0)
    lengths = np.hypot(deltas[:, 0], deltas[:, 1])
    speeds = lengths / traj.dt

    headings = np.empty(len(traj))
    prev = init.heading
    for t, (delta, length) in enumerate(zip(deltas, lengths)):
        if length >= MIN_HEADING_SEGMENT:
            raw = math.atan2(delta[1], delta[0])
            # unwrap against the previous heading so differences stay small
            prev = prev + math.remainder(raw - prev, 2.0 * math.pi)
        headings[t] = prev
    return speeds, headings


def build_linear_system(
    traj: Trajectory, init: KinematicState, lam: float
) -> RidgeProblem:
    """Assemble the decoupled longitudinal/lateral ridge problem.

    Unknowns are ``u = (accel_0..accel_{T-1}, kappa_0..kappa_{T-1})``.
    The last acceleration and curvature never influence the waypoints
    (their effect starts one step past the horizon), so they are pinned
    by the regularizer alone; ``lam`` must be positive for the system to
    be well posed.
    """
    n = len(traj)
    if n < 2:
        raise InvalidInput(f"need at least 2 waypoints to fit controls, got {n}")
    dt = traj.dt
    speeds, headings = _implied_profile(traj, init)
    degenerate = bool(np.all(speeds * dt < MIN_HEADING_SEGMENT) and init.speed < 0.1)

    # Longitudinal block: dt * sum(accel_j, j < t) = implied_speed_t - v0.
    a_lon = np.tril(np.full((n - 1, n - 1), dt))
    a_lon = np.hstack((a_lon, np.zeros((n - 1, 1))))
    b_lon = speeds[1:] - init.speed

    # Lateral block: dt * sum(speed_j * kappa_j, j < t) = heading_t - theta0.
    a_lat = np.tril(np.tile(speeds[: n - 1] * dt, (n - 1, 1)))
    a_lat = np.hstack((a_lat, np.zeros((n - 1, 1))))
    b_lat = headings[1:] - init.heading

    rows = []
    rhs = []
    for block, vec, offset in ((a_lon, b_lon, 0), (a_lat, b_lat, n)):
        padded = np.zeros((block.shape[0], 2 * n))
        padded[:, offset : offset + n] = block
        rows.append(padded)
        rhs.append(vec)

    # Curvature is unobservable at (near) standstill: anchor it to zero.
    anchor_idx = np.flatnonzero(speeds < 0.1)
    if anchor_idx.size:
        anchors = np.zeros((anchor_idx.size, 2 * n))
        anchors[np.arange(anchor_idx.size), n + anchor_idx] = 1.0
        rows.append(anchors)
        rhs.append(np.zeros(anchor_idx.size))

    if n >= 3:
        smoother = second_difference(n)
        reg = np.zeros((2 * (n - 2), 2 * n))
        reg[: n - 2, :n] = smoother
        reg[n - 2 :, n:] = smoother
    else:
        reg = np.zeros((0, 2 * n))

    return RidgeProblem(
        matrix=np.vstack(rows),
        rhs=np.concatenate(rhs),
        regularizer=reg,
        lam=lam,
        degenerate=degenerate,
    )


def _rollout_with_jacobian(
    u: np.ndarray, init: KinematicState, dt: float
) -> tuple[np.ndarray, np.ndarray]:
    """Rollout positions plus their Jacobian w.r.t. the stacked controls.

    Forward sensitivity propagation through the Euler steps; the speed
    clamp zeroes the corresponding sensitivities, matching the piecewise
    dynamics exactly away from the clamp boundary.
    """
    n = u.shape[0] // 2
    accels, kappas = u[:n], u[n:]
    positions = np.empty((n, 2))
    jac = np.empty((2 * n, 2 * n))

    x, y = init.position
    theta = init.heading
    v = init.speed
    sens = np.zeros((4, 2 * n))  # rows: d(x, y, theta, v)/du
    for t in range(n):
        c, s = math.cos(theta), math.sin(theta)
        sx = sens[0] + dt * (c * sens[3] - v * s * sens[2])
        sy = sens[1] + dt * (s * sens[3] + v * c * sens[2])
        x += v * c * dt
        y += v * s * dt
        positions[t] = (x, y)
        jac[2 * t] = sx
        jac[2 * t + 1] = sy

        stheta = sens[2] + dt * kappas[t] * sens[3]
        stheta[n + t] += dt * v
        theta += v * kappas[t] * dt

        v_next = v + accels[t] * dt
        if v_next < 0.0:
            v_next = 0.0
            sv = np.zeros(2 * n)
        else:
            sv = sens[3].copy()
            sv[t] += dt
        v = v_next
        sens = np.vstack((sx, sy, stheta, sv))
    return positions, jac


def _gauss_newton(
    traj: Trajectory,
    init: KinematicState,
    u0: np.ndarray,
    problem: RidgeProblem,
    max_iterations: int,
    step_tol: float,
) -> tuple[np.ndarray, int, bool]:
    """Polish ``u0`` on the exact rollout residual plus the Tikhonov term."""
    target = traj.points.ravel()
    reg = problem.regularizer
    sqrt_lam = math.sqrt(problem.lam)

    def objective(u: np.ndarray) -> float:
        positions, _, _, _ = rollout_states(
            ControlSequence(steps=u.reshape(2, -1).T, dt=traj.dt), init
        )
        r_fit = positions.ravel() - target
        r_reg = sqrt_lam * (reg @ u)
        return float(r_fit @ r_fit + r_reg @ r_reg)

    u = u0.copy()
    value = objective(u)
    converged = False
    iterations = 0
    for _ in range(max_iterations):
        positions, jac = _rollout_with_jacobian(u, init, traj.dt)
        residual = np.concatenate((positions.ravel() - target, sqrt_lam * (reg @ u)))
        jac_full = np.vstack((jac, sqrt_lam * reg))
        normal = jac_full.T @ jac_full
        gradient = jac_full.T @ residual
        # Escalating damping keeps the solve total when the clamp wipes out
        # whole blocks of the Jacobian (fully stopped vehicle).
        step = None
        damping = 0.0
        for _ in range(8):
            try:
                factor = linalg.cho_factor(normal + damping * np.eye(normal.shape[0]))
                step = linalg.cho_solve(factor, -gradient)
                break
            except linalg.LinAlgError:
                damping = max(damping * 100.0, 1e-10)
        if step is None or not np.all(np.isfinite(step)):
            break

        # Step halving: only accept iterates that do not increase the objective.
        scale = 1.0
        accepted = False
        while scale >= 2.0 ** -12:
            trial = u + scale * step
            trial_value = objective(trial)
            if trial_value <= value:
                accepted = True
                break
            scale *= 0.5
        if not accepted:
            converged = True
            break
        u = trial
        value = trial_value
        iterations += 1
        if np.linalg.norm(scale * step) < step_tol:
            converged = True
            break
    return u, iterations, converged


def fit_controls(
    traj: Trajectory,
    init: KinematicState,
    lam: float = 1.0,
    refine: bool = True,
    kappa_max: float = DEFAULT_KAPPA_MAX,
    max_iterations: int = 20,
    step_tol: float = 1e-8,
) -> FitResult:
    """Fit a smooth control sequence reproducing ``traj`` from ``init``.

    Solves the linear stage, optionally polishes with Gauss-Newton, clamps
    curvature to ``kappa_max``, and always reports the round-trip RMSE and
    endpoint error of the final controls.
    """
    problem = build_linear_system(traj, init, lam)
    n = len(traj)
    if problem.degenerate:
        u = np.zeros(2 * n)
        iterations, converged = 0, True
    else:
        u = ridge_solve(problem)
        iterations, converged = 0, True
        if refine:
            u, iterations, converged = _gauss_newton(
                traj, init, u, problem, max_iterations, step_tol
            )

    u[n:] = np.clip(u[n:], -kappa_max, kappa_max)
    controls = ControlSequence(steps=np.column_stack((u[:n], u[n:])), dt=traj.dt)
    positions, _, _, _ = rollout_states(controls, init)
    errors = np.hypot(*(positions - traj.points).T)
    return FitResult(
        controls=controls,
        rollout_rmse=float(np.sqrt(np.mean(errors**2))),
        endpoint_error=float(errors[-1]),
        iterations=iterations,
        converged=converged,
        degenerate=problem.degenerate,
    )
