"""Deterministic numerical substrate shared by every other module.

Provides the fixed time grid, seeded random streams, fixed-grid ODE
integration (forward and backward), SPD factorization, and Gaussian
increment sampling. Everything here is a pure function of its inputs:
identical arguments (including seed and stream id) reproduce identical
output bit for bit, on any thread layout.

Integration is the classical fourth-order one-step method on the fixed
grid. Backward integration runs the same method with a negated step, which
is arithmetically identical to integrating the time-reflected field
tau = t1 - t forward.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    DimensionError,
    IntegrationDivergedError,
    NotPositiveDefiniteError,
    ValidationError,
)

_U64_MAX = 2**64 - 1


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid of n_steps intervals on [t0, t1].

    Nodes are t0 + k*dt for k = 0..n_steps with dt = (t1 - t0)/n_steps,
    so the grid is exactly reproducible from the three fields.
    """

    t0: float
    t1: float
    n_steps: int

    def __post_init__(self):
        if not isinstance(self.n_steps, (int, np.integer)) or isinstance(
            self.n_steps, bool
        ):
            raise ValidationError("n_steps must be an integer")
        if self.n_steps < 1:
            raise ValidationError("n_steps must be at least 1")
        if not (
            math.isfinite(self.t0)
            and math.isfinite(self.t1)
            and self.t1 > self.t0
        ):
            raise ValidationError("need finite t1 > t0")

    @property
    def dt(self) -> float:
        return (self.t1 - self.t0) / self.n_steps

    def nodes(self) -> np.ndarray:
        """All n_steps + 1 grid points, endpoint included."""
        return self.t0 + np.arange(self.n_steps + 1) * self.dt


@dataclass(frozen=True)
class SeededRng:
    """Counter-based random stream keyed by (seed, stream_id).

    generator(*subkey) builds a fresh Philox generator from the spawn key
    (stream_id, *subkey), so distinct stream ids and subkeys give
    independent streams by construction, and the same key always replays
    the same draws. Operations that consume a SeededRng document the order
    and subkeys of their draws.
    """

    seed: int
    stream_id: int = 0

    def __post_init__(self):
        for name in ("seed", "stream_id"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or isinstance(
                value, bool
            ):
                raise ValidationError(f"{name} must be an integer")
            if not 0 <= value <= _U64_MAX:
                raise ValidationError(f"{name} must fit in 64 unsigned bits")

    def generator(self, *subkey: int) -> np.random.Generator:
        seq = np.random.SeedSequence(
            entropy=self.seed, spawn_key=(self.stream_id, *subkey)
        )
        return np.random.Generator(np.random.Philox(seq))

    def stream(self, stream_id: int) -> "SeededRng":
        """Same seed, different top-level stream."""
        return SeededRng(self.seed, stream_id)


@dataclass(frozen=True)
class ObservationPath:
    """Increments of an observation process on a grid.

    dz has shape (n_steps, m): dz[k] is the increment picked up on
    [t_k, t_{k+1}). Shared by the linear-Gaussian and finite-state models.
    """

    grid: TimeGrid
    dz: np.ndarray

    def __post_init__(self):
        dz = np.asarray(self.dz, dtype=float)
        if dz.ndim != 2 or dz.shape[0] != self.grid.n_steps:
            raise DimensionError(
                "dz must have shape (n_steps, m); got "
                f"{np.asarray(self.dz).shape} for n_steps={self.grid.n_steps}"
            )
        object.__setattr__(self, "dz", dz)

    @property
    def m(self) -> int:
        return self.dz.shape[1]


def _rk4_step(rhs, t: float, y: np.ndarray, h: float) -> np.ndarray:
    s1 = rhs(t, y)
    s2 = rhs(t + 0.5 * h, y + (0.5 * h) * s1)
    s3 = rhs(t + 0.5 * h, y + (0.5 * h) * s2)
    s4 = rhs(t + h, y + h * s3)
    return y + (h / 6.0) * (s1 + 2.0 * s2 + 2.0 * s3 + s4)


def integrate_ode(rhs, grid: TimeGrid, y_init, direction: str = "forward"):
    """Integrate dy/dt = rhs(t, y) across the grid with classical RK4.

    Parameters
    ----------
    rhs : callable
        Vector field rhs(t, y) -> array shaped like y. Any ndarray shape is
        accepted (vectors, matrices).
    grid : TimeGrid
        Fixed grid; values are produced at every node.
    y_init : array_like
        Initial value at t0 (forward) or terminal value at t1 (backward).
    direction : {"forward", "backward"}
        Backward integrates from t1 down to t0 by running the same one-step
        map with a negated step (equivalently: forward integration of the
        time-reflected field).

    Returns
    -------
    ndarray of shape (n_steps + 1, *y_init.shape), aligned with grid.nodes().

    Raises
    ------
    IntegrationDivergedError
        If any step produces a non-finite value; the error names the step.
    """
    if direction not in ("forward", "backward"):
        raise ValidationError("direction must be 'forward' or 'backward'")
    y = np.array(y_init, dtype=float)
    if not np.all(np.isfinite(y)):
        raise ValidationError("y_init must be finite")
    ts = grid.nodes()
    n = grid.n_steps
    out = np.empty((n + 1,) + y.shape)
    if direction == "forward":
        out[0] = y
        h = grid.dt
        for k in range(n):
            y = _rk4_step(rhs, ts[k], y, h)
            if not np.all(np.isfinite(y)):
                raise IntegrationDivergedError(step=k + 1)
            out[k + 1] = y
    else:
        out[n] = y
        h = -grid.dt
        for k in range(n, 0, -1):
            y = _rk4_step(rhs, ts[k], y, h)
            if not np.all(np.isfinite(y)):
                raise IntegrationDivergedError(step=k - 1)
            out[k - 1] = y
    return out


def spd_factor(m_mat: np.ndarray) -> np.ndarray:
    """Lower-triangular L with L L^T = m_mat for SPD m_mat.

    The input must be symmetric within 1e-12 relative tolerance. The
    factorization is a plain Cholesky loop so a failed pivot can be reported
    by index. Reconstruction satisfies ||L L^T - M|| <= 1e-10 ||M||.
    """
    m = np.asarray(m_mat, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DimensionError(f"expected a square matrix, got shape {m.shape}")
    scale = np.max(np.abs(m)) if m.size else 0.0
    if np.max(np.abs(m - m.T), initial=0.0) > 1e-12 * max(scale, 1e-300):
        raise ValidationError("matrix is not symmetric")
    d = m.shape[0]
    low = np.zeros_like(m)
    for j in range(d):
        pivot = m[j, j] - np.dot(low[j, :j], low[j, :j])
        if pivot <= 0.0 or not math.isfinite(pivot):
            raise NotPositiveDefiniteError(pivot=j)
        low[j, j] = math.sqrt(pivot)
        if j + 1 < d:
            low[j + 1 :, j] = (
                m[j + 1 :, j] - low[j + 1 :, :j] @ low[j, :j]
            ) / low[j, j]
    return low


def psd_sqrt(m_mat: np.ndarray) -> np.ndarray:
    """Symmetric square root of a PSD matrix via eigendecomposition.

    Tolerates eigenvalues down to -1e-10 * max_eig (clipped to zero); more
    negative spectra are rejected. Used where genuinely singular
    covariances are legal (e.g. a dogmatic prior).
    """
    m = np.asarray(m_mat, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DimensionError(f"expected a square matrix, got shape {m.shape}")
    if np.max(np.abs(m - m.T), initial=0.0) > 1e-12 * max(
        np.max(np.abs(m), initial=0.0), 1e-300
    ):
        raise ValidationError("matrix is not symmetric")
    w, v = np.linalg.eigh(m)
    floor = -1e-10 * max(w[-1], 0.0) if m.size else 0.0
    if w.size and w[0] < floor - 1e-300:
        raise ValidationError("matrix is not positive semidefinite")
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def sample_gaussian_increments(
    rng: SeededRng, m: int, grid: TimeGrid, cov: np.ndarray
) -> np.ndarray:
    """n_steps increments, each N(0, cov * dt), from rng's stream.

    cov must be symmetric and either SPD or exactly zero; a zero covariance
    returns an all-zero block without consuming any draws.
    """
    c = np.asarray(cov, dtype=float)
    if c.shape != (m, m):
        raise DimensionError(f"cov must be {m}x{m}, got {c.shape}")
    if np.max(np.abs(c - c.T), initial=0.0) > 1e-12 * max(
        np.max(np.abs(c), initial=0.0), 1e-300
    ):
        raise ValidationError("cov is not symmetric")
    n = grid.n_steps
    if not c.any():
        return np.zeros((n, m))
    low = spd_factor(c)
    gen = rng.generator()
    return gen.standard_normal((n, m)) @ low.T * math.sqrt(grid.dt)


def quad_form(m_mat: np.ndarray, x: np.ndarray) -> float:
    """x^T M x, the squared M-weighted norm used by every cost integrand."""
    return float(x @ (m_mat @ x))


def _rk4_poly(a_dt: np.ndarray) -> np.ndarray:
    """I + B + B^2/2 + B^3/6 + B^4/24 for B = a_dt (one RK4 step map)."""
    d = a_dt.shape[0]
    eye = np.eye(d)
    b2 = a_dt @ a_dt
    b3 = b2 @ a_dt
    return eye + a_dt + b2 / 2.0 + b3 / 6.0 + (b3 @ a_dt) / 24.0


def rk4_linear_step_matrix(a_mat: np.ndarray, dt: float) -> np.ndarray:
    """One-step matrix of classical RK4 applied to dy/dt = a_mat y."""
    return _rk4_poly(np.asarray(a_mat, dtype=float) * dt)


def affine_backward(
    a_mat: np.ndarray,
    b_mat: np.ndarray,
    u: np.ndarray,
    terminal: np.ndarray,
    grid: TimeGrid,
) -> np.ndarray:
    """Backward solution of -dy/dt = a_mat y + b_mat u(t) on the grid.

    The input u is given by node values of shape (n_steps + 1, m) and is
    treated as the piecewise-linear interpolant of those values. One
    classical RK4 step of the reflected system is applied per interval; for
    this linear system the step is a fixed affine map, precomputed once:

        y_k = M y_{k+1} + B_r u_{k+1} + B_m (u_k + u_{k+1})/2 + B_l u_k

    Returns the path (n_steps + 1, d) with path[-1] == terminal exactly.
    """
    a = np.asarray(a_mat, dtype=float)
    b = np.asarray(b_mat, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"a_mat must be square, got {a.shape}")
    d = a.shape[0]
    if b.ndim != 2 or b.shape[0] != d:
        raise DimensionError(f"b_mat must be {d}xm, got {b.shape}")
    m = b.shape[1]
    u = np.asarray(u, dtype=float)
    if u.ndim == 1 and m == 1:
        u = u[:, None]
    if u.shape != (grid.n_steps + 1, m):
        raise DimensionError(
            f"u must have shape ({grid.n_steps + 1}, {m}), got {u.shape}"
        )
    y_end = np.asarray(terminal, dtype=float).reshape(d)

    dt = grid.dt
    a_dt = a * dt
    step_m = _rk4_poly(a_dt)
    # Forcing weights from expanding the four stages of the reflected step:
    #   B_r = (dt/6) (I + dt A + dt^2 A^2/2 + dt^3 A^3/4) B
    #   B_m = (dt/6) (4 I + 2 dt A + dt^2 A^2/2) B
    #   B_l = (dt/6) B
    eye = np.eye(d)
    a2 = a_dt @ a_dt
    w_r = (dt / 6.0) * (eye + a_dt + a2 / 2.0 + (a2 @ a_dt) / 4.0) @ b
    w_m = (dt / 6.0) * (4.0 * eye + 2.0 * a_dt + a2 / 2.0) @ b
    w_l = (dt / 6.0) * b

    u_l = u[:-1]
    u_r = u[1:]
    u_mid = 0.5 * (u_l + u_r)
    force = u_r @ w_r.T + u_mid @ w_m.T + u_l @ w_l.T

    n = grid.n_steps
    out = np.empty((n + 1, d))
    out[n] = y_end
    y = y_end
    for k in range(n - 1, -1, -1):
        y = step_m @ y + force[k]
        out[k] = y
    if not np.all(np.isfinite(out)):
        raise IntegrationDivergedError(step=0, message="backward pass diverged")
    return out
